use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::sigsynth::DatasetFile;

/// Smallest `(label, SNR)` stratum that can be split three ways.
pub const MIN_STRATUM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(TrainError::Split(format!(
                "fractions {}/{}/{} must be in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a stratum of `n`. Validation and test
    /// take the floor of their share; the remainder goes to training.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let share = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = share(self.val);
        let test = share(self.test);
        (n - val - test, val, test)
    }
}

/// Disjoint index sets covering a dataset, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits every `(label, SNR)` stratum by `spec`, shuffling within the
/// stratum from the split seed.
pub fn split_dataset(d: &DatasetFile, spec: &SplitSpec) -> Result<Split, TrainError> {
    spec.validate()?;
    let mut strata: BTreeMap<(u16, u32), Vec<usize>> = BTreeMap::new();
    for (i, f) in d.frames.iter().enumerate() {
        strata
            .entry((f.label, f.snr_db.to_bits()))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Split::default();
    for ((label, snr), mut idx) in strata {
        if idx.len() < MIN_STRATUM {
            return Err(TrainError::Split(format!(
                "stratum (label {label}, {} dB) has {} frames, need at least {MIN_STRATUM}",
                f32::from_bits(snr),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let (n_train, n_val, _) = spec.counts(idx.len());
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
