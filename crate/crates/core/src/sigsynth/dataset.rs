use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::channel::{add_awgn, apply_channel, apply_channel_per_slot, draw_channel, DRIFT_RHO};
use super::{Modulation, SignalRng, SynthError, FORMAT_VERSION, RNG_ID};

/// What to synthesize. Frames are ordered class-major, then SNR, then
/// repetition; frame `n` draws from stream `n` of `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<Modulation>,
    pub nt: usize,
    pub nr: usize,
    pub len: usize,
    pub snr_db: Vec<f64>,
    pub frames_per_stratum: usize,
    pub seed: u64,
    /// Keep the transmitted symbols next to each frame.
    pub store_clean: bool,
    /// Gauss–Markov channel drift per slot instead of block fading.
    pub drift: bool,
}

/// One received example.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalFrame {
    pub label: u16,
    pub snr_db: f32,
    /// `[Nr × L × 2]`, antenna-major, then time, then I/Q.
    pub iq: Vec<f32>,
    /// Transmitted symbols `[Nt × L × 2]`, same ordering.
    pub clean: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub rng_id: u32,
    pub nr: u16,
    pub nt: u16,
    pub len: u32,
    pub class_names: Vec<String>,
    pub has_clean: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub frames: Vec<SignalFrame>,
}

impl DatasetFile {
    pub fn num_classes(&self) -> usize {
        self.header.class_names.len()
    }

    pub fn nr(&self) -> usize {
        self.header.nr as usize
    }

    pub fn nt(&self) -> usize {
        self.header.nt as usize
    }

    pub fn len(&self) -> usize {
        self.header.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.label as usize).collect()
    }

    /// Checks every frame against the header.
    pub fn validate(&self) -> Result<(), SynthError> {
        let h = &self.header;
        let iq_len = h.nr as usize * h.len as usize * 2;
        let clean_len = h.nt as usize * h.len as usize * 2;
        for (n, f) in self.frames.iter().enumerate() {
            let bad = |what: &str| SynthError::Corrupt(format!("frame {n}: {what}"));
            if f.label as usize >= h.class_names.len() {
                return Err(bad("label out of range"));
            }
            if f.iq.len() != iq_len {
                return Err(bad("wrong IQ length"));
            }
            if f.clean.is_some() != h.has_clean {
                return Err(bad("clean-symbol presence disagrees with header"));
            }
            if f.clean.as_ref().is_some_and(|c| c.len() != clean_len) {
                return Err(bad("wrong clean-symbol length"));
            }
        }
        Ok(())
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.classes.is_empty() {
            return Err(SynthError::EmptyClasses);
        }
        if self.nt == 0 || self.nr < self.nt {
            return Err(SynthError::Antennas {
                nt: self.nt,
                nr: self.nr,
            });
        }
        let invalid = |s: &str| Err(SynthError::InvalidSpec(s.to_string()));
        if self.len == 0 || self.len > u32::MAX as usize {
            return invalid("frame length must be positive");
        }
        if self.nr > u16::MAX as usize || self.classes.len() > u16::MAX as usize {
            return invalid("too many antennas or classes for the file format");
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| s.is_nan()) {
            return invalid("SNR list must be non-empty and numeric");
        }
        if self.frames_per_stratum == 0 {
            return invalid("frames per stratum must be positive");
        }
        if self.total_frames() > u32::MAX as usize {
            return invalid("too many frames for the file format");
        }
        for c in &self.classes {
            c.constellation()?;
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.classes.len() * self.snr_db.len() * self.frames_per_stratum
    }

    /// `(class index, snr index)` of frame `n`.
    pub fn stratum_of(&self, n: usize) -> (usize, usize) {
        let per_class = self.snr_db.len() * self.frames_per_stratum;
        (n / per_class, (n % per_class) / self.frames_per_stratum)
    }
}

/// Synthesizes one frame: random bits per transmit antenna, Gray mapping,
/// a fresh channel, then AWGN at the stratum SNR.
pub fn generate_frame(spec: &DatasetSpec, n: usize) -> Result<SignalFrame, SynthError> {
    let (class, snr_idx) = spec.stratum_of(n);
    let snr = spec.snr_db[snr_idx];
    let constellation = spec.classes[class].constellation()?;
    let mut rng = SignalRng::for_stream(spec.seed, n as u64);

    let mut symbols = Vec::with_capacity(spec.nt * spec.len * 2);
    for _ in 0..spec.nt {
        let bits = rng.bits(spec.len * constellation.bits_per_symbol());
        symbols.extend(constellation.modulate(&bits)?);
    }
    let h = draw_channel(spec.nt, spec.nr, &mut rng)?;
    let mut received = if spec.drift {
        let mut slots = Vec::with_capacity(spec.len);
        slots.push(h);
        for t in 1..spec.len {
            let next = slots[t - 1].evolve(DRIFT_RHO, &mut rng);
            slots.push(next);
        }
        apply_channel_per_slot(&slots, &symbols)?
    } else {
        apply_channel(&h, &symbols)?
    };
    add_awgn(&mut received, spec.nr, snr, &mut rng)?;

    Ok(SignalFrame {
        label: class as u16,
        snr_db: snr as f32,
        iq: received.iter().map(|&v| v as f32).collect(),
        clean: spec
            .store_clean
            .then(|| symbols.iter().map(|&v| v as f32).collect()),
    })
}

/// Deterministic for a given spec regardless of worker count: frames are
/// generated independently and collected in index order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<DatasetFile, SynthError> {
    spec.validate()?;
    let frames = (0..spec.total_frames())
        .into_par_iter()
        .map(|n| generate_frame(spec, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetFile {
        header: DatasetHeader {
            version: FORMAT_VERSION,
            rng_id: RNG_ID,
            nr: spec.nr as u16,
            nt: spec.nt as u16,
            len: spec.len as u32,
            class_names: spec.classes.iter().map(|c| c.to_string()).collect(),
            has_clean: spec.store_clean,
        },
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::Scheme;

    pub(crate) fn small_spec() -> DatasetSpec {
        DatasetSpec {
            classes: ["bpsk", "qpsk", "psk8", "qam16", "qam64"]
                .iter()
                .map(|s| s.parse().unwrap())
                .collect(),
            nt: 2,
            nr: 2,
            len: 32,
            snr_db: vec![0.0, 10.0, 20.0],
            frames_per_stratum: 100,
            seed: 7,
            store_clean: true,
            drift: false,
        }
    }

    #[test]
    fn counts_and_uniform_labels() {
        let d = generate_dataset(&small_spec()).unwrap();
        assert_eq!(d.frames.len(), 1500);
        let mut hist = [0usize; 5];
        for f in &d.frames {
            hist[f.label as usize] += 1;
        }
        assert_eq!(hist, [300; 5]);
        d.validate().unwrap();
        assert_eq!(d.header.class_names[2], "psk8");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 8;
        assert_ne!(generate_dataset(&other).unwrap().frames[0], a.frames[0]);
    }

    #[test]
    fn clean_symbols_lie_on_constellation() {
        let spec = small_spec();
        let d = generate_dataset(&spec).unwrap();
        for f in d.frames.iter().step_by(37) {
            let c = spec.classes[f.label as usize].constellation().unwrap();
            for s in f.clean.as_ref().unwrap().chunks(2) {
                assert!(c.distance_to_nearest(s[0] as f64, s[1] as f64) < 1e-6);
            }
            assert!(f.iq.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn empty_classes_rejected() {
        let mut spec = small_spec();
        spec.classes.clear();
        assert!(matches!(
            generate_dataset(&spec),
            Err(SynthError::EmptyClasses)
        ));
        let mut spec = small_spec();
        spec.classes.push(Modulation::new(Scheme::Qam, 32));
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn noiseless_frame_matches_channel_times_symbols() {
        let mut spec = small_spec();
        spec.snr_db = vec![f64::INFINITY];
        spec.frames_per_stratum = 1;
        let f = generate_frame(&spec, 0).unwrap();
        let clean: f64 = f.clean.unwrap().iter().map(|&v| (v as f64).powi(2)).sum();
        let rx: f64 = f.iq.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(clean > 0.0 && rx > 0.0);
    }

    #[test]
    fn drift_frames_generate() {
        let mut spec = small_spec();
        spec.drift = true;
        spec.frames_per_stratum = 2;
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.frames.len(), 30);
        assert_ne!(
            d.frames[0],
            generate_dataset(&small_spec()).unwrap().frames[0]
        );
    }
}
