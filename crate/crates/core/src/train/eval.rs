use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trainer::{frames_tensor, labels_of, TrainLog, GRAD_CHUNK};
use super::TrainError;
use crate::diffcore::Tape;
use crate::model::Camd;
use crate::sigsynth::DatasetFile;

/// Default "low SNR" operating point in dB.
pub const DEFAULT_LOW_SNR_DB: f64 = -4.0;

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every frame in `indices`, in order.
pub fn predict(
    model: &Camd<f32>,
    d: &DatasetFile,
    indices: &[usize],
) -> Result<Vec<usize>, TrainError> {
    let k = model.config().num_classes;
    let parts: Vec<Vec<usize>> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<Vec<usize>, TrainError> {
            let mut tape = Tape::new();
            let r = tape.constant(&frames_tensor(d, chunk)?);
            let logits = model.forward(&mut tape, r)?;
            Ok(tape.value(logits).chunks_exact(k).map(argmax).collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(parts.concat())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

/// Accuracy and confusion counts of one SNR stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    pub snr_db: f64,
    pub n: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Ascending SNR; strata without frames are absent.
    pub per_snr: Vec<SnrResult>,
    /// Frame-weighted accuracy over every evaluated frame.
    pub overall: f64,
    pub max: f64,
    /// Unweighted mean of the per-SNR accuracies.
    pub avg: f64,
    pub low_snr_db: f64,
    /// Accuracy at `low_snr_db`, when that stratum was evaluated.
    pub low: Option<f64>,
}

impl EvalReport {
    /// Builds the report from predictions; `snr_db[i]` belongs to frame `i`.
    pub fn from_predictions(
        class_names: Vec<String>,
        truth: &[usize],
        pred: &[usize],
        snr_db: &[f64],
        low_snr_db: f64,
    ) -> Self {
        let k = class_names.len();
        let mut strata: BTreeMap<i64, (f64, Vec<Vec<usize>>)> = BTreeMap::new();
        for ((&t, &p), &s) in truth.iter().zip(pred).zip(snr_db) {
            // order by SNR; keys are exact for any dB value a frame header can hold
            let key = (s * 1e6).round() as i64;
            let entry = strata
                .entry(key)
                .or_insert_with(|| (s, vec![vec![0; k]; k]));
            entry.1[t][p] += 1;
        }
        let per_snr: Vec<SnrResult> = strata
            .into_values()
            .map(|(snr_db, confusion)| {
                let n: usize = confusion.iter().flatten().sum();
                let hits: usize = (0..k).map(|c| confusion[c][c]).sum();
                SnrResult {
                    snr_db,
                    n,
                    accuracy: hits as f64 / n as f64,
                    confusion,
                }
            })
            .collect();
        let max = per_snr.iter().map(|s| s.accuracy).fold(0.0, f64::max);
        let avg = if per_snr.is_empty() {
            0.0
        } else {
            per_snr.iter().map(|s| s.accuracy).sum::<f64>() / per_snr.len() as f64
        };
        let low = per_snr
            .iter()
            .find(|s| (s.snr_db - low_snr_db).abs() < 1e-6)
            .map(|s| s.accuracy);
        Self {
            class_names,
            per_snr,
            overall: accuracy(pred, truth),
            max,
            avg,
            low_snr_db,
            low,
        }
    }

    pub fn accuracy_at(&self, snr_db: f64) -> Option<f64> {
        self.per_snr
            .iter()
            .find(|s| (s.snr_db - snr_db).abs() < 1e-6)
            .map(|s| s.accuracy)
    }

    /// `snr_db,accuracy,n` with one row per evaluated SNR.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("snr_db,accuracy,n\n");
        for s in &self.per_snr {
            writeln!(out, "{:.6},{:.6},{}", s.snr_db, s.accuracy, s.n).unwrap();
        }
        out
    }

    /// Rows are true classes, columns predicted classes.
    pub fn confusion_csv(&self, stratum: &SnrResult) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.class_names {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&stratum.confusion) {
            out.push_str(name);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Writes `accuracy.csv`, one `confusion_snr<dB>.csv` per stratum and
    /// `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        write_file(&dir.join("accuracy.csv"), &self.accuracy_csv())?;
        for s in &self.per_snr {
            let path = dir.join(format!("confusion_snr{}.csv", s.snr_db));
            write_file(&path, &self.confusion_csv(s))?;
        }
        let json =
            serde_json::to_string_pretty(self).map_err(|e| TrainError::Json(e.to_string()))?;
        write_file(&dir.join("summary.json"), &(json + "\n"))
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|e| TrainError::io(path, e))
}

/// Classifies `indices` and tallies per-SNR accuracy and confusion.
pub fn evaluate(
    model: &Camd<f32>,
    d: &DatasetFile,
    indices: &[usize],
    low_snr_db: f64,
) -> Result<EvalReport, TrainError> {
    if model.config().num_classes != d.num_classes() {
        return Err(TrainError::Config(format!(
            "model has {} classes, dataset has {}",
            model.config().num_classes,
            d.num_classes()
        )));
    }
    let pred = predict(model, d, indices)?;
    let snr: Vec<f64> = indices.iter().map(|&i| d.frames[i].snr_db as f64).collect();
    Ok(EvalReport::from_predictions(
        d.header.class_names.clone(),
        &labels_of(d, indices),
        &pred,
        &snr,
        low_snr_db,
    ))
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain record"));
            out.push('\n');
        }
        out
    }

    /// `epoch,train_loss,val_loss,val_acc,seconds`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,seconds\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.6},{},{},{:.6}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_acc),
                e.seconds
            )
            .unwrap();
        }
        out
    }
}
