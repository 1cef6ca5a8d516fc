//! Run configuration read from TOML with dotted keys (`model.width = 32`,
//! `train.lr = 1e-3`, `data.snr_list = [10, 20]`).
//!
//! Values are layered: built-in defaults, then the file, then `key=value`
//! overrides. Every layer is merged as a TOML tree and the result is
//! deserialized strictly, so a misspelled key anywhere is an error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};
use crate::sigsynth::{DatasetSpec, Modulation, SynthError};
use crate::train::{SplitSpec, TrainConfig, TrainError, DEFAULT_LOW_SNR_DB};

/// File name of the resolved configuration written next to run outputs.
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("bad SNR list {0:?}: {1}")]
    Snr(String, String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: Vec<String>,
    pub nt: usize,
    pub nr: usize,
    pub len: usize,
    pub snr_list: Vec<f64>,
    /// Frames per `(class, SNR)` stratum.
    pub frames: usize,
    /// Falls back to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub clean: bool,
    pub drift: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: ["bpsk", "qpsk", "psk8", "qam16", "qam64"]
                .map(String::from)
                .to_vec(),
            nt: 2,
            nr: 2,
            len: 128,
            snr_list: vec![-4.0, 0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            frames: 200,
            seed: None,
            clean: false,
            drift: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Falls back to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train: s.train,
            val: s.val,
            test: s.test,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// SNR reported as the "low" operating point.
    pub low_snr_db: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            low_snr_db: DEFAULT_LOW_SNR_DB,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub paths: PathsConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key=value` where the value is TOML; bare words become strings.
fn override_table(item: &str) -> Result<toml::Table, ConfigError> {
    let (key, value) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(item.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(item.to_string()));
    }
    let value = value.trim();
    let doc = format!("{key} = {value}");
    doc.parse::<toml::Table>()
        .or_else(|_| format!("{key} = {}", toml::Value::from(value)).parse())
        .map_err(|e| ConfigError::Parse(format!("override {item:?}: {}", e.message())))
}

impl RunConfig {
    /// Defaults, then `file` (TOML text), then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = toml::Table::try_from(RunConfig::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(text) = file {
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
            merge(&mut tree, table);
        }
        for item in overrides {
            merge(&mut tree, override_table(item)?);
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.display().to_string(),
                source: e,
            })?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config().validate()?;
        self.split_spec().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            test: self.split.test,
            seed: self.split.seed.unwrap_or(self.seed),
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, ConfigError> {
        let classes = parse_classes(&self.data.classes.join(","))?;
        let spec = DatasetSpec {
            classes,
            nt: self.data.nt,
            nr: self.data.nr,
            len: self.data.len,
            snr_db: self.data.snr_list.clone(),
            frames_per_stratum: self.data.frames,
            seed: self.data.seed.unwrap_or(self.seed),
            store_clean: self.data.clean,
            drift: self.data.drift,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is plain data")
    }

    /// Writes [`SNAPSHOT_FILE`] into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        let io = |p: &Path, e| ConfigError::Io {
            path: p.display().to_string(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

/// Comma-separated class names, e.g. `bpsk,qpsk,qam16`.
pub fn parse_classes(list: &str) -> Result<Vec<Modulation>, SynthError> {
    let classes = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Modulation>, _>>()?;
    if classes.is_empty() {
        return Err(SynthError::EmptyClasses);
    }
    Ok(classes)
}

/// `start:step:stop` (inclusive) or a comma-separated list of dB values.
pub fn parse_snr(text: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = |why: &str| ConfigError::Snr(text.to_string(), why.to_string());
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, step, stop] = parts[..] else {
            return Err(bad("expected start:step:stop"));
        };
        let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
        if step.is_nan() || step <= 0.0 || !start.is_finite() || !stop.is_finite() || stop < start {
            return Err(bad("need a positive step and start <= stop"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| start + step * i as f64).collect()
    } else {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(num)
            .collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(bad("no values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::default();
        let back = RunConfig::resolve(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_keys_and_tables_agree() {
        let dotted = "seed = 4\nmodel.width = 32\ntrain.lr = 1e-3\ndata.snr_list = [10, 20]\n";
        let tables =
            "seed = 4\n[model]\nwidth = 32\n[train]\nlr = 1e-3\n[data]\nsnr_list = [10.0, 20.0]\n";
        let a = RunConfig::resolve(Some(dotted), &[]).unwrap();
        let b = RunConfig::resolve(Some(tables), &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.width, 32);
        assert_eq!(a.model.cc_width, ModelConfig::default().cc_width);
        assert_eq!(a.data.snr_list, vec![10.0, 20.0]);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "sed = 1",
            "model.widht = 3",
            "train.learning_rate = 0.1",
            "data.snr = [1]",
            "split.seeds = 2",
            "paths.output = \"x\"",
            "extra.key = 1",
        ] {
            let err = RunConfig::resolve(Some(text), &[]).unwrap_err();
            assert!(matches!(err, ConfigError::Parse(_)), "{text}: {err}");
        }
    }

    #[test]
    fn overrides_win_over_the_file() {
        let cfg = RunConfig::resolve(
            Some("train.epochs = 3\nmodel.variant = \"no_cc\""),
            &[
                "train.epochs=7".into(),
                "model.variant=cnn_only".into(),
                "paths.out = runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.variant.name(), "cnn_only");
        assert_eq!(cfg.paths.out.as_deref(), Some(Path::new("runs/a")));
        assert!(RunConfig::resolve(None, &["train.epochs".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.lr=-1".into()]).is_err());
    }

    #[test]
    fn seeds_fall_back_to_the_run_seed() {
        let cfg = RunConfig::resolve(Some("seed = 9\nsplit.seed = 2"), &[]).unwrap();
        assert_eq!(cfg.split_spec().seed, 2);
        assert_eq!(cfg.dataset_spec().unwrap().seed, 9);
        assert_eq!(cfg.train_config().seed, 9);
    }

    #[test]
    fn snapshot_is_written_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::resolve(None, &["model.width=16".into()]).unwrap();
        let path = cfg.write_snapshot(dir.path()).unwrap();
        assert!(path.ends_with(SNAPSHOT_FILE));
        let back = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn snr_ranges_and_lists() {
        assert_eq!(
            parse_snr("0:4:20").unwrap(),
            vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0]
        );
        assert_eq!(parse_snr("-4:2:-4").unwrap(), vec![-4.0]);
        assert_eq!(parse_snr("10,20").unwrap(), vec![10.0, 20.0]);
        for bad in ["", "0:4", "0:0:4", "4:1:0", "a,b", "0:4:x", "1:2:3:4"] {
            assert!(parse_snr(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn class_lists() {
        assert_eq!(parse_classes("bpsk, qam16").unwrap().len(), 2);
        assert!(matches!(
            parse_classes("none"),
            Err(SynthError::UnknownClass(_))
        ));
        assert!(matches!(
            parse_classes(" , "),
            Err(SynthError::EmptyClasses)
        ));
    }
}
