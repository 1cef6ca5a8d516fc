use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use camd::config::{parse_classes, parse_snr, RunConfig};
use camd::model::{
    count_params, estimate_flops, load_checkpoint, save_checkpoint, Camd, ModelConfig, Variant,
};
use camd::selfcheck;
use camd::sigsynth::{generate_dataset, read_dataset, write_dataset, DatasetFile};
use camd::train::{evaluate, split_dataset, train_with, EvalReport, Split};

use crate::{AblateArgs, ConfigArgs, EvalArgs, GenArgs, TrainArgs};

/// An error tagged with the process exit code it maps to.
pub struct CmdError {
    code: u8,
    err: anyhow::Error,
}

impl CmdError {
    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.err)
    }
}

type CmdResult<T = ()> = Result<T, CmdError>;

fn usage(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: 2,
        err: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: 1,
        err: e.into(),
    }
}

/// Sizes the global worker pool from `CAMD_THREADS` when it is set.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("CAMD_THREADS") else {
        return Ok(());
    };
    let n: usize =
        raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            anyhow::anyhow!("CAMD_THREADS must be a positive integer, got {raw:?}")
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn load_config(args: &ConfigArgs) -> CmdResult<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.set).map_err(usage)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| runtime(anyhow::anyhow!("{}: {e}", dir.display())))
}

pub fn gen(a: GenArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(list) = &a.classes {
        // validate here so a bad name is a usage error, not a runtime one
        parse_classes(list).map_err(usage)?;
        cfg.data.classes = list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(snr) = &a.snr {
        cfg.data.snr_list = parse_snr(snr).map_err(usage)?;
    }
    cfg.data.nt = a.nt.unwrap_or(cfg.data.nt);
    cfg.data.nr = a.nr.unwrap_or(cfg.data.nr);
    cfg.data.len = a.length.unwrap_or(cfg.data.len);
    cfg.data.frames = a.frames.unwrap_or(cfg.data.frames);
    cfg.data.clean |= a.clean;
    cfg.data.drift |= a.drift;
    if let Some(seed) = a.seed {
        cfg.data.seed = Some(seed);
    }
    cfg.paths.data = Some(a.out.clone());
    let spec = cfg.dataset_spec().map_err(usage)?;

    let d = generate_dataset(&spec).map_err(runtime)?;
    write_dataset(&d, &a.out).map_err(runtime)?;
    let mut snapshot = a.out.clone().into_os_string();
    snapshot.push(".config.toml");
    write(Path::new(&snapshot), &cfg.to_toml())?;
    eprintln!(
        "wrote {} frames ({} classes × {} SNRs × {}) to {}",
        d.frames.len(),
        spec.classes.len(),
        spec.snr_db.len(),
        spec.frames_per_stratum,
        a.out.display()
    );
    Ok(())
}

fn require(path: &Option<PathBuf>, what: &str, key: &str) -> CmdResult<PathBuf> {
    path.clone()
        .ok_or_else(|| usage(anyhow::anyhow!("no {what}: pass --{what} or set {key}")))
}

/// Architecture from the config with the data-dependent sizes taken from
/// the dataset header.
fn model_config(cfg: &RunConfig, d: &DatasetFile, variant: Variant) -> CmdResult<ModelConfig> {
    let m = ModelConfig {
        num_classes: d.num_classes(),
        nt: d.nt(),
        nr: d.nr(),
        len: d.len(),
        ..cfg.model.clone()
    }
    .with_variant(variant);
    m.validate().map_err(usage)?;
    Ok(m)
}

struct Outcome {
    report: EvalReport,
    config: ModelConfig,
}

/// Trains one model and writes its checkpoint, logs and test report.
fn train_one(
    cfg: &RunConfig,
    d: &DatasetFile,
    split: &Split,
    model_cfg: ModelConfig,
    dir: &Path,
) -> CmdResult<Outcome> {
    create_dir(dir)?;
    let tc = cfg.train_config();
    let model = Camd::<f32>::new(model_cfg.clone(), cfg.seed).map_err(usage)?;
    eprintln!(
        "{}: {} parameters, {} train / {} val / {} test frames",
        model_cfg.variant,
        model.num_params(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let started = Instant::now();
    let (best, log) = train_with(model, d, &split.train, &split.val, &tc, |e| {
        let val = match (e.val_loss, e.val_acc) {
            (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "  epoch {:>3} train_loss {:.4}{val} ({:.1}s)",
            e.epoch, e.train_loss, e.seconds
        );
    })
    .map_err(runtime)?;
    save_checkpoint(&best, dir.join("model.cmdw")).map_err(runtime)?;
    write(&dir.join("log.jsonl"), &log.to_jsonl())?;
    write(&dir.join("log.csv"), &log.to_csv())?;
    let split_json = serde_json::to_string(split).map_err(runtime)?;
    write(&dir.join("split.json"), &(split_json + "\n"))?;
    let report = evaluate(&best, d, &split.test, cfg.train.low_snr_db).map_err(runtime)?;
    report.write_to(&dir.join("report")).map_err(runtime)?;
    eprintln!(
        "  best epoch {:?}, test overall {:.4}, avg {:.4} ({:.0}s)",
        log.best_epoch,
        report.overall,
        report.avg,
        started.elapsed().as_secs_f64()
    );
    Ok(Outcome {
        report,
        config: model_cfg,
    })
}

fn apply_train_flags(
    cfg: &mut RunConfig,
    data: &Option<PathBuf>,
    out: &Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) {
    if data.is_some() {
        cfg.paths.data = data.clone();
    }
    if out.is_some() {
        cfg.paths.out = out.clone();
    }
    cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
    cfg.seed = seed.unwrap_or(cfg.seed);
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    apply_train_flags(&mut cfg, &a.data, &a.out, a.epochs, a.seed);
    if let Some(v) = &a.variant {
        cfg.model.variant = v.parse().map_err(usage)?;
    }
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.validate().map_err(usage)?;
    let data = require(&cfg.paths.data, "data", "paths.data")?;
    let out = require(&cfg.paths.out, "out", "paths.out")?;

    let d = read_dataset(&data).map_err(runtime)?;
    let model_cfg = model_config(&cfg, &d, cfg.model.variant)?;
    cfg.model = model_cfg.clone();
    let split = split_dataset(&d, &cfg.split_spec()).map_err(usage)?;
    create_dir(&out)?;
    cfg.write_snapshot(&out).map_err(runtime)?;
    train_one(&cfg, &d, &split, model_cfg, &out)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    let low = a.low_snr.unwrap_or(cfg.train.low_snr_db);
    cfg.train.low_snr_db = low;
    cfg.paths.model = Some(a.model.clone());
    cfg.paths.data = Some(a.data.clone());
    cfg.paths.out = Some(a.out.clone());

    let model: Camd<f32> = load_checkpoint(&a.model).map_err(runtime)?;
    let d = read_dataset(&a.data).map_err(runtime)?;
    cfg.model = model.config().clone();
    let all: Vec<usize> = (0..d.frames.len()).collect();
    let report = evaluate(&model, &d, &all, low).map_err(runtime)?;
    report.write_to(&a.out).map_err(runtime)?;
    cfg.write_snapshot(&a.out).map_err(runtime)?;
    println!("snr_db,accuracy,n");
    for s in &report.per_snr {
        println!("{},{:.4},{}", s.snr_db, s.accuracy, s.n);
    }
    println!(
        "overall {:.4} max {:.4} avg {:.4} low({} dB) {}",
        report.overall,
        report.max,
        report.avg,
        low,
        report
            .low
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "absent".into())
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    apply_train_flags(&mut cfg, &a.data, &a.out, a.epochs, a.seed);
    cfg.validate().map_err(usage)?;
    let data = require(&cfg.paths.data, "data", "paths.data")?;
    let out = require(&cfg.paths.out, "out", "paths.out")?;

    let d = read_dataset(&data).map_err(runtime)?;
    let configs = Variant::ALL
        .iter()
        .map(|&v| model_config(&cfg, &d, v))
        .collect::<CmdResult<Vec<_>>>()?;
    let split = split_dataset(&d, &cfg.split_spec()).map_err(usage)?;
    create_dir(&out)?;
    cfg.write_snapshot(&out).map_err(runtime)?;

    let mut csv = String::from("variant,params,flops,max,low,avg\n");
    for m in configs {
        let dir = out.join(m.variant.name());
        let o = train_one(&cfg, &d, &split, m, &dir)?;
        let low = o.report.low.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{:.6},{},{:.6}\n",
            o.config.variant,
            count_params(&o.config),
            estimate_flops(&o.config),
            o.report.max,
            low,
            o.report.avg
        ));
    }
    write(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck() -> CmdResult {
    let started = Instant::now();
    let rows = selfcheck::run_suite().map_err(runtime)?;
    println!(
        "{:<22} {:>12} {:>9} {:>7} {:>7}  result",
        "check", "max_rel_err", "tol", "coords", "skipped"
    );
    for r in &rows {
        println!(
            "{:<22} {:>12.3e} {:>9.0e} {:>7} {:>7}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.coordinates,
            r.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    println!("{:.1}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(anyhow::anyhow!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
