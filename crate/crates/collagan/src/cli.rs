//! Subcommand implementations for the batch-operator entry point.
//!
//! Every subcommand writes only under its `--out` directory, drops a
//! `run_manifest.txt` there recording the resolved configuration, and maps
//! failures onto a categorized exit code: 0 ok, 2 config, 3 data, 4 numeric.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::config::KvFile;
use crate::gradcheck;
use crate::metrics::{
    essentiality_study, nmse, ssim_scalar, write_pgm, ImageRecord, MetricsReport,
    LESION_THRESHOLD,
};
use crate::phantom::{generate_dataset, load_dataset, save_dataset, Split};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Failure categories, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        TrainError::Tensor(crate::TensorError::NonFinite { .. }) => {
            CliError::Numeric(e.to_string())
        }
        TrainError::Tensor(_) => CliError::Data(e.to_string()),
        TrainError::Config(_) | TrainError::MetaKey(_) | TrainError::DomainCount { .. } => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn write_run_manifest(
    out: &Path,
    subcommand: &str,
    seed: Option<u64>,
    details: &[(&str, String)],
) -> Result<(), CliError> {
    let mut kv = KvFile::new();
    kv.set("subcommand", subcommand);
    kv.set("version", env!("CARGO_PKG_VERSION"));
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    kv.set("timestamp_unix", now);
    if let Some(seed) = seed {
        kv.set("seed", seed);
    }
    for (k, v) in details {
        kv.set(*k, v);
    }
    let path = out.join("run_manifest.txt");
    std::fs::write(&path, kv.to_text()).map_err(data_err)?;
    Ok(())
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(data_err)
}

// ---- subcommands ------------------------------------------------------------

pub fn cmd_gen_data(
    subjects: usize,
    slices: usize,
    size: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let ds = generate_dataset(subjects, slices, size, size, seed).map_err(data_err)?;
    save_dataset(&ds, out).map_err(data_err)?;
    write_run_manifest(
        out,
        "gen-data",
        Some(seed),
        &[
            ("subjects", subjects.to_string()),
            ("slices", slices.to_string()),
            ("size", size.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    println!(
        "wrote {} subjects x {} slices ({}x{}, domains {}) to {}",
        subjects,
        slices,
        size,
        size,
        ds.domain_names.join(","),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data).map_err(data_err)?;
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(data_err)?;
            let kv = KvFile::parse(&text).map_err(config_err)?;
            TrainConfig::from_kv(&kv).map_err(config_err)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    if cfg.gen.n_domains != dataset.n_domains() {
        return Err(CliError::Config(format!(
            "config expects {} domains but dataset has {}",
            cfg.gen.n_domains,
            dataset.n_domains()
        )));
    }
    let mut trainer = match &cfg.resume {
        Some(stem) => Trainer::load_checkpoint(stem).map_err(train_err)?,
        None => Trainer::new(cfg.clone()),
    };
    write_run_manifest(
        out,
        "train",
        Some(cfg.seed),
        &[
            ("data", data.display().to_string()),
            ("steps", cfg.steps.to_string()),
            ("out", out.display().to_string()),
            ("config_resolved", cfg.to_kv().to_text().replace('\n', ";")),
        ],
    )?;
    let summary = trainer.fit(&dataset, Some(out)).map_err(train_err)?;
    println!(
        "trained {} steps; best validation NMSE {:.5}; log and checkpoints in {}",
        summary.steps_run,
        summary.best_val_nmse,
        out.display()
    );
    Ok(())
}

pub fn cmd_impute(
    checkpoint: &Path,
    data: &Path,
    target_domain: &str,
    out: &Path,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data).map_err(data_err)?;
    let target = dataset
        .domain_index(target_domain)
        .ok_or_else(|| {
            CliError::Config(format!(
                "target domain {target_domain:?} is not in the dataset (has: {})",
                dataset.domain_names.join(",")
            ))
        })?;
    let trainer = Trainer::load_checkpoint(checkpoint).map_err(train_err)?;
    let n = dataset.n_domains();

    let mut records = Vec::new();
    for set in dataset.sets_in(Split::Test) {
        let normalized = set.normalized().map_err(data_err)?;
        let (h, w) = (set.height(), set.width());
        let inputs: Vec<(usize, Tensor)> = (0..n)
            .filter(|&d| d != target)
            .map(|d| {
                Ok((
                    d,
                    normalized.images[d]
                        .reshaped(vec![1, 1, h, w])
                        .map_err(data_err)?,
                ))
            })
            .collect::<Result<_, CliError>>()?;
        let imputed = trainer.gen.impute(&inputs, target).map_err(data_err)?;
        let imputed = imputed.reshaped(vec![1, h, w]).map_err(data_err)?;
        let pgm = out.join(format!(
            "imputed_s{:04}_z{:03}_{}.pgm",
            set.subject, set.slice, target_domain
        ));
        write_pgm(&imputed, &pgm).map_err(data_err)?;
        records.push(ImageRecord {
            subject: set.subject,
            slice: set.slice,
            target_domain: target_domain.to_string(),
            nmse: nmse(&normalized.images[target], &imputed).map_err(train_numeric)?,
            ssim: ssim_scalar(&normalized.images[target], &imputed).map_err(train_numeric)?,
        });
    }
    let report = MetricsReport::from_records(format!("{target_domain}_imputed"), records);
    std::fs::write(out.join("metrics.csv"), report.to_csv()).map_err(data_err)?;
    std::fs::write(out.join("report.txt"), report.to_table()).map_err(data_err)?;
    write_run_manifest(
        out,
        "impute",
        None,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data", data.display().to_string()),
            ("target_domain", target_domain.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    print!("{}", report.to_table());
    Ok(())
}

fn train_numeric(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

pub fn cmd_eval_essentiality(checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data).map_err(data_err)?;
    let trainer = Trainer::load_checkpoint(checkpoint).map_err(train_err)?;
    let sensitive = dataset.n_domains() - 1;
    let table = essentiality_study(&trainer.gen, &dataset, Split::Test, sensitive, LESION_THRESHOLD)
        .map_err(data_err)?;
    std::fs::write(out.join("essentiality.csv"), table.to_csv()).map_err(data_err)?;
    std::fs::write(out.join("essentiality.txt"), table.to_table()).map_err(data_err)?;
    write_run_manifest(
        out,
        "eval-essentiality",
        None,
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    print!("{}", table.to_table());
    Ok(())
}

/// Run the finite-difference verification suite and print one line per
/// primitive and per loss; any failure yields the numeric exit code.
pub fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<(), CliError> {
    let mut failures = 0;
    for (name, check) in gradcheck::primitive_checks(seed) {
        let ok = check.passes(tolerance);
        println!(
            "{} {name}: max rel err {:.3e} (tolerance {tolerance:.1e})",
            if ok { "PASS" } else { "FAIL" },
            check.max_rel_err
        );
        failures += usize::from(!ok);
    }
    let loss_tol = gradcheck::composite_tolerance(tolerance);
    for (name, check) in gradcheck::loss_checks(seed) {
        let ok = check.passes(loss_tol);
        println!(
            "{} {name}: max rel err {:.3e} (tolerance {loss_tol:.1e})",
            if ok { "PASS" } else { "FAIL" },
            check.max_rel_err
        );
        failures += usize::from(!ok);
    }
    if failures > 0 {
        return Err(CliError::Numeric(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

/// Honor `COLLAGAN_THREADS` as a cap on intra-op parallelism. Invalid or
/// absent values leave the default pool untouched.
pub fn init_thread_pool() {
    if let Ok(raw) = std::env::var("COLLAGAN_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

pub fn default_out_dir(subcommand: &str) -> PathBuf {
    PathBuf::from(format!("collagan_{subcommand}_out"))
}
