//! Alternating optimization loop.
//!
//! Each step samples a batch and a random target domain, imputes the fake,
//! builds every backward-cycle reconstruction, then updates the
//! discriminator (adversarial + real-image classification) followed by the
//! generator (weighted cycle, SSIM-cycle, adversarial, and fake
//! classification terms) with the discriminator frozen. All stochasticity
//! flows from one seeded ChaCha stream, so a seed fixes the entire run and a
//! checkpoint's stream position makes resumption exact.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KvFile};
use crate::discriminator::{DiscConfig, DiscriminatorError, DiscriminatorNet};
use crate::generator::{GenConfig, GeneratorError, GeneratorNet, MissingPolicy, TargetMask};
use crate::losses::{
    total_discriminator_loss, total_generator_loss, CycleBundle, LossError, LossWeights,
};
use crate::metrics::{nmse, ssim_scalar, MetricsError};
use crate::params::Adam;
use crate::phantom::{augment, Dataset, DomainSet, PhantomError, Split};
use crate::tensor::snapshot::{Snapshot, SnapshotError};
use crate::tensor::{Graph, Tensor, TensorError, Value};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {got} domains, generator expects {expected}")]
    DomainCount { expected: usize, got: usize },
    #[error("non-finite loss at step {step}; aborted. terms: {report}")]
    NonFinite { step: usize, report: StepReport },
    #[error("checkpoint meta missing key {0:?}")]
    MetaKey(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Optimizer family for a run; plain SGD exists as a diagnostic mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Adam => "adam",
            OptimKind::Sgd => "sgd",
        })
    }
}

impl std::str::FromStr for OptimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimKind::Adam),
            "sgd" => Ok(OptimKind::Sgd),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

/// Full training-run configuration. The seed fixes every stochastic choice:
/// network init, batch sampling, augmentation, target-domain draws, dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub val_every: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub optimizer: OptimKind,
    pub gen: GenConfig,
    pub disc: DiscConfig,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 4,
            lr_g: 1e-4,
            lr_d: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            val_every: 200,
            checkpoint_every: 1000,
            augment: true,
            optimizer: OptimKind::Adam,
            gen: GenConfig::default(),
            disc: DiscConfig::default(),
            resume: None,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "lr_g",
    "lr_d",
    "seed",
    "lambda_mcc",
    "lambda_mcc_ssim",
    "lambda_gan",
    "lambda_clsf",
    "val_every",
    "checkpoint_every",
    "augment",
    "optimizer",
    "n_domains",
    "levels",
    "base_channels",
    "leaky_slope",
    "instance_norm",
    "disc_base_channels",
    "dropout_rate",
    "resume",
];

impl TrainConfig {
    /// Read a config from key=value text, filling gaps with defaults and
    /// rejecting unknown keys.
    pub fn from_kv(kv: &KvFile) -> Result<Self, ConfigError> {
        kv.check_known_keys(CONFIG_KEYS)?;
        let d = TrainConfig::default();
        Ok(TrainConfig {
            steps: kv.get_or("steps", d.steps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr_g: kv.get_or("lr_g", d.lr_g)?,
            lr_d: kv.get_or("lr_d", d.lr_d)?,
            seed: kv.get_or("seed", d.seed)?,
            weights: LossWeights {
                mcc: kv.get_or("lambda_mcc", d.weights.mcc)?,
                mcc_ssim: kv.get_or("lambda_mcc_ssim", d.weights.mcc_ssim)?,
                gan: kv.get_or("lambda_gan", d.weights.gan)?,
                clsf: kv.get_or("lambda_clsf", d.weights.clsf)?,
            },
            val_every: kv.get_or("val_every", d.val_every)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
            augment: kv.get_or("augment", d.augment)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            gen: GenConfig {
                n_domains: kv.get_or("n_domains", d.gen.n_domains)?,
                levels: kv.get_or("levels", d.gen.levels)?,
                base_channels: kv.get_or("base_channels", d.gen.base_channels)?,
                leaky_slope: kv.get_or("leaky_slope", d.gen.leaky_slope)?,
                instance_norm: kv.get_or("instance_norm", d.gen.instance_norm)?,
                norm_eps: d.gen.norm_eps,
            },
            disc: DiscConfig {
                n_domains: kv.get_or("n_domains", d.disc.n_domains)?,
                base_channels: kv.get_or("disc_base_channels", d.disc.base_channels)?,
                leaky_slope: kv.get_or("leaky_slope", d.disc.leaky_slope)?,
                dropout_rate: kv.get_or("dropout_rate", d.disc.dropout_rate)?,
            },
            resume: kv.get("resume").map(PathBuf::from),
        })
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("steps", self.steps);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_g", self.lr_g);
        kv.set("lr_d", self.lr_d);
        kv.set("seed", self.seed);
        kv.set("lambda_mcc", self.weights.mcc);
        kv.set("lambda_mcc_ssim", self.weights.mcc_ssim);
        kv.set("lambda_gan", self.weights.gan);
        kv.set("lambda_clsf", self.weights.clsf);
        kv.set("val_every", self.val_every);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("augment", self.augment);
        kv.set("optimizer", self.optimizer);
        kv.set("n_domains", self.gen.n_domains);
        kv.set("levels", self.gen.levels);
        kv.set("base_channels", self.gen.base_channels);
        kv.set("leaky_slope", self.gen.leaky_slope);
        kv.set("instance_norm", self.gen.instance_norm);
        kv.set("disc_base_channels", self.disc.base_channels);
        kv.set("dropout_rate", self.disc.dropout_rate);
        if let Some(resume) = &self.resume {
            kv.set("resume", resume.display());
        }
        kv
    }
}

/// Loss terms of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub target_domain: usize,
    pub l_mcc: f64,
    pub l_mcc_ssim: f64,
    pub l_gan_gen: f64,
    pub l_gan_dsc: f64,
    pub l_clsf_real: f64,
    pub l_clsf_fake: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl StepReport {
    pub fn all_finite(&self) -> bool {
        [
            self.l_mcc,
            self.l_mcc_ssim,
            self.l_gan_gen,
            self.l_gan_dsc,
            self.l_clsf_real,
            self.l_clsf_fake,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mcc={} mcc_ssim={} gan_gen={} gan_dsc={} clsf_real={} clsf_fake={}",
            self.l_mcc,
            self.l_mcc_ssim,
            self.l_gan_gen,
            self.l_gan_dsc,
            self.l_clsf_real,
            self.l_clsf_fake
        )
    }
}

/// Per-domain validation result.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub step: usize,
    /// `(nmse, ssim)` per target domain.
    pub per_domain: Vec<(f64, f64)>,
}

impl ValidationReport {
    pub fn mean_nmse(&self) -> f64 {
        self.per_domain.iter().map(|(n, _)| n).sum::<f64>() / self.per_domain.len() as f64
    }
}

/// Outcome of a [`Trainer::fit`] run.
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub steps_run: usize,
    pub best_val_nmse: f64,
    pub validations: Vec<ValidationReport>,
    /// CSV rows, including the header, exactly as written to disk.
    pub log: Vec<String>,
}

/// Uniform target-domain draw used by every training step.
pub fn draw_target_domain(rng: &mut impl Rng, n_domains: usize) -> usize {
    rng.gen_range(0..n_domains)
}

/// Stack per-set images of one domain into a `[B,1,H,W]` batch tensor.
fn stack_domain(batch: &[DomainSet], domain: usize) -> Result<Tensor, TrainError> {
    let first = batch.first().ok_or(TrainError::EmptyBatch)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(batch.len() * h * w);
    for set in batch {
        data.extend_from_slice(set.images[domain].data());
    }
    Ok(Tensor::new(vec![batch.len(), 1, h, w], data)?)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: GeneratorNet,
    pub disc: DiscriminatorNet,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: usize,
    best_val: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = GeneratorNet::new(cfg.gen.clone(), &mut rng);
        let disc = DiscriminatorNet::new(cfg.disc.clone(), &mut rng);
        let opt_g = Adam::new(cfg.lr_g, gen.params());
        let opt_d = Adam::new(cfg.lr_d, disc.params());
        Trainer { cfg, gen, disc, opt_g, opt_d, rng, step: 0, best_val: f64::INFINITY }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One full optimization step with a uniformly drawn target domain.
    pub fn train_step(&mut self, batch: &[DomainSet]) -> Result<StepReport, TrainError> {
        let target = draw_target_domain(&mut self.rng, self.cfg.gen.n_domains);
        self.train_step_with_target(batch, target)
    }

    /// One full optimization step for an explicit target domain: update the
    /// discriminator, then the generator against the updated discriminator.
    pub fn train_step_with_target(
        &mut self,
        batch: &[DomainSet],
        target: usize,
    ) -> Result<StepReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let n = self.cfg.gen.n_domains;
        if batch[0].images.len() != n {
            return Err(TrainError::DomainCount { expected: n, got: batch[0].images.len() });
        }
        let reals: Vec<Tensor> = (0..n)
            .map(|d| stack_domain(batch, d))
            .collect::<Result<_, _>>()?;
        let (b, h, w) = (batch.len(), batch[0].height(), batch[0].width());
        let mask = TargetMask::new(target, n, b, h, w)?;

        let (l_gan_dsc, l_clsf_real, total_d) = self.discriminator_phase(&reals, &mask)?;
        let (gl_mcc, gl_ssim, gl_gan, gl_clsf, total_g) = self.generator_phase(&reals, &mask)?;

        let report = StepReport {
            step: self.step,
            target_domain: target,
            l_mcc: gl_mcc,
            l_mcc_ssim: gl_ssim,
            l_gan_gen: gl_gan,
            l_gan_dsc,
            l_clsf_real,
            l_clsf_fake: gl_clsf,
            total_g,
            total_d,
        };
        if !report.all_finite() {
            return Err(TrainError::NonFinite { step: self.step, report });
        }
        self.step += 1;
        Ok(report)
    }

    /// Update D on the real batch and the detached fake: minimizes the
    /// adversarial term plus classification of real images only.
    fn discriminator_phase(
        &mut self,
        reals: &[Tensor],
        mask: &TargetMask,
    ) -> Result<(f64, f64, f64), TrainError> {
        let target = mask.domain();
        // Detached fake from the current generator.
        let fake = {
            let mut g = Graph::new();
            let bound = self.gen.bind(&mut g, false);
            let inputs: Vec<(usize, Value)> = reals
                .iter()
                .enumerate()
                .filter(|(d, _)| *d != target)
                .map(|(d, t)| (d, g.constant(t.clone())))
                .collect();
            let out = self.gen.forward(&mut g, &bound, &inputs, mask, MissingPolicy::ZeroImage)?;
            g.value(out).clone()
        };

        let mut g = Graph::new();
        let bound = self.disc.bind(&mut g, true);
        let real_v = g.constant(reals[target].clone());
        let fake_v = g.constant(fake);
        let (patch_real, logits_real) =
            self.disc.discriminate(&mut g, &bound, real_v, true, &mut self.rng)?;
        let (patch_fake, _) = self.disc.discriminate(&mut g, &bound, fake_v, true, &mut self.rng)?;
        let loss = total_discriminator_loss(&mut g, patch_real, patch_fake, logits_real, target)?;
        let (gan, clsf, total) = (
            g.value(loss.gan).item(),
            g.value(loss.clsf).item(),
            g.value(loss.total).item(),
        );
        g.backward(loss.total)?;
        let grads = self.disc.params().collect_grads(&g, &bound);
        match self.cfg.optimizer {
            OptimKind::Adam => self.opt_d.step(self.disc.params_mut(), &grads),
            OptimKind::Sgd => sgd_step(self.disc.params_mut(), &grads, self.cfg.lr_d),
        }
        Ok((gan, clsf, total))
    }

    /// Update G through the forward fake, all N-1 backward cycles, and the
    /// frozen (freshly updated) discriminator.
    fn generator_phase(
        &mut self,
        reals: &[Tensor],
        mask: &TargetMask,
    ) -> Result<(f64, f64, f64, f64, f64), TrainError> {
        let target = mask.domain();
        let n = self.cfg.gen.n_domains;
        let mut g = Graph::new();
        let g_bound = self.gen.bind(&mut g, true);
        let d_bound = self.disc.bind(&mut g, false);

        let real_vals: Vec<(usize, Value)> = reals
            .iter()
            .enumerate()
            .map(|(d, t)| (d, g.constant(t.clone())))
            .collect();
        let inputs: Vec<(usize, Value)> = real_vals
            .iter()
            .filter(|(d, _)| *d != target)
            .copied()
            .collect();
        let fake = self.gen.forward(&mut g, &g_bound, &inputs, mask, MissingPolicy::ZeroImage)?;

        let mut backward = Vec::with_capacity(n - 1);
        for recon_domain in (0..n).filter(|&d| d != target) {
            let recon =
                self.gen
                    .backward_cycle(&mut g, &g_bound, fake, target, &inputs, recon_domain)?;
            backward.push((recon_domain, recon));
        }
        let originals: Vec<(usize, Value)> = inputs.clone();
        let bundle = CycleBundle::new(n, target, fake, backward, originals)?;

        let (patch_fake, logits_fake) =
            self.disc.discriminate(&mut g, &d_bound, fake, true, &mut self.rng)?;
        let loss = total_generator_loss(&mut g, &bundle, patch_fake, logits_fake, &self.cfg.weights)?;
        let values = (
            g.value(loss.mcc).item(),
            g.value(loss.mcc_ssim).item(),
            g.value(loss.gan).item(),
            g.value(loss.clsf).item(),
            g.value(loss.total).item(),
        );
        g.backward(loss.total)?;
        let grads = self.gen.params().collect_grads(&g, &g_bound);
        match self.cfg.optimizer {
            OptimKind::Adam => self.opt_g.step(self.gen.params_mut(), &grads),
            OptimKind::Sgd => sgd_step(self.gen.params_mut(), &grads, self.cfg.lr_g),
        }
        Ok(values)
    }

    /// Mean imputation NMSE/SSIM per target domain over a normalized split.
    pub fn validate(&self, sets: &[DomainSet]) -> Result<ValidationReport, TrainError> {
        let n = self.cfg.gen.n_domains;
        let mut per_domain = Vec::with_capacity(n);
        for target in 0..n {
            let (mut nm, mut ss) = (0.0, 0.0);
            // Chunked batched evaluation keeps peak memory flat.
            for chunk in sets.chunks(4) {
                let inputs: Vec<(usize, Tensor)> = (0..n)
                    .filter(|&d| d != target)
                    .map(|d| Ok((d, stack_domain(chunk, d)?)))
                    .collect::<Result<_, TrainError>>()?;
                let imputed = self.gen.impute(&inputs, target)?;
                let (h, w) = (chunk[0].height(), chunk[0].width());
                for (i, set) in chunk.iter().enumerate() {
                    let plane =
                        Tensor::new(vec![1, h, w], imputed.data()[i * h * w..(i + 1) * h * w].to_vec())?;
                    nm += nmse(&set.images[target], &plane)?;
                    ss += ssim_scalar(&set.images[target], &plane)?;
                }
            }
            per_domain.push((nm / sets.len() as f64, ss / sets.len() as f64));
        }
        Ok(ValidationReport { step: self.step, per_domain })
    }

    // ---- checkpointing -------------------------------------------------------

    /// Write `<stem>.snap` (parameters + optimizer moments) and
    /// `<stem>.meta` (architecture and run state, plain key=value text).
    pub fn save_checkpoint(&self, stem: &Path) -> Result<(), TrainError> {
        let mut snap = Snapshot::new();
        self.gen.params().write_to(&mut snap, "g");
        self.disc.params().write_to(&mut snap, "d");
        self.opt_g.write_to(&mut snap, "opt_g");
        self.opt_d.write_to(&mut snap, "opt_d");
        let snap_path = stem.with_extension("snap");
        snap.write_file(&snap_path)?;

        let mut meta = self.cfg.to_kv();
        meta.set("step", self.step);
        meta.set("rng_word_pos", self.rng.get_word_pos());
        meta.set("best_val", self.best_val);
        let meta_path = stem.with_extension("meta");
        std::fs::write(&meta_path, meta.to_text()).map_err(io_at(&meta_path))?;
        Ok(())
    }

    /// Restore a trainer from `<stem>.snap` + `<stem>.meta`. The random
    /// stream resumes at the recorded position, so continuing a run is
    /// indistinguishable from never having stopped.
    pub fn load_checkpoint(stem: &Path) -> Result<Self, TrainError> {
        let meta_path = stem.with_extension("meta");
        let text = std::fs::read_to_string(&meta_path).map_err(io_at(&meta_path))?;
        let meta = KvFile::parse(&text)?;
        let mut run_meta = KvFile::new();
        let mut cfg_kv = KvFile::new();
        for key in meta.keys() {
            let value = meta.get(key).expect("iterated key");
            if matches!(key, "step" | "rng_word_pos" | "best_val") {
                run_meta.set(key, value);
            } else {
                cfg_kv.set(key, value);
            }
        }
        let cfg = TrainConfig::from_kv(&cfg_kv)?;
        let mut trainer = Trainer::new(cfg);
        let snap_path = stem.with_extension("snap");
        let snap = Snapshot::read_file(&snap_path)?;
        trainer.gen.params_mut().read_from(&snap, "g")?;
        trainer.disc.params_mut().read_from(&snap, "d")?;
        trainer.opt_g.read_from(&snap, "opt_g")?;
        trainer.opt_d.read_from(&snap, "opt_d")?;
        trainer.step = run_meta.require("step")?;
        trainer.best_val = run_meta.require("best_val")?;
        let word_pos: u128 = run_meta.require("rng_word_pos")?;
        trainer.rng.set_word_pos(word_pos);
        Ok(trainer)
    }

    // ---- the full loop ---------------------------------------------------------

    /// Train on the dataset's train split with periodic validation; retains
    /// the best-validation checkpoint when an output directory is given.
    pub fn fit(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<FitSummary, TrainError> {
        let train_sets: Vec<DomainSet> = dataset
            .sets_in(Split::Train)
            .into_iter()
            .map(|s| s.normalized())
            .collect::<Result<_, _>>()?;
        let val_sets: Vec<DomainSet> = dataset
            .sets_in(Split::Val)
            .into_iter()
            .map(|s| s.normalized())
            .collect::<Result<_, _>>()?;
        if train_sets.is_empty() || val_sets.is_empty() {
            return Err(TrainError::EmptyBatch);
        }

        let domain_cols: Vec<String> = dataset
            .domain_names
            .iter()
            .map(|d| format!("val_nmse_{d}"))
            .collect();
        let header = format!(
            "step,target_domain,l_mcc,l_mcc_ssim,l_gan_gen,l_gan_dsc,l_clsf_real,l_clsf_fake,total_g,total_d,{}",
            domain_cols.join(",")
        );
        let mut log = vec![header];
        let mut validations = Vec::new();

        while self.step < self.cfg.steps {
            let batch: Vec<DomainSet> = (0..self.cfg.batch_size)
                .map(|_| {
                    let idx = self.rng.gen_range(0..train_sets.len());
                    if self.cfg.augment {
                        augment(&train_sets[idx], &mut self.rng)
                    } else {
                        train_sets[idx].clone()
                    }
                })
                .collect();
            let report = match self.train_step(&batch) {
                Ok(report) => report,
                Err(TrainError::NonFinite { step, report }) => {
                    if let Some(dir) = out_dir {
                        let dump = dir.join(format!("nan_dump_step{step}.txt"));
                        let _ = std::fs::write(
                            &dump,
                            format!("step {step}\ntarget {}\n{report}\n", report.target_domain),
                        );
                    }
                    return Err(TrainError::NonFinite { step, report });
                }
                Err(other) => return Err(other),
            };

            // Strictly cadence-based so that interrupting and resuming a run
            // reproduces the identical log; pick a cadence dividing `steps`
            // to validate the final state.
            let validated = self.step.is_multiple_of(self.cfg.val_every);
            let val_cols = if validated {
                let val = self.validate(&val_sets)?;
                let mean = val.mean_nmse();
                if mean < self.best_val {
                    self.best_val = mean;
                    if let Some(dir) = out_dir {
                        self.save_checkpoint(&dir.join("checkpoint_best"))?;
                    }
                }
                let cols = val
                    .per_domain
                    .iter()
                    .map(|(n, _)| n.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                validations.push(val);
                cols
            } else {
                vec![""; dataset.n_domains()].join(",")
            };
            log.push(format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                report.step,
                report.target_domain,
                report.l_mcc,
                report.l_mcc_ssim,
                report.l_gan_gen,
                report.l_gan_dsc,
                report.l_clsf_real,
                report.l_clsf_fake,
                report.total_g,
                report.total_d,
                val_cols
            ));
            if let Some(dir) = out_dir {
                if self.step.is_multiple_of(self.cfg.checkpoint_every) || self.step == self.cfg.steps {
                    self.save_checkpoint(&dir.join("checkpoint_latest"))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("training_log.csv");
            std::fs::write(&path, log.join("\n") + "\n").map_err(io_at(&path))?;
        }
        Ok(FitSummary {
            steps_run: self.step,
            best_val_nmse: self.best_val,
            validations,
            log,
        })
    }
}

fn sgd_step(params: &mut crate::params::ParamSet, grads: &[Vec<f64>], lr: f64) {
    for (idx, grad) in grads.iter().enumerate() {
        let data = params.tensor_mut(crate::params::ParamId(idx)).data_mut();
        for (p, g) in data.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}
