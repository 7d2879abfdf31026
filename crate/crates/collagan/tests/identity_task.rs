//! Small training runs asserting the learning behavior fixed by the module
//! examples: the identity task drives held-out per-image NMSE under 0.05,
//! and on the phantom task every domain's validation NMSE improves over its
//! value at step zero.

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use collagan::discriminator::DiscConfig;
use collagan::generator::GenConfig;
use collagan::losses::LossWeights;
use collagan::phantom::{generate_dataset, Dataset, Split};
use collagan::trainer::{TrainConfig, Trainer};

/// All four domains carry the identical image: imputation reduces to copying
/// any input branch.
fn identity_dataset() -> Dataset {
    let mut ds = generate_dataset(4, 4, 16, 16, 3).unwrap();
    for set in &mut ds.sets {
        let canonical = set.images[0].clone();
        for img in &mut set.images {
            *img = canonical.clone();
        }
    }
    ds
}

fn tiny_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 1,
        lr_g: 2e-3,
        lr_d: 3e-4,
        seed,
        weights: LossWeights { mcc: 10.0, mcc_ssim: 0.0, gan: 0.0, clsf: 0.0 },
        val_every: steps,
        checkpoint_every: 100_000,
        gen: GenConfig { levels: 2, base_channels: 4, ..GenConfig::default() },
        disc: DiscConfig { base_channels: 2, ..DiscConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn identity_task_reaches_low_heldout_nmse() {
    let ds = identity_dataset();
    let mut trainer = Trainer::new(tiny_config(300, 11));
    trainer.fit(&ds, None).unwrap();
    let test: Vec<_> = ds
        .sets_in(Split::Test)
        .into_iter()
        .map(|s| s.normalized().unwrap())
        .collect();
    let report = trainer.validate(&test).unwrap();
    for (d, (nmse, _)) in report.per_domain.iter().enumerate() {
        assert!(
            *nmse < 0.05,
            "identity task domain {d}: held-out NMSE {nmse:.4} >= 0.05"
        );
    }
}

#[test]
fn phantom_validation_improves_for_every_domain() {
    let ds = generate_dataset(3, 3, 16, 16, 29).unwrap();
    let mut cfg = tiny_config(200, 13);
    cfg.weights = LossWeights::default();
    cfg.val_every = 100;
    let val: Vec<_> = ds
        .sets_in(Split::Val)
        .into_iter()
        .map(|s| s.normalized().unwrap())
        .collect();
    let mut trainer = Trainer::new(cfg);
    let at_step_zero = trainer.validate(&val).unwrap();
    trainer.fit(&ds, None).unwrap();
    let at_end = trainer.validate(&val).unwrap();
    for d in 0..ds.n_domains() {
        assert!(
            at_end.per_domain[d].0 < at_step_zero.per_domain[d].0,
            "domain {d}: validation NMSE {:.4} did not improve on step-0 value {:.4}",
            at_end.per_domain[d].0,
            at_step_zero.per_domain[d].0
        );
    }
}
