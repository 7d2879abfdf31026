//! Training objectives: multiple cycle consistency in L1 and SSIM form, the
//! least-squares adversarial pair, the domain-classification pair, and their
//! weighted combination.
//!
//! Every loss is a pure function of graph values returning a scalar value in
//! the same graph, so they compose and differentiate like any other op.

use thiserror::Error;

use crate::tensor::{Graph, TensorError, Value};

/// Sliding-window size for local SSIM statistics (uniform window).
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Lower bound on the per-pair dynamic range; inputs are standardized so no
/// fixed 255-style range exists.
pub const SSIM_RANGE_FLOOR: f64 = 1e-3;
/// Floor applied to the SSIM loss argument before the log.
pub const SSIM_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing backward reconstruction for domain {0}")]
    MissingBackward(usize),
    #[error("missing original image for domain {0}")]
    MissingOriginal(usize),
    #[error("expected {expected} backward reconstructions, got {got}")]
    WrongCycleCount { expected: usize, got: usize },
    #[error("domain {0} appears twice in the cycle bundle")]
    DuplicateDomain(usize),
    #[error("loss weights must be nonnegative with at least one positive")]
    BadWeights,
    #[error("ssim expects single-channel images, got {0} channels")]
    MultiChannel(usize),
}

/// Combination weights for the generator objective.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub mcc: f64,
    pub mcc_ssim: f64,
    pub gan: f64,
    pub clsf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mcc: 10.0, mcc_ssim: 1.0, gan: 1.0, clsf: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.mcc, self.mcc_ssim, self.gan, self.clsf];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) || all.iter().all(|&w| w == 0.0) {
            return Err(LossError::BadWeights);
        }
        Ok(())
    }
}

/// One forward imputation plus its backward-cycle reconstructions: the fake
/// for target domain `target`, one reconstruction per other domain, and the
/// original images those reconstructions are compared against.
pub struct CycleBundle {
    pub target: usize,
    pub fake: Value,
    /// `(domain, reconstruction)` for every domain except `target`.
    pub backward: Vec<(usize, Value)>,
    /// `(domain, original image)` for every domain except `target`.
    pub originals: Vec<(usize, Value)>,
}

impl CycleBundle {
    pub fn new(
        n_domains: usize,
        target: usize,
        fake: Value,
        backward: Vec<(usize, Value)>,
        originals: Vec<(usize, Value)>,
    ) -> Result<Self, LossError> {
        if backward.len() != n_domains - 1 {
            return Err(LossError::WrongCycleCount { expected: n_domains - 1, got: backward.len() });
        }
        let mut seen = vec![false; n_domains];
        for &(domain, _) in &backward {
            if domain == target || domain >= n_domains {
                return Err(LossError::MissingBackward(domain));
            }
            if seen[domain] {
                return Err(LossError::DuplicateDomain(domain));
            }
            seen[domain] = true;
        }
        let bundle = CycleBundle { target, fake, backward, originals };
        for &(domain, _) in &bundle.backward {
            bundle.original_for(domain)?;
        }
        Ok(bundle)
    }

    fn original_for(&self, domain: usize) -> Result<Value, LossError> {
        self.originals
            .iter()
            .find(|(d, _)| *d == domain)
            .map(|(_, v)| *v)
            .ok_or(LossError::MissingOriginal(domain))
    }
}

/// Multiple cycle consistency: the summed per-pixel-mean L1 distance between
/// each original domain and its reconstruction through the fake.
pub fn mcc_loss(g: &mut Graph, bundle: &CycleBundle) -> Result<Value, LossError> {
    let mut total: Option<Value> = None;
    for &(domain, recon) in &bundle.backward {
        let original = bundle.original_for(domain)?;
        let diff = g.sub(original, recon)?;
        let term = g.mean_abs(diff);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(LossError::WrongCycleCount { expected: 1, got: 0 })
}

/// Least-squares discriminator objective:
/// `mean((patch_real - 1)^2) + mean(patch_fake^2)`.
pub fn gan_loss_dsc(g: &mut Graph, patch_real: Value, patch_fake: Value) -> Result<Value, LossError> {
    crate::tensor::check_same_shape("gan_loss_dsc", g.shape(patch_real), g.shape(patch_fake))?;
    let shifted = g.add_scalar(patch_real, -1.0);
    let real_term = g.mean_sq(shifted);
    let fake_term = g.mean_sq(patch_fake);
    Ok(g.add(real_term, fake_term)?)
}

/// Least-squares generator objective: `mean((patch_fake - 1)^2)`.
pub fn gan_loss_gen(g: &mut Graph, patch_fake: Value) -> Result<Value, LossError> {
    let shifted = g.add_scalar(patch_fake, -1.0);
    Ok(g.mean_sq(shifted))
}

/// Cross-entropy for classifying a real image into its true domain; trains
/// the classifier head only.
pub fn clsf_loss_real(g: &mut Graph, class_logits: Value, true_domain: usize) -> Result<Value, LossError> {
    Ok(g.softmax_cross_entropy(class_logits, true_domain)?)
}

/// Cross-entropy for a generated image against its target domain; gradients
/// flow to the generator while the classifier parameters stay frozen.
pub fn clsf_loss_fake(g: &mut Graph, class_logits: Value, target_domain: usize) -> Result<Value, LossError> {
    Ok(g.softmax_cross_entropy(class_logits, target_domain)?)
}

/// Per-pixel structural similarity of two single-channel images, computed
/// over a 7x7 uniform window with reflect padding. The dynamic range is the
/// joint max minus min of the pair, floored at [`SSIM_RANGE_FLOOR`];
/// differentiable in both arguments including through the range.
pub fn ssim_map(g: &mut Graph, x: Value, y: Value) -> Result<Value, LossError> {
    let shape = g.shape(x).to_vec();
    crate::tensor::check_same_shape("ssim_map", &shape, g.shape(y))?;
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch { op: "ssim_map", expected: 4, got: shape.len() }.into());
    }
    if shape[1] != 1 {
        return Err(LossError::MultiChannel(shape[1]));
    }
    let pad = SSIM_WINDOW / 2;
    let xp = g.reflect_pad(x, pad)?;
    let yp = g.reflect_pad(y, pad)?;
    let mu_x = g.box_mean(xp, SSIM_WINDOW)?;
    let mu_y = g.box_mean(yp, SSIM_WINDOW)?;
    let xx = g.mul(xp, xp)?;
    let yy = g.mul(yp, yp)?;
    let xy = g.mul(xp, yp)?;
    let e_xx = g.box_mean(xx, SSIM_WINDOW)?;
    let e_yy = g.box_mean(yy, SSIM_WINDOW)?;
    let e_xy = g.box_mean(xy, SSIM_WINDOW)?;
    let mu_x2 = g.mul(mu_x, mu_x)?;
    let mu_y2 = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_x2)?;
    let var_y = g.sub(e_yy, mu_y2)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let joint = g.concat(&[x, y], 0)?;
    let hi = g.reduce_max(joint);
    let lo = g.reduce_min(joint);
    let range_raw = g.sub(hi, lo)?;
    let range = g.clamp_min(range_raw, SSIM_RANGE_FLOOR);
    let k1l = g.mul_scalar(range, SSIM_K1);
    let c1 = g.mul(k1l, k1l)?;
    let k2l = g.mul_scalar(range, SSIM_K2);
    let c2 = g.mul(k2l, k2l)?;

    let two_mu_xy = g.mul_scalar(mu_xy, 2.0);
    let num_l = g.add(two_mu_xy, c1)?;
    let two_cov = g.mul_scalar(cov, 2.0);
    let num_r = g.add(two_cov, c2)?;
    let num = g.mul(num_l, num_r)?;
    let mu_sum = g.add(mu_x2, mu_y2)?;
    let den_l = g.add(mu_sum, c1)?;
    let var_sum = g.add(var_x, var_y)?;
    let den_r = g.add(var_sum, c2)?;
    let den = g.mul(den_l, den_r)?;
    Ok(g.div(num, den)?)
}

/// `-log(mean(1 + map) / 2)` with the argument floored at [`SSIM_LOG_FLOOR`].
pub fn ssim_loss_from_map(g: &mut Graph, map: Value) -> Result<Value, LossError> {
    let m = g.mean(map);
    let shifted = g.add_scalar(m, 1.0);
    let halved = g.mul_scalar(shifted, 0.5);
    let floored = g.clamp_min(halved, SSIM_LOG_FLOOR);
    let logged = g.log(floored)?;
    Ok(g.mul_scalar(logged, -1.0))
}

/// Structural-similarity loss between two images.
pub fn ssim_loss(g: &mut Graph, x: Value, y: Value) -> Result<Value, LossError> {
    let map = ssim_map(g, x, y)?;
    ssim_loss_from_map(g, map)
}

/// SSIM form of the multiple cycle consistency loss: summed SSIM losses of
/// each original against its reconstruction.
pub fn mcc_ssim_loss(g: &mut Graph, bundle: &CycleBundle) -> Result<Value, LossError> {
    let mut total: Option<Value> = None;
    for &(domain, recon) in &bundle.backward {
        let original = bundle.original_for(domain)?;
        let term = ssim_loss(g, original, recon)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(LossError::WrongCycleCount { expected: 1, got: 0 })
}

/// Scalar values of the generator loss terms along with the weighted total.
pub struct GeneratorLoss {
    pub mcc: Value,
    pub mcc_ssim: Value,
    pub gan: Value,
    pub clsf: Value,
    pub total: Value,
}

/// Weighted generator objective over one cycle bundle plus the discriminator
/// scores of the fake.
pub fn total_generator_loss(
    g: &mut Graph,
    bundle: &CycleBundle,
    patch_fake: Value,
    class_logits_fake: Value,
    weights: &LossWeights,
) -> Result<GeneratorLoss, LossError> {
    weights.validate()?;
    let mcc = mcc_loss(g, bundle)?;
    let mcc_ssim = mcc_ssim_loss(g, bundle)?;
    let gan = gan_loss_gen(g, patch_fake)?;
    let clsf = clsf_loss_fake(g, class_logits_fake, bundle.target)?;
    let mut total = g.mul_scalar(mcc, weights.mcc);
    let t = g.mul_scalar(mcc_ssim, weights.mcc_ssim);
    total = g.add(total, t)?;
    let t = g.mul_scalar(gan, weights.gan);
    total = g.add(total, t)?;
    let t = g.mul_scalar(clsf, weights.clsf);
    total = g.add(total, t)?;
    Ok(GeneratorLoss { mcc, mcc_ssim, gan, clsf, total })
}

/// Scalar values of the discriminator loss terms along with the total.
pub struct DiscriminatorLoss {
    pub gan: Value,
    pub clsf: Value,
    pub total: Value,
}

/// Discriminator objective: adversarial term plus real-image classification.
pub fn total_discriminator_loss(
    g: &mut Graph,
    patch_real: Value,
    patch_fake: Value,
    class_logits_real: Value,
    true_domain: usize,
) -> Result<DiscriminatorLoss, LossError> {
    let gan = gan_loss_dsc(g, patch_real, patch_fake)?;
    let clsf = clsf_loss_real(g, class_logits_real, true_domain)?;
    let total = g.add(gan, clsf)?;
    Ok(DiscriminatorLoss { gan, clsf, total })
}
