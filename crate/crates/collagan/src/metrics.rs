//! Evaluation measures and reporting: NMSE, scalar SSIM, Dice, and the
//! leave-one-out essentiality study.
//!
//! The scalar SSIM here is a plain non-differentiable path with direct
//! per-window moments; tests pin its agreement with the graph-based
//! [`crate::losses::ssim_map`] to 1e-9 so both routes stay honest.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::generator::{GeneratorError, GeneratorNet};
use crate::losses::{SSIM_K1, SSIM_K2, SSIM_RANGE_FLOOR, SSIM_WINDOW};
use crate::phantom::{nonzero_std, normalize, Dataset, PhantomError, Split};
use crate::tensor::{check_same_shape, Tensor, TensorError};

/// Fixed threshold of the toy lesion segmenter, on the raw render scale:
/// tissue in the sensitive domain stays below 0.65, exclusive lesions sit at
/// 0.95, so 0.775 separates them with margin on both sides.
pub const LESION_THRESHOLD: f64 = 0.775;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("nmse undefined: reference image has zero norm")]
    ZeroNorm,
    #[error("mask contains a value other than 0 and 1")]
    NotBinary,
    #[error("ssim expects a single-channel image, got shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Normalized mean squared error: squared-error energy over signal energy,
/// `||x_true - x_hat||^2 / ||x_true||^2`.
pub fn nmse(x_true: &Tensor, x_hat: &Tensor) -> Result<f64, MetricsError> {
    check_same_shape("nmse", x_true.shape(), x_hat.shape())?;
    let num: f64 = x_true
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(t, h)| (t - h) * (t - h))
        .sum();
    let den: f64 = x_true.data().iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    Ok(num / den)
}

fn as_plane(t: &Tensor) -> Result<(usize, usize, &[f64]), MetricsError> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w, t.data())),
        [1, 1, h, w] => Ok((*h, *w, t.data())),
        other => Err(MetricsError::NotAnImage(other.to_vec())),
    }
}

/// Mean structural similarity of two single-channel images; direct window
/// loops over the same 7x7 uniform window and reflect padding as the
/// differentiable path.
pub fn ssim_scalar(x: &Tensor, y: &Tensor) -> Result<f64, MetricsError> {
    let (h, w, xd) = as_plane(x)?;
    let (h2, w2, yd) = as_plane(y)?;
    if (h, w) != (h2, w2) {
        return Err(TensorError::DimMismatch { op: "ssim_scalar", axis: 1, left: h, right: h2 }.into());
    }
    if h < SSIM_WINDOW / 2 + 1 || w < SSIM_WINDOW / 2 + 1 {
        return Err(TensorError::SpatialTooSmall {
            op: "ssim_scalar",
            axis: 2,
            extent: h.min(w),
            min: SSIM_WINDOW / 2 + 1,
        }
        .into());
    }
    let pad = SSIM_WINDOW as isize / 2;
    let reflect = |i: isize, e: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i >= e as isize {
            2 * e - 2 - i as usize
        } else {
            i as usize
        }
    };
    let hi = xd.iter().chain(yd).cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = xd.iter().chain(yd).cloned().fold(f64::INFINITY, f64::min);
    let range = (hi - lo).max(SSIM_RANGE_FLOOR);
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in -pad..=pad {
                for dj in -pad..=pad {
                    let ii = reflect(i + di, h);
                    let jj = reflect(j + dj, w);
                    let (a, b) = (xd[ii * w + jj], yd[ii * w + jj]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (h * w) as f64)
}

/// Binary segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        BinaryMask { shape, data }
    }

    /// Interpret a 0/1 tensor as a mask; any other value is rejected.
    pub fn from_indicator(t: &Tensor) -> Result<Self, MetricsError> {
        let data = t
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(MetricsError::NotBinary),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        Ok(BinaryMask { shape: t.shape().to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Dice similarity `2|A and B| / (|A| + |B|)`; two empty masks agree
/// perfectly and score 1.
pub fn dice(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64, MetricsError> {
    check_same_shape("dice", gt.shape(), pred.shape())?;
    let inter = gt
        .data()
        .iter()
        .zip(pred.data())
        .filter(|(a, b)| **a && **b)
        .count();
    let total = gt.count() + pred.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Fixed-threshold toy segmenter on the sensitive contrast channel.
pub fn threshold_segment(raw_image: &Tensor, tau: f64) -> BinaryMask {
    BinaryMask {
        shape: raw_image.shape().to_vec(),
        data: raw_image.data().iter().map(|&v| v > tau).collect(),
    }
}

// ---- report assembly ----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub subject: usize,
    pub slice: usize,
    pub target_domain: String,
    pub nmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct DomainAggregate {
    pub domain: String,
    pub n: usize,
    pub mean_nmse: f64,
    pub std_nmse: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

/// Per-image imputation quality records plus per-domain aggregates; the
/// aggregates are always recomputed from the records at construction.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub tag: String,
    pub records: Vec<ImageRecord>,
    pub aggregates: Vec<DomainAggregate>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_records(tag: impl Into<String>, records: Vec<ImageRecord>) -> Self {
        let mut domains: Vec<String> = Vec::new();
        for r in &records {
            if !domains.contains(&r.target_domain) {
                domains.push(r.target_domain.clone());
            }
        }
        let aggregates = domains
            .into_iter()
            .map(|domain| {
                let nm: Vec<f64> = records
                    .iter()
                    .filter(|r| r.target_domain == domain)
                    .map(|r| r.nmse)
                    .collect();
                let ss: Vec<f64> = records
                    .iter()
                    .filter(|r| r.target_domain == domain)
                    .map(|r| r.ssim)
                    .collect();
                let (mean_nmse, std_nmse) = mean_std(&nm);
                let (mean_ssim, std_ssim) = mean_std(&ss);
                DomainAggregate { domain, n: nm.len(), mean_nmse, std_nmse, mean_ssim, std_ssim }
            })
            .collect();
        MetricsReport { tag: tag.into(), records, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,slice,target_domain,nmse,ssim\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.subject, r.slice, r.target_domain, r.nmse, r.ssim
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("imputation metrics [{}]\n", self.tag);
        let _ = writeln!(out, "{:<10} {:>5} {:>22} {:>22}", "domain", "n", "NMSE (mean+-std)", "SSIM (mean+-std)");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>11.4} +- {:>7.4} {:>11.4} +- {:>7.4}",
                a.domain, a.n, a.mean_nmse, a.std_nmse, a.mean_ssim, a.std_ssim
            );
        }
        out
    }
}

// ---- essentiality study ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EssentialityRow {
    pub label: String,
    pub mean_dice: f64,
    pub per_image: Vec<f64>,
}

/// Dice per substituted domain, one row per substitution plus the
/// original-data baseline row.
#[derive(Clone, Debug)]
pub struct EssentialityTable {
    pub sensitive_domain: String,
    pub rows: Vec<EssentialityRow>,
}

impl EssentialityTable {
    pub fn row(&self, label: &str) -> Option<&EssentialityRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,mean_dice,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.label, r.mean_dice, r.per_image.len());
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "leave-one-out essentiality (segmenter reads domain {}, threshold {})\n",
            self.sensitive_domain, LESION_THRESHOLD
        );
        let _ = writeln!(out, "{:<14} {:>10} {:>6}", "substitution", "mean Dice", "n");
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>10.4} {:>6}", r.label, r.mean_dice, r.per_image.len());
        }
        out
    }
}

/// Leave-one-out study: for each domain, replace its real images on the
/// chosen split with generator imputations and rescore the toy lesion
/// segmenter against the ground-truth masks. The segmenter thresholds the
/// sensitive domain on the raw render scale, so imputed images (produced in
/// normalized space) are mapped back through the real image's normalization
/// factor. An untrained generator is a valid input and serves as a baseline.
pub fn essentiality_study(
    gen: &GeneratorNet,
    dataset: &Dataset,
    split: Split,
    sensitive_domain: usize,
    tau: f64,
) -> Result<EssentialityTable, MetricsError> {
    let sets = dataset.sets_in(split);
    let n_domains = dataset.n_domains();
    let mut rows = Vec::with_capacity(n_domains + 1);

    let mut original = Vec::with_capacity(sets.len());
    for set in &sets {
        let gt = BinaryMask::from_indicator(&set.lesion_mask)?;
        let pred = threshold_segment(&set.images[sensitive_domain], tau);
        original.push(dice(&gt, &pred)?);
    }
    let (mean, _) = mean_std(&original);
    rows.push(EssentialityRow { label: "original".into(), mean_dice: mean, per_image: original });

    for target in 0..n_domains {
        let mut scores = Vec::with_capacity(sets.len());
        for set in &sets {
            let gt = BinaryMask::from_indicator(&set.lesion_mask)?;
            let scored_image = if target == sensitive_domain {
                // Impute the sensitive domain from the others and bring it
                // back to the raw intensity scale.
                let h = set.height();
                let w = set.width();
                let inputs: Vec<(usize, Tensor)> = (0..n_domains)
                    .filter(|&d| d != target)
                    .map(|d| {
                        Ok((d, normalize(&set.images[d])?.reshaped(vec![1, 1, h, w])?))
                    })
                    .collect::<Result<_, MetricsError>>()?;
                let imputed = gen.impute(&inputs, target)?;
                let scale = nonzero_std(&set.images[target])?;
                imputed.map(|v| v * scale).reshaped(vec![1, h, w])?
            } else {
                // The segmenter never reads this domain; its substitution
                // leaves the prediction input bitwise unchanged.
                set.images[sensitive_domain].clone()
            };
            let pred = threshold_segment(&scored_image, tau);
            scores.push(dice(&gt, &pred)?);
        }
        let (mean, _) = mean_std(&scores);
        rows.push(EssentialityRow {
            label: format!("impute_{}", dataset.domain_names[target]),
            mean_dice: mean,
            per_image: scores,
        });
    }
    Ok(EssentialityTable {
        sensitive_domain: dataset.domain_names[sensitive_domain].clone(),
        rows,
    })
}

// ---- image dumps -------------------------------------------------------------------

/// Write a single-channel image as an 8-bit binary portable graymap,
/// min-max windowed.
pub fn write_pgm(image: &Tensor, path: &Path) -> Result<(), MetricsError> {
    let (h, w, data) = as_plane(image)?;
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}
