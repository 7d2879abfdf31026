//! Procedural multi-contrast phantom dataset.
//!
//! Every record starts from one latent scene of ellipse primitives carrying
//! tissue values in `[0,1]`, rendered into four deterministic "contrast"
//! domains through per-domain monotone intensity curves plus additive
//! structure (edge emphasis in domain a, fluid suppression in domain c).
//! One lesion class is rendered exclusively in domain d: those pixels are
//! bitwise identical to the lesion-free render in the other domains, so no
//! amount of learning can recover them from the complement set. That planted
//! asymmetry gives the leave-one-out essentiality study a positive control.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::snapshot::{Snapshot, SnapshotError};
use crate::tensor::Tensor;

/// The phantom generator renders this many contrast domains.
pub const PHANTOM_DOMAINS: usize = 4;

/// Intensity of the exclusive lesion class in the only domain showing it.
pub const EXCLUSIVE_LESION_INTENSITY: f64 = 0.95;

/// Tissue value at and above which domain c applies its suppression ramp.
pub const FLUID_THRESHOLD: f64 = 0.75;

pub const MANIFEST_MAGIC: &str = "collagan-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("need at least 3 subjects so every split is nonempty, got {0}")]
    TooFewSubjects(usize),
    #[error("need at least 1 slice per subject")]
    NoSlices,
    #[error("degenerate image size {h}x{w} (minimum 8x8)")]
    DegenerateSize { h: usize, w: usize },
    #[error("cannot normalize an all-zero image")]
    AllZero,
    #[error("cannot normalize: nonzero pixels have zero spread")]
    ZeroSpread,
    #[error("not a dataset manifest (bad magic)")]
    ManifestMagic,
    #[error("unsupported dataset manifest version {0}")]
    ManifestVersion(u64),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("dataset file {file}: {msg}")]
    BadFile { file: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io { path: path.to_path_buf(), source }
}

// ---- scene primitives ------------------------------------------------------

/// Axis-aligned-then-rotated ellipse in unit-square coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub rotation: f64,
    /// Tissue value painted inside, in `[0,1]`.
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        (xr / self.rx) * (xr / self.rx) + (yr / self.ry) * (yr / self.ry) <= 1.0
    }
}

/// Lesion visibility profile.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LesionClass {
    /// Alters the shared tissue value, hence visible in every domain.
    Shared,
    /// Rendered only in domain d; zero contrast everywhere else.
    ExclusiveD,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub ellipse: Ellipse,
    pub class: LesionClass,
}

/// One latent scene: shared anatomy plus optional lesions.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomScene {
    pub subject: usize,
    pub slice: usize,
    pub ellipses: Vec<Ellipse>,
    pub lesions: Vec<Lesion>,
}

// ---- contrast transforms ---------------------------------------------------

/// Suppression ramp applied above [`FLUID_THRESHOLD`]: maps high tissue
/// values onto a short dark decreasing segment disjoint from the base curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluidRule {
    pub threshold: f64,
    pub offset: f64,
    pub slope: f64,
}

/// Deterministic tissue-value-to-intensity mapping of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastTransform {
    pub offset: f64,
    pub slope: f64,
    pub fluid: Option<FluidRule>,
    /// Additive intensity on tissue-boundary pixels.
    pub edge_boost: f64,
    pub shows_exclusive_lesions: bool,
}

impl ContrastTransform {
    /// Intensity for tissue value `t` (background pixels stay zero and never
    /// reach this function).
    pub fn apply(&self, t: f64, edge: bool, exclusive_lesion: bool) -> f64 {
        if exclusive_lesion && self.shows_exclusive_lesions {
            return EXCLUSIVE_LESION_INTENSITY;
        }
        let base = match self.fluid {
            Some(rule) if t >= rule.threshold => rule.offset + rule.slope * (t - rule.threshold),
            _ => self.offset + self.slope * t,
        };
        if edge {
            base + self.edge_boost
        } else {
            base
        }
    }
}

/// The four default domains: a (edge-emphasized), b (inverted), c
/// (fluid-suppressed), d (mild curve, sole carrier of exclusive lesions).
pub fn default_transforms() -> [ContrastTransform; PHANTOM_DOMAINS] {
    [
        ContrastTransform {
            offset: 0.15,
            slope: 0.8,
            fluid: None,
            edge_boost: 0.2,
            shows_exclusive_lesions: false,
        },
        ContrastTransform {
            offset: 0.95,
            slope: -0.8,
            fluid: None,
            edge_boost: 0.0,
            shows_exclusive_lesions: false,
        },
        ContrastTransform {
            offset: 0.2,
            slope: 0.6,
            fluid: Some(FluidRule { threshold: FLUID_THRESHOLD, offset: 0.12, slope: -0.1 }),
            edge_boost: 0.0,
            shows_exclusive_lesions: false,
        },
        ContrastTransform {
            offset: 0.1,
            slope: 0.5,
            fluid: None,
            edge_boost: 0.0,
            shows_exclusive_lesions: true,
        },
    ]
}

pub fn default_domain_names() -> Vec<String> {
    vec!["a".into(), "b".into(), "c".into(), "d".into()]
}

// ---- records ----------------------------------------------------------------

/// One aligned record: the N contrast renders of a single scene plus the
/// ground-truth exclusive-lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub subject: usize,
    pub slice: usize,
    pub domains: Vec<String>,
    /// N images of shape `[1, H, W]`, index-aligned with `domains`.
    pub images: Vec<Tensor>,
    /// 0/1 mask of exclusive-lesion pixels, shape `[1, H, W]`.
    pub lesion_mask: Tensor,
}

impl DomainSet {
    pub fn height(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images[0].shape()[2]
    }

    /// Copy with every image normalized to unit nonzero-pixel spread.
    pub fn normalized(&self) -> Result<DomainSet, PhantomError> {
        let images = self
            .images
            .iter()
            .map(normalize)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DomainSet { images, ..self.clone() })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectEntry {
    pub subject: usize,
    pub slices: usize,
    pub split: Split,
    pub file: String,
}

/// A generated or loaded dataset: aligned records plus the subject-wise
/// split bookkeeping that prevents any subject from crossing splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domain_names: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
    pub sets: Vec<DomainSet>,
}

impl Dataset {
    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn split_of(&self, subject: usize) -> Option<Split> {
        self.subjects.iter().find(|s| s.subject == subject).map(|s| s.split)
    }

    pub fn sets_in(&self, split: Split) -> Vec<&DomainSet> {
        self.sets
            .iter()
            .filter(|set| self.split_of(set.subject) == Some(split))
            .collect()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|d| d == name)
    }
}

// ---- generation --------------------------------------------------------------

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((subject as u64) << 32);
    rng
}

fn slice_rng(seed: u64, subject: usize, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subject as u64) << 32) | (slice as u64 + 1));
    rng
}

/// Base anatomy shared by all slices of one subject.
struct SubjectAnatomy {
    head: Ellipse,
    tissues: Vec<Ellipse>,
    fluids: Vec<Ellipse>,
}

fn subject_anatomy(rng: &mut ChaCha8Rng) -> SubjectAnatomy {
    let head = Ellipse {
        cx: 0.5 + rng.gen_range(-0.02..0.02),
        cy: 0.5 + rng.gen_range(-0.02..0.02),
        rx: rng.gen_range(0.36..0.42),
        ry: rng.gen_range(0.40..0.46),
        rotation: rng.gen_range(-0.2..0.2),
        value: rng.gen_range(0.12..0.18),
    };
    let n_tissue = rng.gen_range(3..=5);
    let tissues = (0..n_tissue)
        .map(|_| Ellipse {
            cx: head.cx + rng.gen_range(-0.18..0.18),
            cy: head.cy + rng.gen_range(-0.2..0.2),
            rx: rng.gen_range(0.06..0.2),
            ry: rng.gen_range(0.06..0.2),
            rotation: rng.gen_range(-1.5..1.5),
            value: rng.gen_range(0.25..0.7),
        })
        .collect();
    let n_fluid = rng.gen_range(1..=2);
    let fluids = (0..n_fluid)
        .map(|_| Ellipse {
            cx: head.cx + rng.gen_range(-0.1..0.1),
            cy: head.cy + rng.gen_range(-0.12..0.12),
            rx: rng.gen_range(0.03..0.09),
            ry: rng.gen_range(0.03..0.09),
            rotation: rng.gen_range(-1.5..1.5),
            value: rng.gen_range(0.78..0.94),
        })
        .collect();
    SubjectAnatomy { head, tissues, fluids }
}

fn jitter(e: &Ellipse, rng: &mut ChaCha8Rng) -> Ellipse {
    Ellipse {
        cx: e.cx + rng.gen_range(-0.015..0.015),
        cy: e.cy + rng.gen_range(-0.015..0.015),
        rx: (e.rx * rng.gen_range(0.92..1.08)).max(0.02),
        ry: (e.ry * rng.gen_range(0.92..1.08)).max(0.02),
        rotation: e.rotation + rng.gen_range(-0.1..0.1),
        value: e.value,
    }
}

/// Scene for one (subject, slice): jittered subject anatomy plus per-slice
/// lesions. Deterministic in `(seed, subject, slice)`.
pub fn generate_scene(seed: u64, subject: usize, slice: usize) -> PhantomScene {
    let anatomy = subject_anatomy(&mut subject_rng(seed, subject));
    let mut rng = slice_rng(seed, subject, slice);
    let mut ellipses = vec![jitter(&anatomy.head, &mut rng)];
    let head = ellipses[0].clone();
    for t in &anatomy.tissues {
        ellipses.push(jitter(t, &mut rng));
    }
    for f in &anatomy.fluids {
        ellipses.push(jitter(f, &mut rng));
    }
    let mut lesions = Vec::new();
    if rng.gen_bool(0.4) {
        lesions.push(Lesion {
            ellipse: Ellipse {
                cx: head.cx + rng.gen_range(-0.15..0.15),
                cy: head.cy + rng.gen_range(-0.15..0.15),
                rx: rng.gen_range(0.025..0.05),
                ry: rng.gen_range(0.025..0.05),
                rotation: rng.gen_range(-1.5..1.5),
                value: rng.gen_range(0.3..0.7),
            },
            class: LesionClass::Shared,
        });
    }
    if rng.gen_bool(0.5) {
        let count = rng.gen_range(1..=2);
        for _ in 0..count {
            lesions.push(Lesion {
                ellipse: Ellipse {
                    cx: head.cx + rng.gen_range(-0.16..0.16),
                    cy: head.cy + rng.gen_range(-0.16..0.16),
                    rx: rng.gen_range(0.03..0.07),
                    ry: rng.gen_range(0.03..0.07),
                    rotation: rng.gen_range(-1.5..1.5),
                    value: 0.0,
                },
                class: LesionClass::ExclusiveD,
            });
        }
    }
    PhantomScene { subject, slice, ellipses, lesions }
}

/// Rasterize a scene into its N contrast images plus the exclusive-lesion
/// mask. Pixels outside every primitive stay exactly zero in every domain.
pub fn render_scene(
    scene: &PhantomScene,
    height: usize,
    width: usize,
    transforms: &[ContrastTransform; PHANTOM_DOMAINS],
) -> (Vec<Tensor>, Tensor) {
    let n_px = height * width;
    // Latent tissue map: painter's order, shared lesions on top.
    let mut tissue = vec![0.0f64; n_px];
    let mut inside = vec![false; n_px];
    let mut exclusive = vec![false; n_px];
    for i in 0..height {
        for j in 0..width {
            let x = (j as f64 + 0.5) / width as f64;
            let y = (i as f64 + 0.5) / height as f64;
            let idx = i * width + j;
            for e in &scene.ellipses {
                if e.contains(x, y) {
                    tissue[idx] = e.value;
                    inside[idx] = true;
                }
            }
            for l in &scene.lesions {
                if inside[idx] && l.ellipse.contains(x, y) {
                    match l.class {
                        LesionClass::Shared => tissue[idx] = l.ellipse.value,
                        LesionClass::ExclusiveD => exclusive[idx] = true,
                    }
                }
            }
        }
    }
    // Tissue boundaries: any 4-neighbor with a differing tissue value.
    let mut edge = vec![false; n_px];
    for i in 0..height {
        for j in 0..width {
            let idx = i * width + j;
            if !inside[idx] {
                continue;
            }
            let t = tissue[idx];
            let mut differs = false;
            if i > 0 {
                differs |= tissue[idx - width] != t;
            }
            if i + 1 < height {
                differs |= tissue[idx + width] != t;
            }
            if j > 0 {
                differs |= tissue[idx - 1] != t;
            }
            if j + 1 < width {
                differs |= tissue[idx + 1] != t;
            }
            edge[idx] = differs;
        }
    }
    let images = transforms
        .iter()
        .map(|tf| {
            let data = (0..n_px)
                .map(|idx| {
                    if inside[idx] {
                        tf.apply(tissue[idx], edge[idx], exclusive[idx])
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::new(vec![1, height, width], data).expect("render shape")
        })
        .collect();
    let mask = Tensor::new(
        vec![1, height, width],
        exclusive.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask shape");
    (images, mask)
}

/// Subject-wise 8:1:1 split; validation and test each take at least one
/// subject and no subject crosses splits.
fn split_for(subject: usize, n_subjects: usize) -> Split {
    let n_val = ((n_subjects + 5) / 10).max(1);
    let n_test = ((n_subjects + 5) / 10).max(1);
    let n_train = n_subjects - n_val - n_test;
    if subject < n_train {
        Split::Train
    } else if subject < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Deterministically generate the full phantom dataset.
pub fn generate_dataset(
    n_subjects: usize,
    slices_per_subject: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset, PhantomError> {
    if n_subjects < 3 {
        return Err(PhantomError::TooFewSubjects(n_subjects));
    }
    if slices_per_subject == 0 {
        return Err(PhantomError::NoSlices);
    }
    if height < 8 || width < 8 {
        return Err(PhantomError::DegenerateSize { h: height, w: width });
    }
    let transforms = default_transforms();
    let domain_names = default_domain_names();
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut sets = Vec::with_capacity(n_subjects * slices_per_subject);
    for subject in 0..n_subjects {
        subjects.push(SubjectEntry {
            subject,
            slices: slices_per_subject,
            split: split_for(subject, n_subjects),
            file: format!("subject_{subject:04}.snap"),
        });
        for slice in 0..slices_per_subject {
            let scene = generate_scene(seed, subject, slice);
            let (images, lesion_mask) = render_scene(&scene, height, width, &transforms);
            sets.push(DomainSet {
                subject,
                slice,
                domains: domain_names.clone(),
                images,
                lesion_mask,
            });
        }
    }
    Ok(Dataset { seed, height, width, domain_names, subjects, sets })
}

// ---- preprocessing & augmentation ---------------------------------------------

/// Population standard deviation over strictly nonzero pixels.
pub fn nonzero_std(image: &Tensor) -> Result<f64, PhantomError> {
    let nonzero: Vec<f64> = image.data().iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return Err(PhantomError::AllZero);
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(PhantomError::ZeroSpread);
    }
    Ok(std)
}

/// Scale an image so its nonzero pixels have unit standard deviation; zero
/// pixels stay exactly zero. Already-normalized inputs are returned
/// unchanged, which makes the operation bitwise idempotent.
pub fn normalize(image: &Tensor) -> Result<Tensor, PhantomError> {
    let std = nonzero_std(image)?;
    if (std - 1.0).abs() <= 1e-12 {
        return Ok(image.clone());
    }
    let inv = 1.0 / std;
    Ok(image.map(|v| v * inv))
}

/// One augmentation draw: `(intensity scale, lateral flip)`.
pub fn draw_augment(rng: &mut impl Rng) -> (f64, bool) {
    let scale = rng.gen_range(0.9..1.1);
    let flip = rng.gen_bool(0.5);
    (scale, flip)
}

fn flip_lr(t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let w = *shape.last().expect("non-empty shape");
    let rows = t.numel() / w;
    let mut data = vec![0.0; t.numel()];
    for r in 0..rows {
        for j in 0..w {
            data[r * w + j] = t.data()[r * w + (w - 1 - j)];
        }
    }
    Tensor::new(shape, data).expect("flip shape")
}

/// Apply a fixed augmentation: the same intensity scale to all N images and
/// the same lateral flip to images and lesion mask, preserving alignment.
pub fn apply_augment(set: &DomainSet, scale: f64, flip: bool) -> DomainSet {
    let images = set
        .images
        .iter()
        .map(|img| {
            let scaled = img.map(|v| v * scale);
            if flip {
                flip_lr(&scaled)
            } else {
                scaled
            }
        })
        .collect();
    let lesion_mask = if flip { flip_lr(&set.lesion_mask) } else { set.lesion_mask.clone() };
    DomainSet { images, lesion_mask, ..set.clone() }
}

/// Randomized augmentation: intensity scale uniform in `[0.9, 1.1)` and a
/// lateral flip with probability one half, identical across all N images.
pub fn augment(set: &DomainSet, rng: &mut impl Rng) -> DomainSet {
    let (scale, flip) = draw_augment(rng);
    apply_augment(set, scale, flip)
}

// ---- persistence ----------------------------------------------------------------

fn manifest_text(ds: &Dataset) -> String {
    let mut out = format!("{MANIFEST_MAGIC} {MANIFEST_VERSION}\n");
    out.push_str(&format!("seed {}\n", ds.seed));
    out.push_str(&format!("size {} {}\n", ds.height, ds.width));
    out.push_str(&format!("domains {}\n", ds.domain_names.join(" ")));
    for s in &ds.subjects {
        out.push_str(&format!(
            "subject {} slices {} split {} file {}\n",
            s.subject, s.slices, s.split, s.file
        ));
    }
    out
}

/// Parsed manifest header; tensors live in the per-subject files.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domain_names: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

/// Parse a dataset manifest. Input is untrusted text; every line is
/// validated and errors carry the offending line number.
pub fn parse_manifest(text: &str) -> Result<Manifest, PhantomError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(PhantomError::ManifestMagic)?;
    let mut head = first.split_whitespace();
    if head.next() != Some(MANIFEST_MAGIC) {
        return Err(PhantomError::ManifestMagic);
    }
    let version: u64 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(PhantomError::ManifestMagic)?;
    if version != MANIFEST_VERSION as u64 {
        return Err(PhantomError::ManifestVersion(version));
    }
    let bad = |line: usize, msg: &str| PhantomError::Manifest { line: line + 1, msg: msg.to_string() };

    let mut seed = None;
    let mut size = None;
    let mut domain_names: Option<Vec<String>> = None;
    let mut subjects = Vec::new();
    for (ln, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("seed") => {
                let v = tok
                    .next()
                    .and_then(|v| v.parse::<u64>().ok())
                    .ok_or_else(|| bad(ln, "expected `seed <u64>`"))?;
                seed = Some(v);
            }
            Some("size") => {
                let h = tok.next().and_then(|v| v.parse::<usize>().ok());
                let w = tok.next().and_then(|v| v.parse::<usize>().ok());
                match (h, w) {
                    (Some(h), Some(w)) if h >= 1 && w >= 1 => size = Some((h, w)),
                    _ => return Err(bad(ln, "expected `size <h> <w>`")),
                }
            }
            Some("domains") => {
                let names: Vec<String> = tok.map(str::to_string).collect();
                if names.is_empty() {
                    return Err(bad(ln, "expected at least one domain name"));
                }
                domain_names = Some(names);
            }
            Some("subject") => {
                let id = tok.next().and_then(|v| v.parse::<usize>().ok());
                let slices = match (tok.next(), tok.next()) {
                    (Some("slices"), Some(v)) => v.parse::<usize>().ok(),
                    _ => None,
                };
                let split = match (tok.next(), tok.next()) {
                    (Some("split"), Some(v)) => v.parse::<Split>().ok(),
                    _ => None,
                };
                let file = match (tok.next(), tok.next()) {
                    (Some("file"), Some(v)) => Some(v.to_string()),
                    _ => None,
                };
                match (id, slices, split, file) {
                    (Some(subject), Some(slices), Some(split), Some(file)) => {
                        if subjects.iter().any(|s: &SubjectEntry| s.subject == subject) {
                            return Err(bad(ln, "duplicate subject id"));
                        }
                        subjects.push(SubjectEntry { subject, slices, split, file });
                    }
                    _ => {
                        return Err(bad(
                            ln,
                            "expected `subject <id> slices <n> split <train|val|test> file <name>`",
                        ))
                    }
                }
            }
            Some(other) => {
                return Err(bad(ln, &format!("unknown directive {other:?}")));
            }
            None => unreachable!("empty lines are skipped"),
        }
    }
    let seed = seed.ok_or_else(|| bad(0, "missing `seed` line"))?;
    let (height, width) = size.ok_or_else(|| bad(0, "missing `size` line"))?;
    let domain_names = domain_names.ok_or_else(|| bad(0, "missing `domains` line"))?;
    if subjects.is_empty() {
        return Err(bad(0, "no subject lines"));
    }
    Ok(Manifest { seed, height, width, domain_names, subjects })
}

/// Write the dataset as a manifest plus one snapshot file per subject.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), PhantomError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest_text(ds)).map_err(io_err(&manifest_path))?;
    for entry in &ds.subjects {
        let mut snap = Snapshot::new();
        for set in ds.sets.iter().filter(|s| s.subject == entry.subject) {
            for (name, image) in set.domains.iter().zip(&set.images) {
                snap.insert(format!("z{:03}/{name}", set.slice), image.clone());
            }
            snap.insert(format!("z{:03}/lesion_mask", set.slice), set.lesion_mask.clone());
        }
        let path = dir.join(&entry.file);
        snap.write_file(&path)?;
    }
    Ok(())
}

/// Load a dataset written by [`save_dataset`]; `load(save(x)) == x` bitwise.
pub fn load_dataset(dir: &Path) -> Result<Dataset, PhantomError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest = parse_manifest(&text)?;
    let mut sets = Vec::new();
    for entry in &manifest.subjects {
        let path = dir.join(&entry.file);
        let snap = Snapshot::read_file(&path)?;
        for slice in 0..entry.slices {
            let images = manifest
                .domain_names
                .iter()
                .map(|name| Ok(snap.get(&format!("z{slice:03}/{name}"))?.clone()))
                .collect::<Result<Vec<_>, PhantomError>>()?;
            let lesion_mask = snap.get(&format!("z{slice:03}/lesion_mask"))?.clone();
            let expected = [1usize, manifest.height, manifest.width];
            for img in images.iter().chain(std::iter::once(&lesion_mask)) {
                if img.shape() != expected {
                    return Err(PhantomError::BadFile {
                        file: entry.file.clone(),
                        msg: format!(
                            "tensor shape {:?} does not match manifest size {:?}",
                            img.shape(),
                            expected
                        ),
                    });
                }
            }
            if lesion_mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(PhantomError::BadFile {
                    file: entry.file.clone(),
                    msg: "lesion mask is not binary".to_string(),
                });
            }
            sets.push(DomainSet {
                subject: entry.subject,
                slice,
                domains: manifest.domain_names.clone(),
                images,
                lesion_mask,
            });
        }
    }
    Ok(Dataset {
        seed: manifest.seed,
        height: manifest.height,
        width: manifest.width,
        domain_names: manifest.domain_names,
        subjects: manifest.subjects,
        sets,
    })
}
