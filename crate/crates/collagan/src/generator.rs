//! The collaborative generator: one network that synthesizes any single
//! missing domain from the complete set of the other domains.
//!
//! Structure is a reworked U-net. Each of the N input domains feeds its own
//! encoder branch (shared architecture, separate weights); the branch
//! features are concatenated per level and skip-connected into a decoder of
//! CCNL units, each followed by a mask-conditioned channel attention (CCAM).
//! The target domain is selected by a one-hot mask that is concatenated
//! spatially to every encoder input and fed as a vector to each CCAM.

use rand::Rng;
use thiserror::Error;

use crate::params::{he_normal, BoundParams, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, TensorError, Value};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("domain {domain} out of range for {n_domains} domains")]
    DomainOutOfRange { domain: usize, n_domains: usize },
    #[error("duplicate source domain {0}")]
    DuplicateDomain(usize),
    #[error("target domain {0} must not appear among the inputs")]
    TargetAmongInputs(usize),
    #[error("expected {expected} source images, got {got}")]
    WrongInputCount { expected: usize, got: usize },
    #[error("spatial extent {extent} not divisible by {required} (levels = {levels})")]
    IndivisibleExtent { extent: usize, required: usize, levels: usize },
    #[error("backward cycle target {0} equals the forward target")]
    CycleTargetIsForwardTarget(usize),
}

/// One-hot target-domain conditioning in both of its forms: an `[B,N,H,W]`
/// spatial map for the encoder branches and a `[B,N]` vector for CCAM.
#[derive(Clone, Debug)]
pub struct TargetMask {
    domain: usize,
    n_domains: usize,
    spatial: Tensor,
    vector: Tensor,
}

impl TargetMask {
    pub fn new(
        domain: usize,
        n_domains: usize,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Self, GeneratorError> {
        if domain >= n_domains {
            return Err(GeneratorError::DomainOutOfRange { domain, n_domains });
        }
        let plane = height * width;
        let mut spatial = Tensor::zeros(&[batch, n_domains, height, width]);
        let mut vector = Tensor::zeros(&[batch, n_domains]);
        for b in 0..batch {
            let start = (b * n_domains + domain) * plane;
            spatial.data_mut()[start..start + plane].fill(1.0);
            vector.data_mut()[b * n_domains + domain] = 1.0;
        }
        Ok(TargetMask { domain, n_domains, spatial, vector })
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn spatial_form(&self) -> &Tensor {
        &self.spatial
    }

    pub fn vector_form(&self) -> &Tensor {
        &self.vector
    }
}

/// What occupies the encoder branch of the target domain, whose real image
/// is by definition unavailable.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum MissingPolicy {
    /// A zero image, keeping the branch count fixed at N.
    #[default]
    ZeroImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_domains: usize,
    /// Encoder/decoder resolution levels; spatial extents halve per level.
    pub levels: usize,
    /// Channels per convolution branch inside a CCNL unit.
    pub base_channels: usize,
    pub leaky_slope: f64,
    /// Normalization can be disabled to obtain a piecewise-linear network
    /// for optimization diagnostics.
    pub instance_norm: bool,
    pub norm_eps: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_domains: crate::DEFAULT_NUM_DOMAINS,
            levels: 3,
            base_channels: 16,
            leaky_slope: 0.2,
            instance_norm: true,
            norm_eps: 1e-5,
        }
    }
}

/// Parallel 1x1 and 3x3 convolutions, concatenated, normalized, rectified.
/// Output channel count is the sum of the two branch widths.
#[derive(Clone, Debug)]
pub struct CcnlUnit {
    w1: ParamId,
    b1: ParamId,
    w3: ParamId,
    b3: ParamId,
    c1: usize,
    c3: usize,
    slope: f64,
    instance_norm: bool,
    norm_eps: f64,
}

impl CcnlUnit {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        cfg: &GenConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (c1, c3) = (cfg.base_channels, cfg.base_channels);
        CcnlUnit {
            w1: params.add(format!("{name}/w1"), he_normal(&[c1, in_channels, 1, 1], in_channels, rng)),
            b1: params.add(format!("{name}/b1"), Tensor::zeros(&[c1])),
            w3: params.add(format!("{name}/w3"), he_normal(&[c3, in_channels, 3, 3], in_channels * 9, rng)),
            b3: params.add(format!("{name}/b3"), Tensor::zeros(&[c3])),
            c1,
            c3,
            slope: cfg.leaky_slope,
            instance_norm: cfg.instance_norm,
            norm_eps: cfg.norm_eps,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c1 + self.c3
    }

    /// `concat(conv1x1(x), conv3x3(x))` then instance norm and leaky ReLU;
    /// spatial extents are preserved.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, input: Value) -> Result<Value, GeneratorError> {
        let a = g.conv2d(input, bound.value(self.w1), bound.value(self.b1), 1, 0)?;
        let b = g.conv2d(input, bound.value(self.w3), bound.value(self.b3), 1, 1)?;
        let cat = g.concat(&[a, b], 1)?;
        let normed = if self.instance_norm {
            g.instance_norm(cat, self.norm_eps)?
        } else {
            cat
        };
        Ok(g.leaky_relu(normed, self.slope))
    }
}

/// Conditional channel attention: per-channel sigmoid gates computed by an
/// MLP over `[global-pooled features, mask vector]`.
#[derive(Clone, Debug)]
pub struct CcamUnit {
    wh: ParamId,
    bh: ParamId,
    wo: ParamId,
    bo: ParamId,
    slope: f64,
}

impl CcamUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        n_domains: usize,
        hidden: usize,
        slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let in_dim = channels + n_domains;
        CcamUnit {
            wh: params.add(format!("{name}/wh"), he_normal(&[hidden, in_dim], in_dim, rng)),
            bh: params.add(format!("{name}/bh"), Tensor::zeros(&[hidden])),
            wo: params.add(format!("{name}/wo"), he_normal(&[channels, hidden], hidden, rng)),
            bo: params.add(format!("{name}/bo"), Tensor::zeros(&[channels])),
            slope,
        }
    }

    /// Scale each feature channel by `sigma(MLP([avg_pool(features), mask]))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        features: Value,
        mask_vector: Value,
    ) -> Result<Value, GeneratorError> {
        let pooled = g.avg_pool_global(features)?;
        let joined = g.concat(&[pooled, mask_vector], 1)?;
        let hidden = g.linear(joined, bound.value(self.wh), bound.value(self.bh))?;
        let hidden = g.leaky_relu(hidden, self.slope);
        let logits = g.linear(hidden, bound.value(self.wo), bound.value(self.bo))?;
        let gates = g.sigmoid(logits);
        Ok(g.channel_scale(features, gates)?)
    }
}

struct Upsample {
    w: ParamId,
    b: ParamId,
}

/// The generator network: parameter container plus architecture layout.
pub struct GeneratorNet {
    cfg: GenConfig,
    params: ParamSet,
    /// `encoders[branch][level]`, one branch per domain.
    encoders: Vec<Vec<CcnlUnit>>,
    /// Decoder CCNL units, deepest first.
    dec_ccnl: Vec<CcnlUnit>,
    dec_ccam: Vec<CcamUnit>,
    ups: Vec<Upsample>,
    out_w: ParamId,
    out_b: ParamId,
}

impl GeneratorNet {
    pub fn new(cfg: GenConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.n_domains >= 2, "need at least two domains");
        assert!(cfg.levels >= 1, "need at least one level");
        let mut params = ParamSet::new();
        let n = cfg.n_domains;
        let unit_out = 2 * cfg.base_channels;

        let encoders: Vec<Vec<CcnlUnit>> = (0..n)
            .map(|branch| {
                (0..cfg.levels)
                    .map(|level| {
                        let in_ch = if level == 0 { 1 + n } else { unit_out };
                        CcnlUnit::new(&mut params, &format!("enc/b{branch}/l{level}"), in_ch, &cfg, rng)
                    })
                    .collect()
            })
            .collect();

        let hidden = cfg.base_channels.max(4);
        let mut dec_ccnl = Vec::new();
        let mut dec_ccam = Vec::new();
        let mut ups = Vec::new();
        // Deepest decoder unit consumes the concatenated branch features.
        dec_ccnl.push(CcnlUnit::new(&mut params, "dec/l_bottom", n * unit_out, &cfg, rng));
        dec_ccam.push(CcamUnit::new(
            &mut params,
            "dec/l_bottom/ccam",
            unit_out,
            n,
            hidden,
            cfg.leaky_slope,
            rng,
        ));
        for level in (0..cfg.levels.saturating_sub(1)).rev() {
            ups.push(Upsample {
                w: params.add(
                    format!("dec/up{level}/w"),
                    he_normal(&[unit_out, unit_out, 4, 4], unit_out * 16, rng),
                ),
                b: params.add(format!("dec/up{level}/b"), Tensor::zeros(&[unit_out])),
            });
            dec_ccnl.push(CcnlUnit::new(
                &mut params,
                &format!("dec/l{level}"),
                unit_out + n * unit_out,
                &cfg,
                rng,
            ));
            dec_ccam.push(CcamUnit::new(
                &mut params,
                &format!("dec/l{level}/ccam"),
                unit_out,
                n,
                hidden,
                cfg.leaky_slope,
                rng,
            ));
        }
        let out_w = params.add("out/w", he_normal(&[1, unit_out, 1, 1], unit_out, rng));
        let out_b = params.add("out/b", Tensor::zeros(&[1]));

        GeneratorNet { cfg, params, encoders, dec_ccnl, dec_ccam, ups, out_w, out_b }
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        self.params.bind(g, requires_grad)
    }

    fn validate_inputs(
        &self,
        g: &Graph,
        inputs: &[(usize, Value)],
        target: usize,
    ) -> Result<(usize, usize, usize), GeneratorError> {
        let n = self.cfg.n_domains;
        if target >= n {
            return Err(GeneratorError::DomainOutOfRange { domain: target, n_domains: n });
        }
        if inputs.len() != n - 1 {
            return Err(GeneratorError::WrongInputCount { expected: n - 1, got: inputs.len() });
        }
        let mut seen = vec![false; n];
        for &(domain, _) in inputs {
            if domain >= n {
                return Err(GeneratorError::DomainOutOfRange { domain, n_domains: n });
            }
            if domain == target {
                return Err(GeneratorError::TargetAmongInputs(target));
            }
            if seen[domain] {
                return Err(GeneratorError::DuplicateDomain(domain));
            }
            seen[domain] = true;
        }
        let first = g.shape(inputs[0].1).to_vec();
        for &(_, v) in inputs {
            crate::tensor::check_same_shape("impute inputs", &first, g.shape(v))
                .map_err(GeneratorError::Tensor)?;
        }
        if first.len() != 4 {
            return Err(GeneratorError::Tensor(TensorError::RankMismatch {
                op: "impute",
                expected: 4,
                got: first.len(),
            }));
        }
        let div = 1usize << (self.cfg.levels - 1);
        for &extent in &first[2..] {
            if extent % div != 0 || extent / div < 3 {
                return Err(GeneratorError::IndivisibleExtent {
                    extent,
                    required: div,
                    levels: self.cfg.levels,
                });
            }
        }
        Ok((first[0], first[2], first[3]))
    }

    /// Collaborative forward mapping inside an existing graph: synthesize the
    /// target-domain image from the `N-1` other domains. Inputs are routed to
    /// encoder branches by domain key, so supplying them in any order yields
    /// the identical output; the target branch receives a zero image per
    /// `policy`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        inputs: &[(usize, Value)],
        target: &TargetMask,
        _policy: MissingPolicy,
    ) -> Result<Value, GeneratorError> {
        let (batch, h, w) = self.validate_inputs(g, inputs, target.domain())?;
        let n = self.cfg.n_domains;
        let mask_spatial = g.constant(target.spatial_form().clone());
        let mask_vector = g.constant(target.vector_form().clone());

        // Route images to branches by domain key; the target slot stays zero.
        let mut branch_images: Vec<Option<Value>> = vec![None; n];
        for &(domain, v) in inputs {
            branch_images[domain] = Some(v);
        }

        let mut level_feats: Vec<Vec<Value>> = vec![Vec::with_capacity(n); self.cfg.levels];
        for (slot, encoder) in branch_images.iter().zip(&self.encoders) {
            let image = match slot {
                Some(v) => *v,
                None => g.constant(Tensor::zeros(&[batch, 1, h, w])),
            };
            let mut x = g.concat(&[image, mask_spatial], 1)?;
            for (level, unit) in encoder.iter().enumerate() {
                if level > 0 {
                    x = g.avg_pool2(x)?;
                }
                x = unit.forward(g, bound, x)?;
                level_feats[level].push(x);
            }
        }
        let skips: Vec<Value> = level_feats
            .iter()
            .map(|feats| g.concat(feats, 1))
            .collect::<Result<_, _>>()?;

        let mut x = self.dec_ccnl[0].forward(g, bound, skips[self.cfg.levels - 1])?;
        x = self.dec_ccam[0].forward(g, bound, x, mask_vector)?;
        for (i, up) in self.ups.iter().enumerate() {
            let level = self.cfg.levels - 2 - i;
            x = g.conv_transpose2d(x, bound.value(up.w), bound.value(up.b))?;
            x = g.concat(&[x, skips[level]], 1)?;
            x = self.dec_ccnl[i + 1].forward(g, bound, x)?;
            x = self.dec_ccam[i + 1].forward(g, bound, x, mask_vector)?;
        }
        Ok(g.conv2d(x, bound.value(self.out_w), bound.value(self.out_b), 1, 0)?)
    }

    /// Evaluation-mode imputation: builds a private graph without gradients
    /// and returns the synthesized image. Deterministic in its arguments.
    pub fn impute(
        &self,
        inputs: &[(usize, Tensor)],
        target_domain: usize,
    ) -> Result<Tensor, GeneratorError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let vals: Vec<(usize, Value)> = inputs
            .iter()
            .map(|(d, t)| (*d, g.constant(t.clone())))
            .collect();
        let shape = inputs
            .first()
            .map(|(_, t)| t.shape().to_vec())
            .unwrap_or_default();
        let (b, h, w) = if shape.len() == 4 {
            (shape[0], shape[2], shape[3])
        } else {
            (1, 0, 0)
        };
        let mask = TargetMask::new(target_domain, self.cfg.n_domains, b, h, w)?;
        let out = self.forward(&mut g, &bound, &vals, &mask, MissingPolicy::ZeroImage)?;
        Ok(g.value(out).clone())
    }

    /// One backward-cycle reconstruction: feed the forward fake together with
    /// the real images of every domain except `reconstruct_domain`, and ask
    /// the generator for `reconstruct_domain` back. For N domains there are
    /// exactly N-1 such reconstructions per forward imputation.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_cycle(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        fake: Value,
        fake_domain: usize,
        reals: &[(usize, Value)],
        reconstruct_domain: usize,
    ) -> Result<Value, GeneratorError> {
        if reconstruct_domain == fake_domain {
            return Err(GeneratorError::CycleTargetIsForwardTarget(reconstruct_domain));
        }
        let shape = g.shape(fake).to_vec();
        if shape.len() != 4 {
            return Err(GeneratorError::Tensor(TensorError::RankMismatch {
                op: "backward_cycle",
                expected: 4,
                got: shape.len(),
            }));
        }
        let mut inputs: Vec<(usize, Value)> = Vec::with_capacity(self.cfg.n_domains - 1);
        inputs.push((fake_domain, fake));
        for &(domain, v) in reals {
            if domain != reconstruct_domain && domain != fake_domain {
                inputs.push((domain, v));
            }
        }
        let mask = TargetMask::new(
            reconstruct_domain,
            self.cfg.n_domains,
            shape[0],
            shape[2],
            shape[3],
        )?;
        self.forward(g, bound, &inputs, &mask, MissingPolicy::ZeroImage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> GenConfig {
        GenConfig { levels: 2, base_channels: 2, ..GenConfig::default() }
    }

    fn random_inputs(n: usize, skip: usize, shape: &[usize], seed: u64) -> Vec<(usize, Tensor)> {
        let mut r = rng(seed);
        (0..n)
            .filter(|&d| d != skip)
            .map(|d| (d, Tensor::uniform(shape, -1.0, 1.0, &mut r)))
            .collect()
    }

    #[test]
    fn mask_is_one_hot_in_both_forms() {
        let mask = TargetMask::new(2, 4, 2, 4, 4).unwrap();
        let v = mask.vector_form();
        assert_eq!(v.shape(), &[2, 4]);
        for b in 0..2 {
            let row = &v.data()[b * 4..(b + 1) * 4];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[2], 1.0);
        }
        let s = mask.spatial_form();
        assert_eq!(s.shape(), &[2, 4, 4, 4]);
        for b in 0..2 {
            for c in 0..4 {
                let plane = &s.data()[(b * 4 + c) * 16..(b * 4 + c + 1) * 16];
                let expected = if c == 2 { 1.0 } else { 0.0 };
                assert!(plane.iter().all(|&x| x == expected));
            }
        }
    }

    #[test]
    fn mask_rejects_out_of_range_domain() {
        assert!(matches!(
            TargetMask::new(4, 4, 1, 4, 4),
            Err(GeneratorError::DomainOutOfRange { domain: 4, n_domains: 4 })
        ));
    }

    #[test]
    fn ccnl_output_channels_and_spatial_dims() {
        let cfg = GenConfig { base_channels: 3, ..GenConfig::default() };
        let mut params = ParamSet::new();
        let unit = CcnlUnit::new(&mut params, "u", 5, &cfg, &mut rng(0));
        assert_eq!(unit.out_channels(), 6);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(Tensor::uniform(&[1, 5, 16, 16], -1.0, 1.0, &mut rng(1)));
        let y = unit.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.shape(y), &[1, 6, 16, 16]);
    }

    #[test]
    fn ccnl_gradient() {
        let cfg = GenConfig { base_channels: 2, ..GenConfig::default() };
        let mut params = ParamSet::new();
        let unit = CcnlUnit::new(&mut params, "u", 2, &cfg, &mut rng(2));
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut all = vec![Tensor::uniform(&[1, 2, 5, 5], -2.0, 2.0, &mut rng(3))];
        all.extend(tensors);
        let check = check_gradients(
            &all,
            |g, vals| {
                let bound = BoundParams::from_values(vals[1..].to_vec());
                let y = unit.forward(g, &bound, vals[0]).expect("ccnl forward");
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn ccam_zero_weights_halve_features() {
        let mut params = ParamSet::new();
        let unit = CcamUnit::new(&mut params, "a", 4, 4, 4, 0.2, &mut rng(4));
        // Zero the MLP so every gate is sigmoid(0) = 0.5.
        for i in 0..params.len() {
            params
                .tensor_mut(crate::params::ParamId(i))
                .data_mut()
                .fill(0.0);
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let feats_t = Tensor::uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng(5));
        let feats = g.constant(feats_t.clone());
        let mask = TargetMask::new(1, 4, 2, 3, 3).unwrap();
        let mv = g.constant(mask.vector_form().clone());
        let y = unit.forward(&mut g, &bound, feats, mv).unwrap();
        for (out, inp) in g.value(y).data().iter().zip(feats_t.data()) {
            assert_eq!(*out, inp * 0.5);
        }
    }

    #[test]
    fn ccam_gates_lie_in_open_unit_interval_and_react_to_mask() {
        let mut params = ParamSet::new();
        let unit = CcamUnit::new(&mut params, "a", 6, 4, 4, 0.2, &mut rng(6));
        let feats_t = Tensor::uniform(&[1, 6, 4, 4], -2.0, 2.0, &mut rng(7));
        let outputs: Vec<Tensor> = (0..2)
            .map(|domain| {
                let mut g = Graph::new();
                let bound = params.bind(&mut g, false);
                let feats = g.constant(feats_t.clone());
                let mask = TargetMask::new(domain, 4, 1, 4, 4).unwrap();
                let mv = g.constant(mask.vector_form().clone());
                let y = unit.forward(&mut g, &bound, feats, mv).unwrap();
                g.value(y).clone()
            })
            .collect();
        // Gates strictly inside (0,1): |out| < |in| elementwise for nonzero input.
        for (out, inp) in outputs[0].data().iter().zip(feats_t.data()) {
            if *inp != 0.0 {
                assert!(out.abs() < inp.abs());
                assert!(out.abs() > 0.0);
            }
        }
        // Changing the target domain changes the gating.
        assert_ne!(outputs[0], outputs[1]);
    }

    #[test]
    fn impute_output_shape_matches_input_shape() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(8));
        let inputs = random_inputs(4, 0, &[1, 1, 8, 8], 9);
        let out = net.impute(&inputs, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn impute_requires_exactly_the_complement_set() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(10));
        // For target a (=0) with N=4 the input set is {b, c, d}.
        let good = random_inputs(4, 0, &[1, 1, 8, 8], 11);
        assert_eq!(good.iter().map(|(d, _)| *d).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(net.impute(&good, 0).is_ok());

        let too_few = &good[..2];
        assert!(matches!(
            net.impute(too_few, 0),
            Err(GeneratorError::WrongInputCount { expected: 3, got: 2 })
        ));

        let mut with_target = good.clone();
        with_target[0].0 = 0;
        assert!(matches!(
            net.impute(&with_target, 0),
            Err(GeneratorError::TargetAmongInputs(0))
        ));

        let mut duplicated = good.clone();
        duplicated[0].0 = 2;
        assert!(matches!(
            net.impute(&duplicated, 0),
            Err(GeneratorError::DuplicateDomain(2))
        ));
    }

    #[test]
    fn impute_is_deterministic_and_routing_invariant() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(12));
        let inputs = random_inputs(4, 2, &[1, 1, 8, 8], 13);
        let a = net.impute(&inputs, 2).unwrap();
        let b = net.impute(&inputs, 2).unwrap();
        assert_eq!(a, b);
        let mut permuted = inputs.clone();
        permuted.reverse();
        let c = net.impute(&permuted, 2).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn backward_cycle_count_and_shapes() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(14));
        let shape = [1usize, 1, 8, 8];
        let all: Vec<(usize, Tensor)> = {
            let mut r = rng(15);
            (0..4).map(|d| (d, Tensor::uniform(&shape, -1.0, 1.0, &mut r))).collect()
        };
        let sources: Vec<(usize, Tensor)> =
            all.iter().filter(|(d, _)| *d != 0).cloned().collect();

        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let source_vals: Vec<(usize, Value)> = sources
            .iter()
            .map(|(d, t)| (*d, g.constant(t.clone())))
            .collect();
        let mask = TargetMask::new(0, 4, 1, 8, 8).unwrap();
        let fake = net
            .forward(&mut g, &bound, &source_vals, &mask, MissingPolicy::ZeroImage)
            .unwrap();

        // For target a the backward set reconstructs each of b, c, d.
        let recon_domains: Vec<usize> = (0..4).filter(|&d| d != 0).collect();
        assert_eq!(recon_domains.len(), 3);
        for &kp in &recon_domains {
            let recon = net
                .backward_cycle(&mut g, &bound, fake, 0, &source_vals, kp)
                .unwrap();
            assert_eq!(g.shape(recon), &shape);
        }
        assert!(matches!(
            net.backward_cycle(&mut g, &bound, fake, 0, &source_vals, 0),
            Err(GeneratorError::CycleTargetIsForwardTarget(0))
        ));
    }

    #[test]
    fn no_dead_branches_at_initialization() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(16));
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let inputs = random_inputs(4, 1, &[1, 1, 8, 8], 17);
        let vals: Vec<(usize, Value)> = inputs
            .iter()
            .map(|(d, t)| (*d, g.constant(t.clone())))
            .collect();
        let mask = TargetMask::new(1, 4, 1, 8, 8).unwrap();
        let out = net
            .forward(&mut g, &bound, &vals, &mask, MissingPolicy::ZeroImage)
            .unwrap();
        let real = g.constant(Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng(18)));
        let diff = g.sub(out, real).unwrap();
        let loss = g.mean_abs(diff);
        g.backward(loss).unwrap();
        for (idx, (name, _)) in net.params().iter().enumerate() {
            let grad = g.grad(bound.value(ParamId(idx))).expect("grad present");
            assert!(
                grad.iter().any(|&v| v != 0.0),
                "parameter {name} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn miniature_generator_end_to_end_gradient() {
        let net = GeneratorNet::new(tiny_cfg(), &mut rng(19));
        let inputs = random_inputs(4, 3, &[1, 1, 8, 8], 20);
        let real = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng(21));
        let param_tensors: Vec<Tensor> = net.params().iter().map(|(_, t)| t.clone()).collect();
        let check = check_gradients(
            &param_tensors,
            |g, vals| {
                let bound = BoundParams::from_values(vals.to_vec());
                let ins: Vec<(usize, Value)> = inputs
                    .iter()
                    .map(|(d, t)| (*d, g.constant(t.clone())))
                    .collect();
                let mask = TargetMask::new(3, 4, 1, 8, 8).unwrap();
                let out = net
                    .forward(g, &bound, &ins, &mask, MissingPolicy::ZeroImage)
                    .expect("generator forward");
                let rv = g.constant(real.clone());
                let diff = g.sub(out, rv)?;
                Ok(g.mean_abs(diff))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "rel err {}", check.max_rel_err);
    }
}
