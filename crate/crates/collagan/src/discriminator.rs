//! Single discriminator with three multi-resolution feature branches, a
//! shared trunk, and two output heads: a PatchGAN real/fake source map and
//! an N-way domain classifier.
//!
//! Branch one extracts features at full resolution and downsizes; branch two
//! works on the input downsampled to quarter resolution by two average
//! pools; branch three halves the scale twice while extracting. All three
//! emit spatially aligned maps at H/4 x W/4 which are concatenated into the
//! trunk shared by both heads.

use rand::Rng;
use thiserror::Error;

use crate::params::{he_normal, BoundParams, ParamId, ParamSet};
use crate::tensor::{Graph, Tensor, TensorError, Value};

#[derive(Debug, Error)]
pub enum DiscriminatorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("spatial extents {h}x{w} must be divisible by 8")]
    IndivisibleExtent { h: usize, w: usize },
    #[error("patch target value {0} must be 0 or 1")]
    BadTargetValue(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub n_domains: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            n_domains: crate::DEFAULT_NUM_DOMAINS,
            base_channels: 8,
            leaky_slope: 0.2,
            dropout_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvLayer {
            w: params.add(
                format!("{name}/w"),
                he_normal(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            ),
            b: params.add(format!("{name}/b"), Tensor::zeros(&[out_ch])),
            stride,
            padding,
        }
    }

    fn apply(&self, g: &mut Graph, bound: &BoundParams, x: Value) -> Result<Value, TensorError> {
        g.conv2d(x, bound.value(self.w), bound.value(self.b), self.stride, self.padding)
    }
}

/// The discriminator network: parameter container plus architecture layout.
pub struct DiscriminatorNet {
    cfg: DiscConfig,
    params: ParamSet,
    branch1: Vec<ConvLayer>,
    branch2: Vec<ConvLayer>,
    branch3: Vec<ConvLayer>,
    trunk: Vec<ConvLayer>,
    source_head: ConvLayer,
    class_w: ParamId,
    class_b: ParamId,
}

impl DiscriminatorNet {
    pub fn new(cfg: DiscConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let b = cfg.base_channels;
        let branch1 = vec![
            ConvLayer::new(&mut params, "br1/c0", 1, b, 3, 1, 1, rng),
            ConvLayer::new(&mut params, "br1/c1", b, 2 * b, 4, 2, 1, rng),
            ConvLayer::new(&mut params, "br1/c2", 2 * b, 4 * b, 4, 2, 1, rng),
        ];
        let branch2 = vec![
            ConvLayer::new(&mut params, "br2/c0", 1, 2 * b, 3, 1, 1, rng),
            ConvLayer::new(&mut params, "br2/c1", 2 * b, 4 * b, 3, 1, 1, rng),
        ];
        let branch3 = vec![
            ConvLayer::new(&mut params, "br3/c0", 1, 2 * b, 4, 2, 1, rng),
            ConvLayer::new(&mut params, "br3/c1", 2 * b, 4 * b, 4, 2, 1, rng),
        ];
        // Three conv + leaky stages; the first one halves H/4 to H/8 so a
        // 64x64 input yields an 8x8 patch map.
        let trunk = vec![
            ConvLayer::new(&mut params, "trunk/c0", 12 * b, 8 * b, 4, 2, 1, rng),
            ConvLayer::new(&mut params, "trunk/c1", 8 * b, 8 * b, 3, 1, 1, rng),
            ConvLayer::new(&mut params, "trunk/c2", 8 * b, 8 * b, 3, 1, 1, rng),
        ];
        let source_head = ConvLayer::new(&mut params, "src/c0", 8 * b, 1, 3, 1, 1, rng);
        let class_w = params.add(
            "clsf/w",
            he_normal(&[cfg.n_domains, 8 * b], 8 * b, rng),
        );
        let class_b = params.add("clsf/b", Tensor::zeros(&[cfg.n_domains]));
        DiscriminatorNet {
            cfg,
            params,
            branch1,
            branch2,
            branch3,
            trunk,
            source_head,
            class_w,
            class_b,
        }
    }

    pub fn config(&self) -> &DiscConfig {
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

    /// The documented quarter-resolution path feeding branch two.
    pub fn quarter_resolution(g: &mut Graph, image: Value) -> Result<Value, TensorError> {
        let half = g.avg_pool2(image)?;
        g.avg_pool2(half)
    }

    fn branch(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        layers: &[ConvLayer],
        mut x: Value,
    ) -> Result<Value, TensorError> {
        for layer in layers {
            x = layer.apply(g, bound, x)?;
            x = g.leaky_relu(x, self.cfg.leaky_slope);
        }
        Ok(x)
    }

    /// Score one image: an unbounded PatchGAN source map plus N-way domain
    /// logits. Dropout on the trunk features fires only when `training`.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        image: Value,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Value, Value), DiscriminatorError> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::RankMismatch { op: "discriminate", expected: 4, got: shape.len() }.into());
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(DiscriminatorError::IndivisibleExtent { h, w });
        }
        let f1 = self.branch(g, bound, &self.branch1, image)?;
        let quarter = Self::quarter_resolution(g, image)?;
        let f2 = self.branch(g, bound, &self.branch2, quarter)?;
        let f3 = self.branch(g, bound, &self.branch3, image)?;
        let merged = g.concat(&[f1, f2, f3], 1)?;

        let mut x = self.trunk[0].apply(g, bound, merged)?;
        x = g.leaky_relu(x, self.cfg.leaky_slope);
        x = g.dropout(x, self.cfg.dropout_rate, training, rng)?;
        for layer in &self.trunk[1..] {
            x = layer.apply(g, bound, x)?;
            x = g.leaky_relu(x, self.cfg.leaky_slope);
        }

        let patch = self.source_head.apply(g, bound, x)?;
        let pooled = g.avg_pool_global(x)?;
        let logits = g.linear(pooled, bound.value(self.class_w), bound.value(self.class_b))?;
        Ok((patch, logits))
    }
}

/// Constant LSGAN regression target matching a patch-map shape.
pub fn patchgan_target(shape: &[usize], value: f64) -> Result<Tensor, DiscriminatorError> {
    if value != 0.0 && value != 1.0 {
        return Err(DiscriminatorError::BadTargetValue(value));
    }
    Ok(Tensor::full(shape, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn net(seed: u64) -> DiscriminatorNet {
        DiscriminatorNet::new(DiscConfig::default(), &mut rng(seed))
    }

    #[test]
    fn patch_map_shape_for_64x64_is_8x8() {
        let d = net(0);
        let mut g = Graph::new();
        let bound = d.bind(&mut g, false);
        let img = g.constant(Tensor::uniform(&[1, 1, 64, 64], -1.0, 1.0, &mut rng(1)));
        let (patch, logits) = d.discriminate(&mut g, &bound, img, false, &mut rng(2)).unwrap();
        assert_eq!(g.shape(patch), &[1, 1, 8, 8]);
        assert_eq!(g.shape(logits), &[1, 4]);
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let d = net(3);
        let mut g = Graph::new();
        let bound = d.bind(&mut g, false);
        let img = g.constant(Tensor::zeros(&[1, 1, 60, 60]));
        assert!(matches!(
            d.discriminate(&mut g, &bound, img, false, &mut rng(4)),
            Err(DiscriminatorError::IndivisibleExtent { h: 60, w: 60 })
        ));
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let d = net(5);
        let image = Tensor::uniform(&[2, 1, 16, 16], -1.0, 1.0, &mut rng(6));
        let run = |seed: u64| {
            let mut g = Graph::new();
            let bound = d.bind(&mut g, false);
            let img = g.constant(image.clone());
            let (patch, logits) = d.discriminate(&mut g, &bound, img, false, &mut rng(seed)).unwrap();
            (g.value(patch).clone(), g.value(logits).clone())
        };
        // Different rngs must not matter in eval mode.
        assert_eq!(run(7), run(8));
    }

    #[test]
    fn training_mode_dropout_changes_outputs() {
        let d = net(9);
        let image = Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut rng(10));
        let mut g = Graph::new();
        let bound = d.bind(&mut g, false);
        let img = g.constant(image);
        let (p1, _) = d.discriminate(&mut g, &bound, img, true, &mut rng(11)).unwrap();
        let (p2, _) = d.discriminate(&mut g, &bound, img, true, &mut rng(12)).unwrap();
        assert_ne!(g.value(p1), g.value(p2));
    }

    #[test]
    fn quarter_resolution_matches_two_average_pools() {
        let image = Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut rng(13));
        let mut g = Graph::new();
        let img = g.constant(image);
        let a = DiscriminatorNet::quarter_resolution(&mut g, img).unwrap();
        let p1 = g.avg_pool2(img).unwrap();
        let p2 = g.avg_pool2(p1).unwrap();
        assert_eq!(g.value(a), g.value(p2));
    }

    #[test]
    fn patchgan_targets() {
        let ones = patchgan_target(&[1, 1, 8, 8], 1.0).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let zeros = patchgan_target(&[1, 1, 8, 8], 0.0).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            patchgan_target(&[1], 0.5),
            Err(DiscriminatorError::BadTargetValue(_))
        ));
        // mean squared distance of a map to itself is zero
        let mut g = Graph::new();
        let a = g.constant(ones.clone());
        let b = g.constant(ones);
        let d = g.sub(a, b).unwrap();
        let m = g.mean_sq(d);
        assert_eq!(g.value(m).item(), 0.0);
    }

    #[test]
    fn both_heads_share_trunk_gradients() {
        let d = net(14);
        let image = Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut rng(15));
        let grads_for = |head: usize| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let bound = d.bind(&mut g, true);
            let img = g.constant(image.clone());
            let (patch, logits) = d.discriminate(&mut g, &bound, img, false, &mut rng(16)).unwrap();
            let loss = if head == 0 {
                g.mean_sq(patch)
            } else {
                g.softmax_cross_entropy(logits, 1).unwrap()
            };
            g.backward(loss).unwrap();
            d.params().collect_grads(&g, &bound)
        };
        let source_grads = grads_for(0);
        let class_grads = grads_for(1);
        // Every trunk and branch parameter participates in both heads.
        for (idx, (name, _)) in d.params().iter().enumerate() {
            if name.starts_with("trunk") || name.starts_with("br") {
                assert!(
                    source_grads[idx].iter().any(|&v| v != 0.0),
                    "{name} dead for source head"
                );
                assert!(
                    class_grads[idx].iter().any(|&v| v != 0.0),
                    "{name} dead for class head"
                );
            }
        }
        // Head-specific parameters stay isolated from the other head.
        for (idx, (name, _)) in d.params().iter().enumerate() {
            if name.starts_with("src") {
                assert!(class_grads[idx].iter().all(|&v| v == 0.0));
            }
            if name.starts_with("clsf") {
                assert!(source_grads[idx].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fresh_classifier_is_chance_level() {
        let d = net(17);
        let mut r = rng(18);
        let samples = 1000;
        let labels: Vec<usize> = (0..samples).map(|_| r.gen_range(0..4usize)).collect();
        let batch = Tensor::uniform(&[samples, 1, 8, 8], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let bound = d.bind(&mut g, false);
        let img = g.constant(batch);
        let (_, logits) = d.discriminate(&mut g, &bound, img, false, &mut rng(19)).unwrap();
        let rows = g.value(logits).data();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &label)| {
                let row = &rows[i * 4..(i + 1) * 4];
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                argmax == label
            })
            .count();
        let acc = correct as f64 / samples as f64;
        // 4.9-sigma binomial band around 1/N.
        let sigma = (0.25 * 0.75 / samples as f64).sqrt();
        assert!((acc - 0.25).abs() < 4.9 * sigma, "accuracy {acc}");
    }

    #[test]
    fn end_to_end_gradient_through_discriminator() {
        // Finite differences against the input and the first-layer weights
        // exercise the full backward depth; per-layer weight gradients are
        // covered by the op-level checks.
        let cfg = DiscConfig { base_channels: 2, ..DiscConfig::default() };
        let d = DiscriminatorNet::new(cfg, &mut rng(20));
        let image = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng(21));
        let first_w = d.params().iter().next().unwrap().1.clone();
        let check = crate::gradcheck::check_gradients(
            &[image, first_w],
            |g, vals| {
                let mut leaves: Vec<Value> =
                    d.params().iter().map(|(_, t)| g.constant(t.clone())).collect();
                leaves[0] = vals[1];
                let bound = BoundParams::from_values(leaves);
                let (patch, logits) = d
                    .discriminate(g, &bound, vals[0], false, &mut rng(22))
                    .expect("discriminate");
                let lp = g.mean_sq(patch);
                let lc = g.softmax_cross_entropy(logits, 2)?;
                g.add(lp, lc)
            },
            crate::gradcheck::DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "rel err {}", check.max_rel_err);
    }
}
