//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records one forward computation as a topologically ordered
//! list of op nodes. [`Graph::backward`] walks the list in reverse, seeding
//! the scalar loss with 1 and accumulating gradients additively across
//! fan-out. Leaf nodes created with `requires_grad` keep a persistent grad
//! buffer; repeated backward calls without [`Graph::zero_grad`] accumulate.
//!
//! Convolution kernels parallelize over independent output planes via rayon;
//! each output element is reduced by exactly one task in a fixed order, so
//! results are bitwise independent of thread count.

use rand::Rng;
use rayon::prelude::*;

use super::{check_same_shape, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Value,
        weight: Value,
        bias: Value,
    },
    InstanceNorm {
        input: Value,
        eps: f64,
    },
    LeakyRelu {
        input: Value,
        slope: f64,
    },
    Sigmoid {
        input: Value,
    },
    Log {
        input: Value,
    },
    AvgPoolGlobal {
        input: Value,
    },
    AvgPool2 {
        input: Value,
    },
    Concat {
        inputs: Vec<Value>,
        axis: usize,
    },
    Slice {
        input: Value,
        axis: usize,
        start: usize,
    },
    Linear {
        input: Value,
        weight: Value,
        bias: Value,
    },
    Dropout {
        input: Value,
        keep_scale: f64,
        mask: Vec<bool>,
    },
    Add {
        a: Value,
        b: Value,
    },
    Sub {
        a: Value,
        b: Value,
    },
    Mul {
        a: Value,
        b: Value,
    },
    Div {
        a: Value,
        b: Value,
    },
    AddScalar {
        input: Value,
    },
    MulScalar {
        input: Value,
        factor: f64,
    },
    Mean {
        input: Value,
    },
    Sum {
        input: Value,
    },
    MeanAbs {
        input: Value,
    },
    MeanSq {
        input: Value,
    },
    ReduceMax {
        input: Value,
        arg: usize,
    },
    ReduceMin {
        input: Value,
        arg: usize,
    },
    ClampMin {
        input: Value,
        min: f64,
    },
    SoftmaxXent {
        logits: Value,
        class: usize,
    },
    ChannelScale {
        features: Value,
        scale: Value,
    },
    ReflectPad {
        input: Value,
        pad: usize,
    },
    BoxMean {
        input: Value,
        window: usize,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode differentiation graph over [`Tensor`] values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a leaf value. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Value {
        self.push(tensor, Op::Leaf, requires_grad, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Value {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward has run.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self, v: Value) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
            requires_grad,
            grad: None,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn t(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    // ---- forward ops -----------------------------------------------------

    /// 2-D cross-correlation. `input [B,Cin,H,W]`, `weight [Cout,Cin,kh,kw]`,
    /// `bias [Cout]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
        stride: usize,
        padding: usize,
    ) -> Result<Value, TensorError> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d input", expected: 4, got: xs.len() });
        }
        if ws.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv2d weight", expected: 4, got: ws.len() });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(TensorError::DimMismatch { op: "conv2d", axis: 1, left: cin, right: wcin });
        }
        if bs != [cout] {
            return Err(TensorError::DimMismatch { op: "conv2d bias", axis: 0, left: cout, right: bs[0] });
        }
        for &k in &[kh, kw] {
            if !matches!(k, 1 | 3 | 4) {
                return Err(TensorError::Unsupported { op: "conv2d", what: "kernel", value: k });
            }
        }
        if !matches!(stride, 1 | 2) {
            return Err(TensorError::Unsupported { op: "conv2d", what: "stride", value: stride });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::SpatialTooSmall { op: "conv2d", axis: 2, extent: h, min: kh });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let x = self.t(input).data();
        let wt = self.t(weight).data();
        let bt = self.t(bias).data();
        let mut out = vec![0.0; b * cout * ho * wo];
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, op)| {
            let bi = plane / cout;
            let co = plane % cout;
            op.iter_mut().for_each(|v| *v = bt[co]);
            for ci in 0..cin {
                let xplane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for dkh in 0..kh {
                    let Some((oh_lo, oh_hi)) = conv_span(h, ho, stride, padding, dkh) else {
                        continue;
                    };
                    for dkw in 0..kw {
                        let wv = wt[((co * cin + ci) * kh + dkh) * kw + dkw];
                        let Some((ow_lo, ow_hi)) = conv_span(w, wo, stride, padding, dkw) else {
                            continue;
                        };
                        let len = ow_hi - ow_lo + 1;
                        let iw_lo = ow_lo * stride + dkw - padding;
                        for oh in oh_lo..=oh_hi {
                            let ih = oh * stride + dkh - padding;
                            let xrow = &xplane[ih * w..(ih + 1) * w];
                            let orow = &mut op[oh * wo + ow_lo..oh * wo + ow_lo + len];
                            if stride == 1 {
                                for (o, &xv) in orow.iter_mut().zip(&xrow[iw_lo..iw_lo + len]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (o, xv) in
                                    orow.iter_mut().zip(xrow[iw_lo..].iter().step_by(stride))
                                {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        });
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![b, cout, ho, wo], out).expect("conv2d shape"),
            Op::Conv2d { input, weight, bias, stride, padding },
            needs,
            false,
        ))
    }

    /// Transposed convolution doubling the spatial extents: kernel 4,
    /// stride 2, padding 1. `weight [Cin,Cout,4,4]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Value,
        weight: Value,
        bias: Value,
    ) -> Result<Value, TensorError> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv_transpose2d input", expected: 4, got: xs.len() });
        }
        if ws.len() != 4 {
            return Err(TensorError::RankMismatch { op: "conv_transpose2d weight", expected: 4, got: ws.len() });
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(TensorError::DimMismatch { op: "conv_transpose2d", axis: 0, left: cin, right: wcin });
        }
        if kh != 4 || kw != 4 {
            return Err(TensorError::Unsupported { op: "conv_transpose2d", what: "kernel", value: kh.max(kw) });
        }
        if bs != [cout] {
            return Err(TensorError::DimMismatch { op: "conv_transpose2d bias", axis: 0, left: cout, right: bs[0] });
        }
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.t(input).data();
        let wt = self.t(weight).data();
        let bt = self.t(bias).data();
        let mut out = vec![0.0; b * cout * ho * wo];
        // Scatter form: input pixel (ih, iw) lands at (2*ih - 1 + dkh,
        // 2*iw - 1 + dkw) for every kernel offset.
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, op)| {
            let bi = plane / cout;
            let co = plane % cout;
            op.iter_mut().for_each(|v| *v = bt[co]);
            for ci in 0..cin {
                let xplane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for dkh in 0..kh {
                    let Some((ih_lo, ih_hi)) = tconv_span(h, ho, dkh) else { continue };
                    for dkw in 0..kw {
                        let wv = wt[((ci * cout + co) * kh + dkh) * kw + dkw];
                        let Some((iw_lo, iw_hi)) = tconv_span(w, wo, dkw) else { continue };
                        let len = iw_hi - iw_lo + 1;
                        let ow_lo = 2 * iw_lo + dkw - 1;
                        for ih in ih_lo..=ih_hi {
                            let oh = 2 * ih + dkh - 1;
                            let xrow = &xplane[ih * w + iw_lo..ih * w + iw_lo + len];
                            let orow = &mut op[oh * wo + ow_lo..(oh + 1) * wo];
                            for (o, &xv) in orow.iter_mut().step_by(2).zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        });
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![b, cout, ho, wo], out).expect("conv_transpose2d shape"),
            Op::ConvTranspose2d { input, weight, bias },
            needs,
            false,
        ))
    }

    /// Per-(batch, channel) plane normalization `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, input: Value, eps: f64) -> Result<Value, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "instance_norm", expected: 4, got: xs.len() });
        }
        let (h, w) = (xs[2], xs[3]);
        if h * w < 2 {
            return Err(TensorError::SpatialTooSmall { op: "instance_norm", axis: 2, extent: h * w, min: 2 });
        }
        let n = h * w;
        let x = self.t(input).data();
        let mut out = vec![0.0; x.len()];
        out.par_chunks_mut(n).zip(x.par_chunks(n)).for_each(|(op, xp)| {
            let (sum, sumsq) = sum_and_sumsq(xp);
            let mean = sum / n as f64;
            let var = (sumsq / n as f64 - mean * mean).max(0.0);
            let inv_std = 1.0 / (var + eps).sqrt();
            for (o, &v) in op.iter_mut().zip(xp) {
                *o = (v - mean) * inv_std;
            }
        });
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(xs.to_vec(), out).expect("instance_norm shape"),
            Op::InstanceNorm { input, eps },
            needs,
            false,
        ))
    }

    /// `x if x >= 0 else slope * x`; subgradient at zero is `slope`.
    pub fn leaky_relu(&mut self, input: Value, slope: f64) -> Value {
        let t = self.t(input);
        let data = par_map(t.data(), |v| if v >= 0.0 { v } else { slope * v });
        let out = Tensor::new(t.shape().to_vec(), data).expect("leaky_relu shape");
        let needs = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope }, needs, false)
    }

    pub fn sigmoid(&mut self, input: Value) -> Value {
        let t = self.t(input);
        let data = par_map(t.data(), |v| 1.0 / (1.0 + (-v).exp()));
        let out = Tensor::new(t.shape().to_vec(), data).expect("sigmoid shape");
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid { input }, needs, false)
    }

    /// Natural log; errors when any element is not strictly positive.
    pub fn log(&mut self, input: Value) -> Result<Value, TensorError> {
        if self.t(input).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let out = self.t(input).map(f64::ln);
        let needs = self.needs(input);
        Ok(self.push(out, Op::Log { input }, needs, false))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn avg_pool_global(&mut self, input: Value) -> Result<Value, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "avg_pool_global", expected: 4, got: xs.len() });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let n = h * w;
        let x = self.t(input).data();
        let out: Vec<f64> = (0..b * c)
            .map(|p| x[p * n..(p + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c], out).expect("avg_pool_global shape"),
            Op::AvgPoolGlobal { input },
            needs,
            false,
        ))
    }

    /// 2x2 average pooling with stride 2; requires even spatial extents.
    pub fn avg_pool2(&mut self, input: Value) -> Result<Value, TensorError> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "avg_pool2", expected: 4, got: xs.len() });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 {
            return Err(TensorError::Unsupported { op: "avg_pool2", what: "odd height", value: h });
        }
        if w % 2 != 0 {
            return Err(TensorError::Unsupported { op: "avg_pool2", what: "odd width", value: w });
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.t(input).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let xp = &x[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let (ih, iw) = (2 * oh, 2 * ow);
                    op[oh * wo + ow] = 0.25
                        * (xp[ih * w + iw]
                            + xp[ih * w + iw + 1]
                            + xp[(ih + 1) * w + iw]
                            + xp[(ih + 1) * w + iw + 1]);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out).expect("avg_pool2 shape"),
            Op::AvgPool2 { input },
            needs,
            false,
        ))
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, inputs: &[Value], axis: usize) -> Result<Value, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: first.len() });
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() {
                return Err(TensorError::RankMismatch { op: "concat", expected: first.len(), got: s.len() });
            }
            for (ax, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(TensorError::DimMismatch { op: "concat", axis: ax, left: a, right: b });
                }
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out: Vec<f64> = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let extent = self.shape(v)[axis];
                let data = self.t(v).data();
                out.extend_from_slice(&data[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(out_shape, out).expect("concat shape"),
            Op::Concat { inputs: inputs.to_vec(), axis },
            needs,
            false,
        ))
    }

    /// Contiguous slice of `len` extents along `axis` starting at `start`.
    pub fn slice(&mut self, input: Value, axis: usize, start: usize, len: usize) -> Result<Value, TensorError> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(TensorError::AxisOutOfRange { op: "slice", axis, rank: s.len() });
        }
        if start + len > s[axis] {
            return Err(TensorError::DimMismatch { op: "slice", axis, left: start + len, right: s[axis] });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let extent = s[axis];
        let data = self.t(input).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &data[(o * extent + start) * inner..(o * extent + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("slice shape"),
            Op::Slice { input, axis, start },
            needs,
            false,
        ))
    }

    /// Fully connected layer: `input [B,F]`, `weight [Fout,F]`, `bias [Fout]`.
    pub fn linear(&mut self, input: Value, weight: Value, bias: Value) -> Result<Value, TensorError> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 {
            return Err(TensorError::RankMismatch { op: "linear input", expected: 2, got: xs.len() });
        }
        if ws.len() != 2 {
            return Err(TensorError::RankMismatch { op: "linear weight", expected: 2, got: ws.len() });
        }
        let (b, f) = (xs[0], xs[1]);
        let (fo, wf) = (ws[0], ws[1]);
        if wf != f {
            return Err(TensorError::DimMismatch { op: "linear", axis: 1, left: f, right: wf });
        }
        if bs != [fo] {
            return Err(TensorError::DimMismatch { op: "linear bias", axis: 0, left: fo, right: bs[0] });
        }
        let x = self.t(input).data();
        let wt = self.t(weight).data();
        let bt = self.t(bias).data();
        let mut out = vec![0.0; b * fo];
        for bi in 0..b {
            let xrow = &x[bi * f..(bi + 1) * f];
            for o in 0..fo {
                let wrow = &wt[o * f..(o + 1) * f];
                out[bi * fo + o] = bt[o] + dot(xrow, wrow);
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![b, fo], out).expect("linear shape"),
            Op::Linear { input, weight, bias },
            needs,
            false,
        ))
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-rate)` during
    /// training so that eval mode is the identity (the input value is
    /// returned unchanged).
    pub fn dropout(
        &mut self,
        input: Value,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Value, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadDropoutRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let x = self.t(input).data();
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        let out: Vec<f64> = x
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { 0.0 })
            .collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out).expect("dropout shape"),
            Op::Dropout { input, keep_scale, mask },
            needs,
            false,
        ))
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: Value,
        b: Value,
    ) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        // Only scalar broadcast beyond matching shapes.
        if self.t(b).is_scalar() {
            return Ok(sa.to_vec());
        }
        if self.t(a).is_scalar() {
            return Ok(sb.to_vec());
        }
        check_same_shape(op, sa, sb)?;
        unreachable!("check_same_shape returned Ok on unequal shapes")
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64 + Sync,
        op: Op,
    ) -> Result<Value, TensorError> {
        let shape = self.binary_shapes(op_name, a, b)?;
        let (ta, tb) = (self.t(a), self.t(b));
        let out: Vec<f64> = if ta.shape() == tb.shape() {
            par_zip_map(ta.data(), tb.data(), f)
        } else {
            let n: usize = shape.iter().product();
            (0..n)
                .map(|i| {
                    let x = if ta.is_scalar() { ta.data()[0] } else { ta.data()[i] };
                    let y = if tb.is_scalar() { tb.data()[0] } else { tb.data()[i] };
                    f(x, y)
                })
                .collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out).expect("elementwise shape"), op, needs, false))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise division; errors when any divisor is zero.
    pub fn div(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        if self.t(b).data().contains(&0.0) {
            return Err(TensorError::NonFinite { op: "div" });
        }
        self.elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, input: Value, c: f64) -> Value {
        let out = self.t(input).map(|v| v + c);
        let needs = self.needs(input);
        self.push(out, Op::AddScalar { input }, needs, false)
    }

    pub fn mul_scalar(&mut self, input: Value, factor: f64) -> Value {
        let out = self.t(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(out, Op::MulScalar { input, factor }, needs, false)
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, input: Value) -> Value {
        let t = self.t(input);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::Mean { input }, needs, false)
    }

    /// Sum over all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Value) -> Value {
        let s = self.t(input).data().iter().sum::<f64>();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, needs, false)
    }

    /// Mean absolute value (L1 with mean reduction); sign(0) is taken as 0.
    pub fn mean_abs(&mut self, input: Value) -> Value {
        let t = self.t(input);
        let m = t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::MeanAbs { input }, needs, false)
    }

    /// Mean squared value (L2 with mean reduction).
    pub fn mean_sq(&mut self, input: Value) -> Value {
        let t = self.t(input);
        let m = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::MeanSq { input }, needs, false)
    }

    /// Maximum over all elements; the subgradient routes to the first
    /// maximizing element.
    pub fn reduce_max(&mut self, input: Value) -> Value {
        let (arg, &m) = self
            .t(input)
            .data()
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::ReduceMax { input, arg }, needs, false)
    }

    /// Minimum over all elements; subgradient to the first minimizing element.
    pub fn reduce_min(&mut self, input: Value) -> Value {
        let (arg, &m) = self
            .t(input)
            .data()
            .iter()
            .enumerate()
            .fold((0, &f64::INFINITY), |acc, (i, v)| if *v < *acc.1 { (i, v) } else { acc });
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::ReduceMin { input, arg }, needs, false)
    }

    /// `max(x, min)` elementwise; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, input: Value, min: f64) -> Value {
        let out = self.t(input).map(|v| v.max(min));
        let needs = self.needs(input);
        self.push(out, Op::ClampMin { input, min }, needs, false)
    }

    /// Softmax cross-entropy against a single class index shared by the
    /// batch: `mean_b(-log softmax(logits[b])[class])`.
    pub fn softmax_cross_entropy(&mut self, logits: Value, class: usize) -> Result<Value, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(TensorError::RankMismatch { op: "softmax_cross_entropy", expected: 2, got: s.len() });
        }
        let (b, n) = (s[0], s[1]);
        if class >= n {
            return Err(TensorError::ClassOutOfRange { index: class, classes: n });
        }
        let x = self.t(logits).data();
        let mut total = 0.0;
        for bi in 0..b {
            let row = &x[bi * n..(bi + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[class];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::SoftmaxXent { logits, class },
            needs,
            false,
        ))
    }

    /// Per-channel scaling: `features [B,C,H,W] * scale [B,C]`.
    pub fn channel_scale(&mut self, features: Value, scale: Value) -> Result<Value, TensorError> {
        let (fs, ss) = (self.shape(features), self.shape(scale));
        if fs.len() != 4 {
            return Err(TensorError::RankMismatch { op: "channel_scale features", expected: 4, got: fs.len() });
        }
        if ss.len() != 2 {
            return Err(TensorError::RankMismatch { op: "channel_scale scale", expected: 2, got: ss.len() });
        }
        if fs[0] != ss[0] {
            return Err(TensorError::DimMismatch { op: "channel_scale", axis: 0, left: fs[0], right: ss[0] });
        }
        if fs[1] != ss[1] {
            return Err(TensorError::DimMismatch { op: "channel_scale", axis: 1, left: fs[1], right: ss[1] });
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let n = h * w;
        let f = self.t(features).data();
        let sc = self.t(scale).data();
        let mut out = vec![0.0; f.len()];
        for p in 0..b * c {
            let s = sc[p];
            for (o, &v) in out[p * n..(p + 1) * n].iter_mut().zip(&f[p * n..(p + 1) * n]) {
                *o = v * s;
            }
        }
        let needs = self.needs(features) || self.needs(scale);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], out).expect("channel_scale shape"),
            Op::ChannelScale { features, scale },
            needs,
            false,
        ))
    }

    /// Mirror padding without edge repetition: index -1 maps to 1, index H
    /// maps to H-2. Requires spatial extents strictly greater than `pad`.
    pub fn reflect_pad(&mut self, input: Value, pad: usize) -> Result<Value, TensorError> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(TensorError::RankMismatch { op: "reflect_pad", expected: 4, got: s.len() });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h <= pad {
            return Err(TensorError::SpatialTooSmall { op: "reflect_pad", axis: 2, extent: h, min: pad + 1 });
        }
        if w <= pad {
            return Err(TensorError::SpatialTooSmall { op: "reflect_pad", axis: 3, extent: w, min: pad + 1 });
        }
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let x = self.t(input).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let xp = &x[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oh in 0..ho {
                let ih = reflect_index(oh as isize - pad as isize, h);
                for ow in 0..wo {
                    let iw = reflect_index(ow as isize - pad as isize, w);
                    op[oh * wo + ow] = xp[ih * w + iw];
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out).expect("reflect_pad shape"),
            Op::ReflectPad { input, pad },
            needs,
            false,
        ))
    }

    /// Per-channel sliding-window mean (valid mode, no padding): each output
    /// pixel is the average of a `window x window` patch.
    pub fn box_mean(&mut self, input: Value, window: usize) -> Result<Value, TensorError> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(TensorError::RankMismatch { op: "box_mean", expected: 4, got: s.len() });
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < window {
            return Err(TensorError::SpatialTooSmall { op: "box_mean", axis: 2, extent: h, min: window });
        }
        if w < window {
            return Err(TensorError::SpatialTooSmall { op: "box_mean", axis: 3, extent: w, min: window });
        }
        let (ho, wo) = (h - window + 1, w - window + 1);
        let inv_area = 1.0 / (window * window) as f64;
        let x = self.t(input).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let xp = &x[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for dh in 0..window {
                        let row = &xp[(oh + dh) * w + ow..(oh + dh) * w + ow + window];
                        for &v in row {
                            acc += v;
                        }
                    }
                    op[oh * wo + ow] = acc * inv_area;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c, ho, wo], out).expect("box_mean shape"),
            Op::BoxMean { input, window },
            needs,
            false,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad` leaves
    /// accumulate into their persistent buffers; repeated calls add up.
    pub fn backward(&mut self, loss: Value) -> Result<(), TensorError> {
        if !self.t(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].requires_grad {
                let numel = self.nodes[i].tensor.numel();
                let buf = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; numel]);
                for (a, b) in buf.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Value, contrib: Vec<f64>| {
            match &mut grads[v.0] {
                Some(buf) => {
                    for (a, b) in buf.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let (input, weight, bias, stride, padding) = (*input, *weight, *bias, *stride, *padding);
                let xs = self.shape(input);
                let ws = self.shape(weight);
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let os = self.shape(Value(i));
                let (ho, wo) = (os[2], os[3]);
                let x = self.t(input).data();
                let wt = self.t(weight).data();
                if self.needs(input) {
                    let mut gx = vec![0.0; x.len()];
                    gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, gxp)| {
                        let bi = plane / cin;
                        let ci = plane % cin;
                        for co in 0..cout {
                            let gop = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                            for dkh in 0..kh {
                                let Some((oh_lo, oh_hi)) = conv_span(h, ho, stride, padding, dkh)
                                else {
                                    continue;
                                };
                                for dkw in 0..kw {
                                    let wv = wt[((co * cin + ci) * kh + dkh) * kw + dkw];
                                    let Some((ow_lo, ow_hi)) =
                                        conv_span(w, wo, stride, padding, dkw)
                                    else {
                                        continue;
                                    };
                                    let len = ow_hi - ow_lo + 1;
                                    let iw_lo = ow_lo * stride + dkw - padding;
                                    for oh in oh_lo..=oh_hi {
                                        let ih = oh * stride + dkh - padding;
                                        let grow = &gop[oh * wo + ow_lo..oh * wo + ow_lo + len];
                                        let gxrow = &mut gxp[ih * w..(ih + 1) * w];
                                        if stride == 1 {
                                            for (gxv, &gv) in
                                                gxrow[iw_lo..iw_lo + len].iter_mut().zip(grow)
                                            {
                                                *gxv += wv * gv;
                                            }
                                        } else {
                                            for (gxv, &gv) in gxrow[iw_lo..]
                                                .iter_mut()
                                                .step_by(stride)
                                                .zip(grow)
                                            {
                                                *gxv += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    acc(grads, input, gx);
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; wt.len()];
                    gw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, gwc)| {
                        for bi in 0..b {
                            let gop = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                            for ci in 0..cin {
                                let xp = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                                for dkh in 0..kh {
                                    let Some((oh_lo, oh_hi)) =
                                        conv_span(h, ho, stride, padding, dkh)
                                    else {
                                        continue;
                                    };
                                    for dkw in 0..kw {
                                        let Some((ow_lo, ow_hi)) =
                                            conv_span(w, wo, stride, padding, dkw)
                                        else {
                                            continue;
                                        };
                                        let len = ow_hi - ow_lo + 1;
                                        let iw_lo = ow_lo * stride + dkw - padding;
                                        let mut acc_w = 0.0;
                                        for oh in oh_lo..=oh_hi {
                                            let ih = oh * stride + dkh - padding;
                                            let xrow = &xp[ih * w..(ih + 1) * w];
                                            let grow =
                                                &gop[oh * wo + ow_lo..oh * wo + ow_lo + len];
                                            acc_w += if stride == 1 {
                                                dot(grow, &xrow[iw_lo..iw_lo + len])
                                            } else {
                                                dot_strided(grow, &xrow[iw_lo..], stride)
                                            };
                                        }
                                        gwc[(ci * kh + dkh) * kw + dkw] += acc_w;
                                    }
                                }
                            }
                        }
                    });
                    acc(grads, weight, gw);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, gbc) in gb.iter_mut().enumerate() {
                            *gbc += g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    acc(grads, bias, gb);
                }
            }
            Op::ConvTranspose2d { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.shape(input);
                let ws = self.shape(weight);
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (_, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (ho, wo) = (2 * h, 2 * w);
                let x = self.t(input).data();
                let wt = self.t(weight).data();
                if self.needs(input) {
                    let mut gx = vec![0.0; x.len()];
                    gx.par_chunks_mut(h * w).enumerate().for_each(|(plane, gxp)| {
                        let bi = plane / cin;
                        let ci = plane % cin;
                        for co in 0..cout {
                            let gop = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                            for dkh in 0..kh {
                                let Some((ih_lo, ih_hi)) = tconv_span(h, ho, dkh) else { continue };
                                for dkw in 0..kw {
                                    let wv = wt[((ci * cout + co) * kh + dkh) * kw + dkw];
                                    let Some((iw_lo, iw_hi)) = tconv_span(w, wo, dkw) else {
                                        continue;
                                    };
                                    let len = iw_hi - iw_lo + 1;
                                    let ow_lo = 2 * iw_lo + dkw - 1;
                                    for ih in ih_lo..=ih_hi {
                                        let oh = 2 * ih + dkh - 1;
                                        let grow = &gop[oh * wo + ow_lo..(oh + 1) * wo];
                                        let gxrow =
                                            &mut gxp[ih * w + iw_lo..ih * w + iw_lo + len];
                                        for (gxv, gv) in
                                            gxrow.iter_mut().zip(grow.iter().step_by(2))
                                        {
                                            *gxv += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                    acc(grads, input, gx);
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; wt.len()];
                    gw.par_chunks_mut(cout * kh * kw).enumerate().for_each(|(ci, gwc)| {
                        for bi in 0..b {
                            let xp = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                            for co in 0..cout {
                                let gop = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                                for dkh in 0..kh {
                                    let Some((ih_lo, ih_hi)) = tconv_span(h, ho, dkh) else {
                                        continue;
                                    };
                                    for dkw in 0..kw {
                                        let Some((iw_lo, iw_hi)) = tconv_span(w, wo, dkw) else {
                                            continue;
                                        };
                                        let len = iw_hi - iw_lo + 1;
                                        let ow_lo = 2 * iw_lo + dkw - 1;
                                        let mut acc_w = 0.0;
                                        for ih in ih_lo..=ih_hi {
                                            let oh = 2 * ih + dkh - 1;
                                            let xrow =
                                                &xp[ih * w + iw_lo..ih * w + iw_lo + len];
                                            let grow = &gop[oh * wo + ow_lo..(oh + 1) * wo];
                                            acc_w += dot_strided(xrow, grow, 2);
                                        }
                                        gwc[(co * kh + dkh) * kw + dkw] += acc_w;
                                    }
                                }
                            }
                        }
                    });
                    acc(grads, weight, gw);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, gbc) in gb.iter_mut().enumerate() {
                            *gbc += g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    acc(grads, bias, gb);
                }
            }
            Op::InstanceNorm { input, eps } => {
                let (input, eps) = (*input, *eps);
                if self.needs(input) {
                    let xs = self.shape(input);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let n = h * w;
                    let x = self.t(input).data();
                    let y = self.t(Value(i)).data();
                    let mut gx = vec![0.0; x.len()];
                    let planes: Vec<(&mut [f64], usize)> =
                        gx.chunks_mut(n).zip(0..b * c).collect();
                    planes.into_par_iter().for_each(|(gxp, p)| {
                        let xp = &x[p * n..(p + 1) * n];
                        let yp = &y[p * n..(p + 1) * n];
                        let gp = &g[p * n..(p + 1) * n];
                        let (sum, sumsq) = sum_and_sumsq(xp);
                        let mean = sum / n as f64;
                        let var = (sumsq / n as f64 - mean * mean).max(0.0);
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let g_mean = gp.iter().sum::<f64>() / n as f64;
                        let gy_mean = dot(gp, yp) / n as f64;
                        for ((gx_v, &g_v), &y_v) in gxp.iter_mut().zip(gp).zip(yp) {
                            *gx_v = inv_std * (g_v - g_mean - y_v * gy_mean);
                        }
                    });
                    acc(grads, input, gx);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let (input, slope) = (*input, *slope);
                if self.needs(input) {
                    let x = self.t(input).data();
                    let gx = par_zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                    acc(grads, input, gx);
                }
            }
            Op::Sigmoid { input } => {
                let input = *input;
                if self.needs(input) {
                    let y = self.t(Value(i)).data();
                    let gx = par_zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                    acc(grads, input, gx);
                }
            }
            Op::Log { input } => {
                let input = *input;
                if self.needs(input) {
                    let x = self.t(input).data();
                    let gx = g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                    acc(grads, input, gx);
                }
            }
            Op::AvgPoolGlobal { input } => {
                let input = *input;
                if self.needs(input) {
                    let xs = self.shape(input);
                    let n = xs[2] * xs[3];
                    let mut gx = vec![0.0; self.t(input).numel()];
                    for (p, &gv) in g.iter().enumerate() {
                        let share = gv / n as f64;
                        gx[p * n..(p + 1) * n].iter_mut().for_each(|v| *v = share);
                    }
                    acc(grads, input, gx);
                }
            }
            Op::AvgPool2 { input } => {
                let input = *input;
                if self.needs(input) {
                    let xs = self.shape(input);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let share = gp[oh * wo + ow] * 0.25;
                                let (ih, iw) = (2 * oh, 2 * ow);
                                gxp[ih * w + iw] += share;
                                gxp[ih * w + iw + 1] += share;
                                gxp[(ih + 1) * w + iw] += share;
                                gxp[(ih + 1) * w + iw + 1] += share;
                            }
                        }
                    }
                    acc(grads, input, gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let out_shape = self.shape(Value(i)).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &v in inputs.clone().iter() {
                    let extent = self.shape(v)[axis];
                    if self.needs(v) {
                        let mut gx = vec![0.0; self.t(v).numel()];
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + extent) * inner];
                            gx[o * extent * inner..(o + 1) * extent * inner].copy_from_slice(src);
                        }
                        acc(grads, v, gx);
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                let (input, axis, start) = (*input, *axis, *start);
                if self.needs(input) {
                    let in_shape = self.shape(input).to_vec();
                    let out_shape = self.shape(Value(i)).to_vec();
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let extent = in_shape[axis];
                    let len = out_shape[axis];
                    let mut gx = vec![0.0; self.t(input).numel()];
                    for o in 0..outer {
                        let dst = &mut gx[(o * extent + start) * inner..(o * extent + start + len) * inner];
                        dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(grads, input, gx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.shape(input);
                let ws = self.shape(weight);
                let (b, f) = (xs[0], xs[1]);
                let fo = ws[0];
                let x = self.t(input).data();
                let wt = self.t(weight).data();
                if self.needs(input) {
                    let mut gx = vec![0.0; b * f];
                    for bi in 0..b {
                        for o in 0..fo {
                            let gv = g[bi * fo + o];
                            let wrow = &wt[o * f..(o + 1) * f];
                            for (gxv, wv) in gx[bi * f..(bi + 1) * f].iter_mut().zip(wrow) {
                                *gxv += gv * wv;
                            }
                        }
                    }
                    acc(grads, input, gx);
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; fo * f];
                    for bi in 0..b {
                        let xrow = &x[bi * f..(bi + 1) * f];
                        for o in 0..fo {
                            let gv = g[bi * fo + o];
                            for (gwv, xv) in gw[o * f..(o + 1) * f].iter_mut().zip(xrow) {
                                *gwv += gv * xv;
                            }
                        }
                    }
                    acc(grads, weight, gw);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; fo];
                    for bi in 0..b {
                        for (o, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[bi * fo + o];
                        }
                    }
                    acc(grads, bias, gb);
                }
            }
            Op::Dropout { input, keep_scale, mask } => {
                let (input, keep_scale) = (*input, *keep_scale);
                if self.needs(input) {
                    let gx = g
                        .iter()
                        .zip(mask)
                        .map(|(&gv, &keep)| if keep { gv * keep_scale } else { 0.0 })
                        .collect();
                    acc(grads, input, gx);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc(grads, a, self.reduce_to(a, g));
                }
                if self.needs(b) {
                    acc(grads, b, self.reduce_to(b, g));
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc(grads, a, self.reduce_to(a, g));
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    acc(grads, b, self.reduce_to(b, &neg));
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.t(a), self.t(b));
                if self.needs(a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * if tb.is_scalar() { tb.data()[0] } else { tb.data()[j] })
                        .collect();
                    acc(grads, a, self.reduce_to(a, &ga));
                }
                if self.needs(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * if ta.is_scalar() { ta.data()[0] } else { ta.data()[j] })
                        .collect();
                    acc(grads, b, self.reduce_to(b, &gb));
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.t(a), self.t(b));
                if self.needs(a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv / if tb.is_scalar() { tb.data()[0] } else { tb.data()[j] })
                        .collect();
                    acc(grads, a, self.reduce_to(a, &ga));
                }
                if self.needs(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| {
                            let av = if ta.is_scalar() { ta.data()[0] } else { ta.data()[j] };
                            let bv = if tb.is_scalar() { tb.data()[0] } else { tb.data()[j] };
                            -gv * av / (bv * bv)
                        })
                        .collect();
                    acc(grads, b, self.reduce_to(b, &gb));
                }
            }
            Op::AddScalar { input } => {
                let input = *input;
                if self.needs(input) {
                    acc(grads, input, g.to_vec());
                }
            }
            Op::MulScalar { input, factor } => {
                let (input, factor) = (*input, *factor);
                if self.needs(input) {
                    acc(grads, input, g.iter().map(|&v| v * factor).collect());
                }
            }
            Op::Mean { input } => {
                let input = *input;
                if self.needs(input) {
                    let n = self.t(input).numel();
                    acc(grads, input, vec![g[0] / n as f64; n]);
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let n = self.t(input).numel();
                    acc(grads, input, vec![g[0]; n]);
                }
            }
            Op::MeanAbs { input } => {
                let input = *input;
                if self.needs(input) {
                    let x = self.t(input).data();
                    let scale = g[0] / x.len() as f64;
                    let gx = x
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                scale
                            } else if v < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(grads, input, gx);
                }
            }
            Op::MeanSq { input } => {
                let input = *input;
                if self.needs(input) {
                    let x = self.t(input).data();
                    let scale = 2.0 * g[0] / x.len() as f64;
                    acc(grads, input, x.iter().map(|&v| scale * v).collect());
                }
            }
            Op::ReduceMax { input, arg } | Op::ReduceMin { input, arg } => {
                let (input, arg) = (*input, *arg);
                if self.needs(input) {
                    let mut gx = vec![0.0; self.t(input).numel()];
                    gx[arg] = g[0];
                    acc(grads, input, gx);
                }
            }
            Op::ClampMin { input, min } => {
                let (input, min) = (*input, *min);
                if self.needs(input) {
                    let x = self.t(input).data();
                    let gx = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > min { gv } else { 0.0 })
                        .collect();
                    acc(grads, input, gx);
                }
            }
            Op::SoftmaxXent { logits, class } => {
                let (logits, class) = (*logits, *class);
                if self.needs(logits) {
                    let s = self.shape(logits);
                    let (b, n) = (s[0], s[1]);
                    let x = self.t(logits).data();
                    let mut gx = vec![0.0; b * n];
                    for bi in 0..b {
                        let row = &x[bi * n..(bi + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        for c in 0..n {
                            let p = exps[c] / denom;
                            let onehot = if c == class { 1.0 } else { 0.0 };
                            gx[bi * n + c] = g[0] * (p - onehot) / b as f64;
                        }
                    }
                    acc(grads, logits, gx);
                }
            }
            Op::ChannelScale { features, scale } => {
                let (features, scale) = (*features, *scale);
                let fs = self.shape(features);
                let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
                let n = h * w;
                let f = self.t(features).data();
                let sc = self.t(scale).data();
                if self.needs(features) {
                    let mut gf = vec![0.0; f.len()];
                    for p in 0..b * c {
                        let s = sc[p];
                        for (gfv, &gv) in gf[p * n..(p + 1) * n].iter_mut().zip(&g[p * n..(p + 1) * n]) {
                            *gfv = gv * s;
                        }
                    }
                    acc(grads, features, gf);
                }
                if self.needs(scale) {
                    let mut gs = vec![0.0; b * c];
                    for (p, gsv) in gs.iter_mut().enumerate() {
                        *gsv = g[p * n..(p + 1) * n]
                            .iter()
                            .zip(&f[p * n..(p + 1) * n])
                            .map(|(&gv, &fv)| gv * fv)
                            .sum();
                    }
                    acc(grads, scale, gs);
                }
            }
            Op::ReflectPad { input, pad } => {
                let (input, pad) = (*input, *pad);
                if self.needs(input) {
                    let xs = self.shape(input);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h + 2 * pad, w + 2 * pad);
                    let mut gx = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
                        for oh in 0..ho {
                            let ih = reflect_index(oh as isize - pad as isize, h);
                            for ow in 0..wo {
                                let iw = reflect_index(ow as isize - pad as isize, w);
                                gxp[ih * w + iw] += gp[oh * wo + ow];
                            }
                        }
                    }
                    acc(grads, input, gx);
                }
            }
            Op::BoxMean { input, window } => {
                let (input, window) = (*input, *window);
                if self.needs(input) {
                    let xs = self.shape(input);
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (ho, wo) = (h - window + 1, w - window + 1);
                    let inv_area = 1.0 / (window * window) as f64;
                    let mut gx = vec![0.0; b * c * h * w];
                    for p in 0..b * c {
                        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
                        for ih in 0..h {
                            let oh_lo = ih.saturating_sub(window - 1);
                            let oh_hi = ih.min(ho - 1);
                            for iw in 0..w {
                                let ow_lo = iw.saturating_sub(window - 1);
                                let ow_hi = iw.min(wo - 1);
                                let mut acc_g = 0.0;
                                for oh in oh_lo..=oh_hi {
                                    for ow in ow_lo..=ow_hi {
                                        acc_g += gp[oh * wo + ow];
                                    }
                                }
                                gxp[ih * w + iw] = acc_g * inv_area;
                            }
                        }
                    }
                    acc(grads, input, gx);
                }
            }
        }
    }
}

/// Chunk size for deterministic data-parallel elementwise maps: each chunk
/// is processed sequentially by one task, so results never depend on the
/// thread count.
const PAR_CHUNK: usize = 1 << 14;

fn par_map(src: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    if src.len() < 2 * PAR_CHUNK {
        return src.iter().map(|&v| f(v)).collect();
    }
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(src.par_chunks(PAR_CHUNK))
        .for_each(|(o, s)| {
            for (ov, &sv) in o.iter_mut().zip(s) {
                *ov = f(sv);
            }
        });
    out
}

fn par_zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < 2 * PAR_CHUNK {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![0.0; a.len()];
    out.par_chunks_mut(PAR_CHUNK)
        .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
        .for_each(|(o, (x, y))| {
            for ((ov, &xv), &yv) in o.iter_mut().zip(x).zip(y) {
                *ov = f(xv, yv);
            }
        });
    out
}

/// Four-lane sum and sum of squares in one pass, fixed reduction order.
#[inline]
fn sum_and_sumsq(x: &[f64]) -> (f64, f64) {
    let mut s = [0.0f64; 4];
    let mut q = [0.0f64; 4];
    let chunks = x.len() / 4;
    for i in 0..chunks {
        let v = &x[4 * i..4 * i + 4];
        s[0] += v[0];
        s[1] += v[1];
        s[2] += v[2];
        s[3] += v[3];
        q[0] += v[0] * v[0];
        q[1] += v[1] * v[1];
        q[2] += v[2] * v[2];
        q[3] += v[3] * v[3];
    }
    let (mut rs, mut rq) = (0.0, 0.0);
    for &v in &x[4 * chunks..] {
        rs += v;
        rq += v * v;
    }
    ((s[0] + s[1]) + (s[2] + s[3]) + rs, (q[0] + q[1]) + (q[2] + q[3]) + rq)
}

/// Four-lane dot product. The fixed accumulator layout breaks the dependent
/// add chain for instruction-level parallelism while keeping the reduction
/// order a deterministic function of the length alone.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let x = &a[4 * i..4 * i + 4];
        let y = &b[4 * i..4 * i + 4];
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rest = 0.0;
    for i in 4 * chunks..a.len() {
        rest += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Dot of `a` against every `stride`-th element of `b`, same lane layout as
/// [`dot`].
#[inline]
fn dot_strided(a: &[f64], b: &[f64], stride: usize) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let x = &a[4 * i..4 * i + 4];
        let base = 4 * i * stride;
        acc[0] += x[0] * b[base];
        acc[1] += x[1] * b[base + stride];
        acc[2] += x[2] * b[base + 2 * stride];
        acc[3] += x[3] * b[base + 3 * stride];
    }
    let mut rest = 0.0;
    for i in 4 * chunks..a.len() {
        rest += a[i] * b[i * stride];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Valid output index range `[lo, hi]` such that
/// `0 <= o*stride + k_off - padding < extent_in`; `None` when empty.
#[inline]
fn conv_span(
    extent_in: usize,
    extent_out: usize,
    stride: usize,
    padding: usize,
    k_off: usize,
) -> Option<(usize, usize)> {
    let lo = if k_off >= padding { 0 } else { (padding - k_off).div_ceil(stride) };
    if extent_in + padding <= k_off {
        return None;
    }
    let hi = ((extent_in - 1 + padding - k_off) / stride).min(extent_out - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// Valid input index range `[lo, hi]` such that `0 <= 2*i - 1 + k_off < extent_out`.
#[inline]
fn tconv_span(extent_in: usize, extent_out: usize, k_off: usize) -> Option<(usize, usize)> {
    let lo = usize::from(k_off == 0);
    let hi = ((extent_out - k_off) / 2).min(extent_in - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

impl Graph {
    /// Reduce an output-shaped gradient to the shape of `v`: scalar operands
    /// of a broadcast binary op receive the sum of the incoming gradient.
    fn reduce_to(&self, v: Value, g: &[f64]) -> Vec<f64> {
        let n = self.t(v).numel();
        if n == g.len() {
            g.to_vec()
        } else {
            debug_assert_eq!(n, 1, "broadcast only supports scalar operands");
            vec![g.iter().sum()]
        }
    }
}

fn reflect_index(i: isize, extent: usize) -> usize {
    let e = extent as isize;
    debug_assert!(i > -e && i < 2 * e - 1);
    if i < 0 {
        (-i) as usize
    } else if i >= e {
        (2 * e - 2 - i) as usize
    } else {
        i as usize
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

    #[test]
    fn conv2d_identity_1x1() {
        let mut g = Graph::new();
        let x = Tensor::uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut rng(0));
        let xv = g.constant(x.clone());
        // Per-channel identity: w[c,c,0,0] = 1.
        let w = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(xv, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv2d_ones_kernel_center() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data()[4], 9.0);
        // corners see a 2x2 window
        assert_eq!(g.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut r = rng(1);
        let x = Tensor::uniform(&[1, 2, 5, 5], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn conv2d_strided_gradient() {
        let mut r = rng(2);
        let x = Tensor::uniform(&[2, 2, 6, 6], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::DimMismatch { axis: 1, left: 3, right: 2, .. }));
    }

    #[test]
    fn conv_transpose_doubles_and_subsample_recovers() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        // Kernel delta at offset (1,1) places each input pixel at output (2i, 2j).
        let mut wdata = vec![0.0; 16];
        wdata[4 + 1] = 1.0;
        let w = g.constant(Tensor::new(vec![1, 1, 4, 4], wdata).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv_transpose2d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let out = g.value(y).data();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out[(2 * i) * 4 + 2 * j], 1.0);
            }
        }
    }

    #[test]
    fn conv_transpose_output_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 5, 4, 4]));
        let b = g.constant(Tensor::zeros(&[5]));
        let y = g.conv_transpose2d(x, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 8, 8]);
    }

    #[test]
    fn conv_transpose_gradient() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[1, 2, 3, 3], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], v[2])?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn instance_norm_constant_plane_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 7.0));
        let y = g.instance_norm(x, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() <= 1e-5f64.sqrt());
        }
    }

    #[test]
    fn instance_norm_centers_and_scales() {
        let eps = 1e-5;
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng(4)));
        let y = g.instance_norm(x, eps).unwrap();
        let out = g.value(y).data();
        for p in 0..6 {
            let plane = &out[p * 16..(p + 1) * 16];
            let mean = plane.iter().sum::<f64>() / 16.0;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 10.0 * eps, "var {var}");
        }
    }

    #[test]
    fn instance_norm_gradient() {
        let x = Tensor::uniform(&[1, 2, 3, 3], -2.0, 2.0, &mut rng(5));
        let check = check_gradients(
            &[x],
            |g, v| {
                let y = g.instance_norm(v[0], 1e-5)?;
                // Mix channels so the gradient is not killed by mean invariance.
                let s = g.sigmoid(y);
                Ok(g.mean_sq(s))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-5, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(), true);
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[2.0, -0.2]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.2]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn avg_pool_global_constant_plane() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
        let y = g.avg_pool_global(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn cross_entropy_analytic_values() {
        // One-hot-correct logits with a huge margin.
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![50.0, 0.0, 0.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(x, 0).unwrap();
        assert!(g.value(l).item() < 1e-12);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.softmax_cross_entropy(x, 2).unwrap();
        assert!((g.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_class() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            g.softmax_cross_entropy(x, 4),
            Err(TensorError::ClassOutOfRange { index: 4, classes: 4 })
        ));
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut r = rng(6);
        let a = Tensor::uniform(&[2, 3], -2.0, 2.0, &mut r);
        let b = Tensor::uniform(&[2, 3], -2.0, 2.0, &mut r);
        let check = check_gradients(
            &[a, b],
            |g, v| {
                let m = g.mul(v[0], v[1])?;
                let s = g.sub(m, v[1])?;
                let a = g.add(s, v[0])?;
                let abs = g.mean_abs(a);
                let sq = g.mean_sq(s);
                g.add(abs, sq)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, 3], -2.0, 2.0, &mut rng(7)), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_at_stationary_point_is_zero() {
        let mut g = Graph::new();
        let c = Tensor::full(&[4], 1.5);
        let x = g.leaf(c.clone(), true);
        let cv = g.constant(c);
        let d = g.sub(x, cv).unwrap();
        let loss = g.mean_sq(d);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut r = rng(8);
        let xt = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut r);
        let (a, b) = (2.5, -1.25);

        let grad_of = |build: &dyn Fn(&mut Graph, Value) -> Value| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone(), true);
            let loss = build(&mut g, x);
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let l1 = |g: &mut Graph, x: Value| g.mean_sq(x);
        let l2 = |g: &mut Graph, x: Value| g.mean_abs(x);
        let g1 = grad_of(&l1);
        let g2 = grad_of(&l2);
        let combined = grad_of(&|g: &mut Graph, x: Value| {
            let v1 = l1(g, x);
            let v2 = l2(g, x);
            let s1 = g.mul_scalar(v1, a);
            let s2 = g.mul_scalar(v2, b);
            g.add(s1, s2).unwrap()
        });
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_slice_round_trip_and_grad_routing() {
        let mut r = rng(9);
        let a = Tensor::uniform(&[1, 2, 2, 2], -2.0, 2.0, &mut r);
        let b = Tensor::uniform(&[1, 3, 2, 2], -2.0, 2.0, &mut r);
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), true);
        let bv = g.leaf(b.clone(), true);
        let c = g.concat(&[av, bv], 1).unwrap();
        let sa = g.slice(c, 1, 0, 2).unwrap();
        let sb = g.slice(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(sa), &a);
        assert_eq!(g.value(sb), &b);
        // Gradient of mean_sq(slice of a) must reach only a.
        let loss = g.mean_sq(sa);
        g.backward(loss).unwrap();
        assert!(g.grad(av).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.grad(bv).is_none() || g.grad(bv).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_gradient_finite_difference() {
        let mut r = rng(10);
        let a = Tensor::uniform(&[1, 2, 3, 3], -2.0, 2.0, &mut r);
        let b = Tensor::uniform(&[1, 1, 3, 3], -2.0, 2.0, &mut r);
        let check = check_gradients(
            &[a, b],
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let s = g.sigmoid(c);
                Ok(g.mean_abs(s))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[100], -2.0, 2.0, &mut rng(11)));
        let y = g.dropout(x, 0.5, false, &mut rng(12)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_zeroes_expected_fraction_and_scales_survivors() {
        let rate = 0.3;
        let n = 100_000;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n], 1.0));
        let y = g.dropout(x, rate, true, &mut rng(13)).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        // 4.9-sigma binomial bound.
        let sigma = (rate * (1.0 - rate) / n as f64).sqrt();
        assert!((frac - rate).abs() < 4.9 * sigma, "fraction {frac}");
        let scale = 1.0 / (1.0 - rate);
        assert!(g
            .value(y)
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn dropout_gradient_with_fixed_mask() {
        let x = Tensor::uniform(&[4, 4], -2.0, 2.0, &mut rng(14));
        let check = check_gradients(
            &[x],
            |g, v| {
                let mut mask_rng = rng(15);
                let y = g.dropout(v[0], 0.5, true, &mut mask_rng)?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn avg_pools_linear_and_reflect_pad_gradients() {
        let mut r = rng(16);
        let x = Tensor::uniform(&[1, 2, 4, 4], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[3, 8], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[x, w, b],
            |g, v| {
                let p = g.avg_pool2(v[0])?;
                let r = g.reflect_pad(p, 1)?;
                let q = g.avg_pool2(r)?;
                let pooled = g.avg_pool_global(q)?; // [1, 2]
                let both = g.concat(&[pooled, pooled], 1)?;
                let both = g.concat(&[both, both], 1)?; // [1, 8]
                let y = g.linear(both, v[1], v[2])?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn scalar_broadcast_div_and_clamp_gradients() {
        let mut r = rng(17);
        let x = Tensor::uniform(&[3, 3], 0.5, 2.0, &mut r);
        let y = Tensor::uniform(&[3, 3], 0.5, 2.0, &mut r);
        let check = check_gradients(
            &[x, y],
            |g, v| {
                let mx = g.reduce_max(v[0]);
                let mn = g.reduce_min(v[1]);
                let range = g.sub(mx, mn)?;
                let range = g.clamp_min(range, 1e-3);
                let scaled = g.div(v[0], range)?;
                let shifted = g.add_scalar(scaled, 1.0);
                let l = g.log(shifted)?;
                Ok(g.mean(l))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-5, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn channel_scale_gradient() {
        let mut r = rng(18);
        let f = Tensor::uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut r);
        let s = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[f, s],
            |g, v| {
                let y = g.channel_scale(v[0], v[1])?;
                Ok(g.mean_sq(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng(19));
        let check = check_gradients(
            &[logits],
            |g, v| g.softmax_cross_entropy(v[0], 2),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn results_are_bitwise_independent_of_thread_count() {
        let mut r = rng(23);
        let x = Tensor::uniform(&[2, 3, 16, 16], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let wt = Tensor::uniform(&[4, 2, 4, 4], -1.0, 1.0, &mut r);
        let bt = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let bv = g.leaf(b.clone(), true);
            let wtv = g.leaf(wt.clone(), true);
            let btv = g.leaf(bt.clone(), true);
            let c = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let n = g.instance_norm(c, 1e-5).unwrap();
            let a = g.leaky_relu(n, 0.2);
            let u = g.conv_transpose2d(a, wtv, btv).unwrap();
            let s = g.sigmoid(u);
            let loss = g.mean_sq(s);
            g.backward(loss).unwrap();
            let mut out = g.value(u).data().to_vec();
            for v in [xv, wv, bv, wtv, btv] {
                out.extend_from_slice(g.grad(v).unwrap());
            }
            out
        };
        let results: Vec<Vec<f64>> = [1usize, 2, 4]
            .iter()
            .map(|&threads| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(run)
            })
            .collect();
        assert_eq!(results[0], results[1], "1 vs 2 threads");
        assert_eq!(results[0], results[2], "1 vs 4 threads");
    }

    #[test]
    fn linear_gradient() {
        let mut r = rng(20);
        let x = Tensor::uniform(&[2, 5], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        let check = check_gradients(
            &[x, w, b],
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                let s = g.sigmoid(y);
                Ok(g.mean_sq(s))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-6, "rel err {}", check.max_rel_err);
    }
}
