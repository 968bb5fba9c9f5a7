use super::linalg;
use super::tensor::Tensor;
use crate::dsp::{self, Spectrogram, StftConfig};
use crate::error::{Error, Result};

/// Node identity within one graph (index into the value arena).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `[t,k] + [k]`, the bias broadcast.
    AddRow { a: NodeId, bias: NodeId },
    /// `[t,k] ⊙ [k]`, the per-feature gain broadcast.
    MulRow { a: NodeId, scale: NodeId },
    /// scalar * tensor
    ScalarMul { s: NodeId, a: NodeId },
    /// x*mul + add with constants; only the slope matters to backward
    AffineConst { a: NodeId, mul: f64 },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Abs { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Each output row is the concatenation of input rows `t-r ..= t+r`,
    /// clamped at the edges.
    ContextWindow { a: NodeId, radius: usize },
    /// Row-wise zero-mean unit-variance normalization (no affine part).
    /// Saves the per-row 1/std for the backward pass.
    LayerNormRow { a: NodeId, inv_std: Vec<f64> },
    /// mask [t,k] -> waveform: apply the mask to a fixed complex spectrogram
    /// and resynthesize with weighted overlap-add. Linear in the mask.
    MaskedIstft { mask: NodeId, spec: Box<Spectrogram>, cfg: StftConfig },
}

/// One recorded operation: kind + inputs, output node id.
#[derive(Debug, Clone)]
pub struct OpRecord {
    op: Op,
    output: NodeId,
}

/// Define-by-run graph: an arena of value tensors plus the topologically
/// ordered operation records that produced them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    records: Vec<OpRecord>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(value);
        self.records.push(OpRecord { op, output: id });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].data()
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn rows_cols(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::ShapeMismatch {
                op,
                details: format!("expected 2-d tensor, got {:?}", s),
            }),
        }
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols("matmul", a)?;
        let (kb, n) = self.rows_cols("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("[{},{}] x [{},{}]", m, ka, kb, n),
            });
        }
        let data = linalg::matmul_nn(self.data(a), self.data(b), m, ka, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (t, k) = self.rows_cols("add_row", a)?;
        if self.shape(bias) != [k] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                details: format!("bias {:?} vs row width {}", self.shape(bias), k),
            });
        }
        let bd = self.data(bias);
        let mut data = Vec::with_capacity(t * k);
        for row in self.data(a).chunks(k) {
            for (x, y) in row.iter().zip(bd) {
                data.push(x + y);
            }
        }
        let out = Tensor::new(vec![t, k], data)?;
        Ok(self.push(out, Op::AddRow { a, bias }))
    }

    pub fn mul_row(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId> {
        let (t, k) = self.rows_cols("mul_row", a)?;
        if self.shape(scale) != [k] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                details: format!("scale {:?} vs row width {}", self.shape(scale), k),
            });
        }
        let sd = self.data(scale);
        let mut data = Vec::with_capacity(t * k);
        for row in self.data(a).chunks(k) {
            for (x, y) in row.iter().zip(sd) {
                data.push(x * y);
            }
        }
        let out = Tensor::new(vec![t, k], data)?;
        Ok(self.push(out, Op::MulRow { a, scale }))
    }

    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        if !self.nodes[s.0].is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scalar_mul",
                details: format!("scale must be scalar, got {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|x| sv * x).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::ScalarMul { s, a }))
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let data = self.data(a).iter().map(|x| x * mul + add).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::AffineConst { a, mul })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll { a })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (t, k) = self.rows_cols("slice_rows", a)?;
        if start + len > t {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                details: format!("rows {}..{} of {}", start, start + len, t),
            });
        }
        let data = self.data(a)[start * k..(start + len) * k].to_vec();
        let out = Tensor::new(vec![len, k], data)?;
        Ok(self.push(out, Op::SliceRows { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                details: "no inputs".into(),
            });
        }
        let (t, _) = self.rows_cols("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (tp, kp) = self.rows_cols("concat_cols", p)?;
            if tp != t {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("row counts differ: {} vs {}", t, tp),
                });
            }
            widths.push(kp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t * total);
        for row in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.data(p);
                data.extend_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(vec![t, total], data)?;
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn context_window(&mut self, a: NodeId, radius: usize) -> Result<NodeId> {
        let (t, k) = self.rows_cols("context_window", a)?;
        let span = 2 * radius + 1;
        let src = self.data(a);
        let mut data = Vec::with_capacity(t * span * k);
        for row in 0..t {
            for o in 0..span {
                let r = (row + o).saturating_sub(radius).min(t - 1);
                data.extend_from_slice(&src[r * k..(r + 1) * k]);
            }
        }
        let out = Tensor::new(vec![t, span * k], data)?;
        Ok(self.push(out, Op::ContextWindow { a, radius }))
    }

    pub fn layer_norm_row(&mut self, a: NodeId) -> Result<NodeId> {
        let (t, k) = self.rows_cols("layer_norm_row", a)?;
        let src = self.data(a);
        let mut data = Vec::with_capacity(t * k);
        let mut inv_stds = Vec::with_capacity(t);
        for row in src.chunks(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_stds.push(inv_std);
            for x in row {
                data.push((x - mean) * inv_std);
            }
        }
        let out = Tensor::new(vec![t, k], data)?;
        Ok(self.push(out, Op::LayerNormRow { a, inv_std: inv_stds }))
    }

    /// Apply a `[frames, bins]` mask to `spec` and resynthesize the waveform.
    /// The output node holds `source_len` samples; gradients flow to the mask.
    pub fn masked_istft(&mut self, mask: NodeId, spec: &Spectrogram, cfg: &StftConfig) -> Result<NodeId> {
        let (t, k) = self.rows_cols("masked_istft", mask)?;
        if t != spec.frames || k != spec.bins {
            return Err(Error::ShapeMismatch {
                op: "masked_istft",
                details: format!("mask [{},{}] vs spectrogram [{},{}]", t, k, spec.frames, spec.bins),
            });
        }
        let masked = dsp::apply_mask(spec, self.value(mask))?;
        let wave = dsp::istft(&masked, cfg)?;
        let out = Tensor::vector(wave.samples);
        Ok(self.push(out, Op::MaskedIstft { mask, spec: Box::new(spec.clone()), cfg: *cfg }))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss, accumulating gradients into every
    /// reachable node. Visits each record exactly once in reverse order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].is_scalar() {
            return Err(Error::NonScalarLoss {
                op: "backward",
                shape: self.nodes[loss.0].shape().to_vec(),
            });
        }
        // topological sanity: every input strictly precedes its output
        for (i, rec) in self.records.iter().enumerate() {
            for input in op_inputs(&rec.op) {
                if input.0 >= rec.output.0 {
                    return Err(Error::GraphOrder {
                        record: i,
                        input: input.0,
                        output: rec.output.0,
                    });
                }
            }
        }

        self.nodes[loss.0].set_grad(vec![1.0]);

        for idx in (0..self.records.len()).rev() {
            let out_id = self.records[idx].output;
            if self.nodes[out_id.0].grad().is_none() {
                continue; // not on any path to the loss
            }
            // inputs strictly precede the output, so the arena splits cleanly
            let (inputs, rest) = self.nodes.split_at_mut(out_id.0);
            backprop(&self.records[idx].op, inputs, &rest[0]);
        }
        Ok(())
    }
}

/// Two distinct mutable nodes out of the input arena.
fn pair_mut(nodes: &mut [Tensor], i: usize, j: usize) -> (&mut Tensor, &mut Tensor) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

fn backprop(op: &Op, inputs: &mut [Tensor], out: &Tensor) {
    let g = out.grad().expect("output grad present");
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let m = inputs[a.0].shape()[0];
            let k = inputs[a.0].shape()[1];
            let n = inputs[b.0].shape()[1];
            if a == b {
                // square case: both contributions land in one node
                let (ad, ga) = inputs[a.0].data_and_grad_mut();
                linalg::matmul_nt_acc(ga, g, ad, m, k, n);
                linalg::matmul_tn_acc(ga, ad, g, m, k, n);
            } else {
                let (x, y) = pair_mut(inputs, a.0, b.0);
                linalg::matmul_nt_acc(x.grad_mut(), g, y.data(), m, k, n);
                linalg::matmul_tn_acc(y.grad_mut(), x.data(), g, m, k, n);
            }
        }
        Op::Add { a, b } => {
            if a == b {
                for (ga, gv) in inputs[a.0].grad_mut().iter_mut().zip(g) {
                    *ga += 2.0 * gv;
                }
            } else {
                let (x, y) = pair_mut(inputs, a.0, b.0);
                for (ga, gv) in x.grad_mut().iter_mut().zip(g) {
                    *ga += gv;
                }
                for (gb, gv) in y.grad_mut().iter_mut().zip(g) {
                    *gb += gv;
                }
            }
        }
        Op::Sub { a, b } => {
            if a == b {
                // d(x - x) = 0
                inputs[a.0].grad_mut();
            } else {
                let (x, y) = pair_mut(inputs, a.0, b.0);
                for (ga, gv) in x.grad_mut().iter_mut().zip(g) {
                    *ga += gv;
                }
                for (gb, gv) in y.grad_mut().iter_mut().zip(g) {
                    *gb -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if a == b {
                let (ad, ga) = inputs[a.0].data_and_grad_mut();
                for ((ga, gv), av) in ga.iter_mut().zip(g).zip(ad) {
                    *ga += 2.0 * gv * av;
                }
            } else {
                let (x, y) = pair_mut(inputs, a.0, b.0);
                {
                    let yd = y.data();
                    for ((ga, gv), bv) in x.grad_mut().iter_mut().zip(g).zip(yd) {
                        *ga += gv * bv;
                    }
                }
                for ((gb, gv), av) in y.grad_mut().iter_mut().zip(g).zip(x.data()) {
                    *gb += gv * av;
                }
            }
        }
        Op::AddRow { a, bias } => {
            let (x, b) = pair_mut(inputs, a.0, bias.0);
            let k = b.shape()[0];
            for (ga, gv) in x.grad_mut().iter_mut().zip(g) {
                *ga += gv;
            }
            let gb = b.grad_mut();
            for row in g.chunks(k) {
                for (gbv, gv) in gb.iter_mut().zip(row) {
                    *gbv += gv;
                }
            }
        }
        Op::MulRow { a, scale } => {
            let (x, s) = pair_mut(inputs, a.0, scale.0);
            let k = s.shape()[0];
            {
                let sd = s.data();
                for (row, grow) in x.grad_mut().chunks_mut(k).zip(g.chunks(k)) {
                    for ((gav, gv), sv) in row.iter_mut().zip(grow).zip(sd) {
                        *gav += gv * sv;
                    }
                }
            }
            let gs = s.grad_mut();
            for (arow, grow) in x.data().chunks(k).zip(g.chunks(k)) {
                for ((gsv, gv), av) in gs.iter_mut().zip(grow).zip(arow) {
                    *gsv += gv * av;
                }
            }
        }
        Op::ScalarMul { s, a } => {
            let (sn, x) = pair_mut(inputs, s.0, a.0);
            let sv = sn.data()[0];
            let ds: f64 = g.iter().zip(x.data()).map(|(gv, av)| gv * av).sum();
            sn.grad_mut()[0] += ds;
            for (ga, gv) in x.grad_mut().iter_mut().zip(g) {
                *ga += sv * gv;
            }
        }
        Op::AffineConst { a, mul } => {
            for (ga, gv) in inputs[a.0].grad_mut().iter_mut().zip(g) {
                *ga += mul * gv;
            }
        }
        Op::Tanh { a } => {
            let y = out.data();
            for ((ga, gv), yv) in inputs[a.0].grad_mut().iter_mut().zip(g).zip(y) {
                *ga += gv * (1.0 - yv * yv);
            }
        }
        Op::Relu { a } => {
            let (xd, ga) = inputs[a.0].data_and_grad_mut();
            for ((ga, gv), xv) in ga.iter_mut().zip(g).zip(xd) {
                if *xv > 0.0 {
                    *ga += gv;
                }
            }
        }
        Op::Sigmoid { a } => {
            let y = out.data();
            for ((ga, gv), yv) in inputs[a.0].grad_mut().iter_mut().zip(g).zip(y) {
                *ga += gv * yv * (1.0 - yv);
            }
        }
        Op::Exp { a } => {
            let y = out.data();
            for ((ga, gv), yv) in inputs[a.0].grad_mut().iter_mut().zip(g).zip(y) {
                *ga += gv * yv;
            }
        }
        Op::Log { a } => {
            let (xd, ga) = inputs[a.0].data_and_grad_mut();
            for ((ga, gv), xv) in ga.iter_mut().zip(g).zip(xd) {
                *ga += gv / xv;
            }
        }
        Op::Abs { a } => {
            let (xd, ga) = inputs[a.0].data_and_grad_mut();
            for ((ga, gv), xv) in ga.iter_mut().zip(g).zip(xd) {
                let s = if *xv > 0.0 {
                    1.0
                } else if *xv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *ga += gv * s;
            }
        }
        Op::SumAll { a } => {
            let gv = g[0];
            for ga in inputs[a.0].grad_mut() {
                *ga += gv;
            }
        }
        Op::MeanAll { a } => {
            let n = inputs[a.0].numel() as f64;
            let gv = g[0] / n;
            for ga in inputs[a.0].grad_mut() {
                *ga += gv;
            }
        }
        Op::SliceRows { a, start, len } => {
            let k = inputs[a.0].shape()[1];
            let ga = inputs[a.0].grad_mut();
            for (r, grow) in g.chunks(k).enumerate().take(len) {
                let dst = &mut ga[(start + r) * k..(start + r + 1) * k];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += gv;
                }
            }
        }
        Op::ConcatCols { ref parts } => {
            let widths: Vec<usize> = parts.iter().map(|&p| inputs[p.0].shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let rows = out.shape()[0];
            let mut col_off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let gp = inputs[p.0].grad_mut();
                for row in 0..rows {
                    let src = &g[row * total + col_off..row * total + col_off + w];
                    let dst = &mut gp[row * w..(row + 1) * w];
                    for (d, gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
                col_off += w;
            }
        }
        Op::ContextWindow { a, radius } => {
            let t = inputs[a.0].shape()[0];
            let k = inputs[a.0].shape()[1];
            let span = 2 * radius + 1;
            let ga = inputs[a.0].grad_mut();
            for row in 0..t {
                for o in 0..span {
                    let r = (row + o).saturating_sub(radius).min(t - 1);
                    let src = &g[(row * span + o) * k..(row * span + o + 1) * k];
                    let dst = &mut ga[r * k..(r + 1) * k];
                    for (d, gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
            }
        }
        Op::LayerNormRow { a, ref inv_std, .. } => {
            let kw = inputs[a.0].shape()[1];
            let k = kw as f64;
            let y = out.data();
            let ga = inputs[a.0].grad_mut();
            for (row, (grow, (yrow, &istd))) in g
                .chunks(kw)
                .zip(y.chunks(kw).zip(inv_std.iter()))
                .enumerate()
            {
                let g_mean = grow.iter().sum::<f64>() / k;
                let gy_mean = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum::<f64>() / k;
                let dst = &mut ga[row * kw..(row + 1) * kw];
                for ((d, gv), yv) in dst.iter_mut().zip(grow).zip(yrow) {
                    *d += istd * (gv - g_mean - yv * gy_mean);
                }
            }
        }
        Op::MaskedIstft { mask, ref spec, ref cfg } => {
            let gm = dsp::istft_mask_adjoint(spec, cfg, g);
            for (d, gv) in inputs[mask.0].grad_mut().iter_mut().zip(&gm) {
                *d += gv;
            }
        }
    }
}


fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b } => vec![a, b],
        Op::AddRow { a, bias: b } | Op::MulRow { a, scale: b } => vec![a, b],
        Op::ScalarMul { s, a } => vec![s, a],
        Op::AffineConst { a, .. }
        | Op::Tanh { a }
        | Op::Relu { a }
        | Op::Sigmoid { a }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::Abs { a }
        | Op::SumAll { a }
        | Op::MeanAll { a }
        | Op::SliceRows { a, .. }
        | Op::ContextWindow { a, .. }
        | Op::LayerNormRow { a, .. } => vec![a],
        Op::ConcatCols { ref parts } => parts.clone(),
        Op::MaskedIstft { mask, .. } => vec![mask],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_and_mean() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let b = g.leaf(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = g.mean_all(b);
        assert_eq!(g.value(m).item(), 4.0);
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(w ⊙ w), w = [3] -> dloss/dw = [6]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![3.0]));
        let p = g.leaf(Tensor::vector(vec![5.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(w);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_linearity_in_loss_scale() {
        let build = |scale: f64| {
            let mut g = Graph::new();
            let w = g.leaf(Tensor::vector(vec![0.5, -1.5, 2.0]));
            let t = g.tanh(w);
            let sq = g.mul(t, t).unwrap();
            let s = g.sum_all(sq);
            let loss = g.affine(s, scale, 0.0);
            g.backward(loss).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let g1 = build(1.0);
        let g3 = build(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_window_clamps_edges() {
        let mut g = Graph::new();
        // 3 rows, 1 col: [[1],[2],[3]], radius 1
        let a = g.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let c = g.context_window(a, 1).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 3]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 3.0]
        );
    }

    #[test]
    fn concat_and_slice_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let s = g.slice_rows(c, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0, 8.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]).unwrap());
        let y = g.layer_norm_row(a).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn determinism_same_inputs_same_bits() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap());
            let b = g.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).cos()).collect()).unwrap());
            let c = g.matmul(a, b).unwrap();
            let t = g.tanh(c);
            let loss = g.mean_all(t);
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(a).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
