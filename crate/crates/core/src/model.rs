//! The Y-shaped mask-predicting network: a shared encoder feeding a main
//! (mask) branch and a self-supervised branch, with a parameter registry
//! that drives gradient routing and test-time update selection.
//!
//! Blocks are per-frame: dense + layer norm (learned gain/bias) + activation
//! + residual where widths allow. The first encoder block projects the
//! context-stacked input down to the hidden width, so it has no residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Which auxiliary-task family the topology serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Masked spectrogram prediction: encoder 4 blocks, branches 3 blocks + heads.
    Msp,
    /// Noisy-target denoising: encoder 6 blocks, branches 1 block + heads.
    Nytt,
}

impl TaskFamily {
    pub fn encoder_blocks(self) -> usize {
        match self {
            TaskFamily::Msp => 4,
            TaskFamily::Nytt => 6,
        }
    }

    pub fn branch_blocks(self) -> usize {
        match self {
            TaskFamily::Msp => 3,
            TaskFamily::Nytt => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::Msp => "msp",
            TaskFamily::Nytt => "nytt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Encoder,
    Main,
    Ss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub bins: usize,
    pub hidden: usize,
    pub context_radius: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        // hidden width sized so 30 desk-scale epochs stay inside the
        // training-time budget on a two-core machine
        ModelDims { bins: 257, hidden: 96, context_radius: 2 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.hidden == 0 {
            return Err(Error::Config("bins and hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        (2 * self.context_radius + 1) * self.bins
    }
}

/// One trainable array with its registry entry.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub name: String,
    pub group: Group,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeafId(pub(crate) usize);

impl LeafId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Tanh,
    Relu,
    None,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    weight: LeafId,
    bias: LeafId,
    ln_gain: LeafId,
    ln_bias: LeafId,
    activation: Activation,
    residual: bool,
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    weight: LeafId,
    bias: LeafId,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct YModel {
    family: TaskFamily,
    dims: ModelDims,
    leaves: Vec<Leaf>,
    encoder: Vec<BlockIdx>,
    main_blocks: Vec<BlockIdx>,
    main_head: [DenseIdx; 2],
    ss_blocks: Vec<BlockIdx>,
    ss_head: [DenseIdx; 2],
}

struct Builder {
    leaves: Vec<Leaf>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn xavier(&mut self, rows: usize, cols: usize) -> Vec<f64> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols).map(|_| self.rng.random_range(-limit..limit)).collect()
    }

    fn add(&mut self, name: String, group: Group, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> LeafId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = LeafId(self.leaves.len());
        self.leaves.push(Leaf { name, group, kind, shape, data });
        id
    }

    fn block(&mut self, prefix: &str, group: Group, inw: usize, outw: usize, activation: Activation) -> BlockIdx {
        let w = self.xavier(inw, outw);
        let weight = self.add(format!("{prefix}.w"), group, ParamKind::Weight, vec![inw, outw], w);
        let bias = self.add(format!("{prefix}.b"), group, ParamKind::Bias, vec![outw], vec![0.0; outw]);
        let ln_gain = self.add(format!("{prefix}.ln_g"), group, ParamKind::Weight, vec![outw], vec![1.0; outw]);
        let ln_bias = self.add(format!("{prefix}.ln_b"), group, ParamKind::Bias, vec![outw], vec![0.0; outw]);
        BlockIdx { weight, bias, ln_gain, ln_bias, activation, residual: inw == outw }
    }

    fn dense(&mut self, prefix: &str, group: Group, inw: usize, outw: usize, activation: Activation) -> DenseIdx {
        let w = self.xavier(inw, outw);
        let weight = self.add(format!("{prefix}.w"), group, ParamKind::Weight, vec![inw, outw], w);
        let bias = self.add(format!("{prefix}.b"), group, ParamKind::Bias, vec![outw], vec![0.0; outw]);
        DenseIdx { weight, bias, activation }
    }
}

/// Build a Y-model with Xavier-uniform weights, zero biases, unit LN gains.
pub fn build_model(family: TaskFamily, dims: ModelDims, seed: u64) -> Result<YModel> {
    dims.validate()?;
    let mut b = Builder { leaves: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let h = dims.hidden;
    let k = dims.bins;

    let mut encoder = Vec::new();
    for i in 0..family.encoder_blocks() {
        let inw = if i == 0 { dims.input_width() } else { h };
        encoder.push(b.block(&format!("enc.b{i}"), Group::Encoder, inw, h, Activation::Relu));
    }

    let mut main_blocks = Vec::new();
    for i in 0..family.branch_blocks() {
        main_blocks.push(b.block(&format!("main.b{i}"), Group::Main, h, h, Activation::Relu));
    }
    let main_head = [
        b.dense("main.d0", Group::Main, h, h, Activation::Tanh),
        b.dense("main.d1", Group::Main, h, k, Activation::Tanh),
    ];

    let mut ss_blocks = Vec::new();
    for i in 0..family.branch_blocks() {
        ss_blocks.push(b.block(&format!("ss.b{i}"), Group::Ss, h, h, Activation::Relu));
    }
    let ss_head = match family {
        // regression head: ReLU hidden, unbounded linear output
        TaskFamily::Msp => [
            b.dense("ss.d0", Group::Ss, h, h, Activation::Relu),
            b.dense("ss.d1", Group::Ss, h, k, Activation::None),
        ],
        // same mask head as the main branch
        TaskFamily::Nytt => [
            b.dense("ss.d0", Group::Ss, h, h, Activation::Tanh),
            b.dense("ss.d1", Group::Ss, h, k, Activation::Tanh),
        ],
    };

    Ok(YModel {
        family,
        dims,
        leaves: b.leaves,
        encoder,
        main_blocks,
        main_head,
        ss_blocks,
        ss_head,
    })
}

/// Ordered selection over the registry; optimizer steps through a view
/// touch no other leaf.
#[derive(Debug, Clone)]
pub struct ParamView {
    pub ids: Vec<LeafId>,
}

impl ParamView {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-leaf gradients aligned with the model's registry order.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_leaf: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_like(model: &YModel) -> Self {
        Grads { by_leaf: vec![None; model.leaves.len()] }
    }

    pub fn get(&self, id: LeafId) -> Option<&[f64]> {
        self.by_leaf.get(id.0).and_then(|g| g.as_deref())
    }

    /// Accumulate another gradient set (used to sum over a batch).
    pub fn accumulate(&mut self, other: &Grads) {
        if self.by_leaf.len() < other.by_leaf.len() {
            self.by_leaf.resize(other.by_leaf.len(), None);
        }
        for (dst, src) in self.by_leaf.iter_mut().zip(&other.by_leaf) {
            match (dst.as_mut(), src) {
                (_, None) => {}
                (None, Some(s)) => *dst = Some(s.clone()),
                (Some(d), Some(s)) => {
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_leaf.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.by_leaf
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.by_leaf
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn set(&mut self, id: LeafId, g: Vec<f64>) {
        if self.by_leaf.len() <= id.0 {
            self.by_leaf.resize(id.0 + 1, None);
        }
        self.by_leaf[id.0] = Some(g);
    }
}

/// Bit-exact copy of every leaf value; restoring requires the same topology.
/// Optimizer moments travel along only when explicitly included.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    signature: String,
    values: Vec<Vec<f64>>,
    moments: Option<Box<AdamW>>,
}

impl ParamSnapshot {
    pub fn moments(&self) -> Option<&AdamW> {
        self.moments.as_deref()
    }

    /// Leaf values in registry order.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

impl YModel {
    pub fn family(&self) -> TaskFamily {
        self.family
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaf(&self, id: LeafId) -> &Leaf {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: LeafId) -> &mut Leaf {
        &mut self.leaves[id.0]
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = LeafId> + '_ {
        (0..self.leaves.len()).map(LeafId)
    }

    pub fn leaf_by_name(&self, name: &str) -> Option<(LeafId, &Leaf)> {
        self.leaves
            .iter()
            .enumerate()
            .find(|(_, l)| l.name == name)
            .map(|(i, l)| (LeafId(i), l))
    }

    /// Topology signature used by snapshots and checkpoints.
    pub fn signature(&self) -> String {
        format!(
            "{}:bins={}:hidden={}:ctx={}:leaves={}",
            self.family.as_str(),
            self.dims.bins,
            self.dims.hidden,
            self.dims.context_radius,
            self.leaves.len()
        )
    }

    /// Leaves matching both filters, in registry order.
    pub fn select_params(&self, groups: &[Group], kinds: &[ParamKind]) -> Result<ParamView> {
        let ids: Vec<LeafId> = self
            .leaves
            .iter()
            .enumerate()
            .filter(|(_, l)| groups.contains(&l.group) && kinds.contains(&l.kind))
            .map(|(i, _)| LeafId(i))
            .collect();
        if ids.is_empty() {
            return Err(Error::EmptySelection);
        }
        Ok(ParamView { ids })
    }

    pub fn all_params(&self) -> ParamView {
        ParamView { ids: self.leaf_ids().collect() }
    }

    pub fn snapshot(&self, moments: Option<&AdamW>) -> ParamSnapshot {
        ParamSnapshot {
            signature: self.signature(),
            values: self.leaves.iter().map(|l| l.data.clone()).collect(),
            moments: moments.map(|m| Box::new(m.clone())),
        }
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.signature != self.signature() {
            return Err(Error::Topology(format!(
                "snapshot `{}` vs model `{}`",
                snap.signature,
                self.signature()
            )));
        }
        for (leaf, vals) in self.leaves.iter_mut().zip(&snap.values) {
            leaf.data.copy_from_slice(vals);
        }
        Ok(())
    }

    /// Mutable slices for a view's leaves (ids are strictly ascending).
    fn view_params_mut(&mut self, view: &ParamView) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(view.ids.len());
        let mut rest: &mut [Leaf] = &mut self.leaves;
        let mut consumed = 0;
        for &LeafId(i) in &view.ids {
            debug_assert!(i >= consumed);
            let (head, tail) = rest.split_at_mut(i - consumed + 1);
            out.push(head.last_mut().expect("nonempty split").data.as_mut_slice());
            rest = tail;
            consumed = i + 1;
        }
        out
    }

    /// One optimizer step over the view. Slot order is the view order.
    pub fn apply_step(&mut self, opt: &mut AdamW, view: &ParamView, grads: &Grads) -> Result<()> {
        let names: Vec<String> = view.ids.iter().map(|&id| self.leaf(id).name.clone()).collect();
        let grad_refs: Vec<Option<&[f64]>> = view.ids.iter().map(|&id| grads.get(id)).collect();
        let mut params = self.view_params_mut(view);
        opt.step(&mut params, &grad_refs, &|i| names[i].clone())
    }
}

/// AdamW sized for the given view, in view order.
pub fn optimizer_for_view(model: &YModel, view: &ParamView, cfg: crate::autodiff::AdamWConfig) -> AdamW {
    let sizes: Vec<usize> = view.ids.iter().map(|&id| model.leaf(id).data.len()).collect();
    AdamW::new(cfg, &sizes)
}

/// Lazily binds leaves into a graph so the encoder is shared between the
/// two branch passes, and maps node gradients back to leaves afterwards.
pub struct BoundModel<'m> {
    model: &'m YModel,
    nodes: Vec<Option<NodeId>>,
}

impl<'m> BoundModel<'m> {
    pub fn new(model: &'m YModel) -> Self {
        BoundModel { model, nodes: vec![None; model.leaves.len()] }
    }

    pub fn model(&self) -> &YModel {
        self.model
    }

    fn node(&mut self, g: &mut Graph, id: LeafId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let leaf = self.model.leaf(id);
        let t = Tensor::new(leaf.shape.clone(), leaf.data.clone()).expect("registry shape");
        let n = g.leaf(t);
        self.nodes[id.0] = Some(n);
        n
    }

    fn apply_activation(g: &mut Graph, x: NodeId, a: Activation) -> NodeId {
        match a {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::None => x,
        }
    }

    fn block(&mut self, g: &mut Graph, x: NodeId, blk: &BlockIdx) -> Result<NodeId> {
        let w = self.node(g, blk.weight);
        let b = self.node(g, blk.bias);
        let gain = self.node(g, blk.ln_gain);
        let lnb = self.node(g, blk.ln_bias);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        let z = g.layer_norm_row(z)?;
        let z = g.mul_row(z, gain)?;
        let z = g.add_row(z, lnb)?;
        let z = Self::apply_activation(g, z, blk.activation);
        if blk.residual {
            g.add(z, x)
        } else {
            Ok(z)
        }
    }

    fn dense(&mut self, g: &mut Graph, x: NodeId, d: &DenseIdx) -> Result<NodeId> {
        let w = self.node(g, d.weight);
        let b = self.node(g, d.bias);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        Ok(Self::apply_activation(g, z, d.activation))
    }

    fn encode(&mut self, g: &mut Graph, logmag: NodeId) -> Result<NodeId> {
        let mut x = g.context_window(logmag, self.model.dims.context_radius)?;
        let blocks = self.model.encoder.clone();
        for blk in &blocks {
            x = self.block(g, x, blk)?;
        }
        Ok(x)
    }

    /// Mask in [0,1]^{frames x bins} from a `[frames, bins]` log-magnitude node.
    pub fn forward_main(&mut self, g: &mut Graph, logmag: NodeId) -> Result<NodeId> {
        let mut x = self.encode(g, logmag)?;
        let blocks = self.model.main_blocks.clone();
        for blk in &blocks {
            x = self.block(g, x, blk)?;
        }
        let head = self.model.main_head;
        x = self.dense(g, x, &head[0])?;
        x = self.dense(g, x, &head[1])?;
        // tanh output in [-1,1] mapped onto a magnitude mask
        let mask = g.affine(x, 0.5, 0.5);
        g.value(mask).validate("forward_main mask")?;
        Ok(mask)
    }

    /// Self-supervised branch output: log-magnitude regression for MSP,
    /// a [0,1] mask over the augmented input for NyTT.
    pub fn forward_ss(&mut self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let mut x = self.encode(g, input)?;
        let blocks = self.model.ss_blocks.clone();
        for blk in &blocks {
            x = self.block(g, x, blk)?;
        }
        let head = self.model.ss_head;
        x = self.dense(g, x, &head[0])?;
        x = self.dense(g, x, &head[1])?;
        let out = match self.model.family {
            TaskFamily::Msp => x,
            TaskFamily::Nytt => g.affine(x, 0.5, 0.5),
        };
        g.value(out).validate("forward_ss output")?;
        Ok(out)
    }

    /// Pull node gradients back into registry order after `g.backward`.
    pub fn collect_grads(&self, g: &Graph) -> Grads {
        let mut grads = Grads { by_leaf: vec![None; self.model.leaves.len()] };
        for (i, bound) in self.nodes.iter().enumerate() {
            if let Some(node) = bound {
                if let Some(gr) = g.grad(*node) {
                    grads.set(LeafId(i), gr.to_vec());
                }
            }
        }
        grads
    }
}

/// Value-level convenience: predict a mask with a throwaway graph.
pub fn predict_mask(model: &YModel, logmag: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.leaf(logmag.clone());
    let mut bound = BoundModel::new(model);
    let mask = bound.forward_main(&mut g, input)?;
    Ok(g.value(mask).clone())
}

/// The whole main-task inference pipeline: STFT, mask prediction, masked
/// resynthesis with the noisy phase.
pub fn enhance_waveform(
    model: &YModel,
    noisy: &crate::dsp::Waveform,
    cfg: &crate::dsp::StftConfig,
) -> Result<crate::dsp::Waveform> {
    let spec = crate::dsp::stft(noisy, cfg)?;
    let logmag = crate::dsp::log_magnitude(&spec, cfg);
    let mask = predict_mask(model, &logmag)?;
    let masked = crate::dsp::apply_mask(&spec, &mask)?;
    crate::dsp::istft(&masked, cfg)
}
