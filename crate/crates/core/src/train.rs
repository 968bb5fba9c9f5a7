//! Joint training loop and checkpoint persistence.
//!
//! Each step backpropagates `L_main + L_ss` once per utterance, averages
//! gradients over the batch and takes one AdamW step over every parameter
//! group. Per-utterance graphs are independent, so the batch fans out over
//! rayon; results merge in batch order, keeping runs bit-reproducible.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, PlateauConfig, PlateauScheduler};
use crate::data::{mix_seed, DatasetHandle};
use crate::dsp::{self, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::metrics::si_sdr_db;
use crate::model::{build_model, enhance_waveform, BoundModel, Grads, ModelDims, YModel};
use crate::tasks::{
    draw_ss_sample, loss_main, loss_ss, LossWeights, MspCorruption, NoiseBank, SsTask,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: SsTask,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub scheduler: PlateauConfig,
    pub weights: LossWeights,
    pub msp: MspCorruption,
    /// SNR bounds for the NyTT augmentation draw
    pub ss_snr_db: (f64, f64),
    pub stft: StftConfig,
    pub hidden: usize,
    pub context_radius: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: SsTask::NyttReal,
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            scheduler: PlateauConfig::default(),
            weights: LossWeights::default(),
            msp: MspCorruption::default(),
            ss_snr_db: (0.0, 15.0),
            stft: StftConfig::default(),
            hidden: 96,
            context_radius: 2,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.stft.validate()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            bins: self.stft.bins(),
            hidden: self.hidden,
            context_radius: self.context_radius,
        }
    }

    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        crc32fast::hash(json.as_bytes()) as u64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_main_loss: f64,
    pub mean_ss_loss: f64,
    pub val_main_loss: f64,
    pub val_si_sdr_db: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

pub struct TrainedModel {
    pub model: YModel,
    pub history: TrainHistory,
    pub optimizer: AdamW,
}

/// In-memory utterance pair.
#[derive(Clone)]
pub struct TrainPair {
    pub clean: Waveform,
    pub noisy: Waveform,
}

pub fn load_pairs(data: &DatasetHandle) -> Result<Vec<TrainPair>> {
    (0..data.len())
        .map(|i| {
            Ok(TrainPair { clean: data.load_clean(i)?, noisy: data.load_noisy(i)? })
        })
        .collect()
}

/// Joint gradients for one utterance: one graph, one backward pass over
/// `L_main + L_ss`.
fn joint_grads(
    model: &YModel,
    task: SsTask,
    pair: &TrainPair,
    cfg: &StftConfig,
    weights: &LossWeights,
    msp: &MspCorruption,
    bank: &NoiseBank,
    ss_snr: (f64, f64),
    ss_seed: u64,
) -> Result<(f64, f64, Grads)> {
    let noisy_spec = dsp::stft(&pair.noisy, cfg)?;
    let mut g = Graph::new();
    let mut bound = BoundModel::new(model);
    let main = loss_main(&mut g, &mut bound, &pair.clean, &noisy_spec, cfg, weights)?;
    let sample = draw_ss_sample(task, &pair.noisy, &noisy_spec, cfg, bank, msp, ss_snr, ss_seed)?;
    let ss = loss_ss(&mut g, &mut bound, task, &sample, cfg, weights)?;
    let total = g.add(main.loss, ss.loss)?;
    let main_val = g.value(main.loss).item();
    let ss_val = g.value(ss.loss).item();
    if !main_val.is_finite() || !ss_val.is_finite() {
        return Err(Error::Diverged { context: "joint loss".into() });
    }
    g.backward(total)?;
    Ok((main_val, ss_val, bound.collect_grads(&g)))
}

fn validation_stats(
    model: &YModel,
    task: SsTask,
    pairs: &[TrainPair],
    val_idx: &[usize],
    cfg: &StftConfig,
    weights: &LossWeights,
) -> Result<(f64, f64)> {
    let _ = task;
    let stats: Vec<Result<(f64, f64)>> = val_idx
        .par_iter()
        .map(|&i| {
            let pair = &pairs[i];
            let noisy_spec = dsp::stft(&pair.noisy, cfg)?;
            let mut g = Graph::new();
            let mut bound = BoundModel::new(model);
            let main = loss_main(&mut g, &mut bound, &pair.clean, &noisy_spec, cfg, weights)?;
            let main_val = g.value(main.loss).item();
            let enhanced = enhance_waveform(model, &pair.noisy, cfg)?;
            let si = si_sdr_db(&enhanced.samples, &pair.clean.samples)?;
            Ok((main_val, si))
        })
        .collect();
    let mut main_sum = 0.0;
    let mut si_sum = 0.0;
    for s in stats {
        let (m, si) = s?;
        main_sum += m;
        si_sum += si;
    }
    let n = val_idx.len() as f64;
    Ok((main_sum / n, si_sum / n))
}

/// Train a fresh model on (clean, noisy) pairs.
pub fn train_joint(pairs: &[TrainPair], cfg: &TrainConfig, bank: &NoiseBank) -> Result<TrainedModel> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }

    let mut model = build_model(cfg.task.family(), cfg.dims(), cfg.seed)?;
    let view = model.all_params();
    let mut opt = crate::model::optimizer_for_view(
        &model,
        &view,
        AdamWConfig { lr: cfg.lr, ..cfg.adamw },
    );
    let mut sched = PlateauScheduler::new(cfg.scheduler, cfg.lr);

    // fixed-seed validation split
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 11]));
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((pairs.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, pairs.len().saturating_sub(1).max(1));
    let (train_idx, val_idx) = order.split_at(pairs.len() - n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut epoch_order = train_idx.clone();
        let mut erng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 13, epoch as u64]));
        for i in (1..epoch_order.len()).rev() {
            let j = erng.random_range(0..=i);
            epoch_order.swap(i, j);
        }

        let mut main_sum = 0.0;
        let mut ss_sum = 0.0;
        let mut seen = 0usize;
        for batch in epoch_order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, f64, Grads)>> = batch
                .par_iter()
                .map(|&i| {
                    let ss_seed = mix_seed(&[cfg.seed, 17, epoch as u64, i as u64]);
                    joint_grads(
                        &model, cfg.task, &pairs[i], &cfg.stft, &cfg.weights, &cfg.msp, bank,
                        cfg.ss_snr_db, ss_seed,
                    )
                })
                .collect();

            let mut grads = Grads::zeros_like(&model);
            for r in results {
                let (m, s, g) = r?;
                main_sum += m;
                ss_sum += s;
                seen += 1;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Diverged { context: format!("epoch {epoch} gradients") });
            }
            opt.set_lr(sched.lr());
            model.apply_step(&mut opt, &view, &grads)?;
        }

        let (val_main, val_si) =
            validation_stats(&model, cfg.task, pairs, &val_idx, &cfg.stft, &cfg.weights)?;
        if !val_main.is_finite() {
            return Err(Error::Diverged { context: format!("epoch {epoch} validation") });
        }
        let lr = sched.step(val_main);
        history.epochs.push(EpochStats {
            epoch,
            mean_main_loss: main_sum / seen as f64,
            mean_ss_loss: ss_sum / seen as f64,
            val_main_loss: val_main,
            val_si_sdr_db: val_si,
            lr,
        });
    }

    Ok(TrainedModel { model, history, optimizer: opt })
}

// ---- checkpoint persistence --------------------------------------------------

const MAGIC: &[u8; 6] = b"TTTSE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: SsTask,
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub hidden: usize,
    pub context_radius: usize,
    pub epoch: u32,
    pub final_main_loss: f64,
    pub final_ss_loss: f64,
    pub seed: u64,
    pub config_hash: u64,
}

pub struct LoadedCheckpoint {
    pub model: YModel,
    pub meta: CheckpointMeta,
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f32_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 name".into()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn task_byte(task: SsTask) -> u8 {
    match task {
        SsTask::Msp => 0,
        SsTask::NyttGaussian => 1,
        SsTask::NyttReal => 2,
    }
}

fn task_from_byte(b: u8) -> Result<SsTask> {
    match b {
        0 => Ok(SsTask::Msp),
        1 => Ok(SsTask::NyttGaussian),
        2 => Ok(SsTask::NyttReal),
        _ => Err(Error::Checkpoint(format!("unknown task byte {b}"))),
    }
}

/// Serialize model + metadata: magic, topology, metadata, 32-bit leaves,
/// trailing CRC32. Little-endian, length-prefixed names.
pub fn save_checkpoint(path: &Path, model: &YModel, meta: &CheckpointMeta) -> Result<()> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MAGIC);
    w.u8(task_byte(meta.task));
    w.u32(meta.stft.window_len as u32);
    w.u32(meta.stft.hop as u32);
    w.u8(match meta.stft.window {
        dsp::WindowKind::Hann => 0,
        dsp::WindowKind::Rect => 1,
    });
    w.f64(meta.stft.log_floor);
    w.u32(meta.sample_rate);
    w.u32(model.dims().bins as u32);
    w.u32(meta.hidden as u32);
    w.u32(meta.context_radius as u32);
    w.u32(meta.epoch);
    w.f64(meta.final_main_loss);
    w.f64(meta.final_ss_loss);
    w.u64(meta.seed);
    w.u64(meta.config_hash);

    w.u32(model.leaves().len() as u32);
    for leaf in model.leaves() {
        w.name(&leaf.name);
        w.u32(leaf.shape.len() as u32);
        for &d in &leaf.shape {
            w.u32(d as u32);
        }
        w.f32_slice(&leaf.data);
    }

    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    std::fs::write(path, &w.buf)?;
    Ok(())
}

/// Deserialize and validate a checkpoint. When `expect_task` is given, a
/// checkpoint trained for a different task is rejected.
pub fn load_checkpoint(path: &Path, expect_task: Option<SsTask>) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Checkpoint(format!("{}: too small", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Checkpoint(format!("{}: CRC mismatch", path.display())));
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }

    let mut r = ByteReader { buf: body, pos: MAGIC.len() };
    let task = task_from_byte(r.u8()?)?;
    if let Some(expect) = expect_task {
        if expect != task {
            return Err(Error::Topology(format!(
                "checkpoint task {} does not match requested {}",
                task.as_str(),
                expect.as_str()
            )));
        }
    }
    let stft = StftConfig {
        window_len: r.u32()? as usize,
        hop: r.u32()? as usize,
        window: match r.u8()? {
            0 => dsp::WindowKind::Hann,
            1 => dsp::WindowKind::Rect,
            b => return Err(Error::Checkpoint(format!("unknown window byte {b}"))),
        },
        log_floor: r.f64()?,
    };
    let sample_rate = r.u32()?;
    let bins = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let context_radius = r.u32()? as usize;
    let meta = CheckpointMeta {
        task,
        stft,
        sample_rate,
        hidden,
        context_radius,
        epoch: r.u32()?,
        final_main_loss: r.f64()?,
        final_ss_loss: r.f64()?,
        seed: r.u64()?,
        config_hash: r.u64()?,
    };

    let dims = ModelDims { bins, hidden, context_radius };
    let mut model = build_model(task.family(), dims, 0)?;
    let leaf_count = r.u32()? as usize;
    if leaf_count != model.leaves().len() {
        return Err(Error::Checkpoint(format!(
            "{} leaves in file, topology wants {}",
            leaf_count,
            model.leaves().len()
        )));
    }
    for id in model.leaf_ids().collect::<Vec<_>>() {
        let name = r.name()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let leaf = model.leaf_mut(id);
        if leaf.name != name || leaf.shape != shape {
            return Err(Error::Checkpoint(format!(
                "leaf `{}` {:?} in file, registry wants `{}` {:?}",
                name, shape, leaf.name, leaf.shape
            )));
        }
        let numel: usize = shape.iter().product();
        leaf.data = r.f32_vec(numel)?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(LoadedCheckpoint { model, meta })
}
