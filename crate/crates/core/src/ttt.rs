//! Test-time training: per-sample self-supervised adaptation of the shared
//! encoder and auxiliary branch before each main-task prediction.
//!
//! Four strategies:
//! - standalone: adapt from the pristine parameters for every sample, use
//!   the update for one prediction, then discard it
//! - online: carry adapted parameters (and optimizer moments) from sample
//!   to sample
//! - online-batch: online, but each update averages the self-supervised
//!   loss over a sliding window of recent samples
//! - online-batch-bias: online-batch restricted to bias parameters
//!
//! The main branch is never part of the update set, so its parameters stay
//! bit-identical under every strategy.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph};
use crate::data::mix_seed;
use crate::dsp::{self, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::metrics::{lsd_db, si_sdr_db, ssnr_db, EvalRecord};
use crate::model::{
    enhance_waveform, optimizer_for_view, BoundModel, Grads, Group, ParamKind, ParamSnapshot,
    ParamView, YModel,
};
use crate::tasks::{draw_ss_sample, loss_ss, LossWeights, MspCorruption, NoiseBank, SsSample, SsTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Standalone,
    Online,
    OnlineBatch,
    OnlineBatchBias,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standalone => "standalone",
            Strategy::Online => "online",
            Strategy::OnlineBatch => "online-batch",
            Strategy::OnlineBatchBias => "online-batch-bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standalone" => Ok(Strategy::Standalone),
            "online" => Ok(Strategy::Online),
            "online-batch" => Ok(Strategy::OnlineBatch),
            "online-batch-bias" => Ok(Strategy::OnlineBatchBias),
            other => Err(Error::Config(format!("unknown TTT strategy `{other}`"))),
        }
    }

    pub fn all() -> [Strategy; 4] {
        [
            Strategy::Standalone,
            Strategy::Online,
            Strategy::OnlineBatch,
            Strategy::OnlineBatchBias,
        ]
    }

    fn uses_window(self) -> bool {
        matches!(self, Strategy::OnlineBatch | Strategy::OnlineBatchBias)
    }
}

/// Task-dependent adaptation rate: gentle for gaussian augmentation, which
/// otherwise drags the encoder toward the heavily-noised regime.
pub fn default_ttt_lr(task: SsTask) -> f64 {
    match task {
        SsTask::Msp | SsTask::NyttReal => 1e-4,
        SsTask::NyttGaussian => 1e-6,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TttConfig {
    pub strategy: Strategy,
    pub task: SsTask,
    pub lr: f64,
    pub steps_per_sample: usize,
    pub window: usize,
    pub bias_only: bool,
    pub weights: LossWeights,
    pub msp: MspCorruption,
    /// SNR bounds for the NyTT augmentation draw during adaptation
    pub ss_snr_db: (f64, f64),
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl TttConfig {
    pub fn new(strategy: Strategy, task: SsTask) -> Self {
        TttConfig {
            strategy,
            task,
            lr: default_ttt_lr(task),
            steps_per_sample: 1,
            window: 5,
            bias_only: strategy == Strategy::OnlineBatchBias,
            weights: LossWeights::default(),
            msp: MspCorruption::default(),
            ss_snr_db: (0.0, 15.0),
            // no decoupled decay at test time; a handful of steps should not
            // shrink the trained parameters
            adamw: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if self.steps_per_sample == 0 {
            return Err(Error::Config("steps per sample must be >= 1".into()));
        }
        if self.strategy == Strategy::OnlineBatchBias && !self.bias_only {
            return Err(Error::Config(
                "online-batch-bias requires the bias-only kinds filter".into(),
            ));
        }
        Ok(())
    }

    fn kinds(&self) -> Vec<ParamKind> {
        if self.bias_only || self.strategy == Strategy::OnlineBatchBias {
            vec![ParamKind::Bias]
        } else {
            vec![ParamKind::Weight, ParamKind::Bias]
        }
    }

    fn window_len(&self) -> usize {
        if self.strategy.uses_window() {
            self.window
        } else {
            1
        }
    }
}

/// Per-sample adaptation record for the diagnostics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptDiagnostics {
    pub sample: String,
    pub ss_loss_before: f64,
    pub ss_loss_after: f64,
    pub param_delta_norm: f64,
    pub rolled_back: bool,
    pub wall_ms: f64,
}

struct WindowEntry {
    /// kept so window contents stay inspectable alongside the cached draw
    #[cfg_attr(not(test), allow(dead_code))]
    noisy: Waveform,
    ss: SsSample,
}

/// Strategy-specific mutable adaptation state.
pub struct TttState {
    model: YModel,
    pristine: ParamSnapshot,
    view: ParamView,
    opt: AdamW,
    window: VecDeque<WindowEntry>,
    cfg: TttConfig,
    stft: StftConfig,
    bank: NoiseBank,
}

impl TttState {
    pub fn new(model: YModel, stft: StftConfig, cfg: TttConfig, bank: NoiseBank) -> Result<Self> {
        cfg.validate()?;
        if cfg.task.family() != model.family() {
            return Err(Error::Config(format!(
                "task {} does not fit a {} model",
                cfg.task.as_str(),
                model.family().as_str()
            )));
        }
        let view = model.select_params(&[Group::Encoder, Group::Ss], &cfg.kinds())?;
        let opt = optimizer_for_view(&model, &view, AdamWConfig { lr: cfg.lr, ..cfg.adamw });
        let pristine = model.snapshot(None);
        Ok(TttState {
            model,
            pristine,
            view,
            opt,
            window: VecDeque::new(),
            cfg,
            stft,
            bank,
        })
    }

    pub fn model(&self) -> &YModel {
        &self.model
    }

    pub fn into_model(self) -> YModel {
        self.model
    }

    pub fn pristine(&self) -> &ParamSnapshot {
        &self.pristine
    }

    fn fresh_optimizer(&self) -> AdamW {
        optimizer_for_view(&self.model, &self.view, AdamWConfig { lr: self.cfg.lr, ..self.cfg.adamw })
    }

    /// Mean self-supervised loss over the adaptation set, with gradients.
    fn ss_pass(&self, entries: &[&WindowEntry], with_grads: bool) -> Result<(f64, Option<Grads>)> {
        let outs: Vec<Result<(f64, Option<Grads>)>> = entries
            .par_iter()
            .map(|entry| {
                let mut g = Graph::new();
                let mut bound = BoundModel::new(&self.model);
                let ss = loss_ss(&mut g, &mut bound, self.cfg.task, &entry.ss, &self.stft, &self.cfg.weights)?;
                let val = g.value(ss.loss).item();
                if with_grads {
                    g.backward(ss.loss)?;
                    Ok((val, Some(bound.collect_grads(&g))))
                } else {
                    Ok((val, None))
                }
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut grads = with_grads.then(|| Grads::zeros_like(&self.model));
        for out in outs {
            let (val, g) = out?;
            loss_sum += val;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                acc.accumulate(&g);
            }
        }
        let n = entries.len() as f64;
        if let Some(acc) = grads.as_mut() {
            acc.scale(1.0 / n);
        }
        Ok((loss_sum / n, grads))
    }

    /// Adapt on the current sample (and window, per strategy), then predict
    /// the enhanced waveform with the updated encoder and the fixed main
    /// branch. A non-finite loss or update rolls the state back as if this
    /// sample's adaptation had never run.
    pub fn adapt_and_predict(&mut self, id: &str, x: &Waveform) -> Result<(Waveform, AdaptDiagnostics)> {
        let t0 = Instant::now();

        // one deterministic draw per utterance identity, reused by every
        // window that contains it
        let draw_seed = mix_seed(&[self.cfg.seed, crc32fast::hash(id.as_bytes()) as u64]);
        let noisy_spec = dsp::stft(x, &self.stft)?;
        let ss = draw_ss_sample(
            self.cfg.task,
            x,
            &noisy_spec,
            &self.stft,
            &self.bank,
            &self.cfg.msp,
            self.cfg.ss_snr_db,
            draw_seed,
        )?;
        self.window.push_back(WindowEntry { noisy: x.clone(), ss });
        while self.window.len() > self.cfg.window_len() {
            self.window.pop_front();
        }

        if self.cfg.strategy == Strategy::Standalone {
            self.model.restore(&self.pristine)?;
            self.opt = self.fresh_optimizer();
        }

        let pre_params = self.model.snapshot(None);
        let pre_opt = self.opt.clone();

        let entries: Vec<&WindowEntry> = if self.cfg.strategy.uses_window() {
            self.window.iter().collect()
        } else {
            vec![self.window.back().expect("just pushed")]
        };

        let mut rolled_back = false;
        let mut ss_before = f64::NAN;
        for step in 0..self.cfg.steps_per_sample {
            match self.ss_pass(&entries, true) {
                Ok((loss, Some(grads))) if loss.is_finite() && grads.is_finite() => {
                    if step == 0 {
                        ss_before = loss;
                    }
                    // split the borrow: ss_pass borrowed self immutably
                    let view = self.view.clone();
                    self.model.apply_step(&mut self.opt, &view, &grads)?;
                    let finite = view
                        .ids
                        .iter()
                        .all(|&id| self.model.leaf(id).data.iter().all(|v| v.is_finite()));
                    if !finite {
                        rolled_back = true;
                        break;
                    }
                }
                Ok(_) => {
                    rolled_back = true;
                    break;
                }
                Err(Error::NonFinite { .. }) => {
                    rolled_back = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if rolled_back {
            self.model.restore(&pre_params)?;
            self.opt = pre_opt;
        }

        let (ss_after, _) = self.ss_pass(&entries, false).unwrap_or((f64::NAN, None));
        if rolled_back {
            ss_before = ss_after;
        }

        let mut delta_sq = 0.0;
        for &leaf_id in &self.view.ids {
            let now = &self.model.leaf(leaf_id).data;
            let before = &pre_params.values()[leaf_id.index()];
            for (a, b) in now.iter().zip(before) {
                let d = a - b;
                delta_sq += d * d;
            }
        }

        let enhanced = enhance_waveform(&self.model, x, &self.stft)?;

        if self.cfg.strategy == Strategy::Standalone {
            // used for one prediction, then discarded
            self.model.restore(&self.pristine)?;
        }

        Ok((
            enhanced,
            AdaptDiagnostics {
                sample: id.to_string(),
                ss_loss_before: ss_before,
                ss_loss_after: ss_after,
                param_delta_norm: delta_sq.sqrt(),
                rolled_back,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            },
        ))
    }
}

// ---- evaluation drivers --------------------------------------------------------

/// One utterance to evaluate; metrics are skipped when `clean` is absent.
#[derive(Clone)]
pub struct EvalSample {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Option<Waveform>,
}

fn record_for(
    id: &str,
    method: &str,
    strategy: &str,
    domain: &str,
    enhanced: &Waveform,
    clean: Option<&Waveform>,
    stft: &StftConfig,
    wall_ms: f64,
) -> Result<EvalRecord> {
    let (si, ssnr, lsd) = match clean {
        Some(clean) => {
            let si = si_sdr_db(&enhanced.samples, &clean.samples)?;
            let ssnr = ssnr_db(&enhanced.samples, &clean.samples, clean.sample_rate)?;
            let est_spec = dsp::stft(enhanced, stft)?;
            let ref_spec = dsp::stft(clean, stft)?;
            let lsd = lsd_db(&est_spec, &ref_spec, stft)?;
            (Some(si), ssnr, Some(lsd))
        }
        None => (None, None, None),
    };
    Ok(EvalRecord {
        utterance: id.to_string(),
        method: method.to_string(),
        strategy: strategy.to_string(),
        domain: domain.to_string(),
        si_sdr_db: si,
        ssnr_db: ssnr,
        lsd_db: lsd,
        wall_ms,
    })
}

/// Rows for the unprocessed input.
pub fn evaluate_noisy(samples: &[EvalSample], stft: &StftConfig, domain: &str) -> Result<Vec<EvalRecord>> {
    samples
        .par_iter()
        .map(|s| record_for(&s.id, "noisy", "noisy", domain, &s.noisy, s.clean.as_ref(), stft, 0.0))
        .collect()
}

/// Rows for a frozen model (no adaptation): the joint-training row, and
/// source-domain re-evaluation of adapted states.
pub fn evaluate_model(
    model: &YModel,
    samples: &[EvalSample],
    stft: &StftConfig,
    method: &str,
    strategy: &str,
    domain: &str,
) -> Result<Vec<EvalRecord>> {
    samples
        .par_iter()
        .map(|s| {
            let t0 = Instant::now();
            let enhanced = enhance_waveform(model, &s.noisy, stft)?;
            record_for(
                &s.id,
                method,
                strategy,
                domain,
                &enhanced,
                s.clean.as_ref(),
                stft,
                t0.elapsed().as_secs_f64() * 1e3,
            )
        })
        .collect()
}

pub struct TttRun {
    pub records: Vec<EvalRecord>,
    pub diagnostics: Vec<AdaptDiagnostics>,
    /// Parameters as they stand after the full pass (standalone leaves them
    /// pristine by construction).
    pub model: YModel,
}

/// Sequentially adapt-and-predict over a dataset in its fixed order.
pub fn run_ttt_eval(
    model: &YModel,
    stft: &StftConfig,
    samples: &[EvalSample],
    cfg: &TttConfig,
    bank: &NoiseBank,
    method: &str,
    domain: &str,
) -> Result<TttRun> {
    let mut state = TttState::new(model.clone(), *stft, cfg.clone(), bank.clone())?;
    let mut records = Vec::with_capacity(samples.len());
    let mut diagnostics = Vec::with_capacity(samples.len());
    for s in samples {
        let t0 = Instant::now();
        let (enhanced, diag) = state.adapt_and_predict(&s.id, &s.noisy)?;
        records.push(record_for(
            &s.id,
            method,
            cfg.strategy.as_str(),
            domain,
            &enhanced,
            s.clean.as_ref(),
            stft,
            t0.elapsed().as_secs_f64() * 1e3,
        )?);
        diagnostics.push(diag);
    }
    Ok(TttRun { records, diagnostics, model: state.into_model() })
}

/// Evaluate an already-adapted model on source-domain data without any
/// further updates.
pub fn reevaluate_source(
    adapted: &YModel,
    samples: &[EvalSample],
    stft: &StftConfig,
    method: &str,
    strategy: &str,
    domain: &str,
) -> Result<Vec<EvalRecord>> {
    evaluate_model(adapted, samples, stft, method, strategy, domain)
}

/// Dataset rows as evaluation samples.
pub fn eval_samples_from_dataset(data: &crate::data::DatasetHandle) -> Result<Vec<EvalSample>> {
    (0..data.len())
        .map(|i| {
            Ok(EvalSample {
                id: data.entries()[i].id.clone(),
                noisy: data.load_noisy(i)?,
                clean: Some(data.load_clean(i)?),
            })
        })
        .collect()
}
