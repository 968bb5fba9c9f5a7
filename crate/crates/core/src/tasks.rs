//! Self-supervised task constructors and loss terms.
//!
//! The main objective is mask MAE plus negative SI-SDR of the resynthesized
//! waveform, with configurable weights. The auxiliary objective is either
//! masked-spectrogram MSE (MSP) or the same mask+SI-SDR pair with the noisy
//! signal as reference and a further-noised copy as input (NyTT).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::{gen_noise, mix_seed, NoiseFamily};
use crate::dsp::{self, Spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{BoundModel, TaskFamily};

pub const SI_SDR_EPS: f64 = 1e-8;
pub const ORACLE_MASK_EPS: f64 = 1e-8;
const LOG10_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// The three auxiliary-task variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsTask {
    Msp,
    NyttGaussian,
    NyttReal,
}

impl SsTask {
    pub fn family(self) -> TaskFamily {
        match self {
            SsTask::Msp => TaskFamily::Msp,
            SsTask::NyttGaussian | SsTask::NyttReal => TaskFamily::Nytt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SsTask::Msp => "msp",
            SsTask::NyttGaussian => "nytt-gaussian",
            SsTask::NyttReal => "nytt-real",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(SsTask::Msp),
            "nytt-gaussian" => Ok(SsTask::NyttGaussian),
            "nytt-real" => Ok(SsTask::NyttReal),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected msp, nytt-gaussian, nytt-real)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mask: f64,
    pub si_sdr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mask: 1.0, si_sdr: 1.0 }
    }
}

// ---- oracle mask -----------------------------------------------------------

/// Clipped ideal amplitude mask: min(|S_clean| / (|S_noisy| + eps), 1).
pub fn oracle_mask(clean: &Spectrogram, noisy: &Spectrogram) -> Result<Tensor> {
    if !clean.same_geometry(noisy) {
        return Err(Error::Geometry(format!(
            "oracle_mask: clean [{}x{}] vs noisy [{}x{}]",
            clean.frames, clean.bins, noisy.frames, noisy.bins
        )));
    }
    let data = clean
        .values
        .iter()
        .zip(&noisy.values)
        .map(|(c, n)| (c.norm() / (n.norm() + ORACLE_MASK_EPS)).min(1.0))
        .collect();
    Tensor::new(vec![clean.frames, clean.bins], data)
}

// ---- loss terms ------------------------------------------------------------

/// Mean absolute error between a predicted mask node and an oracle mask.
pub fn loss_mask(g: &mut Graph, pred: NodeId, oracle: &Tensor) -> Result<NodeId> {
    if g.value(pred).shape() != oracle.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_mask",
            details: format!("{:?} vs {:?}", g.value(pred).shape(), oracle.shape()),
        });
    }
    let target = g.leaf(oracle.clone());
    let diff = g.sub(pred, target)?;
    let mag = g.abs(diff);
    Ok(g.mean_all(mag))
}

/// Mean squared error between predicted and target log-magnitudes, over all
/// time-frequency bins.
pub fn loss_msp(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    if g.value(pred).shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_msp",
            details: format!("{:?} vs {:?}", g.value(pred).shape(), target.shape()),
        });
    }
    let t = g.leaf(target.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Negative SI-SDR in dB, differentiable through the estimate:
/// SI-SDR = 10*log10((||a s||^2 + eps) / (||a s - est||^2 + eps)),
/// a = <est, s> / ||s||^2.
///
/// The arithmetic mirrors [`crate::metrics::si_sdr_db`] operation for
/// operation so that metric == -loss holds exactly.
pub fn loss_si_sdr(g: &mut Graph, est: NodeId, reference: &[f64]) -> Result<NodeId> {
    let n = g.value(est).numel();
    if n != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_si_sdr",
            details: format!("est {} samples vs ref {}", n, reference.len()),
        });
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(Error::Data("SI-SDR reference has zero energy".into()));
    }
    let ref_leaf = g.leaf(Tensor::vector(reference.to_vec()));
    let prod = g.mul(est, ref_leaf)?;
    let dot = g.sum_all(prod);
    let alpha = g.affine(dot, 1.0 / ref_energy, 0.0);
    let target = g.scalar_mul(alpha, ref_leaf)?;
    let target_sq = g.mul(target, target)?;
    let num = g.sum_all(target_sq);
    let diff = g.sub(target, est)?;
    let diff_sq = g.mul(diff, diff)?;
    let den = g.sum_all(diff_sq);
    let num_eps = g.affine(num, 1.0, SI_SDR_EPS);
    let den_eps = g.affine(den, 1.0, SI_SDR_EPS);
    let log_num = g.log(num_eps);
    let log_den = g.log(den_eps);
    let ratio = g.sub(log_num, log_den)?;
    let si_sdr = g.affine(ratio, LOG10_SCALE, 0.0);
    Ok(g.affine(si_sdr, -1.0, 0.0))
}

// ---- MSP sample construction -----------------------------------------------

/// Rectangular-patch corruption for masked spectrogram prediction. Patches
/// are grid-aligned cells of `patch_frames` x `patch_bins`; a seeded shuffle
/// zeroes `round(fraction * cells)` of them, so the zeroed area matches the
/// requested fraction up to one patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MspCorruption {
    pub patch_bins: usize,
    pub patch_frames: usize,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for MspCorruption {
    fn default() -> Self {
        MspCorruption { patch_bins: 16, patch_frames: 8, fraction: 0.3, seed: 0 }
    }
}

pub struct MspSample {
    pub input: Tensor,
    pub target: Tensor,
    /// true where a bin was zeroed
    pub zeroed: Vec<bool>,
}

pub fn make_msp_sample(noisy_logmag: &Tensor, c: &MspCorruption, log_floor: f64) -> Result<MspSample> {
    let [frames, bins] = *noisy_logmag.shape() else {
        return Err(Error::ShapeMismatch {
            op: "make_msp_sample",
            details: format!("expected 2-d log-magnitude, got {:?}", noisy_logmag.shape()),
        });
    };
    if c.patch_frames == 0 || c.patch_bins == 0 || c.patch_frames > frames || c.patch_bins > bins {
        return Err(Error::Config(format!(
            "patch {}x{} does not fit spectrogram {}x{}",
            c.patch_frames, c.patch_bins, frames, bins
        )));
    }
    if !(0.0..=1.0).contains(&c.fraction) {
        return Err(Error::Config("mask fraction must lie in [0, 1]".into()));
    }

    let cell_rows = frames.div_ceil(c.patch_frames);
    let cell_cols = bins.div_ceil(c.patch_bins);
    let n_cells = cell_rows * cell_cols;
    let n_zero = ((c.fraction * n_cells as f64).round() as usize).min(n_cells);

    let mut cells: Vec<usize> = (0..n_cells).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    // Fisher-Yates
    for i in (1..n_cells).rev() {
        let j = rng.random_range(0..=i);
        cells.swap(i, j);
    }

    let floor_value = log_floor.ln();
    let mut input = noisy_logmag.clone();
    let mut zeroed = vec![false; frames * bins];
    for &cell in cells.iter().take(n_zero) {
        let ci = cell / cell_cols;
        let cj = cell % cell_cols;
        let t0 = ci * c.patch_frames;
        let t1 = ((ci + 1) * c.patch_frames).min(frames);
        let k0 = cj * c.patch_bins;
        let k1 = ((cj + 1) * c.patch_bins).min(bins);
        for t in t0..t1 {
            for k in k0..k1 {
                input.data_mut()[t * bins + k] = floor_value;
                zeroed[t * bins + k] = true;
            }
        }
    }
    Ok(MspSample { input, target: noisy_logmag.clone(), zeroed })
}

// ---- NyTT sample construction ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSource {
    Gaussian,
    Bank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NyttAugmentation {
    pub source: NoiseSource,
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub seed: u64,
}

impl NyttAugmentation {
    pub fn new(source: NoiseSource, seed: u64) -> Self {
        NyttAugmentation { source, snr_lo_db: 0.0, snr_hi_db: 15.0, seed }
    }
}

/// Noise inventory for NyTT-real: deterministic synthetic entries and/or a
/// WAV directory enumerated in filename order.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    entries: Vec<BankEntry>,
}

#[derive(Debug, Clone)]
enum BankEntry {
    Synthetic { family: NoiseFamily, seed: u64 },
    File(PathBuf),
}

impl NoiseBank {
    /// Pink, brown, AM-babble and burst entries, four seeds each.
    pub fn synthetic(seed: u64) -> Self {
        Self::from_families(
            &[
                NoiseFamily::Pink,
                NoiseFamily::Brown,
                NoiseFamily::AmBabble,
                NoiseFamily::Burst,
            ],
            seed,
        )
    }

    /// Four seeded entries per requested family.
    pub fn from_families(families: &[NoiseFamily], seed: u64) -> Self {
        let mut entries = Vec::new();
        for (fi, &family) in families.iter().enumerate() {
            for j in 0..4u64 {
                entries.push(BankEntry::Synthetic {
                    family,
                    seed: mix_seed(&[seed, fi as u64, j]),
                });
            }
        }
        NoiseBank { entries }
    }

    pub fn empty() -> Self {
        NoiseBank { entries: Vec::new() }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        Ok(NoiseBank { entries: paths.into_iter().map(BankEntry::File).collect() })
    }

    /// Merge user WAVs after the synthetic entries.
    pub fn extend_from_dir(&mut self, dir: &Path) -> Result<()> {
        let other = Self::from_dir(dir)?;
        self.entries.extend(other.entries);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn draw(&self, idx: usize, duration_samples: usize, sample_rate: u32) -> Result<Waveform> {
        match &self.entries[idx % self.entries.len()] {
            BankEntry::Synthetic { family, seed } => gen_noise(
                *family,
                duration_samples as f64 / sample_rate as f64,
                sample_rate,
                *seed,
            ),
            BankEntry::File(path) => dsp::read_wav(path, Some(sample_rate)),
        }
    }
}

/// Seeded white Gaussian noise.
fn gaussian_noise(len: usize, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Waveform { samples, sample_rate }
}

pub struct NyttSample {
    pub noisier: Waveform,
    pub target: Waveform,
    pub drawn_snr_db: f64,
}

/// Further-noise the noisy input at a uniformly drawn SNR; the original
/// noisy signal becomes the target.
pub fn make_nytt_sample(noisy: &Waveform, aug: &NyttAugmentation, bank: &NoiseBank) -> Result<NyttSample> {
    if noisy.power() <= 0.0 {
        return Err(Error::Data("NyTT input has zero power".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(aug.seed);
    let snr = rng.random_range(aug.snr_lo_db..=aug.snr_hi_db);
    let noise = match aug.source {
        NoiseSource::Gaussian => {
            gaussian_noise(noisy.len(), noisy.sample_rate, mix_seed(&[aug.seed, 1]))
        }
        NoiseSource::Bank => {
            if bank.is_empty() {
                return Err(Error::Data("noise bank is empty".into()));
            }
            let idx = rng.random_range(0..bank.len());
            bank.draw(idx, noisy.len(), noisy.sample_rate)?
        }
    };
    let noisier = dsp::mix_at_snr(noisy, &noise, snr, mix_seed(&[aug.seed, 2]))?;
    Ok(NyttSample { noisier, target: noisy.clone(), drawn_snr_db: snr })
}

// ---- composed objectives -----------------------------------------------------

/// Pieces of the main objective for one utterance.
pub struct MainLoss {
    pub loss: NodeId,
    pub mask: NodeId,
    pub mask_term: NodeId,
    pub si_sdr_term: NodeId,
}

/// Main objective: mask MAE against the oracle mask plus negative SI-SDR of
/// the masked resynthesis against the clean reference.
pub fn loss_main(
    g: &mut Graph,
    bound: &mut BoundModel<'_>,
    clean: &Waveform,
    noisy_spec: &Spectrogram,
    cfg: &StftConfig,
    weights: &LossWeights,
) -> Result<MainLoss> {
    let clean_spec = dsp::stft(clean, cfg)?;
    let oracle = oracle_mask(&clean_spec, noisy_spec)?;
    let logmag = dsp::log_magnitude(noisy_spec, cfg);
    let input = g.leaf(logmag);
    let mask = bound.forward_main(g, input)?;
    let mask_term = loss_mask(g, mask, &oracle)?;
    let est = g.masked_istft(mask, noisy_spec, cfg)?;
    let si_sdr_term = loss_si_sdr(g, est, &clean.samples)?;
    let wm = g.affine(mask_term, weights.mask, 0.0);
    let ws = g.affine(si_sdr_term, weights.si_sdr, 0.0);
    let loss = g.add(wm, ws)?;
    Ok(MainLoss { loss, mask, mask_term, si_sdr_term })
}

/// Pieces of the auxiliary objective for one utterance.
pub struct SsLoss {
    pub loss: NodeId,
    pub drawn_snr_db: Option<f64>,
}

/// Prebuilt self-supervised sample, so sliding-window strategies can reuse
/// one deterministic draw per utterance.
#[derive(Debug, Clone)]
pub enum SsSample {
    Msp { input: Tensor, target: Tensor },
    Nytt { noisier: Waveform, target: Waveform, drawn_snr_db: f64 },
}

/// Draw the self-supervised sample for one utterance with a caller-derived
/// seed. `noisy_spec` must be the STFT of `noisy`; `snr_range` bounds the
/// NyTT augmentation draw.
pub fn draw_ss_sample(
    task: SsTask,
    noisy: &Waveform,
    noisy_spec: &Spectrogram,
    cfg: &StftConfig,
    bank: &NoiseBank,
    msp: &MspCorruption,
    snr_range: (f64, f64),
    seed: u64,
) -> Result<SsSample> {
    match task {
        SsTask::Msp => {
            let logmag = dsp::log_magnitude(noisy_spec, cfg);
            let sample = make_msp_sample(&logmag, &MspCorruption { seed, ..*msp }, cfg.log_floor)?;
            Ok(SsSample::Msp { input: sample.input, target: sample.target })
        }
        SsTask::NyttGaussian | SsTask::NyttReal => {
            let source = if task == SsTask::NyttGaussian {
                NoiseSource::Gaussian
            } else {
                NoiseSource::Bank
            };
            let aug = NyttAugmentation {
                snr_lo_db: snr_range.0,
                snr_hi_db: snr_range.1,
                ..NyttAugmentation::new(source, seed)
            };
            let s = make_nytt_sample(noisy, &aug, bank)?;
            Ok(SsSample::Nytt {
                noisier: s.noisier,
                target: s.target,
                drawn_snr_db: s.drawn_snr_db,
            })
        }
    }
}

/// Auxiliary objective on a prebuilt sample. For NyTT the "clean/noisy"
/// roles are played by (noisy, noisier).
pub fn loss_ss(
    g: &mut Graph,
    bound: &mut BoundModel<'_>,
    task: SsTask,
    sample: &SsSample,
    cfg: &StftConfig,
    weights: &LossWeights,
) -> Result<SsLoss> {
    if task.family() != bound.model().family() {
        return Err(Error::Config(format!(
            "task {} needs a {} topology, model is {}",
            task.as_str(),
            task.family().as_str(),
            bound.model().family().as_str()
        )));
    }
    match (task, sample) {
        (SsTask::Msp, SsSample::Msp { input, target }) => {
            let inp = g.leaf(input.clone());
            let pred = bound.forward_ss(g, inp)?;
            let loss = loss_msp(g, pred, target)?;
            Ok(SsLoss { loss, drawn_snr_db: None })
        }
        (SsTask::NyttGaussian | SsTask::NyttReal, SsSample::Nytt { noisier, target, drawn_snr_db }) => {
            let noisier_spec = dsp::stft(noisier, cfg)?;
            let target_spec = dsp::stft(target, cfg)?;
            let oracle = oracle_mask(&target_spec, &noisier_spec)?;
            let logmag = dsp::log_magnitude(&noisier_spec, cfg);
            let inp = g.leaf(logmag);
            let mask = bound.forward_ss(g, inp)?;
            let mask_term = loss_mask(g, mask, &oracle)?;
            let est = g.masked_istft(mask, &noisier_spec, cfg)?;
            let si_sdr_term = loss_si_sdr(g, est, &target.samples)?;
            let wm = g.affine(mask_term, weights.mask, 0.0);
            let ws = g.affine(si_sdr_term, weights.si_sdr, 0.0);
            let loss = g.add(wm, ws)?;
            Ok(SsLoss { loss, drawn_snr_db: Some(*drawn_snr_db) })
        }
        _ => Err(Error::Config("self-supervised sample kind does not match task".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::DEFAULT_SAMPLE_RATE;

    fn noise_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform {
            samples: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    #[test]
    fn oracle_mask_limits() {
        let cfg = StftConfig::default();
        let w = noise_wave(4096, 1);
        let s = dsp::stft(&w, &cfg).unwrap();
        // clean == noisy: mask ~ 1
        let m = oracle_mask(&s, &s).unwrap();
        assert!(m.data().iter().all(|&v| v > 0.999 && v <= 1.0));
        // clean == 0: mask == 0
        let silence = Waveform::new(vec![0.0; 4096], DEFAULT_SAMPLE_RATE).unwrap();
        let zs = dsp::stft(&silence, &cfg).unwrap();
        let m = oracle_mask(&zs, &s).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_mae_basics() {
        let mut g = Graph::new();
        let oracle = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.6]).unwrap();
        let pred = g.leaf(oracle.clone());
        let l = loss_mask(&mut g, pred, &oracle).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut g = Graph::new();
        let shifted: Vec<f64> = oracle.data().iter().map(|v| v + 0.1).collect();
        let pred = g.leaf(Tensor::matrix(2, 3, shifted).unwrap());
        let l = loss_mask(&mut g, pred, &oracle).unwrap();
        assert!((g.value(l).item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mask_mae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..35).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..35).map(|_| rng.random_range(0.0..1.0)).collect();
        let brute: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 35.0;
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::matrix(5, 7, a).unwrap());
        let l = loss_mask(&mut g, pred, &Tensor::matrix(5, 7, b).unwrap()).unwrap();
        assert!((g.value(l).item() - brute).abs() < 1e-12);
    }

    #[test]
    fn msp_mse_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = (0..35).map(|_| rng.random_range(-4.0..2.0)).collect();
        let b: Vec<f64> = (0..35).map(|_| rng.random_range(-4.0..2.0)).collect();
        let mut brute = 0.0;
        for t in 0..5 {
            for k in 0..7 {
                let d = a[t * 7 + k] - b[t * 7 + k];
                brute += d * d;
            }
        }
        brute /= 35.0;
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::matrix(5, 7, a).unwrap());
        let l = loss_msp(&mut g, pred, &Tensor::matrix(5, 7, b).unwrap()).unwrap();
        assert!((g.value(l).item() - brute).abs() < 1e-12);

        // equal inputs: zero; constant offset d: d^2
        let mut g = Graph::new();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pred = g.leaf(x.clone());
        let l = loss_msp(&mut g, pred, &x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut g = Graph::new();
        let shifted = Tensor::matrix(2, 2, x.data().iter().map(|v| v + 0.25).collect()).unwrap();
        let pred = g.leaf(shifted);
        let l = loss_msp(&mut g, pred, &x).unwrap();
        assert!((g.value(l).item() - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn si_sdr_loss_properties() {
        let reference = noise_wave(32000, 11).samples;
        let run = |est: &[f64]| {
            let mut g = Graph::new();
            let e = g.leaf(Tensor::vector(est.to_vec()));
            let l = loss_si_sdr(&mut g, e, &reference).unwrap();
            g.value(l).item()
        };
        // est == ref: very large SI-SDR
        assert!(-run(&reference) >= 80.0);
        // scale invariance away from the zero-residual point (the epsilon
        // guard is absolute, so the degenerate est == ref case moves by it)
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let est: Vec<f64> = reference.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        for a in [2.0, 0.5, 10.0] {
            let scaled: Vec<f64> = est.iter().map(|v| a * v).collect();
            assert!((run(&scaled) - run(&est)).abs() < 1e-9, "scale {a}");
        }
        // orthogonal estimate: strongly negative SI-SDR
        let mut orth = vec![0.0; reference.len()];
        for i in (0..orth.len()).step_by(2) {
            orth[i] = reference[i + 1];
            orth[i + 1] = -reference[i];
        }
        let dot: f64 = orth.iter().zip(&reference).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        assert!(-run(&orth) < -40.0);

        // zero reference is an error
        let mut g = Graph::new();
        let e = g.leaf(Tensor::vector(vec![1.0; 8]));
        assert!(loss_si_sdr(&mut g, e, &vec![0.0; 8]).is_err());
    }

    #[test]
    fn msp_sample_fraction_zero_and_full() {
        let logmag = Tensor::matrix(16, 32, vec![-1.0; 16 * 32]).unwrap();
        let c = MspCorruption { patch_bins: 8, patch_frames: 4, fraction: 0.0, seed: 1 };
        let s = make_msp_sample(&logmag, &c, 1e-8).unwrap();
        assert_eq!(s.input.data(), s.target.data());
        assert!(s.zeroed.iter().all(|&z| !z));

        let c = MspCorruption { fraction: 1.0, ..c };
        let s = make_msp_sample(&logmag, &c, 1e-8).unwrap();
        let floor = (1e-8f64).ln();
        assert!(s.input.data().iter().all(|&v| v == floor));
        assert!(s.zeroed.iter().all(|&z| z));
    }

    #[test]
    fn msp_sample_fraction_statistics() {
        let logmag = Tensor::matrix(40, 64, vec![0.5; 40 * 64]).unwrap();
        let mut mean = 0.0;
        for seed in 0..100 {
            let c = MspCorruption { patch_bins: 16, patch_frames: 8, fraction: 0.3, seed };
            let s = make_msp_sample(&logmag, &c, 1e-8).unwrap();
            let frac = s.zeroed.iter().filter(|&&z| z).count() as f64 / s.zeroed.len() as f64;
            mean += frac;
        }
        mean /= 100.0;
        // one patch of the 5x4-cell grid is 5% of the area
        assert!((mean - 0.3).abs() <= 0.05, "mean zeroed fraction {mean}");
    }

    #[test]
    fn msp_patch_too_large_errors() {
        let logmag = Tensor::matrix(4, 8, vec![0.0; 32]).unwrap();
        let c = MspCorruption { patch_bins: 16, patch_frames: 8, fraction: 0.3, seed: 0 };
        assert!(make_msp_sample(&logmag, &c, 1e-8).is_err());
    }

    #[test]
    fn nytt_sample_snr_contract() {
        let noisy = noise_wave(8000, 21);
        let bank = NoiseBank::synthetic(7);
        let aug = NyttAugmentation::new(NoiseSource::Bank, 3);
        let s = make_nytt_sample(&noisy, &aug, &bank).unwrap();
        assert_eq!(s.target.samples, noisy.samples);
        let measured = dsp::measured_snr_db(&noisy.samples, &s.noisier.samples);
        assert!((measured - s.drawn_snr_db).abs() < 1e-9);
        assert!((0.0..=15.0).contains(&s.drawn_snr_db));

        // gaussian source, forced snr via a degenerate range
        let aug = NyttAugmentation {
            source: NoiseSource::Gaussian,
            snr_lo_db: 0.0,
            snr_hi_db: 0.0,
            seed: 5,
        };
        let s = make_nytt_sample(&noisy, &aug, &NoiseBank::empty()).unwrap();
        let added: Vec<f64> = s
            .noisier
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(a, b)| a - b)
            .collect();
        let p_added = added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
        assert!((p_added / noisy.power() - 1.0).abs() < 1e-9);

        // empty bank errors
        let aug = NyttAugmentation::new(NoiseSource::Bank, 3);
        assert!(make_nytt_sample(&noisy, &aug, &NoiseBank::empty()).is_err());
    }

    #[test]
    fn nytt_extreme_snr_is_identity_like() {
        let noisy = noise_wave(4096, 60);
        let aug = NyttAugmentation {
            source: NoiseSource::Gaussian,
            snr_lo_db: 1e6,
            snr_hi_db: 1e6,
            seed: 8,
        };
        let s = make_nytt_sample(&noisy, &aug, &NoiseBank::empty()).unwrap();
        let max_dev = s
            .noisier
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-12);
    }

    #[test]
    fn nytt_snr_draws_are_uniform() {
        // Kolmogorov-Smirnov against U[0,15] over 1000 seeded draws.
        let noisy = noise_wave(2048, 33);
        let bank = NoiseBank::synthetic(1);
        let mut draws: Vec<f64> = (0..1000u64)
            .map(|seed| {
                let aug = NyttAugmentation::new(NoiseSource::Bank, seed);
                make_nytt_sample(&noisy, &aug, &bank).unwrap().drawn_snr_db / 15.0
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let mut d_stat: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let upper = (i as f64 + 1.0) / n - x;
            let lower = x - i as f64 / n;
            d_stat = d_stat.max(upper).max(lower);
        }
        // asymptotic Kolmogorov p-value
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d_stat;
        let mut p = 0.0;
        for j in 1..=100 {
            let sign = if j % 2 == 1 { 2.0 } else { -2.0 };
            p += sign * (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        }
        assert!(p > 0.01, "KS p-value {p}, D={d_stat}");
    }

    #[test]
    fn main_loss_is_sum_of_terms() {
        let cfg = StftConfig::default();
        let dims = crate::model::ModelDims { bins: cfg.bins(), hidden: 8, context_radius: 1 };
        let model = crate::model::build_model(TaskFamily::Msp, dims, 3).unwrap();
        let clean = noise_wave(2048, 41);
        let noisy = dsp::mix_at_snr(&clean, &noise_wave(2048, 42), 5.0, 0).unwrap();
        let noisy_spec = dsp::stft(&noisy, &cfg).unwrap();

        let mut g = Graph::new();
        let mut bound = BoundModel::new(&model);
        let out =
            loss_main(&mut g, &mut bound, &clean, &noisy_spec, &cfg, &LossWeights::default()).unwrap();
        let total = g.value(out.loss).item();
        let mask_term = g.value(out.mask_term).item();
        let si_term = g.value(out.si_sdr_term).item();
        assert!((total - (mask_term + si_term)).abs() < 1e-12);
        assert!(total.is_finite());
    }

    #[test]
    fn ss_loss_rejects_wrong_family() {
        let cfg = StftConfig::default();
        let dims = crate::model::ModelDims { bins: cfg.bins(), hidden: 8, context_radius: 1 };
        let model = crate::model::build_model(TaskFamily::Msp, dims, 3).unwrap();
        let noisy = noise_wave(2048, 50);
        let spec = dsp::stft(&noisy, &cfg).unwrap();
        let bank = NoiseBank::synthetic(0);
        let sample = draw_ss_sample(
            SsTask::NyttGaussian,
            &noisy,
            &spec,
            &cfg,
            &bank,
            &MspCorruption::default(),
            (0.0, 15.0),
            0,
        )
        .unwrap();
        let mut g = Graph::new();
        let mut bound = BoundModel::new(&model);
        let err =
            loss_ss(&mut g, &mut bound, SsTask::NyttGaussian, &sample, &cfg, &LossWeights::default());
        assert!(err.is_err());
    }

    #[test]
    fn msp_identity_prediction_gives_zero_loss_path() {
        // the head can represent the target exactly: loss_msp(target, target) == 0
        let logmag =
            Tensor::matrix(16, 32, (0..512).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let c = MspCorruption { patch_bins: 8, patch_frames: 4, fraction: 0.0, seed: 9 };
        let s = make_msp_sample(&logmag, &c, 1e-8).unwrap();
        let mut g = Graph::new();
        let pred = g.leaf(s.target.clone());
        let l = loss_msp(&mut g, pred, &s.target).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(s.input.data(), s.target.data());
    }
}
