//! STFT analysis/synthesis front-end and signal mixing.
//!
//! Analysis reflects `window/2` samples at both ends so frames cover the
//! whole utterance, then takes windowed FFTs at the configured hop.
//! Synthesis is weighted overlap-add with per-sample window-energy
//! normalization, which reconstructs every retained sample exactly for any
//! window with nonzero coverage (Hann at 25% hop in particular).

mod wav;

pub use wav::{read_wav, write_wav, WavEncoding};

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_WINDOW_LEN: usize = 512;
pub const DEFAULT_HOP: usize = 128;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-8;

const OLA_DEN_EPS: f64 = 1e-12;

/// Mono waveform in 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite { context: "waveform samples".into() });
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    Hann,
    Rect,
}

/// STFT geometry: window length is the FFT size, `bins = window_len/2 + 1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
            window: WindowKind::Hann,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::Config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.window_len
            )));
        }
        if self.window_len % 2 != 0 {
            return Err(Error::Config("window length must be even".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Periodic window samples.
    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.window_len;
        match self.window {
            WindowKind::Rect => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| {
                    let c = (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                    0.5 * (1.0 - c)
                })
                .collect(),
        }
    }
}

/// Complex STFT with its geometry. `source_len` is the unpadded waveform
/// length so that synthesis can trim back to it.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    /// Row-major `[frames, bins]`.
    pub values: Vec<Complex<f64>>,
    pub hop: usize,
    pub window_len: usize,
    pub sample_rate: u32,
    pub source_len: usize,
}

impl Spectrogram {
    pub fn at(&self, t: usize, k: usize) -> Complex<f64> {
        self.values[t * self.bins + k]
    }

    pub fn magnitude(&self, t: usize, k: usize) -> f64 {
        self.at(t, k).norm()
    }

    pub fn same_geometry(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames
            && self.bins == other.bins
            && self.hop == other.hop
            && self.window_len == other.window_len
            && self.source_len == other.source_len
    }

    /// Sum of |S|^2 with Hermitian weights (interior bins counted twice),
    /// i.e. the energy of the implied full spectrum.
    pub fn energy(&self) -> f64 {
        let mut e = 0.0;
        for t in 0..self.frames {
            for k in 0..self.bins {
                let w = if k == 0 || k == self.bins - 1 { 1.0 } else { 2.0 };
                e += w * self.at(t, k).norm_sqr();
            }
        }
        e
    }
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let len = samples.len();
    debug_assert!(pad < len);
    let mut out = Vec::with_capacity(len + 2 * pad);
    for j in (1..=pad).rev() {
        out.push(samples[j]);
    }
    out.extend_from_slice(samples);
    for j in 1..=pad {
        out.push(samples[len - 1 - j]);
    }
    out
}

/// Frame count for a waveform of `len` samples after reflection padding.
pub fn frame_count(len: usize, cfg: &StftConfig) -> usize {
    let padded = len + cfg.window_len;
    1 + (padded - cfg.window_len) / cfg.hop
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.len() < cfg.window_len {
        return Err(Error::TooShort { len: w.len(), min: cfg.window_len });
    }
    let n = cfg.window_len;
    let pad = n / 2;
    let padded = reflect_pad(&w.samples, pad);
    let frames = 1 + (padded.len() - n) / cfg.hop;
    let bins = cfg.bins();
    let window = cfg.window_samples();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut values = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let off = t * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(padded[off + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        values,
        hop: cfg.hop,
        window_len: n,
        sample_rate: w.sample_rate,
        source_len: w.len(),
    })
}

/// Per-frame real signal from the half spectrum (inverse FFT of the
/// Hermitian extension, scaled by 1/N).
fn frames_from_spectrum(s: &Spectrogram) -> Vec<Vec<f64>> {
    let n = s.window_len;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut frames = Vec::with_capacity(s.frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..s.frames {
        buf[0] = s.at(t, 0);
        buf[n / 2] = s.at(t, s.bins - 1);
        for k in 1..n / 2 {
            let v = s.at(t, k);
            buf[k] = v;
            buf[n - k] = v.conj();
        }
        ifft.process(&mut buf);
        frames.push(buf.iter().map(|c| c.re / n as f64).collect());
    }
    frames
}

pub fn istft(s: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    if s.window_len != cfg.window_len || s.hop != cfg.hop || s.bins != cfg.bins() {
        return Err(Error::Geometry(format!(
            "spectrogram ({} win, {} hop, {} bins) vs config ({} win, {} hop, {} bins)",
            s.window_len,
            s.hop,
            s.bins,
            cfg.window_len,
            cfg.hop,
            cfg.bins()
        )));
    }
    let n = cfg.window_len;
    let pad = n / 2;
    let padded_len = (s.frames - 1) * cfg.hop + n;
    let window = cfg.window_samples();
    let frames = frames_from_spectrum(s);

    let mut acc = vec![0.0; padded_len];
    let mut den = vec![0.0; padded_len];
    for (t, frame) in frames.iter().enumerate() {
        let off = t * cfg.hop;
        for i in 0..n {
            acc[off + i] += window[i] * frame[i];
            den[off + i] += window[i] * window[i];
        }
    }
    let mut out = vec![0.0; s.source_len];
    for (j, o) in out.iter_mut().enumerate() {
        let p = pad + j;
        if den[p] > OLA_DEN_EPS {
            *o = acc[p] / den[p];
        }
    }
    Waveform::new(out, s.sample_rate)
}

/// OLA window-energy envelope over the padded domain, shared by the
/// synthesis path and its adjoint.
pub(crate) fn ola_denominator(frames: usize, cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.window_len;
    let window = cfg.window_samples();
    let mut den = vec![0.0; (frames - 1) * cfg.hop + n];
    for t in 0..frames {
        let off = t * cfg.hop;
        for i in 0..n {
            den[off + i] += window[i] * window[i];
        }
    }
    den
}

/// Gradient of `istft(mask ⊙ spec)` with respect to the mask: the adjoint of
/// the linear map mask → waveform, evaluated at `out_grad`.
pub(crate) fn istft_mask_adjoint(
    s: &Spectrogram,
    cfg: &StftConfig,
    out_grad: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(out_grad.len(), s.source_len);
    let n = cfg.window_len;
    let pad = n / 2;
    let window = cfg.window_samples();
    let den = ola_denominator(s.frames, cfg);

    // Lift the output gradient into the padded OLA domain.
    let mut lifted = vec![0.0; den.len()];
    for (j, &g) in out_grad.iter().enumerate() {
        let p = pad + j;
        if den[p] > OLA_DEN_EPS {
            lifted[p] = g / den[p];
        }
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut grad = vec![0.0; s.frames * s.bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..s.frames {
        let off = t * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(window[i] * lifted[off + i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..s.bins {
            let c = if k == 0 || k == s.bins - 1 { 1.0 } else { 2.0 };
            let d_spec = buf[k] * (c / n as f64);
            // mask is real: d mask = Re(conj(X) * dL/dS)
            grad[t * s.bins + k] = (s.at(t, k).conj() * d_spec).re;
        }
    }
    grad
}

/// ln(max(|S|, log_floor)) as a `[frames, bins]` tensor.
pub fn log_magnitude(s: &Spectrogram, cfg: &StftConfig) -> Tensor {
    let floor = cfg.log_floor;
    let data: Vec<f64> = s.values.iter().map(|c| c.norm().max(floor).ln()).collect();
    Tensor::new(vec![s.frames, s.bins], data).expect("geometry is consistent")
}

/// Scale magnitudes by a `[frames, bins]` mask in [0,1], keeping phase.
pub fn apply_mask(s: &Spectrogram, mask: &Tensor) -> Result<Spectrogram> {
    if mask.shape() != [s.frames, s.bins] {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            details: format!(
                "mask shape {:?} vs spectrogram [{}, {}]",
                mask.shape(),
                s.frames,
                s.bins
            ),
        });
    }
    let md = mask.data();
    if md.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::Data("mask values must lie in [0, 1]".into()));
    }
    let mut out = s.clone();
    for (v, &m) in out.values.iter_mut().zip(md) {
        *v *= m;
    }
    Ok(out)
}

/// Fit `noise` to `len` samples: cyclic extension when short, a seeded crop
/// when long.
pub(crate) fn fit_noise_len(noise: &[f64], len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    if noise.len() == len {
        return noise.to_vec();
    }
    if noise.len() > len {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..=noise.len() - len);
        return noise[start..start + len].to_vec();
    }
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let take = (len - out.len()).min(noise.len());
        out.extend_from_slice(&noise[..take]);
    }
    out
}

/// clean + alpha * noise with alpha set so the clean-to-scaled-noise power
/// ratio is exactly `snr_db`, powers measured over the full length.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Data(format!(
            "sample rate mismatch: clean {} Hz vs noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() {
        return Err(Error::Data("noise is empty".into()));
    }
    let fitted = fit_noise_len(&noise.samples, clean.len(), seed);
    let p_clean = clean.power();
    let p_noise = if fitted.is_empty() {
        0.0
    } else {
        fitted.iter().map(|s| s * s).sum::<f64>() / fitted.len() as f64
    };
    if p_clean <= 0.0 {
        return Err(Error::Data("clean signal has zero power".into()));
    }
    if p_noise <= 0.0 {
        return Err(Error::Data("noise signal has zero power".into()));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean
        .samples
        .iter()
        .zip(&fitted)
        .map(|(c, n)| c + alpha * n)
        .collect();
    Waveform::new(samples, clean.sample_rate)
}

/// 10*log10(P_ref / P_residual) for `mixed = ref + residual`.
pub fn measured_snr_db(reference: &[f64], mixed: &[f64]) -> f64 {
    let p_ref: f64 = reference.iter().map(|s| s * s).sum();
    let p_res: f64 = reference
        .iter()
        .zip(mixed)
        .map(|(r, m)| {
            let d = m - r;
            d * d
        })
        .sum();
    10.0 * (p_ref / p_res).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn sine_at_bin_center_concentrates() {
        let cfg = StftConfig { window: WindowKind::Rect, ..StftConfig::default() };
        let n = cfg.window_len;
        let fs = DEFAULT_SAMPLE_RATE as f64;
        let bin = 40;
        let f = bin as f64 * fs / n as f64;
        let samples: Vec<f64> = (0..4 * n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
            .collect();
        let w = Waveform::new(samples, DEFAULT_SAMPLE_RATE).unwrap();
        let s = stft(&w, &cfg).unwrap();
        // pick an interior frame, away from reflection effects
        let t = s.frames / 2;
        let peak = (0..s.bins)
            .max_by(|&a, &b| s.magnitude(t, a).total_cmp(&s.magnitude(t, b)))
            .unwrap();
        assert_eq!(peak, bin);
    }

    #[test]
    fn zero_waveform_zero_spectrogram() {
        let cfg = StftConfig::default();
        let w = Waveform::new(vec![0.0; 4096], DEFAULT_SAMPLE_RATE).unwrap();
        let s = stft(&w, &cfg).unwrap();
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
        let back = istft(&s, &cfg).unwrap();
        assert!(back.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn roundtrip_is_exact_for_hann_quarter_hop() {
        let cfg = StftConfig::default();
        let w = noise_wave(DEFAULT_SAMPLE_RATE as usize, 7);
        let s = stft(&w, &cfg).unwrap();
        let back = istft(&s, &cfg).unwrap();
        assert_eq!(back.len(), w.len());
        let max_err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "roundtrip error {max_err}");
    }

    #[test]
    fn too_short_input_errors() {
        let cfg = StftConfig::default();
        let w = Waveform::new(vec![0.1; 100], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(matches!(stft(&w, &cfg), Err(Error::TooShort { .. })));
    }

    #[test]
    fn single_frame_degenerate_ola() {
        // Exactly one frame: y = w*f / w^2 = f wherever the window is nonzero.
        let cfg = StftConfig::default();
        let n = cfg.window_len;
        let w = noise_wave(n, 3);
        let mut s = stft(&w, &cfg).unwrap();
        // keep only the first frame
        s.values.truncate(s.bins);
        s.frames = 1;
        s.source_len = n / 2; // what one frame can cover after trimming
        let back = istft(&s, &cfg).unwrap();
        assert_eq!(back.len(), n / 2);
        // compare against the directly computed windowed frame
        let window = cfg.window_samples();
        let padded = reflect_pad(&w.samples, n / 2);
        for j in 0..back.len() {
            let i = n / 2 + j;
            let want = if window[i] * window[i] > OLA_DEN_EPS { padded[i] } else { 0.0 };
            assert!((back.samples[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn per_frame_parseval_ratio_constant() {
        let cfg = StftConfig::default();
        let n = cfg.window_len as f64;
        let mut ratios = Vec::new();
        for seed in 0..4 {
            let w = noise_wave(9000, seed);
            let s = stft(&w, &cfg).unwrap();
            // framed, windowed time-domain energy
            let window = cfg.window_samples();
            let padded = reflect_pad(&w.samples, cfg.window_len / 2);
            let mut e_frames = 0.0;
            for t in 0..s.frames {
                let off = t * cfg.hop;
                for i in 0..cfg.window_len {
                    let v = window[i] * padded[off + i];
                    e_frames += v * v;
                }
            }
            ratios.push(s.energy() / e_frames);
        }
        for r in &ratios {
            assert!((r / ratios[0] - 1.0).abs() < 1e-9, "ratio drifted: {ratios:?}");
        }
        assert!((ratios[0] / n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_magnitude_floors_and_units() {
        let cfg = StftConfig::default();
        let mut s = stft(&noise_wave(4096, 1), &cfg).unwrap();
        for v in s.values.iter_mut() {
            *v = Complex::new(1.0, 0.0);
        }
        let lm = log_magnitude(&s, &cfg);
        assert!(lm.data().iter().all(|&x| x == 0.0));

        for v in s.values.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        let lm = log_magnitude(&s, &cfg);
        assert!(lm.data().iter().all(|&x| x == cfg.log_floor.ln()));

        for v in s.values.iter_mut() {
            *v = Complex::new(std::f64::consts::E, 0.0);
        }
        let lm = log_magnitude(&s, &cfg);
        assert!(lm.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mask_identity_and_zero() {
        let cfg = StftConfig::default();
        let s = stft(&noise_wave(4096, 2), &cfg).unwrap();
        let ones = Tensor::new(vec![s.frames, s.bins], vec![1.0; s.frames * s.bins]).unwrap();
        let masked = apply_mask(&s, &ones).unwrap();
        assert_eq!(masked.values, s.values);

        let zeros = Tensor::zeros(vec![s.frames, s.bins]);
        let masked = apply_mask(&s, &zeros).unwrap();
        assert!(masked.values.iter().all(|c| c.norm() == 0.0));

        let bad = Tensor::new(vec![s.frames, s.bins], vec![1.5; s.frames * s.bins]).unwrap();
        assert!(apply_mask(&s, &bad).is_err());
    }

    #[test]
    fn mix_at_snr_hits_requested_ratio() {
        let clean = noise_wave(16000, 11);
        let noise = noise_wave(20480, 12);
        for &snr in &[0.0, 5.0, 15.0, -3.0] {
            let mixed = mix_at_snr(&clean, &noise, snr, 42).unwrap();
            let got = measured_snr_db(&clean.samples, &mixed.samples);
            assert!((got - snr).abs() < 1e-9, "snr {snr} got {got}");
        }
        // snr 0: scaled-noise power equals clean power
        let mixed = mix_at_snr(&clean, &noise, 0.0, 42).unwrap();
        let resid: Vec<f64> = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| m - c)
            .collect();
        let p_resid = resid.iter().map(|s| s * s).sum::<f64>() / resid.len() as f64;
        assert!((p_resid / clean.power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_extreme_snr_is_identity_like() {
        let clean = noise_wave(8000, 21);
        let noise = noise_wave(8000, 22);
        let mixed = mix_at_snr(&clean, &noise, 1e6, 0).unwrap();
        let max_dev = mixed
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| (m - c).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-12);
    }

    #[test]
    fn mix_clean_equals_noise_doubles() {
        let clean = noise_wave(8000, 31);
        let mixed = mix_at_snr(&clean, &clean, 0.0, 0).unwrap();
        for (m, c) in mixed.samples.iter().zip(&clean.samples) {
            assert!((m - 2.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_zero_power_errors() {
        let clean = noise_wave(8000, 41);
        let silence = Waveform::new(vec![0.0; 8000], DEFAULT_SAMPLE_RATE).unwrap();
        assert!(mix_at_snr(&silence, &clean, 0.0, 0).is_err());
        assert!(mix_at_snr(&clean, &silence, 0.0, 0).is_err());
    }
}
