//! Synthetic voice/noise generation and domain-shift dataset construction.
//!
//! Clean "speech" is a harmonic source with a slowly wandering fundamental,
//! a formant-like spectral envelope and syllabic amplitude modulation. Noise
//! families cover white/pink/brown spectra, a babble-like detuned harmonic
//! mixture and filtered impulsive bursts. A dataset is a directory of
//! float32 WAV pairs plus a JSONL manifest that records every seed, so the
//! corpus regenerates byte-identically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, Waveform, WavEncoding};
use crate::error::{Error, Result};

/// Deterministic seed combinator (splitmix64 chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut state = 0x51_7C_C1_B7_27_22_0A_95u64;
    for &p in parts {
        state = splitmix64(state ^ p);
    }
    state
}

// ---- noise families ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    White,
    Pink,
    Brown,
    AmBabble,
    Burst,
}

impl NoiseFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseFamily::White => "white",
            NoiseFamily::Pink => "pink",
            NoiseFamily::Brown => "brown",
            NoiseFamily::AmBabble => "am-babble",
            NoiseFamily::Burst => "burst",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseFamily::White),
            "pink" => Ok(NoiseFamily::Pink),
            "brown" => Ok(NoiseFamily::Brown),
            "am-babble" => Ok(NoiseFamily::AmBabble),
            "burst" => Ok(NoiseFamily::Burst),
            other => Err(Error::Config(format!("unknown noise family `{other}`"))),
        }
    }
}

fn white_samples(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Shape white noise to |H(f)| = f^(-alpha/2) in amplitude, i.e. a power
/// slope of -3*alpha dB/octave. DC is zeroed.
fn spectrally_shaped(len: usize, alpha_half: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = len.next_power_of_two();
    let mut buf: Vec<Complex<f64>> = white_samples(n, rng)
        .into_iter()
        .map(|x| Complex::new(x, 0.0))
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    fft.process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let f = (k.min(n - k)) as f64; // symmetric in the full spectrum
        buf[k] *= f.powf(-alpha_half);
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    ifft.process(&mut buf);
    buf.truncate(len);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

fn normalize_rms(samples: &mut [f64], target_rms: f64) {
    let p: f64 = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    if p > 0.0 {
        let g = target_rms / p.sqrt();
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
}

fn am_babble(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let voices = 4;
    for _ in 0..voices {
        let f0 = rng.random_range(110.0..280.0);
        let am_rate = rng.random_range(1.5..5.0);
        let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        let harmonics = 10;
        let detunes: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.995..1.005)).collect();
        for i in 0..len {
            let t = i as f64 / fs;
            let am = 0.5 * (1.0 + (std::f64::consts::TAU * am_rate * t + am_phase).sin());
            let mut v = 0.0;
            for (h, &det) in detunes.iter().enumerate() {
                let f = f0 * (h + 1) as f64 * det;
                if f < fs / 2.0 {
                    v += (std::f64::consts::TAU * f * t + phase0 * (h + 1) as f64).sin()
                        / (h + 1) as f64;
                }
            }
            out[i] += am * v;
        }
    }
    out
}

fn bursts(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let rate_hz = 10.0;
    let expected = ((len as f64 / fs) * rate_hz).ceil() as usize;
    let count = expected.max(1);
    for _ in 0..count {
        let pos = rng.random_range(0..len);
        let amp: f64 = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tau = rng.random_range(0.004..0.02) * fs; // decay in samples
        let tail = (tau * 6.0) as usize;
        for j in 0..tail.min(len - pos) {
            out[pos + j] += amp * (-(j as f64) / tau).exp();
        }
    }
    // one-pole lowpass colours the impulses
    let a = 0.85;
    let mut prev = 0.0;
    for s in out.iter_mut() {
        prev = a * prev + (1.0 - a) * *s;
        *s = prev;
    }
    out
}

/// Seeded noise of the requested family, normalized to unit RMS.
pub fn gen_noise(family: NoiseFamily, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if duration_s <= 0.0 {
        return Err(Error::Config("duration must be positive".into()));
    }
    let len = (duration_s * sample_rate as f64).round() as usize;
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = match family {
        NoiseFamily::White => white_samples(len, &mut rng),
        NoiseFamily::Pink => spectrally_shaped(len, 0.5, &mut rng),
        NoiseFamily::Brown => spectrally_shaped(len, 1.0, &mut rng),
        NoiseFamily::AmBabble => am_babble(len, fs, &mut rng),
        NoiseFamily::Burst => bursts(len, fs, &mut rng),
    };
    normalize_rms(&mut samples, 1.0);
    Waveform::new(samples, sample_rate)
}

// ---- synthetic voice -----------------------------------------------------------

/// Harmonic source with wandering fundamental, formant-like envelope and
/// syllabic amplitude modulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticVoice {
    pub f0_hz: f64,
    /// relative vibrato/wander depths and rates (two slow sinusoids)
    pub wander_depth: f64,
    pub wander_rates_hz: (f64, f64),
    pub harmonics: usize,
    /// (center Hz, bandwidth Hz) resonance peaks
    pub formants: Vec<(f64, f64)>,
    pub am_rate_hz: f64,
    pub am_depth: f64,
    pub seed: u64,
}

impl SyntheticVoice {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SyntheticVoice {
            f0_hz: rng.random_range(95.0..260.0),
            wander_depth: rng.random_range(0.01..0.06),
            wander_rates_hz: (rng.random_range(0.4..1.2), rng.random_range(2.0..5.0)),
            harmonics: 24,
            formants: vec![
                (rng.random_range(350.0..850.0), 180.0),
                (rng.random_range(1000.0..1900.0), 250.0),
                (rng.random_range(2300.0..3200.0), 350.0),
            ],
            am_rate_hz: rng.random_range(2.0..4.5),
            am_depth: rng.random_range(0.5..0.9),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(80.0..=400.0).contains(&self.f0_hz) {
            return Err(Error::Config(format!("f0 {} Hz outside [80, 400]", self.f0_hz)));
        }
        if self.harmonics == 0 {
            return Err(Error::Config("need at least one harmonic".into()));
        }
        Ok(())
    }

    fn envelope_at(&self, f: f64) -> f64 {
        let mut e = 0.05;
        for &(c, bw) in &self.formants {
            let d = (f - c) / bw;
            e += (-0.5 * d * d).exp();
        }
        e
    }
}

/// Synthesize the voice at RMS 0.1.
pub fn gen_voice(spec: &SyntheticVoice, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    spec.validate()?;
    if duration_s <= 0.0 {
        return Err(Error::Config("duration must be positive".into()));
    }
    let len = (duration_s * sample_rate as f64).round() as usize;
    let fs = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phi1 = rng.random_range(0.0..std::f64::consts::TAU);
    let phi2 = rng.random_range(0.0..std::f64::consts::TAU);
    let am_phi = rng.random_range(0.0..std::f64::consts::TAU);
    let harmonic_phases: Vec<f64> =
        (0..spec.harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();

    // per-harmonic gains from the envelope, evaluated at the base f0
    let gains: Vec<f64> = (1..=spec.harmonics)
        .map(|h| spec.envelope_at(h as f64 * spec.f0_hz))
        .collect();

    let (r1, r2) = spec.wander_rates_hz;
    let mut phase = 0.0; // fundamental phase, integrated
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / fs;
        let wander = 1.0
            + spec.wander_depth
                * (0.7 * (std::f64::consts::TAU * r1 * t + phi1).sin()
                    + 0.3 * (std::f64::consts::TAU * r2 * t + phi2).sin());
        let f0 = (spec.f0_hz * wander).clamp(80.0, 400.0);
        phase += std::f64::consts::TAU * f0 / fs;
        let am = (1.0 - spec.am_depth)
            + spec.am_depth * 0.5 * (1.0 + (std::f64::consts::TAU * spec.am_rate_hz * t + am_phi).sin());
        let mut v = 0.0;
        for (h, (&gain, &hp)) in gains.iter().zip(&harmonic_phases).enumerate() {
            let hf = (h + 1) as f64;
            if spec.f0_hz * hf < fs / 2.0 {
                v += gain * (phase * hf + hp).sin();
            }
        }
        samples.push(am * v);
    }
    normalize_rms(&mut samples, 0.1);
    Waveform::new(samples, sample_rate)
}

// ---- dataset construction -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: String,
    pub families: Vec<NoiseFamily>,
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub utterances: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("domain needs at least one noise family".into()));
        }
        if self.utterances == 0 || self.duration_s <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Config("empty domain spec".into()));
        }
        Ok(())
    }

    pub fn family_overlap(&self, other: &DomainSpec) -> Vec<NoiseFamily> {
        self.families
            .iter()
            .copied()
            .filter(|f| other.families.contains(f))
            .collect()
    }
}

/// One dataset row. `snr_db` is remeasured from the float32 samples that were
/// actually written, so manifest and files always agree; `requested_snr_db`
/// keeps the draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean: String,
    pub noisy: String,
    pub family: NoiseFamily,
    pub requested_snr_db: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub domain: String,
}

/// A manifest-backed dataset with a stable iteration order.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

impl DatasetHandle {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_NAME))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(DatasetHandle { root: root.to_path_buf(), entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_clean(&self, i: usize) -> Result<Waveform> {
        let e = &self.entries[i];
        dsp::read_wav(&self.root.join(&e.clean), Some(e.sample_rate))
    }

    pub fn load_noisy(&self, i: usize) -> Result<Waveform> {
        let e = &self.entries[i];
        dsp::read_wav(&self.root.join(&e.noisy), Some(e.sample_rate))
    }
}

/// Generate WAV pairs + manifest under `out_dir`.
pub fn build_dataset(spec: &DomainSpec, out_dir: &Path) -> Result<DatasetHandle> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("clean"))?;
    fs::create_dir_all(out_dir.join("noisy"))?;

    let mut entries = Vec::with_capacity(spec.utterances);
    for i in 0..spec.utterances {
        let utt_seed = mix_seed(&[spec.seed, i as u64]);
        let voice = SyntheticVoice::random(mix_seed(&[utt_seed, 0]));
        let clean = gen_voice(&voice, spec.duration_s, spec.sample_rate)?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[utt_seed, 1]));
        let family = spec.families[rng.random_range(0..spec.families.len())];
        let requested_snr = rng.random_range(spec.snr_lo_db..=spec.snr_hi_db);
        let noise = gen_noise(family, spec.duration_s, spec.sample_rate, mix_seed(&[utt_seed, 2]))?;
        let noisy = dsp::mix_at_snr(&clean, &noise, requested_snr, mix_seed(&[utt_seed, 3]))?;

        let id = format!("{}-{i:04}", spec.domain);
        let clean_rel = format!("clean/{id}.wav");
        let noisy_rel = format!("noisy/{id}.wav");
        dsp::write_wav(&out_dir.join(&clean_rel), &clean, WavEncoding::Float32)?;
        dsp::write_wav(&out_dir.join(&noisy_rel), &noisy, WavEncoding::Float32)?;

        // measure on the values the files actually hold (f32 quantized)
        let clean_q: Vec<f64> = clean.samples.iter().map(|&s| s as f32 as f64).collect();
        let noisy_q: Vec<f64> = noisy.samples.iter().map(|&s| s as f32 as f64).collect();
        let snr_db = dsp::measured_snr_db(&clean_q, &noisy_q);

        entries.push(ManifestEntry {
            id,
            clean: clean_rel,
            noisy: noisy_rel,
            family,
            requested_snr_db: requested_snr,
            snr_db,
            seed: utt_seed,
            duration_s: spec.duration_s,
            sample_rate: spec.sample_rate,
            domain: spec.domain.clone(),
        });
    }

    let mut file = fs::File::create(out_dir.join(MANIFEST_NAME))?;
    for e in &entries {
        writeln!(file, "{}", serde_json::to_string(e)?)?;
    }
    Ok(DatasetHandle { root: out_dir.to_path_buf(), entries })
}

/// The stock benchmark: disjoint source and shifted noise families sharing
/// one clean-voice generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub train: DomainSpec,
    pub source_test: DomainSpec,
    pub shifted_test: DomainSpec,
}

pub fn default_benchmark(seed: u64) -> BenchmarkSpec {
    let source_families = vec![NoiseFamily::White, NoiseFamily::Pink, NoiseFamily::AmBabble];
    let shifted_families = vec![NoiseFamily::Brown, NoiseFamily::Burst];
    let base = DomainSpec {
        domain: String::new(),
        families: source_families.clone(),
        snr_lo_db: 0.0,
        snr_hi_db: 15.0,
        utterances: 0,
        duration_s: 2.0,
        sample_rate: dsp::DEFAULT_SAMPLE_RATE,
        seed: 0,
    };
    BenchmarkSpec {
        train: DomainSpec {
            domain: "source-train".into(),
            utterances: 200,
            seed: mix_seed(&[seed, 101]),
            ..base.clone()
        },
        source_test: DomainSpec {
            domain: "source-test".into(),
            utterances: 40,
            seed: mix_seed(&[seed, 202]),
            ..base.clone()
        },
        shifted_test: DomainSpec {
            domain: "shifted-test".into(),
            families: shifted_families,
            utterances: 40,
            seed: mix_seed(&[seed, 303]),
            ..base
        },
    }
}
