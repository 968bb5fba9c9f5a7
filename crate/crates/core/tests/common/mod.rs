//! Shared test helpers: the central-finite-difference oracle and small
//! dataset builders. The oracle is independent of the backward pass it
//! checks; it only ever calls forward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttse::data::{build_dataset, DomainSpec, NoiseFamily};
use ttse::dsp::Waveform;
use ttse::ttt::{eval_samples_from_dataset, EvalSample};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central finite differences over every input component.
/// `forward` must be a pure function of the flattened input.
pub fn fd_gradient(forward: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = forward(&probe);
        probe[i] = orig - FD_STEP;
        let down = forward(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    grad
}

/// Worst relative error between analytic and numeric gradients, with a
/// floor that keeps near-zero pairs from blowing up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], what: &str) {
    let err = max_rel_err(analytic, numeric);
    assert!(
        err < FD_REL_TOL,
        "{what}: worst relative gradient error {err:.3e} (tol {FD_REL_TOL:.0e})"
    );
}

pub fn random_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero (for relu/abs kinks).
pub fn random_vec_off_zero(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub fn noise_wave(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform {
        samples: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
        sample_rate: 16_000,
    }
}

/// Small on-disk dataset; the TempDir must stay alive while samples load.
pub fn tiny_domain(
    dir: &std::path::Path,
    domain: &str,
    families: Vec<NoiseFamily>,
    utterances: usize,
    duration_s: f64,
    seed: u64,
) -> Vec<EvalSample> {
    let spec = DomainSpec {
        domain: domain.into(),
        families,
        snr_lo_db: 0.0,
        snr_hi_db: 15.0,
        utterances,
        duration_s,
        sample_rate: 16_000,
        seed,
    };
    let handle = build_dataset(&spec, dir).expect("build dataset");
    eval_samples_from_dataset(&handle).expect("load samples")
}
