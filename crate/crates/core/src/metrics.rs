//! Reference-based quality metrics and result aggregation.
//!
//! PESQ/STOI/DNSMOS are external standardized systems and are not
//! implemented; reports carry SI-SDR, segmental SNR and log-spectral
//! distance instead, and say so in their headers.

use serde::{Deserialize, Serialize};

use crate::dsp::{log_magnitude, Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::tasks::SI_SDR_EPS;

const LOG10_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

pub const SSNR_FRAME_MS: f64 = 32.0;
pub const SSNR_CLAMP_DB: (f64, f64) = (-10.0, 35.0);
pub const SSNR_SILENCE_POWER: f64 = 1e-10;

/// Scale-invariant SDR in dB. Shares its arithmetic with the training loss,
/// so `si_sdr_db(est, ref) == -loss_si_sdr(est, ref)` exactly.
pub fn si_sdr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "si_sdr",
            details: format!("est {} samples vs ref {}", est.len(), reference.len()),
        });
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(Error::Data("SI-SDR reference has zero energy".into()));
    }
    let mut dot = 0.0;
    for (e, r) in est.iter().zip(reference) {
        dot += e * r;
    }
    let alpha = dot * (1.0 / ref_energy) + 0.0;
    let mut num = 0.0;
    for r in reference {
        let t = alpha * r;
        num += t * t;
    }
    let mut den = 0.0;
    for (r, e) in reference.iter().zip(est) {
        let d = alpha * r - e;
        den += d * d;
    }
    let ratio = (num + SI_SDR_EPS).ln() - (den + SI_SDR_EPS).ln();
    Ok(ratio * LOG10_SCALE + 0.0)
}

/// Segmental SNR: mean of clamped per-frame 10*log10(||ref||^2/||ref-est||^2)
/// over non-overlapping frames, skipping silent reference frames. Returns
/// `None` when every frame is silent.
pub fn ssnr_db(est: &[f64], reference: &[f64], sample_rate: u32) -> Result<Option<f64>> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op: "ssnr",
            details: format!("est {} samples vs ref {}", est.len(), reference.len()),
        });
    }
    let frame = ((SSNR_FRAME_MS / 1000.0) * sample_rate as f64).round() as usize;
    if frame == 0 || reference.len() < frame {
        return Err(Error::TooShort { len: reference.len(), min: frame.max(1) });
    }
    let (lo, hi) = SSNR_CLAMP_DB;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + frame <= reference.len() {
        let r = &reference[start..start + frame];
        let e = &est[start..start + frame];
        let p_ref: f64 = r.iter().map(|v| v * v).sum();
        if p_ref / frame as f64 >= SSNR_SILENCE_POWER {
            let p_res: f64 = r.iter().zip(e).map(|(rv, ev)| (rv - ev) * (rv - ev)).sum();
            let snr = if p_res > 0.0 {
                10.0 * (p_ref / p_res).log10()
            } else {
                f64::INFINITY
            };
            sum += snr.clamp(lo, hi);
            count += 1;
        }
        start += frame;
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

/// Log-spectral distance in dB: mean over frames of the RMS over bins of
/// 20*(log10|S_ref| - log10|S_est|), with the configured magnitude floor.
pub fn lsd_db(est: &Spectrogram, reference: &Spectrogram, cfg: &StftConfig) -> Result<f64> {
    if !est.same_geometry(reference) {
        return Err(Error::Geometry(format!(
            "lsd: est [{}x{}] vs ref [{}x{}]",
            est.frames, est.bins, reference.frames, reference.bins
        )));
    }
    let le = log_magnitude(est, cfg);
    let lr = log_magnitude(reference, cfg);
    // log_magnitude is natural log; convert the difference to dB
    let to_db = 20.0 / std::f64::consts::LN_10;
    let bins = est.bins as f64;
    let mut total = 0.0;
    for (erow, rrow) in le.data().chunks(est.bins).zip(lr.data().chunks(est.bins)) {
        let mut acc = 0.0;
        for (e, r) in erow.iter().zip(rrow) {
            let d = (r - e) * to_db;
            acc += d * d;
        }
        total += (acc / bins).sqrt();
    }
    Ok(total / est.frames as f64)
}

// ---- evaluation records & aggregation --------------------------------------

/// Per-utterance metric row. Metrics are `None` when no clean reference was
/// available.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub utterance: String,
    pub method: String,
    pub strategy: String,
    pub domain: String,
    pub si_sdr_db: Option<f64>,
    pub ssnr_db: Option<f64>,
    pub lsd_db: Option<f64>,
    pub wall_ms: f64,
}

/// Mean metrics for one (method, strategy, domain) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub strategy: String,
    pub domain: String,
    pub count: usize,
    pub si_sdr_db: Option<f64>,
    pub ssnr_db: Option<f64>,
    pub lsd_db: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportTable {
    pub rows: Vec<AggregateRow>,
}

/// Row-order rank mirroring the reporting convention: unprocessed noisy
/// input first, plain baseline next, then per-task joint/TTT strategies.
fn strategy_rank(s: &str) -> usize {
    match s {
        "noisy" => 0,
        "joint" => 1,
        "standalone" => 2,
        "online" => 3,
        "online-batch" => 4,
        "online-batch-bias" => 5,
        "source-reeval" => 6,
        _ => 7,
    }
}

fn method_rank(m: &str) -> usize {
    match m {
        "noisy" => 0,
        "baseline" => 1,
        "msp" => 2,
        "nytt-gaussian" => 3,
        "nytt-real" => 4,
        _ => 5,
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = values.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Group records by (method, strategy, domain) and average each metric over
/// the records where it was available.
pub fn aggregate(records: &[EvalRecord]) -> ReportTable {
    let mut keys: Vec<(String, String, String)> = records
        .iter()
        .map(|r| (r.method.clone(), r.strategy.clone(), r.domain.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.sort_by_key(|(m, s, d)| (method_rank(m), strategy_rank(s), d.clone(), m.clone(), s.clone()));

    let rows = keys
        .into_iter()
        .map(|(method, strategy, domain)| {
            let group: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.method == method && r.strategy == strategy && r.domain == domain)
                .collect();
            AggregateRow {
                count: group.len(),
                si_sdr_db: mean_of(group.iter().map(|r| r.si_sdr_db)),
                ssnr_db: mean_of(group.iter().map(|r| r.ssnr_db)),
                lsd_db: mean_of(group.iter().map(|r| r.lsd_db)),
                method,
                strategy,
                domain,
            }
        })
        .collect();
    ReportTable { rows }
}

fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "n/a".into(),
    }
}

impl ReportTable {
    /// RFC 4180 CSV. The header names the metric substitution explicitly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,strategy,domain,count,si_sdr_db,ssnr_db,lsd_db\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_quote(&r.method),
                csv_quote(&r.strategy),
                csv_quote(&r.domain),
                r.count,
                fmt_opt(r.si_sdr_db),
                fmt_opt(r.ssnr_db),
                fmt_opt(r.lsd_db),
            ));
        }
        out
    }

    /// Aligned text for stdout.
    pub fn to_aligned_text(&self) -> String {
        let mut out = String::new();
        out.push_str("metrics: SI-SDR / SSNR / LSD (in place of PESQ/STOI/DNSMOS)\n");
        out.push_str(&format!(
            "{:<14} {:<18} {:<14} {:>5} {:>10} {:>9} {:>9}\n",
            "method", "strategy", "domain", "n", "si-sdr dB", "ssnr dB", "lsd dB"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<18} {:<14} {:>5} {:>10} {:>9} {:>9}\n",
                r.method,
                r.strategy,
                r.domain,
                r.count,
                fmt_opt(r.si_sdr_db),
                fmt_opt(r.ssnr_db),
                fmt_opt(r.lsd_db),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::dsp::{self, Waveform, DEFAULT_SAMPLE_RATE};
    use crate::tasks::loss_si_sdr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform {
            samples: (0..len).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    #[test]
    fn si_sdr_equals_negated_loss_exactly() {
        let reference = noise_wave(8000, 1).samples;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<f64> = reference.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
        let metric = si_sdr_db(&est, &reference).unwrap();
        let mut g = Graph::new();
        let e = g.leaf(Tensor::vector(est));
        let l = loss_si_sdr(&mut g, e, &reference).unwrap();
        assert_eq!(metric, -g.value(l).item());
    }

    #[test]
    fn si_sdr_identity_and_scale() {
        let reference = noise_wave(8000, 3).samples;
        assert!(si_sdr_db(&reference, &reference).unwrap() >= 80.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est: Vec<f64> = reference.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let scaled: Vec<f64> = est.iter().map(|v| 3.0 * v).collect();
        let a = si_sdr_db(&est, &reference).unwrap();
        let b = si_sdr_db(&scaled, &reference).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ssnr_upper_clamp_on_identity() {
        let w = noise_wave(16000, 5);
        let v = ssnr_db(&w.samples, &w.samples, w.sample_rate).unwrap().unwrap();
        assert_eq!(v, 35.0);
    }

    #[test]
    fn ssnr_zero_db_residual() {
        // per-frame residual power equal to reference power => ~0 dB per frame
        let w = noise_wave(16000, 6);
        let residual = noise_wave(16000, 7);
        let p_ratio = (w.power() / residual.power()).sqrt();
        let est: Vec<f64> = w
            .samples
            .iter()
            .zip(&residual.samples)
            .map(|(a, b)| a + b * p_ratio)
            .collect();
        let v = ssnr_db(&est, &w.samples, w.sample_rate).unwrap().unwrap();
        assert!(v.abs() < 1.0, "ssnr {v}");
    }

    #[test]
    fn ssnr_lower_clamp() {
        // a single loud-noise frame at -40 dB contributes exactly -10
        let frame = 512;
        let reference: Vec<f64> = (0..frame).map(|i| 0.01 * ((i as f64) * 0.1).sin()).collect();
        let p_ref: f64 = reference.iter().map(|v| v * v).sum::<f64>();
        // residual with power 10^4 * p_ref => -40 dB
        let scale = (1e4 * p_ref / p_ref).sqrt();
        let est: Vec<f64> = reference.iter().map(|v| v + v * scale).collect();
        let v = ssnr_db(&est, &reference, DEFAULT_SAMPLE_RATE).unwrap().unwrap();
        assert_eq!(v, -10.0);
    }

    #[test]
    fn ssnr_all_silent_unavailable() {
        let silence = vec![0.0; 16000];
        let est = vec![0.1; 16000];
        assert!(ssnr_db(&est, &silence, DEFAULT_SAMPLE_RATE).unwrap().is_none());
    }

    #[test]
    fn lsd_identity_and_tenfold() {
        let cfg = StftConfig::default();
        let w = noise_wave(8000, 8);
        let s = dsp::stft(&w, &cfg).unwrap();
        assert_eq!(lsd_db(&s, &s, &cfg).unwrap(), 0.0);

        let mut scaled = s.clone();
        for v in scaled.values.iter_mut() {
            *v *= 10.0;
        }
        let v = lsd_db(&scaled, &s, &cfg).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "lsd {v}");
    }

    #[test]
    fn lsd_matches_brute_force() {
        let cfg = StftConfig::default();
        let a = dsp::stft(&noise_wave(4096, 9), &cfg).unwrap();
        let b = dsp::stft(&noise_wave(4096, 10), &cfg).unwrap();
        let got = lsd_db(&a, &b, &cfg).unwrap();

        let mut brute = 0.0;
        for t in 0..a.frames {
            let mut acc = 0.0;
            for k in 0..a.bins {
                let la = a.magnitude(t, k).max(cfg.log_floor).log10();
                let lb = b.magnitude(t, k).max(cfg.log_floor).log10();
                let d = 20.0 * (lb - la);
                acc += d * d;
            }
            brute += (acc / a.bins as f64).sqrt();
        }
        brute /= a.frames as f64;
        assert!((got - brute).abs() < 1e-9, "{got} vs {brute}");
    }

    fn record(method: &str, strategy: &str, domain: &str, si: f64) -> EvalRecord {
        EvalRecord {
            utterance: "u".into(),
            method: method.into(),
            strategy: strategy.into(),
            domain: domain.into(),
            si_sdr_db: Some(si),
            ssnr_db: Some(si / 2.0),
            lsd_db: None,
            wall_ms: 1.0,
        }
    }

    #[test]
    fn aggregate_means_and_ordering() {
        let records = vec![
            record("nytt-real", "online-batch", "shifted", 10.0),
            record("nytt-real", "online-batch", "shifted", 14.0),
            record("nytt-real", "standalone", "shifted", 8.0),
            record("noisy", "noisy", "shifted", 2.0),
            record("nytt-real", "joint", "shifted", 7.0),
        ];
        let table = aggregate(&records);
        assert_eq!(table.rows.len(), 4);
        // single record keeps its own values
        assert_eq!(table.rows[3].si_sdr_db, Some(12.0));
        assert_eq!(table.rows[0].method, "noisy");
        let strategies: Vec<&str> = table.rows.iter().map(|r| r.strategy.as_str()).collect();
        assert_eq!(strategies, vec!["noisy", "joint", "standalone", "online-batch"]);
        // mean of two records
        let ob = &table.rows[3];
        assert_eq!(ob.count, 2);
        assert_eq!(ob.si_sdr_db, Some(12.0));

        let csv = table.to_csv();
        assert!(csv.starts_with("method,strategy,domain,count"));
        assert_eq!(csv.lines().count(), 5);
        let text = table.to_aligned_text();
        assert!(text.contains("SI-SDR"));
    }

    #[test]
    fn csv_quoting_is_rfc4180() {
        assert_eq!(csv_quote("plain"), "plain");
        assert_eq!(csv_quote("a,b"), "\"a,b\"");
        assert_eq!(csv_quote("say \"hi\""), "\"say \"\"hi\"\"\"");
    }
}
