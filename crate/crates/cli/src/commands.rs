use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ttse::data::{build_dataset, default_benchmark, mix_seed, BenchmarkSpec, DatasetHandle, DomainSpec};
use ttse::dsp;
use ttse::metrics::{aggregate, EvalRecord};
use ttse::model::enhance_waveform;
use ttse::tasks::{NoiseBank, SsTask};
use ttse::train::{
    load_checkpoint, load_pairs, save_checkpoint, train_joint, CheckpointMeta, TrainConfig,
};
use ttse::ttt::{
    default_ttt_lr, eval_samples_from_dataset, evaluate_model, evaluate_noisy, reevaluate_source,
    run_ttt_eval, EvalSample, Strategy, TttConfig,
};

fn verbosity() -> u8 {
    match std::env::var("TTSE_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbosity() >= 1 {
            eprintln!($($arg)*);
        }
    };
}

// ---- gen-data ---------------------------------------------------------------

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum SpecFile {
    Benchmark(BenchmarkSpec),
    Domain(DomainSpec),
}

fn reseed_domain(spec: &mut DomainSpec, seed: u64) {
    if seed != 0 {
        spec.seed = mix_seed(&[spec.seed, seed]);
    }
}

pub fn gen_data(spec: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<()> {
    let mut domains: Vec<(DomainSpec, PathBuf)> = Vec::new();
    match spec {
        None => {
            let mut b = default_benchmark(seed);
            // the seed flag reshuffles the stock benchmark deterministically
            let _ = &mut b;
            domains.push((b.train, out.join("train")));
            domains.push((b.source_test, out.join("source-test")));
            domains.push((b.shifted_test, out.join("shifted-test")));
        }
        Some(path) => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            match serde_json::from_str::<SpecFile>(&text).map_err(ttse::Error::from)? {
                SpecFile::Benchmark(mut b) => {
                    reseed_domain(&mut b.train, seed);
                    reseed_domain(&mut b.source_test, seed);
                    reseed_domain(&mut b.shifted_test, seed);
                    domains.push((b.train, out.join("train")));
                    domains.push((b.source_test, out.join("source-test")));
                    domains.push((b.shifted_test, out.join("shifted-test")));
                }
                SpecFile::Domain(mut d) => {
                    reseed_domain(&mut d, seed);
                    domains.push((d, out.clone()));
                }
            }
        }
    }

    for (domain, dir) in domains {
        let handle = build_dataset(&domain, &dir)?;
        let mean_snr: f64 =
            handle.entries().iter().map(|e| e.snr_db).sum::<f64>() / handle.len() as f64;
        println!(
            "{}: {} utterances x {:.1} s @ {} Hz, families {:?}, mean snr {:.2} dB -> {}",
            domain.domain,
            handle.len(),
            domain.duration_s,
            domain.sample_rate,
            domain.families.iter().map(|f| f.as_str()).collect::<Vec<_>>(),
            mean_snr,
            dir.display()
        );
    }
    Ok(())
}

// ---- train --------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn train(
    task: Option<String>,
    data: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    noise_dir: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(ttse::Error::from)?
        }
        None => TrainConfig::default(),
    };
    if let Some(t) = task {
        cfg.task = SsTask::parse(&t)?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let dataset = DatasetHandle::open(&data)
        .with_context(|| format!("opening dataset {}", data.display()))?;
    if dataset.is_empty() {
        bail!(ttse::Error::Data("dataset is empty".into()));
    }
    let sample_rate = dataset.entries()[0].sample_rate;
    info!(
        "training {} on {} utterances ({} epochs, batch {}, lr {})",
        cfg.task.as_str(),
        dataset.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr
    );

    let pairs = load_pairs(&dataset)?;
    let bank = noise_bank(cfg.seed, noise_dir.as_deref())?;
    let trained = train_joint(&pairs, &cfg, &bank)?;

    let last = trained.history.epochs.last().expect("at least one epoch");
    let meta = CheckpointMeta {
        task: cfg.task,
        stft: cfg.stft,
        sample_rate,
        hidden: cfg.hidden,
        context_radius: cfg.context_radius,
        epoch: cfg.epochs as u32,
        final_main_loss: last.mean_main_loss,
        final_ss_loss: last.mean_ss_loss,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&out, &trained.model, &meta)?;

    let history_path = out.with_extension("history.jsonl");
    let mut f = fs::File::create(&history_path)?;
    for e in &trained.history.epochs {
        writeln!(f, "{}", serde_json::to_string(e).map_err(ttse::Error::from)?)?;
    }

    println!(
        "trained {}: val si-sdr {:.2} dB, val main loss {:.4} -> {} (history: {})",
        cfg.task.as_str(),
        last.val_si_sdr_db,
        last.val_main_loss,
        out.display(),
        history_path.display()
    );
    Ok(())
}

fn noise_bank(seed: u64, extra_dir: Option<&Path>) -> Result<NoiseBank> {
    let mut bank = NoiseBank::synthetic(mix_seed(&[seed, 0xBA2E]));
    if let Some(dir) = extra_dir {
        bank.extend_from_dir(dir)?;
    }
    Ok(bank)
}

// ---- enhance ------------------------------------------------------------------

fn collect_wavs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(ttse::Error::Data(format!("no WAV files under {}", input.display())));
    }
    Ok(paths)
}

#[allow(clippy::too_many_arguments)]
pub fn enhance(
    ckpt: PathBuf,
    input: PathBuf,
    out: PathBuf,
    ttt: Option<String>,
    ttt_lr: Option<f64>,
    window: Option<usize>,
    bias_only: bool,
    steps: Option<usize>,
    seed: u64,
    noise_dir: Option<PathBuf>,
) -> Result<()> {
    let loaded = load_checkpoint(&ckpt, None)?;
    let stft = loaded.meta.stft;
    let paths = collect_wavs(&input)?;
    fs::create_dir_all(&out)?;

    let samples: Vec<EvalSample> = paths
        .iter()
        .map(|p| {
            let noisy = dsp::read_wav(p, Some(loaded.meta.sample_rate))?;
            Ok(EvalSample {
                id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                noisy,
                clean: None,
            })
        })
        .collect::<Result<_, ttse::Error>>()?;

    match ttt {
        None => {
            info!("enhancing {} file(s) without adaptation", samples.len());
            for s in &samples {
                let enhanced = enhance_waveform(&loaded.model, &s.noisy, &stft)?;
                let path = out.join(format!("{}.wav", s.id));
                dsp::write_wav(&path, &enhanced, dsp::WavEncoding::Float32)?;
            }
        }
        Some(name) => {
            let strategy = Strategy::parse(&name)?;
            let mut cfg = TttConfig::new(strategy, loaded.meta.task);
            cfg.lr = ttt_lr.unwrap_or_else(|| default_ttt_lr(loaded.meta.task));
            if let Some(w) = window {
                cfg.window = w;
            }
            if let Some(st) = steps {
                cfg.steps_per_sample = st;
            }
            cfg.bias_only = bias_only || strategy == Strategy::OnlineBatchBias;
            cfg.seed = seed;
            let bank = noise_bank(seed, noise_dir.as_deref())?;
            info!(
                "enhancing {} file(s) with {} (lr {}, window {}, steps {})",
                samples.len(),
                strategy.as_str(),
                cfg.lr,
                cfg.window,
                cfg.steps_per_sample
            );

            let mut state = ttse::ttt::TttState::new(loaded.model, stft, cfg, bank)?;
            let diag_path = out.join("diagnostics.jsonl");
            let mut diag_file = fs::File::create(&diag_path)?;
            for s in &samples {
                let (enhanced, diag) = state.adapt_and_predict(&s.id, &s.noisy)?;
                let path = out.join(format!("{}.wav", s.id));
                dsp::write_wav(&path, &enhanced, dsp::WavEncoding::Float32)?;
                writeln!(diag_file, "{}", serde_json::to_string(&diag).map_err(ttse::Error::from)?)?;
            }
            println!("diagnostics: {}", diag_path.display());
        }
    }
    println!("enhanced {} file(s) -> {}", samples.len(), out.display());
    Ok(())
}

// ---- eval ---------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ckpt: PathBuf,
    source: PathBuf,
    shifted: PathBuf,
    strategies: Option<String>,
    report: PathBuf,
    ttt_lr: Option<f64>,
    window: Option<usize>,
    steps: Option<usize>,
    seed: u64,
    noise_dir: Option<PathBuf>,
) -> Result<()> {
    let loaded = load_checkpoint(&ckpt, None)?;
    let stft = loaded.meta.stft;
    let task = loaded.meta.task;
    let method = task.as_str();

    let strategies: Vec<Strategy> = match strategies {
        None => Strategy::all().to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| Strategy::parse(s.trim()))
            .collect::<Result<_, _>>()?,
    };

    let source_data = DatasetHandle::open(&source)?;
    let shifted_data = DatasetHandle::open(&shifted)?;
    let source_samples = eval_samples_from_dataset(&source_data)?;
    let shifted_samples = eval_samples_from_dataset(&shifted_data)?;
    let source_tag = source_data.entries()[0].domain.clone();
    let shifted_tag = shifted_data.entries()[0].domain.clone();
    let bank = noise_bank(seed, noise_dir.as_deref())?;

    let mut records: Vec<EvalRecord> = Vec::new();
    info!("noisy + joint rows on both domains");
    records.extend(evaluate_noisy(&shifted_samples, &stft, &shifted_tag)?);
    records.extend(evaluate_noisy(&source_samples, &stft, &source_tag)?);
    records.extend(evaluate_model(&loaded.model, &shifted_samples, &stft, method, "joint", &shifted_tag)?);
    records.extend(evaluate_model(&loaded.model, &source_samples, &stft, method, "joint", &source_tag)?);

    for strategy in strategies {
        let mut cfg = TttConfig::new(strategy, task);
        cfg.lr = ttt_lr.unwrap_or_else(|| default_ttt_lr(task));
        if let Some(w) = window {
            cfg.window = w;
        }
        if let Some(st) = steps {
            cfg.steps_per_sample = st;
        }
        cfg.seed = seed;
        info!("strategy {} on {} ({} samples)", strategy.as_str(), shifted_tag, shifted_samples.len());
        let run = run_ttt_eval(&loaded.model, &stft, &shifted_samples, &cfg, &bank, method, &shifted_tag)?;
        records.extend(run.records);
        // frozen adapted parameters back on the source domain
        records.extend(reevaluate_source(
            &run.model,
            &source_samples,
            &stft,
            method,
            strategy.as_str(),
            &source_tag,
        )?);
    }

    let table = aggregate(&records);
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&report, table.to_csv())?;
    print!("{}", table.to_aligned_text());
    println!("report: {}", report.display());
    Ok(())
}
