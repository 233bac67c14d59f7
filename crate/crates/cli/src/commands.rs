use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use log::{info, warn};
use serde_json::json;

use idas::checkpoint::{file_hash, Checkpoint};
use idas::config::RunConfig;
use idas::degradation::{make_pairs, read_dataset, write_dataset, CleanSource, Pair};
use idas::experiments::{bicubic_baseline, sweep_fixed_t, sweep_s, timestep_stats, ExperimentReport, Provenance};
use idas::image::Image;
use idas::pipeline::{RestoreOptions, Restorer};
use idas::training::{continue_pretraining, eval_pairs, streams, LossLog, PriorTrainer, TrainState};
use idas::rng::derive_seed;
use idas::Error;

use crate::{Command, Common, EvalSet};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_CHECKPOINT: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

/// Maps an error chain onto the documented exit codes.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::TimestepOutOfRange { .. }) => EXIT_USAGE,
        Some(Error::Config(_) | Error::FingerprintMismatch { .. }) => EXIT_CONFIG,
        Some(Error::Checkpoint { .. } | Error::Untrained | Error::Io(_) | Error::Json(_) | Error::Image(_)) => EXIT_CHECKPOINT,
        Some(Error::NonFinite { .. } | Error::DegenerateNoise { .. } | Error::VanishingSignal { .. }) => EXIT_NUMERIC,
        _ => 1,
    }
}

pub fn run(command: Command) -> Result<()> {
    let device = Device::Cpu;
    match command {
        Command::SynthData { common, count, clean_dir } => synth_data(&common, count, clean_dir.as_deref()),
        Command::Pretrain { common, resume, clean_dir } => pretrain(&common, resume.as_deref(), clean_dir.as_deref(), &device),
        Command::Distill { common, prior, resume, clean_dir } => {
            distill(&common, prior.as_deref(), resume.as_deref(), clean_dir.as_deref(), &device)
        }
        Command::Restore { common, checkpoint, input, output, steer, seed, fixed_t } => {
            restore(&common, &checkpoint, &input, &output, steer, seed, fixed_t, &device)
        }
        Command::SweepS { common, checkpoint, eval, s_list, seed } => {
            let (cfg, model, prov) = load_model(&common, &checkpoint, seed, &device)?;
            let pairs = eval_set(&cfg, &eval)?;
            let report = sweep_s(&model, &pairs, &s_list, cfg.eval_batch, prov.clone())?;
            let baseline = bicubic_baseline(&model, &pairs, prov)?;
            write_report(&common.out, "sweep_s", &report)?;
            write_report(&common.out, "baseline_bicubic", &baseline)?;
            let base = baseline.aggregates[0].psnr_db.mean;
            println!("bicubic baseline: PSNR {base:.3} dB");
            for a in &report.aggregates {
                println!(
                    "s={:<5} PSNR {:.3} dB ({:+.3})  SSIM {:.4}  hf {:.3}  t_hat {:.1}  t_mix {:.1}",
                    a.value, a.psnr_db.mean, a.psnr_db.mean - base, a.ssim.mean, a.hf_energy_ratio.mean, a.t_hat.mean, a.t_mix.mean
                );
            }
            Ok(())
        }
        Command::SweepT { common, checkpoint, eval, t_list, seed } => {
            let (cfg, model, prov) = load_model(&common, &checkpoint, seed, &device)?;
            let pairs = eval_set(&cfg, &eval)?;
            let report = sweep_fixed_t(&model, &pairs, &t_list, cfg.eval_batch, prov)?;
            write_report(&common.out, "sweep_t", &report)?;
            for a in &report.aggregates {
                println!("t={:<5} PSNR {:.3} dB  SSIM {:.4}  hf {:.3}", a.value, a.psnr_db.mean, a.ssim.mean, a.hf_energy_ratio.mean);
            }
            let (t, p) = report.psnr_curve();
            if t.len() >= 2 {
                if let Ok(rho) = idas::metrics::spearman(&t, &p) {
                    println!("Spearman(PSNR, t) = {rho:.3}");
                }
            }
            Ok(())
        }
        Command::AnalyzeTimesteps { common, checkpoint, eval } => {
            let (cfg, model, prov) = load_model(&common, &checkpoint, 0, &device)?;
            let pairs = eval_set(&cfg, &eval)?;
            let lq: Vec<Image> = pairs.iter().map(|p| p.lq.clone()).collect();
            let stats = timestep_stats(&model, &lq, cfg.eval_batch)?;
            std::fs::create_dir_all(&common.out)?;
            stats.write_csv(&common.out.join("timesteps.csv"))?;
            let doc = json!({ "provenance": prov, "stats": stats });
            std::fs::write(common.out.join("timesteps.json"), serde_json::to_string_pretty(&doc)?)?;
            println!(
                "t_hat over {} images: mean {:.2}  std {:.3}  min {:.2}  max {:.2}",
                stats.values.len(),
                stats.mean,
                stats.std,
                stats.min,
                stats.max
            );
            println!("histogram [{:.0}, {:.0}]: {:?}", stats.range.0, stats.range.1, stats.histogram);
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    Ok(RunConfig::resolve(common.config.as_deref(), &common.overrides)?)
}

/// The checkpoint's own config unless the user supplied one, in which case
/// the fingerprints must agree (or `--force`).
fn config_for(common: &Common, ck: &Checkpoint) -> Result<RunConfig> {
    if common.config.is_none() && common.overrides.is_empty() {
        return Ok(ck.meta.config.clone());
    }
    let cfg = resolve(common)?;
    if let Some(w) = ck.check_config(&cfg, common.force)? {
        warn!("{w}; continuing because of --force");
    }
    Ok(cfg)
}

fn source(cfg: &RunConfig, clean_dir: Option<&Path>) -> Result<CleanSource> {
    Ok(match clean_dir {
        Some(dir) => CleanSource::from_dir(dir, cfg.image_size)?,
        None => CleanSource::Procedural { size: cfg.image_size },
    })
}

fn write_run_record(out: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let doc = json!({
        "command": command,
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "config": cfg,
        "outputs": extra,
    });
    std::fs::write(out.join(format!("{command}.run.json")), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn synth_data(common: &Common, count: usize, clean_dir: Option<&Path>) -> Result<()> {
    let cfg = resolve(common)?;
    let train = cfg.train()?;
    let src = source(&cfg, clean_dir)?;
    let pairs = make_pairs(&src, train.severity, derive_seed(cfg.seed, streams::EVAL_DATA), 0..count as u64)?;
    let dir = common.out.join("data");
    let manifest = write_dataset(&dir, &pairs, cfg.seed, cfg.image_size, &cfg.fingerprint())?;
    write_run_record(&common.out, "synth-data", &cfg, json!({ "dataset": dir, "pairs": manifest.pairs.len() }))?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), dir.display());
    Ok(())
}

fn pretrain(common: &Common, resume: Option<&Path>, clean_dir: Option<&Path>, device: &Device) -> Result<()> {
    let cfg = resolve(common)?;
    let train = cfg.train()?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path, device)?;
            if let Some(w) = ck.check_config(&cfg, common.force)? {
                warn!("{w}; continuing because of --force");
            }
            ck.prior_trainer(&cfg, device)?
        }
        None => PriorTrainer::new(&cfg.model()?, derive_seed(cfg.seed, streams::INIT), train.optimizer(train.lr_prior), device)?,
    };
    let src = source(&cfg, clean_dir)?;
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("prior.safetensors");
    let log_path = common.out.join("pretrain_loss.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&log_path)?,
    );
    if fresh {
        use std::io::Write;
        writeln!(log, "iteration,loss")?;
    }
    let start = Instant::now();
    info!("pretraining prior from iteration {} to {}", trainer.iteration, train.pretrain_iters);
    while trainer.iteration < train.pretrain_iters {
        let until = (trainer.iteration + cfg.checkpoint_every.max(1)).min(train.pretrain_iters);
        let mut window = 0.0;
        continue_pretraining(&mut trainer, &train, &src, device, until, |it, loss| {
            use std::io::Write;
            writeln!(log, "{it},{loss:e}")?;
            window += loss;
            if (it + 1) % common.log_every.max(1) == 0 {
                info!("pretrain {:>6}  loss {:.5}  {:.0}s", it + 1, window / common.log_every.max(1) as f64, start.elapsed().as_secs_f64());
                window = 0.0;
            }
            Ok(())
        })?;
        let hash = Checkpoint::from_prior(&cfg, &trainer)?.save(&ckpt_path)?;
        info!("checkpoint {} at iteration {} ({})", ckpt_path.display(), trainer.iteration, &hash[..12]);
    }
    {
        use std::io::Write;
        log.flush()?;
    }
    let hash = Checkpoint::from_prior(&cfg, &trainer)?.save(&ckpt_path)?;
    write_run_record(&common.out, "pretrain", &cfg, json!({ "checkpoint": ckpt_path, "checkpoint_hash": hash, "loss_log": log_path }))?;
    println!("prior checkpoint: {} ({})", ckpt_path.display(), hash);
    Ok(())
}

fn distill(common: &Common, prior: Option<&Path>, resume: Option<&Path>, clean_dir: Option<&Path>, device: &Device) -> Result<()> {
    let cfg = resolve(common)?;
    let train = cfg.train()?;
    let src = source(&cfg, clean_dir)?;
    let mut state = match (resume, prior) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path, device)?;
            if let Some(w) = ck.check_config(&cfg, common.force)? {
                warn!("{w}; continuing because of --force");
            }
            ck.train_state(&cfg, src, device)?
        }
        (None, Some(path)) => {
            let ck = Checkpoint::load(path, device)?;
            if let Some(w) = ck.check_config(&cfg, common.force)? {
                warn!("{w}; continuing because of --force");
            }
            TrainState::new(cfg.model()?, train, ck.group("prior")?.deep_copy()?, src, device)?
        }
        (None, None) => bail!(Error::InvalidArgument("distill needs --prior or --resume".into())),
    };
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join("model.safetensors");
    let mut log = LossLog::create(&common.out.join("distill_loss.csv"), resume.is_some())?;
    let start = Instant::now();
    info!("distilling from iteration {} to {}", state.iteration, train.distill_iters);
    while state.iteration < train.distill_iters {
        let until = (state.iteration + cfg.checkpoint_every.max(1)).min(train.distill_iters);
        state.run(until, |r| {
            log.record(r)?;
            if (r.iteration + 1) % common.log_every.max(1) == 0 {
                info!("distill {:>6}  {}  t_hat {:.1}  {:.0}s", r.iteration + 1, r.losses, idas::metrics::mean(&r.t_hat), start.elapsed().as_secs_f64());
            }
            Ok(())
        })?;
        log.flush()?;
        let hash = Checkpoint::from_state(&cfg, &state)?.save(&ckpt_path)?;
        info!("checkpoint {} at iteration {} ({})", ckpt_path.display(), state.iteration, &hash[..12]);
    }
    let hash = Checkpoint::from_state(&cfg, &state)?.save(&ckpt_path)?;
    write_run_record(&common.out, "distill", &cfg, json!({ "checkpoint": ckpt_path, "checkpoint_hash": hash }))?;
    println!("model checkpoint: {} ({})", ckpt_path.display(), hash);
    Ok(())
}

fn load_model(common: &Common, path: &Path, seed: u64, device: &Device) -> Result<(RunConfig, Restorer, Provenance)> {
    let ck = Checkpoint::load(path, device)?;
    let cfg = config_for(common, &ck)?;
    let mut model = ck.restorer(device).with_context(|| format!("{} is not a distilled model", path.display()))?;
    model.steering = cfg.steering()?;
    let prov = Provenance { config_fingerprint: cfg.fingerprint(), checkpoint_hash: file_hash(path)?, seed };
    Ok((cfg, model, prov))
}

fn eval_set(cfg: &RunConfig, eval: &EvalSet) -> Result<Vec<Pair>> {
    match &eval.data {
        Some(dir) => {
            let (_, mut pairs) = read_dataset(dir)?;
            if let Some(n) = eval.count {
                pairs.truncate(n);
            }
            Ok(pairs)
        }
        None => {
            let src = CleanSource::Procedural { size: cfg.image_size };
            Ok(eval_pairs(&src, cfg.train()?.severity, cfg.seed, eval.count.unwrap_or(cfg.eval_images))?)
        }
    }
}

fn write_report(out: &Path, name: &str, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join(format!("{name}.csv")))?;
    report.write_json(&out.join(format!("{name}.json")))?;
    info!("wrote {}", out.join(format!("{name}.{{csv,json}}")).display());
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<(String, Image)>> {
    let paths: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if paths.is_empty() {
        bail!(Error::InvalidArgument(format!("no PNG inputs under {}", input.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            Ok((stem, Image::load_png(&p)?))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn restore(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    steer: Option<f64>,
    seed: u64,
    fixed_t: Option<f64>,
    device: &Device,
) -> Result<()> {
    let (cfg, model, prov) = load_model(common, checkpoint, seed, device)?;
    let s = steer.unwrap_or(cfg.s);
    let inputs = input_images(input)?;
    std::fs::create_dir_all(output)?;
    for (k, (name, lq)) in inputs.iter().enumerate() {
        let opts = RestoreOptions { fixed_t, ..RestoreOptions::new(s, derive_seed(seed, k as u64)) };
        let out = model.restore(std::slice::from_ref(lq), &opts)?;
        let path = output.join(format!("{name}.png"));
        out.images[0].save_png(&path)?;
        let d = &out.diagnostics[0];
        let sidecar = json!({
            "input": name,
            "diagnostics": d,
            "fixed_t": fixed_t,
            "config_fingerprint": prov.config_fingerprint,
            "checkpoint_hash": prov.checkpoint_hash,
        });
        std::fs::write(output.join(format!("{name}.json")), serde_json::to_string_pretty(&sidecar)?)?;
        info!("{name}: s {s}  t_hat {:.2}  t_mix {:.2}", d.t_hat, d.t_mix);
    }
    println!("restored {} image(s) into {}", inputs.len(), output.display());
    Ok(())
}

fn selftest() -> Result<()> {
    let start = Instant::now();
    let results = idas::selftest::run();
    let mut failed = 0;
    for r in &results {
        println!("{} {:<18} {:>6.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {} failed, {:.1}s", results.len(), failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}
