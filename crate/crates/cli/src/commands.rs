use std::fs::OpenOptions;
use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use turtle_core::data::{degrade, degrade_with_sigma, derive_seed, sample_clips, synthetic_video, Clip, DegradationSpec};
use turtle_core::gradcheck::{corrupted_case, run_case, run_suite, CaseReport, FD_TOLERANCE};
use turtle_core::io::{load_frames, save_frames};
use turtle_core::metrics::{psnr, ColorMode, MetricsReport, PSNR_CAP_DB};
use turtle_core::model::{count_macs, ModelConfig, Turtle};
use turtle_core::optim::OptimizerConfig;
use turtle_core::train::{evaluate, load_model, save_model, synthetic_pairs, TrainPair, Trainer};
use turtle_core::{Error, Init, Tensor};

use crate::config::RunConfig;

/// Operation count reported for the full-size network at 256x256 in the
/// literature this model follows.
const PUBLISHED_GMACS_256: f64 = 181.06;

fn training_set(cfg: &RunConfig) -> Result<Vec<TrainPair>> {
    let channels = cfg.model.in_channels;
    let Some(gt_path) = cfg.path("data.gt") else {
        let clips = cfg.kv.get_or("data.clips", 10)?;
        let frames = cfg.kv.get_or("data.frames", cfg.model.gamma)?;
        let size = cfg.kv.get_or("data.size", 32)?;
        return Ok(synthetic_pairs(clips, frames, size, channels, &cfg.degradation, cfg.seed)?);
    };
    let gt = sample_clips(&load_frames(&gt_path)?, cfg.model.gamma)?;
    let lq = match cfg.path("data.lq") {
        Some(p) => sample_clips(&load_frames(&p)?, cfg.model.gamma)?,
        None => gt
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let spec = DegradationSpec { seed: derive_seed(cfg.degradation.seed, i as u64), ..cfg.degradation };
                degrade(c, &spec)
            })
            .collect::<turtle_core::Result<Vec<_>>>()?,
    };
    if lq.len() != gt.len() || lq.iter().zip(&gt).any(|(a, b)| a.tensor().shape() != b.tensor().shape()) {
        bail!(Error::Config("data.lq and data.gt do not have matching frames".into()));
    }
    Ok(lq.into_iter().zip(gt).map(|(lq, gt)| TrainPair { lq, gt }).collect())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.require_path("train.checkpoint")?;
    let log_path = cfg.path("train.log").unwrap_or_else(|| ckpt.with_extension("log"));
    let data = training_set(cfg)?;
    let mut trainer = match cfg.path("train.resume") {
        Some(p) => {
            let t = Trainer::load(&p)?;
            if t.model().config() != &cfg.model || t.optim() != &cfg.optim {
                bail!(Error::Config(format!("{} was trained with a different configuration", p.display())));
            }
            t
        }
        None => Trainer::new(Turtle::new(cfg.model.clone(), cfg.seed)?, cfg.optim.clone())?,
    };
    let until = cfg.kv.get_or("train.until", cfg.optim.total_iters)?;
    let every: usize = cfg.kv.get_or("train.checkpoint_every", 0)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::File { path: log_path.clone(), message: e.to_string() })?;
    if trainer.iter() == 0 {
        writeln!(log, "# seed {} deterministic {}", cfg.seed, cfg.deterministic)?;
        writeln!(log, "# iter loss lr")?;
    }
    let start = Instant::now();
    let mut io_error = None;
    let mut result = Ok(());
    while trainer.iter() < until.min(cfg.optim.total_iters) {
        let step = match trainer.step(&data) {
            Ok(s) => s,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        if let Err(e) = writeln!(log, "{step}") {
            io_error = Some(e);
            break;
        }
        if every > 0 && trainer.iter() % every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    if let Some(e) = io_error {
        bail!(Error::File { path: log_path, message: e.to_string() });
    }
    result?;
    trainer.save(&ckpt)?;
    let eval = evaluate(trainer.model(), &data)?;
    println!(
        "trained to iteration {} in {:.1}s; train-set PSNR {:.3} dB -> {:.3} dB ({:+.3} dB)",
        trainer.iter(),
        start.elapsed().as_secs_f64(),
        eval.input_psnr,
        eval.output_psnr,
        eval.gain()
    );
    println!("checkpoint: {}\nloss log: {}", ckpt.display(), log_path.display());
    Ok(())
}

fn model_for(cfg: &RunConfig, key: &str) -> Result<Turtle<f32>> {
    match cfg.path(key) {
        Some(p) => Ok(load_model(&p)?),
        None => Ok(Turtle::new(cfg.model.clone(), cfg.seed)?),
    }
}

fn color_mode(cfg: &RunConfig) -> Result<ColorMode> {
    match cfg.kv.get_str("restore.color_mode").unwrap_or("rgb") {
        "rgb" => Ok(ColorMode::Rgb),
        "y" | "y_channel" => Ok(ColorMode::YChannel),
        other => bail!(Error::Config(format!("unknown color mode {other:?}"))),
    }
}

pub fn restore(cfg: &RunConfig) -> Result<()> {
    let model = model_for(cfg, "restore.checkpoint")?;
    let input = load_frames(&cfg.require_path("restore.input")?)?;
    let output = cfg.require_path("restore.output")?;
    let mode = color_mode(cfg)?;
    let restored = Clip::new(model.restore_video(input.tensor())?)?.clamped();
    save_frames(&restored, &output)?;
    println!("restored {} frames to {}", restored.len(), output.display());
    let Some(gt_path) = cfg.path("restore.gt") else {
        return Ok(());
    };
    let gt = load_frames(&gt_path)?;
    if gt.tensor().shape() != restored.tensor().shape() {
        bail!(Error::Shape(format!(
            "ground truth {:?} does not match input {:?}",
            gt.tensor().shape(),
            restored.tensor().shape()
        )));
    }
    let report = MetricsReport::compute(&restored, &gt, mode)?;
    let baseline = psnr(input.tensor(), gt.tensor(), mode)?;
    println!("{report}");
    println!("input psnr {baseline:.3} dB");
    println!("--- metrics ---\n{}input_psnr={baseline:.6}", report.to_key_values());
    if let Some(p) = cfg.path("restore.report") {
        let text = format!("{}input_psnr={baseline:.6}\n", report.to_key_values());
        std::fs::write(&p, text).map_err(|e| Error::File { path: p.clone(), message: e.to_string() })?;
    }
    Ok(())
}

pub fn degrade_cmd(cfg: &RunConfig) -> Result<()> {
    let output = cfg.require_path("degrade.output")?;
    let clean = match cfg.path("degrade.input") {
        Some(p) => load_frames(&p)?,
        None => {
            let frames = cfg.kv.get_or("data.frames", cfg.model.gamma)?;
            let size = cfg.kv.get_or("data.size", 32)?;
            let clean = synthetic_video(frames, cfg.model.in_channels, size, size, cfg.seed)?;
            if let Some(gt) = cfg.path("data.gt") {
                save_frames(&clean, &gt)?;
                println!("clean synthetic frames written to {}", gt.display());
            }
            clean
        }
    };
    let (degraded, sigma) = degrade_with_sigma(&clean, &cfg.degradation)?;
    save_frames(&degraded, &output)?;
    match sigma {
        Some(s) => println!("added noise with sigma {s:.3} to {} frames -> {}", degraded.len(), output.display()),
        None => println!("blurred {} frames -> {}", degraded.len(), output.display()),
    }
    Ok(())
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .trim()
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("resolution {s:?} is not WxH")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad resolution {s:?}")));
    Ok((parse(w)?, parse(h)?))
}

pub fn profile(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.kv.get_str("profile.resolutions").unwrap_or("256x256,640x480").to_string();
    let resolutions: Vec<(usize, usize)> = spec.split(',').map(parse_resolution).collect::<Result<_>>()?;
    let frames: usize = cfg.kv.get_or("profile.timed_frames", 2)?;
    let budget: f64 = cfg.kv.get_or("profile.max_timed_gmacs", 5.0)?;
    let model = model_for(cfg, "restore.checkpoint")?;
    println!("{:>12}  {:>14}  {:>12}", "resolution", "ms/frame", "GMACs");
    for (i, &(w, h)) in resolutions.iter().enumerate() {
        let report = count_macs(model.config(), h, w)?;
        let timing = if frames > 0 && report.gmacs() <= budget {
            let clip = Tensor::<f32>::create(
                [frames, model.config().in_channels, h, w],
                Init::Uniform { low: 0.0, high: 1.0, seed: cfg.seed },
            )?;
            let start = Instant::now();
            model.restore_clip(&clip)?;
            format!("{:.1}", start.elapsed().as_secs_f64() * 1e3 / frames as f64)
        } else {
            "skipped".to_string()
        };
        println!("{:>12}  {:>14}  {:>12.3}", format!("{w}x{h}"), timing, report.gmacs());
        if i == 0 && cfg.kv.get_or("profile.breakdown", true)? {
            println!("per-layer breakdown at {w}x{h}:\n{report}");
        }
    }
    let reference = count_macs(&ModelConfig::full_size(), 256, 256)?;
    println!(
        "full-size configuration at 256x256: {:.2} GMACs (published figure for the original network: {PUBLISHED_GMACS_256} G)",
        reference.gmacs()
    );
    Ok(())
}

fn print_reports(reports: &[CaseReport]) {
    println!("{:<40} {:>12} {:>8} {:>9}  result", "case", "max rel err", "entries", "time");
    for r in reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<40} {:>12.3e} {:>8} {:>8.2}s  {status}{}",
            r.name,
            r.max_rel_error,
            r.entries_checked,
            r.elapsed.as_secs_f64(),
            r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.kv.get_or("gradcheck.seed", cfg.seed)?;
    let start = Instant::now();
    let mut reports = run_suite(seed);
    if cfg.kv.get_or("gradcheck.include_corrupted", false)? {
        reports.push(run_case(&corrupted_case(), seed));
    }
    print_reports(&reports);
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} cases passed at relative tolerance {FD_TOLERANCE:e} in {:.1}s",
        reports.len() - failed,
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!(Error::NonFinite { op: "finite-difference gradient check" });
    }
    Ok(())
}

fn check(name: &str, ok: bool, failures: &mut Vec<String>) {
    println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        failures.push(name.to_string());
    }
}

/// A small end-to-end run of every stage of the pipeline.
pub fn selftest(cfg: &RunConfig) -> Result<()> {
    let mut failures = Vec::new();
    let model_cfg = ModelConfig { base_channels: 4, ffn_blocks: 1, ..cfg.model.clone() };
    let iters = cfg.kv.get_or("selftest.iters", 10)?;
    let data = synthetic_pairs(2, model_cfg.gamma, 16, model_cfg.in_channels, &cfg.degradation, cfg.seed)?;

    let fresh = Turtle::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let same = fresh.restore_clip(data[0].lq.tensor())?;
    check("fresh model restores to its input", same.bitwise_eq(data[0].lq.tensor()), &mut failures);
    let cap = psnr(&same, data[0].lq.tensor(), ColorMode::Rgb)?;
    check("identical frames report the PSNR cap", cap == PSNR_CAP_DB, &mut failures);

    let optim = OptimizerConfig { total_iters: iters, crop_size: 16, seed: cfg.seed, ..cfg.optim.clone() };
    let mut trainer = Trainer::new(fresh, optim)?;
    let mut logs = Vec::new();
    trainer.run(&data, iters, |l| logs.push(*l))?;
    check("training losses are finite", logs.iter().all(|l| l.loss.is_finite()), &mut failures);
    check("learning rate never increases", logs.windows(2).all(|w| w[1].lr <= w[0].lr), &mut failures);

    let dir = std::env::temp_dir().join(format!("turtle-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).context("creating a scratch directory")?;
    let path = dir.join("model.ckpt");
    save_model(trainer.model(), &path)?;
    let reloaded = load_model(&path)?;
    let a = trainer.model().restore_clip(data[1].lq.tensor())?;
    let b = reloaded.restore_clip(data[1].lq.tensor())?;
    check("checkpoint round trip gives identical outputs", a.bitwise_eq(&b), &mut failures);

    let mut changed = data[1].lq.tensor().clone();
    let frame = changed.len() / changed.shape()[0];
    let last = changed.shape()[0] - 1;
    changed.data_mut()[last * frame] += 0.25;
    let c = trainer.model().restore_clip(&changed)?;
    check(
        "changing the last frame leaves earlier outputs unchanged",
        a.data()[..last * frame] == c.data()[..last * frame],
        &mut failures,
    );
    let _ = std::fs::remove_dir_all(&dir);

    let eval = evaluate(trainer.model(), &data)?;
    println!("train-set PSNR after {iters} iterations: {:.3} -> {:.3} dB", eval.input_psnr, eval.output_psnr);
    if !failures.is_empty() {
        bail!(Error::NonFinite { op: "selftest" });
    }
    println!("selftest passed");
    Ok(())
}
