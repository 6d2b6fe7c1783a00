use crate::config::{Config, ConfigError};
use crate::manifest::{content_hash, RunManifest};
use anyhow::{anyhow, bail, Context, Result};
use fpm_core::autodiff::Checkpoint;
use fpm_core::network::{Architecture, Model};
use fpm_core::objective::{fourier_coverage_plot, metric_suite};
use fpm_core::optics::{make_pupil, IntensityStack, Label, Lattice};
use fpm_core::oracle::{fpm_reconstruct, phase_extract};
use fpm_core::pipeline::{inference_plan, preprocess, Calibration};
use fpm_core::raster::{load_phase, save_phase, save_preview, PhaseImage};
use fpm_core::report::{append_metrics_csv, mae_curve_plot, write_loss_csv, MetricRow};
use fpm_core::scene::{capture, label_for, LabelSource, SceneConfig};
use fpm_core::stackio::{load_stack, save_stack, StackManifest, MANIFEST_NAME};
use fpm_core::synth::{sample_object, time_series};
use fpm_core::trainer::{
    assemble, generate, predict_fullfov_threads, train, transfer_learn, Frame, LossRecord,
    TrainOutcome,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";

/// Shared bookkeeping for one command invocation.
pub struct Run {
    command: &'static str,
    config: Config,
    config_path: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    out: PathBuf,
    started: Instant,
}

impl Run {
    pub fn new(command: &'static str, config_path: Option<&Path>, out: &Path) -> Result<Self> {
        let config = Config::load(config_path)?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command,
            config,
            config_path: config_path.map(Path::to_path_buf),
            inputs: Vec::new(),
            out: out.to_path_buf(),
            started: Instant::now(),
        })
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn finish(self, outputs: Vec<PathBuf>) -> Result<()> {
        let config = self.config.dump();
        let manifest = RunManifest {
            version: 1,
            command: self.command.into(),
            config_path: self.config_path,
            input_hash: content_hash(&config, &self.inputs)?,
            config,
            seeds: vec![self.config.seed, self.config.model.seed],
            inputs: self.inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        manifest.write(&self.out)
    }
}

fn scene(cfg: &Config) -> Result<SceneConfig> {
    Ok(SceneConfig {
        pixel: cfg.sim.pixel_um,
        r: cfg.sim.r,
        wavelength: cfg.optics.wavelength_um,
        na_objective: cfg.optics.na_objective,
        pattern: cfg.pattern()?,
        noise: cfg.noise(),
        label: LabelSource::Truth,
    })
}

fn frame_name(t: usize) -> String {
    format!("t{t:03}")
}

/// `tNNN` stem to frame index.
fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix('t')?.parse().ok()
}

/// Stack directories: each argument is a stack or a directory of stacks.
fn expand_stacks(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(MANIFEST_NAME).is_file() {
            out.push(p.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("no stack manifest in {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|s| s.join(MANIFEST_NAME).is_file())
            .collect();
        if subs.is_empty() {
            bail!("no stack manifest in {} or its subdirectories", p.display());
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

/// Phase rasters: each argument is a raster or a directory of them.
fn expand_rasters(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "phs"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn led_labels(m: &StackManifest) -> Vec<Label> {
    m.leds.iter().map(|l| l.label).collect()
}

/// Preprocessed frame from a stack directory, labelled when `label` is given.
fn load_frame(dir: &Path, label: Option<&Path>, fallback_id: usize) -> Result<Frame> {
    let (raw, m) = load_stack(dir)?;
    let stack: IntensityStack = preprocess(&raw, &led_labels(&m), &Calibration::default())?;
    let label = label
        .map(|p| load_phase(p).map(|(img, _)| img))
        .transpose()?;
    let id = frame_index(dir).unwrap_or(fallback_id);
    Ok(Frame::new(id, &stack, label, m.r)?)
}

fn save_raster(out: &Path, stem: &str, img: &PhaseImage, r: usize) -> Result<Vec<PathBuf>> {
    let (raw, png) = (
        out.join(format!("{stem}.phs")),
        out.join(format!("{stem}.png")),
    );
    save_phase(&raw, img, r as u32)?;
    save_preview(&png, img)?;
    Ok(vec![raw, png])
}

pub fn simulate(config: Option<&Path>, out: &Path) -> Result<()> {
    let run = Run::new("simulate", config, out)?;
    let cfg = &run.config;
    let sc = scene(cfg)?;
    let pattern = sc.input_pattern()?;
    let n = cfg.sim.frames.max(1);
    let objects = time_series(
        &cfg.ensemble()?,
        n,
        cfg.sim.width,
        cfg.sim.height,
        cfg.sim.pixel_um,
        cfg.seed,
    );
    let (stacks, truth) = (out.join("stacks"), out.join("truth"));
    std::fs::create_dir_all(&truth)?;
    let mut outputs = Vec::new();
    for (t, obj) in objects.iter().enumerate() {
        let (stack, _) = capture(&sc, obj, t as u64)?;
        let dir = stacks.join(frame_name(t));
        save_stack(
            &dir,
            &stack,
            &pattern,
            cfg.sim.pixel_um * cfg.sim.r as f64,
            cfg.sim.r,
        )?;
        outputs.push(dir);
        outputs.extend(save_raster(
            &truth,
            &frame_name(t),
            &label_for(&sc, obj)?,
            cfg.sim.r,
        )?);
        let amplitude = PhaseImage::new(
            obj.width(),
            obj.height(),
            obj.values().iter().map(|v| v.norm()).collect(),
        )?;
        let path = truth.join(format!("{}_amplitude.phs", frame_name(t)));
        save_phase(&path, &amplitude, cfg.sim.r as u32)?;
        outputs.push(path);
        log::info!(
            "simulated frame {t}: {} LEDs, {}x{} camera",
            stack.alpha,
            stack.width,
            stack.height
        );
    }
    run.finish(outputs)
}

pub fn oracle(config: Option<&Path>, stacks: &[PathBuf], out: &Path) -> Result<()> {
    let mut run = Run::new("oracle", config, out)?;
    let dirs = expand_stacks(stacks)?;
    let mut outputs = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        run.input(dir);
        let (stack, m) = load_stack(dir)?;
        let lattice = Lattice {
            width: m.width,
            height: m.height,
            pixel_size: m.pixel_um,
        };
        let pupil = make_pupil(m.na_objective, m.wavelength, lattice)?;
        let rec = fpm_reconstruct(
            &stack,
            &m.pattern(),
            &pupil,
            &fpm_core::oracle::OracleConfig {
                r: m.r,
                ..run.config.oracle_config()
            },
        )?;
        if rec.overlap_warning {
            log::warn!(
                "{}: pattern misses the neighbour-overlap requirement",
                dir.display()
            );
        }
        let t = frame_index(dir).unwrap_or(i);
        log::info!(
            "oracle {}: residual {:.4e} -> {:.4e}",
            dir.display(),
            rec.residuals[0],
            rec.residuals.last().unwrap()
        );
        outputs.extend(save_raster(
            out,
            &frame_name(t),
            &phase_extract(&rec.field, false),
            m.r,
        )?);
    }
    run.finish(outputs)
}

/// Paired `--stack`/`--label` arguments as labelled frames.
fn labelled_frames(run: &mut Run, stacks: &[PathBuf], labels: &[PathBuf]) -> Result<Vec<Frame>> {
    if stacks.len() != labels.len() || stacks.is_empty() {
        bail!(ConfigError(format!(
            "{} --stack for {} --label arguments",
            stacks.len(),
            labels.len()
        )));
    }
    stacks
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, l))| {
            run.input(s);
            run.input(l);
            load_frame(s, Some(l), i)
        })
        .collect()
}

fn write_training_outputs(out: &Path, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    let ckpt = out.join(CHECKPOINT_NAME);
    outcome.checkpoint.save(&ckpt)?;
    let loss = out.join("loss.csv");
    write_loss_csv(&loss, &outcome.history)?;
    let mut outputs = vec![ckpt, loss];
    if !outcome.validation.is_empty() {
        let path = out.join("validation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["step", "mae"])?;
        for (step, mae) in &outcome.validation {
            w.write_record([step.to_string(), mae.to_string()])?;
        }
        w.flush()?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn progress(total: usize) -> impl FnMut(&LossRecord) {
    move |r: &LossRecord| {
        if (r.step + 1).is_multiple_of(100) || r.step + 1 == total {
            log::info!(
                "step {}/{total}: total {:.4} mae {:.5} d {:.4}",
                r.step + 1,
                r.l_total,
                r.l_mae,
                r.d_loss
            );
        }
    }
}

pub struct TrainArgs<'a> {
    pub stacks: &'a [PathBuf],
    pub labels: &'a [PathBuf],
    pub val_stack: Option<&'a Path>,
    pub val_label: Option<&'a Path>,
}

pub fn train_cmd(config: Option<&Path>, args: TrainArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("train", config, out)?;
    let frames = labelled_frames(&mut run, args.stacks, args.labels)?;
    let validation = match (args.val_stack, args.val_label) {
        (Some(s), Some(l)) => {
            run.input(s);
            run.input(l);
            Some(load_frame(s, Some(l), 0)?)
        }
        (None, None) => None,
        _ => bail!(ConfigError(
            "--val-stack and --val-label go together".into()
        )),
    };
    let cfg = &run.config;
    let arch = cfg.architecture(frames[0].alpha)?;
    let model = Model::build(&arch, cfg.model.seed)?;
    let sched = cfg.schedule();
    let outcome = train(
        model,
        &frames,
        validation.as_ref(),
        &sched,
        &cfg.geometry()?,
        true,
        &mut progress(sched.total_steps()),
    )?;
    let outputs = write_training_outputs(out, &outcome)?;
    run.finish(outputs)
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let arch = Architecture::from_json(&ckpt.architecture)?;
    Ok((Model::from_store(&arch, ckpt.store.clone())?, ckpt))
}

pub fn transfer_cmd(
    config: Option<&Path>,
    checkpoint: &Path,
    stacks: &[PathBuf],
    labels: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let mut run = Run::new("transfer", config, out)?;
    run.input(checkpoint);
    let frames = labelled_frames(&mut run, stacks, labels)?;
    let (_, ckpt) = load_model(checkpoint)?;
    let cfg = &run.config;
    let budget = cfg.transfer.iterations;
    let outcome = transfer_learn(
        &ckpt,
        &frames,
        budget,
        &cfg.schedule(),
        &cfg.geometry()?,
        &mut progress(budget),
    )?;
    let outputs = write_training_outputs(out, &outcome)?;
    run.finish(outputs)
}

pub fn predict_cmd(
    config: Option<&Path>,
    checkpoint: &Path,
    stacks: &[PathBuf],
    threads: usize,
    out: &Path,
) -> Result<()> {
    let mut run = Run::new("predict", config, out)?;
    run.input(checkpoint);
    let (model, _) = load_model(checkpoint)?;
    let geom = run.config.geometry()?;
    let mut outputs = Vec::new();
    for (i, dir) in expand_stacks(stacks)?.iter().enumerate() {
        run.input(dir);
        let frame = load_frame(dir, None, i)?;
        let (img, stats) = predict_fullfov_threads(&model, &frame, &geom, threads)?;
        log::info!(
            "predicted {}: {} patches, {:.1} patches/s",
            dir.display(),
            stats.patches,
            stats.patches_per_sec
        );
        outputs.extend(save_raster(out, &frame_name(frame.id), &img, geom.r)?);
    }
    run.finish(outputs)
}

pub fn evaluate_cmd(
    config: Option<&Path>,
    pred: &[PathBuf],
    truth: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let mut run = Run::new("evaluate", config, out)?;
    // amplitude rasters sit beside simulated truth; only phase is scored
    let phase_only = |v: Vec<PathBuf>| -> Vec<PathBuf> {
        v.into_iter()
            .filter(|t| !t.to_string_lossy().ends_with("_amplitude.phs"))
            .collect()
    };
    let (pred, truth) = (
        phase_only(expand_rasters(pred)?),
        phase_only(expand_rasters(truth)?),
    );
    if pred.len() != truth.len() || pred.is_empty() {
        bail!(ConfigError(format!(
            "{} predictions for {} truth rasters",
            pred.len(),
            truth.len()
        )));
    }
    let cfg = run.config.clone();
    let coverage = out.join("coverage");
    std::fs::create_dir_all(&coverage)?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (i, (p, t)) in pred.iter().zip(&truth).enumerate() {
        run.input(p);
        run.input(t);
        let ((pi, _), (ti, _)) = (load_phase(p)?, load_phase(t)?);
        if (pi.width, pi.height) != (ti.width, ti.height) {
            bail!(
                "{} is {}x{} but {} is {}x{}",
                p.display(),
                pi.width,
                pi.height,
                t.display(),
                ti.width,
                ti.height
            );
        }
        let idx = frame_index(p).unwrap_or(i);
        let m = metric_suite(&pi.values, &ti.values, pi.width, pi.height);
        rows.push(MetricRow::new(
            idx,
            idx as f64 * cfg.eval.minutes_per_frame,
            &m,
        ));
        for (tag, img) in [("pred", &pi), ("truth", &ti)] {
            let plot = fourier_coverage_plot(
                &img.values,
                img.width,
                img.height,
                cfg.sim.pixel_um,
                cfg.optics.na_objective,
                cfg.optics.wavelength_um,
            );
            let path = coverage.join(format!("{}_{tag}.png", frame_name(idx)));
            plot.save(&path)?;
            outputs.push(path);
        }
    }
    let csv_path = out.join("metrics.csv");
    if csv_path.exists() {
        std::fs::remove_file(&csv_path)?;
    }
    append_metrics_csv(&csv_path, &rows)?;
    let plot = out.join("mae_curve.png");
    mae_curve_plot(&rows).save(&plot)?;
    outputs.extend([csv_path, plot]);
    run.finish(outputs)
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub work_items: usize,
    pub min_s: f64,
    pub median_s: f64,
    /// Items per second at the median time; 0 without work.
    pub rate_median: f64,
}

impl Timing {
    pub fn from_samples(work_items: usize, mut secs: Vec<f64>) -> Self {
        secs.sort_by(f64::total_cmp);
        let min_s = secs.first().copied().unwrap_or(0.0);
        let median_s = if secs.is_empty() {
            0.0
        } else if secs.len() % 2 == 1 {
            secs[secs.len() / 2]
        } else {
            0.5 * (secs[secs.len() / 2 - 1] + secs[secs.len() / 2])
        };
        let rate_median = if work_items > 0 && median_s > 0.0 {
            work_items as f64 / median_s
        } else {
            0.0
        };
        Self {
            work_items,
            min_s,
            median_s,
            rate_median,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub threads: usize,
    /// Generator patches.
    pub generator: Timing,
    /// Oracle sweeps (residual iterations).
    pub oracle: Timing,
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64())
        })
        .collect()
}

pub fn bench_report(cfg: &Config, threads: usize) -> Result<BenchReport> {
    let sc = scene(cfg)?;
    let obj = sample_object(
        &cfg.ensemble()?,
        cfg.sim.width,
        cfg.sim.height,
        cfg.sim.pixel_um,
        cfg.seed,
    );
    let (raw, labels) = capture(&sc, &obj, 0)?;
    let pattern = sc.input_pattern()?;
    let pupil = sc.pupil(raw.width, raw.height)?;
    let reps = cfg.bench.repetitions;

    let ocfg = fpm_core::oracle::OracleConfig {
        iterations: cfg.bench.oracle_iterations,
        ..cfg.oracle_config()
    };
    let oracle = time_reps(reps, || {
        if ocfg.iterations > 0 {
            fpm_reconstruct(&raw, &pattern, &pupil, &ocfg)?;
        }
        Ok(())
    })?;

    let stack = preprocess(&raw, &labels, &Calibration::default())?;
    let frame = Frame::new(0, &stack, None, sc.r)?;
    let geom = cfg.geometry()?;
    let model = Model::build(&cfg.architecture(frame.alpha)?, cfg.model.seed)?;
    let plan = inference_plan(frame.width, frame.height, &geom)?;
    if plan.inputs.is_empty() && cfg.bench.patches > 0 {
        bail!(anyhow!("frame yields no patches"));
    }
    let offsets: Vec<(usize, usize)> = (0..cfg.bench.patches)
        .map(|i| plan.inputs[i % plan.inputs.len()])
        .map(|r| (r.x, r.y))
        .collect();
    let generator = time_reps(reps, || {
        let chunks: Vec<&[(usize, usize)]> = offsets.chunks(16).collect();
        let workers = threads.clamp(1, chunks.len().max(1));
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|t| {
                    let (chunks, model, frame, geom) = (&chunks, &model, &frame, &geom);
                    s.spawn(move || -> Result<()> {
                        for c in chunks.iter().skip(t).step_by(workers) {
                            generate(model, &assemble(model, frame, c, geom, None)?.input)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("bench worker panicked"))
        })
    })?;
    Ok(BenchReport {
        repetitions: reps,
        threads,
        generator: Timing::from_samples(offsets.len(), generator),
        oracle: Timing::from_samples(ocfg.iterations, oracle),
    })
}

pub fn bench_cmd(config: Option<&Path>, threads: usize, out: &Path) -> Result<()> {
    let run = Run::new("bench", config, out)?;
    let report = bench_report(&run.config, threads)?;
    let path = out.join("bench.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "generator: {} patches, median {:.3} s, min {:.3} s, {:.1} patches/s",
        report.generator.work_items,
        report.generator.median_s,
        report.generator.min_s,
        report.generator.rate_median
    );
    println!(
        "oracle: {} sweeps, median {:.3} s, min {:.3} s, {:.2} sweeps/s",
        report.oracle.work_items,
        report.oracle.median_s,
        report.oracle.min_s,
        report.oracle.rate_median
    );
    run.finish(vec![path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_without_work_has_zero_rate() {
        let t = Timing::from_samples(0, vec![0.0; 5]);
        assert_eq!(t.rate_median, 0.0);
        let t = Timing::from_samples(10, vec![3.0, 1.0, 2.0, 5.0, 4.0]);
        assert_eq!((t.min_s, t.median_s, t.rate_median), (1.0, 3.0, 10.0 / 3.0));
    }

    #[test]
    fn frame_index_from_stem() {
        assert_eq!(frame_index(Path::new("a/t004.phs")), Some(4));
        assert_eq!(frame_index(Path::new("a/t012")), Some(12));
        assert_eq!(frame_index(Path::new("a/x.phs")), None);
    }
}
