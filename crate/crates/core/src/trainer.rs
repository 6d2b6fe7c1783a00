//! cGAN training, validation-based model selection, full-field prediction
//! and transfer learning.
//!
//! Each iteration runs the generator once on a batch of random patches, then
//! takes one discriminator step (real pairs against the detached prediction)
//! and one generator step, both from gradients at the same parameter values.

use crate::autodiff::{Adam, AutodiffError, Checkpoint, Graph, Mode, Ops, ParamStore, Tensor};
use crate::network::{Architecture, Model, NetworkError};
use crate::objective::{
    loss_discriminator, loss_mixed, mae, metric_suite, regularized_params, LossBreakdown,
    LossWeights, MetricReport, ObjectiveError,
};
use crate::optics::IntensityStack;
use crate::pipeline::{
    bilinear_resize, inference_plan, patch_offsets, PatchMode, PipelineError, StitchPlan,
    TileGeometry,
};
use crate::raster::PhaseImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite training state at step {step}: {diagnostics}")]
    NonFinite {
        step: usize,
        diagnostics: String,
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase1: Phase,
    pub phase2: Phase,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Signed `|truth - pred|` instead of `| |truth| - |pred| |`.
    pub signed_mae: bool,
    /// Std of additive Gaussian noise on training labels (radians).
    pub label_noise: f64,
}

impl TrainSchedule {
    pub fn full() -> Self {
        Self {
            phase1: Phase {
                epochs: 700,
                weights: LossWeights::phase1(),
            },
            phase2: Phase {
                epochs: 145,
                weights: LossWeights::phase2(),
            },
            iterations_per_epoch: 1000,
            batch_size: 4,
            lr: 1e-5,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            seed: 0,
            signed_mae: false,
            label_noise: 0.0,
        }
    }

    /// 1500 + 300 iterations.
    pub fn desk() -> Self {
        Self {
            phase1: Phase {
                epochs: 15,
                weights: LossWeights::phase1(),
            },
            phase2: Phase {
                epochs: 3,
                weights: LossWeights::phase2(),
            },
            iterations_per_epoch: 100,
            batch_size: 2,
            lr: 2e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            seed: 0,
            signed_mae: false,
            label_noise: 0.0,
        }
    }

    pub fn total_steps(&self) -> usize {
        (self.phase1.epochs + self.phase2.epochs) * self.iterations_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let epoch = step / self.iterations_per_epoch.max(1);
        let halvings = epoch.checked_div(self.lr_decay_every).unwrap_or(0);
        self.lr * self.lr_decay_factor.powi(halvings as i32)
    }

    pub fn weights_at(&self, step: usize) -> LossWeights {
        if step < self.phase1.epochs * self.iterations_per_epoch {
            self.phase1.weights
        } else {
            self.phase2.weights
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::Data(
                "iterations per epoch and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.label_noise >= 0.0) {
            return Err(TrainError::Data(
                "learning rate must be positive and label noise non-negative".into(),
            ));
        }
        self.phase1.weights.validate()?;
        self.phase2.weights.validate()?;
        Ok(())
    }
}

/// One preprocessed low-resolution frame (channel-last) with an optional
/// high-resolution phase label.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub alpha: usize,
    pub input: Vec<f64>,
    pub label: Option<PhaseImage>,
}

impl Frame {
    pub fn new(
        id: usize,
        stack: &IntensityStack,
        label: Option<PhaseImage>,
        r: usize,
    ) -> Result<Self> {
        if let Some(l) = &label {
            if (l.width, l.height) != (stack.width * r, stack.height * r) {
                return Err(TrainError::Data(format!(
                    "label {}x{} is not {r}x the {}x{} stack",
                    l.width, l.height, stack.width, stack.height
                )));
            }
        }
        Ok(Self {
            id,
            width: stack.width,
            height: stack.height,
            alpha: stack.alpha,
            input: stack.to_hwc(),
            label,
        })
    }

    fn patch(&self, x0: usize, y0: usize, p: usize) -> Vec<f64> {
        let a = self.alpha;
        let mut out = Vec::with_capacity(p * p * a);
        for y in y0..y0 + p {
            let row = (y * self.width + x0) * a;
            out.extend_from_slice(&self.input[row..row + p * a]);
        }
        out
    }
}

/// Network-ready tensors for a list of patch offsets.
pub struct Batch {
    pub input: Tensor,
    pub cond: Tensor,
    pub label: Option<Tensor>,
}

fn check_geometry(model: &Model, geom: &TileGeometry) -> Result<()> {
    geom.validate()?;
    let g = &model.arch.generator;
    if geom.patch_net_in != g.input_size() || geom.patch_out != g.output_size() {
        return Err(TrainError::Data(format!(
            "tiling maps {} -> {} px but the generator maps {} -> {}",
            geom.patch_net_in,
            geom.patch_out,
            g.input_size(),
            g.output_size()
        )));
    }
    Ok(())
}

pub fn assemble(
    model: &Model,
    frame: &Frame,
    offsets: &[(usize, usize)],
    geom: &TileGeometry,
    mut label_noise: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<Batch> {
    if frame.alpha != model.arch.alpha() {
        return Err(TrainError::Data(format!(
            "frame has {} channels, model expects {}",
            frame.alpha,
            model.arch.alpha()
        )));
    }
    let (p, ni, po, a) = (
        geom.patch_in,
        geom.patch_net_in,
        geom.patch_out,
        frame.alpha,
    );
    let n = offsets.len();
    let (mut input, mut cond) = (
        Vec::with_capacity(n * ni * ni * a),
        Vec::with_capacity(n * po * po * a),
    );
    let mut label = frame
        .label
        .as_ref()
        .map(|_| Vec::with_capacity(n * po * po));
    for &(x0, y0) in offsets {
        if x0 + p > frame.width || y0 + p > frame.height {
            return Err(TrainError::Data(format!(
                "patch at ({x0}, {y0}) leaves the {}x{} frame",
                frame.width, frame.height
            )));
        }
        let mut patch = frame.patch(x0, y0, p);
        model.generator.normalize_input(&model.store, &mut patch);
        if ni == p {
            input.extend_from_slice(&patch);
        } else {
            input.extend(bilinear_resize(&patch, p, p, a, ni, ni));
        }
        cond.extend(bilinear_resize(&patch, p, p, a, po, po));
        if let (Some(l), Some(img)) = (label.as_mut(), &frame.label) {
            let (hx, hy) = (x0 * geom.r, y0 * geom.r);
            for y in hy..hy + po {
                l.extend_from_slice(&img.values[y * img.width + hx..y * img.width + hx + po]);
            }
        }
    }
    if let (Some(l), Some((rng, sigma))) = (label.as_mut(), label_noise.as_mut()) {
        if *sigma > 0.0 {
            let normal = Normal::new(0.0, *sigma).expect("finite label noise");
            l.iter_mut().for_each(|v| *v += normal.sample(*rng));
        }
    }
    Ok(Batch {
        input: Tensor::new(&[n, ni, ni, a], input)?,
        cond: Tensor::new(&[n, po, po, a], cond)?,
        label: label.map(|l| Tensor::new(&[n, po, po, 1], l)).transpose()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_total: f64,
    pub l_mae: f64,
    pub l_fmae: f64,
    pub l_g: f64,
    pub l_reg: f64,
    pub d_loss: f64,
    pub lr: f64,
}

impl LossRecord {
    fn new(step: usize, b: &LossBreakdown, d_loss: f64, lr: f64) -> Self {
        Self {
            step,
            l_total: b.total,
            l_mae: b.mae,
            l_fmae: b.fmae,
            l_g: b.adv,
            l_reg: b.reg,
            d_loss,
            lr,
        }
    }

    fn is_finite(&self) -> bool {
        [
            self.l_total,
            self.l_mae,
            self.l_fmae,
            self.l_g,
            self.l_reg,
            self.d_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Model plus the two optimizers.
pub struct Trainer {
    pub model: Model,
    pub adam_g: Adam,
    pub adam_d: Adam,
}

impl Trainer {
    pub fn new(model: Model, lr: f64) -> Self {
        let adam_g = Adam::new(&model.store, model.store.trainable_with_prefix("g."), lr);
        let adam_d = Adam::new(&model.store, model.store.trainable_with_prefix("d."), lr);
        Self {
            model,
            adam_g,
            adam_d,
        }
    }

    /// Snapshot of weights and optimizer state. Gradients are scratch and are
    /// zeroed, so a checkpoint equals its own save/load round trip.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut store = self.model.store.clone();
        store.zero_grad();
        Checkpoint {
            architecture: self.model.arch.to_json(),
            store,
            optimizers: vec![
                ("g".into(), self.adam_g.clone()),
                ("d".into(), self.adam_d.clone()),
            ],
        }
    }

    /// Restores model and optimizer state; a checkpoint without optimizer
    /// state gets fresh optimizers.
    pub fn from_checkpoint(ckpt: &Checkpoint, lr: f64) -> Result<Self> {
        let arch = Architecture::from_json(&ckpt.architecture)?;
        let model = Model::from_store(&arch, ckpt.store.clone())?;
        let mut t = Self::new(model, lr);
        for (name, adam) in &ckpt.optimizers {
            match name.as_str() {
                "g" => t.adam_g = adam.clone(),
                "d" => t.adam_d = adam.clone(),
                _ => {}
            }
        }
        Ok(t)
    }

    /// One G forward, one D update, one G update.
    pub fn step(
        &mut self,
        batch: &Batch,
        w: &LossWeights,
        lr: f64,
        signed: bool,
        seed: u64,
    ) -> Result<(LossBreakdown, f64)> {
        let truth = batch
            .label
            .as_ref()
            .ok_or_else(|| TrainError::Data("training batch without labels".into()))?;
        let reg = regularized_params(&self.model.store, "g.");
        let adversarial = w.lambda2 != 0.0;
        let mut store = std::mem::take(&mut self.model.store);
        let (gen, disc) = (&self.model.generator, &self.model.discriminator);
        let (breakdown, d_loss, d_grads) = {
            let mut g = Graph::with_seed(&mut store, Mode::Train, seed);
            let x = g.input(batch.input.clone());
            let pred = gen.forward(&mut g, x)?;
            let (mut d_loss, mut d_grads, mut score) = (0.0, None, None);
            if adversarial {
                let cond = g.input(batch.cond.clone());
                let real = g.input(truth.clone());
                let fake = g.detach(pred);
                let p_real = disc.discriminate_minibatch(&mut g, real, cond)?;
                let p_fake = disc.discriminate_minibatch(&mut g, fake, cond)?;
                let dl = loss_discriminator(&mut g, p_real, p_fake)?;
                d_loss = g.value(dl).item();
                g.store_mut().zero_grad();
                g.backward(dl)?;
                d_grads = Some(
                    self.adam_d
                        .params()
                        .iter()
                        .map(|&id| g.store().get(id).grad.clone())
                        .collect::<Vec<_>>(),
                );
                score = Some(disc.discriminate_minibatch(&mut g, pred, cond)?);
            }
            let loss = loss_mixed(&mut g, pred, truth, score, &reg, w, signed)?;
            if !loss.breakdown.total.is_finite() || !d_loss.is_finite() {
                drop(g);
                self.model.store = store;
                return Err(TrainError::Data(format!(
                    "non-finite loss: {:?}, d_loss {d_loss}",
                    loss.breakdown
                )));
            }
            g.store_mut().zero_grad();
            g.backward(loss.total)?;
            (loss.breakdown, d_loss, d_grads)
        };
        self.model.store = store;
        self.adam_g.lr = lr;
        self.adam_g.step(&mut self.model.store)?;
        if let Some(grads) = d_grads {
            for (&id, grad) in self.adam_d.params().iter().zip(grads) {
                self.model.store.get_mut(id).grad = grad;
            }
            self.adam_d.lr = lr;
            self.adam_d.step(&mut self.model.store)?;
        }
        Ok((breakdown, d_loss))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validated checkpoint, or the final one without validation.
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    /// `(step, validation MAE)` after each epoch.
    pub validation: Vec<(usize, f64)>,
    pub best: Option<usize>,
    /// Frame ids that fed parameter updates.
    pub frames_used: BTreeSet<usize>,
}

/// Index of the smallest score (first on ties).
pub fn select_best(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}

/// Channel-last pixels of all frames, for fitting the input standardization.
fn pooled_inputs(frames: &[Frame]) -> Vec<f64> {
    frames
        .iter()
        .flat_map(|f| f.input.iter().copied())
        .collect()
}

/// Trains from the model's current weights. When `fit_input` is set the
/// generator's input standardization is refitted to `frames` first.
pub fn train(
    model: Model,
    frames: &[Frame],
    validation: Option<&Frame>,
    sched: &TrainSchedule,
    geom: &TileGeometry,
    fit_input: bool,
    on_record: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    sched.validate()?;
    check_geometry(&model, geom)?;
    if frames.is_empty() {
        return Err(TrainError::Data("no training frames".into()));
    }
    if frames.iter().any(|f| f.label.is_none()) {
        return Err(TrainError::Data(
            "every training frame needs a label".into(),
        ));
    }
    if let Some(v) = validation {
        if v.label.is_none() {
            return Err(TrainError::Data("validation frame needs a label".into()));
        }
    }
    let mut model = model;
    if fit_input {
        let pooled = pooled_inputs(frames);
        let gen = model.generator.clone();
        gen.fit_input(&mut model.store, &pooled);
    }
    let mut trainer = Trainer::new(model, sched.lr);
    run(
        &mut trainer,
        frames,
        validation,
        sched,
        geom,
        0,
        sched.total_steps(),
        on_record,
    )
}

#[allow(clippy::too_many_arguments)]
fn run(
    trainer: &mut Trainer,
    frames: &[Frame],
    validation: Option<&Frame>,
    sched: &TrainSchedule,
    geom: &TileGeometry,
    first_step: usize,
    steps: usize,
    on_record: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x6c61_6265_6c73);
    let mut history = Vec::with_capacity(steps);
    let mut val_scores = Vec::new();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut frames_used = BTreeSet::new();
    let p = geom.patch_in;
    for s in 0..steps {
        let step = first_step + s;
        let frame = &frames[rng.random_range(0..frames.len())];
        frames_used.insert(frame.id);
        if frame.width < p || frame.height < p {
            return Err(TrainError::Data(format!(
                "{}x{} frame is smaller than a {p} px patch",
                frame.width, frame.height
            )));
        }
        let offsets: Vec<(usize, usize)> = (0..sched.batch_size)
            .map(|_| {
                (
                    rng.random_range(0..=frame.width - p),
                    rng.random_range(0..=frame.height - p),
                )
            })
            .collect();
        let noise = (sched.label_noise > 0.0).then_some((&mut noise_rng, sched.label_noise));
        let batch = assemble(&trainer.model, frame, &offsets, geom, noise)?;
        let lr = sched.lr_at(step);
        let w = sched.weights_at(step);
        let last_good = trainer.checkpoint();
        let result = trainer.step(
            &batch,
            &w,
            lr,
            sched.signed_mae,
            sched.seed.wrapping_add(step as u64),
        );
        let (bd, d_loss) = match result {
            Ok(v) => v,
            Err(TrainError::Data(msg)) if msg.starts_with("non-finite") => {
                return Err(TrainError::NonFinite {
                    step,
                    diagnostics: msg,
                    last_good: Box::new(last_good),
                })
            }
            Err(TrainError::Autodiff(
                e @ (AutodiffError::NonFinite { .. } | AutodiffError::NonFiniteGradient(_)),
            )) => {
                return Err(TrainError::NonFinite {
                    step,
                    diagnostics: e.to_string(),
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        };
        let record = LossRecord::new(step, &bd, d_loss, lr);
        if !record.is_finite() || !trainer.model.store.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                diagnostics: format!("{record:?}"),
                last_good: Box::new(last_good),
            });
        }
        on_record(&record);
        history.push(record);
        let done = s + 1;
        if let Some(v) = validation {
            if done % sched.iterations_per_epoch == 0 || done == steps {
                let score = validate(&trainer.model, v, geom)?;
                log::info!("step {step}: validation MAE {score:.5}");
                val_scores.push((step, score));
                if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
                    best = Some((score, trainer.model.store.clone(), step));
                }
            }
        }
    }
    let mut checkpoint = trainer.checkpoint();
    let best_step = best.map(|(_, mut store, step)| {
        store.zero_grad();
        checkpoint.store = store;
        step
    });
    Ok(TrainOutcome {
        checkpoint,
        history,
        validation: val_scores,
        best: best_step,
        frames_used,
    })
}

/// Continues training pretrained weights on new data with fresh optimizer
/// state, the phase-2 weights and no validation.
pub fn transfer_learn(
    ckpt: &Checkpoint,
    frames: &[Frame],
    budget: usize,
    sched: &TrainSchedule,
    geom: &TileGeometry,
    on_record: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    sched.validate()?;
    let arch = Architecture::from_json(&ckpt.architecture)?;
    let model = Model::from_store(&arch, ckpt.store.clone())?;
    check_geometry(&model, geom)?;
    if budget > 0 && (frames.is_empty() || frames.iter().any(|f| f.label.is_none())) {
        return Err(TrainError::Data(
            "transfer learning needs labelled frames".into(),
        ));
    }
    let fine = TrainSchedule {
        phase1: Phase {
            epochs: 0,
            weights: sched.phase2.weights,
        },
        lr_decay_every: 0,
        ..sched.clone()
    };
    let mut trainer = Trainer::new(model, sched.lr);
    let out = run(
        &mut trainer,
        frames,
        None,
        &fine,
        geom,
        0,
        budget,
        on_record,
    )?;
    if budget == 0 {
        return Ok(TrainOutcome {
            checkpoint: ckpt.clone(),
            ..out
        });
    }
    Ok(out)
}

/// Eval-mode generator outputs for a batch, `[N, S, S, 1]`.
pub fn generate(model: &Model, input: &Tensor) -> Result<Tensor> {
    let mut store = model.store.clone();
    let mut g = Graph::new(&mut store, Mode::Eval);
    let x = g.input(input.clone());
    let y = model.generator.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

const PREDICT_BATCH: usize = 16;

/// Mean patch MAE over the grid patches of a labelled frame.
pub fn validate(model: &Model, frame: &Frame, geom: &TileGeometry) -> Result<f64> {
    let label = frame
        .label
        .as_ref()
        .ok_or_else(|| TrainError::Data("validation frame without label".into()))?;
    let offsets = patch_offsets(frame.width, frame.height, geom, PatchMode::Grid)?;
    let po = geom.patch_out;
    let mut total = 0.0;
    for chunk in offsets.chunks(PREDICT_BATCH) {
        let batch = assemble(
            model,
            &Frame {
                label: None,
                ..frame.clone()
            },
            chunk,
            geom,
            None,
        )?;
        let out = generate(model, &batch.input)?;
        for (k, &(x0, y0)) in chunk.iter().enumerate() {
            let pred = &out.data()[k * po * po..(k + 1) * po * po];
            let truth = label
                .crop(x0 * geom.r, y0 * geom.r, po, po)
                .map_err(|e| TrainError::Data(e.to_string()))?;
            total += mae(pred, &truth.values, false);
        }
    }
    Ok(total / offsets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictStats {
    pub patches: usize,
    pub seconds: f64,
    pub patches_per_sec: f64,
}

/// Grid patches of every sub-region, generator, alpha-blend stitch.
pub fn predict_fullfov(
    model: &Model,
    frame: &Frame,
    geom: &TileGeometry,
) -> Result<(PhaseImage, PredictStats)> {
    predict_fullfov_threads(model, frame, geom, 1)
}

/// [`predict_fullfov`] with patch batches spread over up to `threads`
/// workers. Batches are fixed, so the output does not depend on `threads`.
pub fn predict_fullfov_threads(
    model: &Model,
    frame: &Frame,
    geom: &TileGeometry,
    threads: usize,
) -> Result<(PhaseImage, PredictStats)> {
    check_geometry(model, geom)?;
    let start = Instant::now();
    let plan = inference_plan(frame.width, frame.height, geom)?;
    let stitch = StitchPlan::new(plan.canvas_width, plan.canvas_height, &plan.outputs)?;
    let po = geom.patch_out;
    let unlabeled = Frame {
        label: None,
        ..frame.clone()
    };
    let chunks: Vec<Vec<(usize, usize)>> = plan
        .inputs
        .chunks(PREDICT_BATCH)
        .map(|c| c.iter().map(|r| (r.x, r.y)).collect())
        .collect();
    let run_chunk = |offsets: &[(usize, usize)]| -> Result<Vec<f64>> {
        let batch = assemble(model, &unlabeled, offsets, geom, None)?;
        Ok(generate(model, &batch.input)?.data().to_vec())
    };
    let workers = threads.clamp(1, chunks.len().max(1));
    let results: Vec<Result<Vec<f64>>> = if workers == 1 {
        chunks.iter().map(|c| run_chunk(c)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|t| {
                    let (chunks, run_chunk) = (&chunks, &run_chunk);
                    scope.spawn(move || {
                        (t..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, run_chunk(&chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("prediction worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every batch ran"))
            .collect()
    };
    let mut outputs: Vec<f64> = Vec::with_capacity(plan.inputs.len() * po * po);
    for r in results {
        outputs.extend(r?);
    }
    let patches: Vec<&[f64]> = outputs.chunks(po * po).collect();
    let image = stitch.compose(&patches)?;
    let seconds = start.elapsed().as_secs_f64();
    let n = plan.inputs.len();
    let rate = if seconds > 0.0 {
        n as f64 / seconds
    } else {
        0.0
    };
    Ok((
        image,
        PredictStats {
            patches: n,
            seconds,
            patches_per_sec: rate,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct FramePrediction {
    pub frame: usize,
    pub image: PhaseImage,
    pub metrics: Option<MetricReport>,
    pub stats: PredictStats,
}

/// Independent full-field prediction of every frame, with metrics where a
/// label exists.
pub fn predict_timeseries(
    model: &Model,
    frames: &[Frame],
    geom: &TileGeometry,
) -> Result<Vec<FramePrediction>> {
    frames
        .iter()
        .map(|f| {
            let (image, stats) = predict_fullfov(model, f, geom)?;
            let metrics = f
                .label
                .as_ref()
                .map(|l| metric_suite(&image.values, &l.values, image.width, image.height));
            Ok(FramePrediction {
                frame: f.id,
                image,
                metrics,
                stats,
            })
        })
        .collect()
}
