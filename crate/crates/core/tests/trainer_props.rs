use fpm_core::autodiff::Checkpoint;
use fpm_core::autodiff::{Graph, Mode, Ops, ParamStore, Tensor};
use fpm_core::network::{Architecture, Builder, Generator, GeneratorConfig, Model};
use fpm_core::objective::{mae, LossWeights};
use fpm_core::optics::Preset;
use fpm_core::pipeline::TileGeometry;
use fpm_core::scene::{make_frame, SceneConfig};
use fpm_core::synth::{flat_object, sample_object, Ensemble};
use fpm_core::trainer::*;
use std::sync::OnceLock;

fn frame(seed: u64, ens: &Ensemble) -> Frame {
    let obj = sample_object(ens, 256, 256, 0.3, seed);
    make_frame(&SceneConfig::desk(Preset::P4), seed as usize, &obj, true).unwrap()
}

fn cells() -> &'static Frame {
    static F: OnceLock<Frame> = OnceLock::new();
    F.get_or_init(|| frame(11, &Ensemble::cells()))
}

fn model(alpha: usize, seed: u64) -> Model {
    Model::build(&Architecture::desk(alpha), seed).unwrap()
}

fn short(steps_p1: usize, steps_p2: usize, lambda2: f64) -> TrainSchedule {
    let mut s = TrainSchedule::desk();
    s.iterations_per_epoch = 1;
    s.phase1.epochs = steps_p1;
    s.phase2.epochs = steps_p2;
    s.lr_decay_every = 0;
    s.batch_size = 2;
    s.phase1.weights.lambda2 = lambda2;
    s.phase2.weights.lambda2 = lambda2;
    s
}

fn quiet(_: &LossRecord) {}

/// Generator trained for a few hundred MAE-only steps, shared by the tests
/// that need a non-trivial model.
fn trained() -> &'static (Model, Model) {
    static M: OnceLock<(Model, Model)> = OnceLock::new();
    M.get_or_init(|| {
        let f = cells();
        let mut init = model(f.alpha, 0);
        let g = init.generator.clone();
        g.fit_input(&mut init.store, &f.input);
        let mut s = short(300, 0, 0.0);
        s.lr = 2e-3;
        let out = train(
            init.clone(),
            std::slice::from_ref(f),
            None,
            &s,
            &TileGeometry::desk(),
            false,
            &mut quiet,
        )
        .unwrap();
        (
            init,
            Model::from_store(&Architecture::desk(f.alpha), out.checkpoint.store).unwrap(),
        )
    })
}

#[test]
fn zero_epochs_return_the_initialization() {
    let f = cells();
    let m = model(f.alpha, 3);
    let init = m.store.clone();
    let out = train(
        m,
        std::slice::from_ref(f),
        None,
        &short(0, 0, 1.0),
        &TileGeometry::desk(),
        false,
        &mut quiet,
    )
    .unwrap();
    assert_eq!(out.checkpoint.store, init);
    assert!(out.history.is_empty());
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let f = cells();
    let run = || {
        let mut s = short(3, 3, 1.0);
        s.label_noise = 0.05;
        train(
            model(f.alpha, 5),
            std::slice::from_ref(f),
            Some(f),
            &s,
            &TileGeometry::desk(),
            true,
            &mut quiet,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.validation, b.validation);
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn fourier_term_is_exactly_zero_until_phase_two() {
    let f = cells();
    let out = train(
        model(f.alpha, 1),
        std::slice::from_ref(f),
        None,
        &short(3, 3, 1.0),
        &TileGeometry::desk(),
        true,
        &mut quiet,
    )
    .unwrap();
    assert_eq!(out.history.len(), 6);
    for r in &out.history[..3] {
        assert_eq!(r.l_fmae, 0.0);
    }
    for r in &out.history[3..] {
        assert!(r.l_fmae > 0.0);
    }
}

#[test]
fn logged_learning_rate_halves_every_decay_period() {
    let f = cells();
    let mut s = short(6, 0, 0.0);
    s.iterations_per_epoch = 2;
    s.phase1.epochs = 3;
    s.lr_decay_every = 1;
    s.lr = 1e-5;
    let out = train(
        model(f.alpha, 1),
        std::slice::from_ref(f),
        None,
        &s,
        &TileGeometry::desk(),
        true,
        &mut quiet,
    )
    .unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-5, 1e-5, 5e-6, 5e-6, 2.5e-6, 2.5e-6]);
}

#[test]
fn only_training_frames_feed_updates() {
    let ens = Ensemble::cells();
    let frames = [frame(20, &ens), frame(21, &ens)];
    let out = train(
        model(frames[0].alpha, 1),
        &frames[..1],
        Some(&frames[1]),
        &short(4, 0, 1.0),
        &TileGeometry::desk(),
        true,
        &mut quiet,
    )
    .unwrap();
    assert_eq!(out.frames_used.into_iter().collect::<Vec<_>>(), vec![20]);
}

#[test]
fn validation_keeps_the_best_checkpoint() {
    let f = cells();
    let mut s = short(4, 0, 0.0);
    s.iterations_per_epoch = 2;
    s.phase1.epochs = 3;
    let out = train(
        model(f.alpha, 2),
        std::slice::from_ref(f),
        Some(f),
        &s,
        &TileGeometry::desk(),
        true,
        &mut quiet,
    )
    .unwrap();
    let scores: Vec<f64> = out.validation.iter().map(|v| v.1).collect();
    assert_eq!(scores.len(), 3);
    let best = select_best(&scores).unwrap();
    assert_eq!(out.best, Some(out.validation[best].0));
    let m = Model::from_store(&Architecture::desk(f.alpha), out.checkpoint.store).unwrap();
    assert_eq!(
        validate(&m, f, &TileGeometry::desk()).unwrap(),
        scores[best]
    );
}

#[test]
fn checkpoint_round_trip_predicts_bit_identically() {
    let f = cells();
    let out = train(
        model(f.alpha, 4),
        std::slice::from_ref(f),
        None,
        &short(2, 0, 1.0),
        &TileGeometry::desk(),
        true,
        &mut quiet,
    )
    .unwrap();
    let arch = Architecture::desk(f.alpha);
    let before = Model::from_store(&arch, out.checkpoint.store.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let after = Model::from_store(
        &Architecture::from_json(&loaded.architecture).unwrap(),
        loaded.store,
    )
    .unwrap();
    let geom = TileGeometry::desk();
    assert_eq!(
        predict_fullfov(&before, f, &geom).unwrap().0,
        predict_fullfov(&after, f, &geom).unwrap().0
    );
}

#[test]
fn prediction_does_not_depend_on_thread_count() {
    let (_, m) = trained();
    let geom = TileGeometry::desk();
    let one = predict_fullfov_threads(m, cells(), &geom, 1).unwrap().0;
    let three = predict_fullfov_threads(m, cells(), &geom, 3).unwrap().0;
    assert_eq!(one, three);
    assert_eq!(
        (one.width, one.height),
        (4 * cells().width, 4 * cells().height)
    );
}

#[test]
fn training_beats_the_untrained_generator() {
    let (init, m) = trained();
    let geom = TileGeometry::desk();
    let (before, after) = (
        validate(init, cells(), &geom).unwrap(),
        validate(m, cells(), &geom).unwrap(),
    );
    assert!(after < before, "trained {after} vs untrained {before}");
}

#[test]
fn stitched_error_tracks_patch_error() {
    let (_, m) = trained();
    let geom = TileGeometry::desk();
    let patch_mae = validate(m, cells(), &geom).unwrap();
    let (img, stats) = predict_fullfov(m, cells(), &geom).unwrap();
    let full = mae(&img.values, &cells().label.as_ref().unwrap().values, false);
    assert!(
        full <= 1.1 * patch_mae,
        "stitched {full} vs patches {patch_mae}"
    );
    assert!(stats.patches > 0 && stats.patches_per_sec > 0.0);
}

#[test]
fn constant_stack_gives_a_constant_interior() {
    let (_, m) = trained();
    // weights do not depend on spatial size, so the trained generator can run on a
    // 64 px input, whose interior lies beyond the reach of the zero padding
    let big = GeneratorConfig {
        stage_sizes: m.arch.generator.stage_sizes.iter().map(|s| 4 * s).collect(),
        ..m.arch.generator.clone()
    };
    let mut scratch = ParamStore::new();
    let gen = Generator::build(&mut Builder::new(&mut scratch, 0, big.bn), &big).unwrap();
    assert!(scratch
        .iter()
        .zip(m.store.iter())
        .all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape()));

    let flat = make_frame(
        &SceneConfig::desk(Preset::P4),
        0,
        &flat_object(256, 256, 0.3),
        false,
    )
    .unwrap();
    let (n, a) = (64, flat.alpha);
    let mut input: Vec<f64> = flat.input[..a]
        .iter()
        .cycle()
        .take(n * n * a)
        .copied()
        .collect();
    m.generator.normalize_input(&m.store, &mut input);
    let mut store = m.store.clone();
    let mut g = Graph::new(&mut store, Mode::Eval);
    let x = g.input(Tensor::new(&[1, n, n, a], input).unwrap());
    let y = gen.forward(&mut g, x).unwrap();
    let (out, w) = (g.value(y).data(), 4 * n);
    // stride-2 stages make the response periodic with one bottleneck pixel, not flat
    let per = m.arch.generator.stage_sizes.last().unwrap()
        / m.arch.generator.stage_sizes.iter().min().unwrap();
    let (margin, end) = (64, w - 64);
    let at = |y: usize, x: usize| out[y * w + x];
    let mut drift: f64 = 0.0;
    for y in margin..end - per {
        for x in margin..end - per {
            drift = drift
                .max((at(y, x) - at(y + per, x)).abs())
                .max((at(y, x) - at(y, x + per)).abs());
        }
    }
    let cells: Vec<f64> = (margin..end)
        .step_by(per)
        .flat_map(|y| {
            (margin..end).step_by(per).map(move |x| {
                (0..per * per)
                    .map(|k| at(y + k / per, x + k % per))
                    .sum::<f64>()
            })
        })
        .map(|v| v / (per * per) as f64)
        .collect();
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let var = cells.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cells.len() as f64;
    assert!(
        drift <= 1e-2 * mean.abs(),
        "period {per} drift {drift}, mean {mean}"
    );
    assert!(var <= 1e-4 * mean.abs(), "cell variance {var}, mean {mean}");
}

#[test]
fn empty_series_gives_empty_outputs() {
    let (_, m) = trained();
    assert!(predict_timeseries(m, &[], &TileGeometry::desk())
        .unwrap()
        .is_empty());
}

#[test]
fn transfer_with_zero_budget_returns_the_input() {
    let f = cells();
    let ckpt = Trainer::new(model(f.alpha, 9), 1e-3).checkpoint();
    let out = transfer_learn(
        &ckpt,
        std::slice::from_ref(f),
        0,
        &short(1, 1, 1.0),
        &TileGeometry::desk(),
        &mut quiet,
    )
    .unwrap();
    assert_eq!(out.checkpoint, ckpt);
}

#[test]
fn transfer_uses_phase_two_weights_and_no_decay() {
    let f = cells();
    let ckpt = Trainer::new(model(f.alpha, 9), 1e-3).checkpoint();
    let mut s = short(1, 1, 1.0);
    s.lr_decay_every = 1;
    let out = transfer_learn(
        &ckpt,
        std::slice::from_ref(f),
        3,
        &s,
        &TileGeometry::desk(),
        &mut quiet,
    )
    .unwrap();
    assert!(out.history.iter().all(|r| r.lr == s.lr && r.l_fmae > 0.0));
    assert!(out.validation.is_empty());
}

#[test]
fn label_noise_is_averaged_out() {
    let (_, base) = trained();
    let f = cells();
    let sigma = 0.2;
    let mut s = short(60, 0, 0.0);
    s.label_noise = sigma;
    s.lr = 5e-4;
    let m = Model::from_store(&base.arch, base.store.clone()).unwrap();
    let out = train(
        m,
        std::slice::from_ref(f),
        None,
        &s,
        &TileGeometry::desk(),
        false,
        &mut quiet,
    )
    .unwrap();
    let m = Model::from_store(&base.arch, out.checkpoint.store).unwrap();
    let (img, _) = predict_fullfov(&m, f, &TileGeometry::desk()).unwrap();
    let truth = &f.label.as_ref().unwrap().values;
    let background: Vec<f64> = img
        .values
        .iter()
        .zip(truth)
        .filter(|(_, t)| t.abs() < 0.02)
        .map(|(p, t)| p - t)
        .collect();
    assert!(background.len() > 1000);
    let mean = background.iter().sum::<f64>() / background.len() as f64;
    let var = background.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / background.len() as f64;
    assert!(
        var < sigma * sigma,
        "background variance {var} vs label noise {}",
        sigma * sigma
    );
}

#[test]
fn schedule_rejects_degenerate_settings() {
    let mut s = TrainSchedule::desk();
    s.batch_size = 0;
    assert!(s.validate().is_err());
    let mut s = TrainSchedule::desk();
    s.phase2.weights = LossWeights {
        beta2: -1.0,
        ..LossWeights::phase2()
    };
    assert!(s.validate().is_err());
    let f = cells();
    let err = train(
        model(f.alpha, 0),
        &[],
        None,
        &TrainSchedule::desk(),
        &TileGeometry::desk(),
        true,
        &mut quiet,
    );
    assert!(matches!(err, Err(TrainError::Data(_))));
}
