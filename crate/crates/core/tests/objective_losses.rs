use fpm_core::autodiff::gradcheck::{max_rel_error, numeric_grad};
use fpm_core::autodiff::{Graph, Mode, Ops, ParamKind, ParamStore, Tensor, Var};
use fpm_core::network::{
    BnConfig, Builder, ConvSpec, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use fpm_core::objective::*;
use fpm_core::optics::*;
use fpm_core::oracle::{fpm_reconstruct, phase_extract, OracleConfig};
use fpm_core::synth::{sample_object, Ensemble};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scalar(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut store = ParamStore::new();
    let mut g = Graph::new(&mut store, Mode::Eval);
    let v = f(&mut g);
    g.value(v).item()
}

#[test]
fn mae_examples() {
    let t = random(1, &[2, 8, 8, 1]);
    assert_eq!(
        scalar(|g| {
            let p = g.input(t.clone());
            loss_mae(g, p, &t, false).unwrap()
        }),
        0.0
    );
    let ones = Tensor::full(&[1, 320, 320, 1], 1.0);
    assert_eq!(
        scalar(|g| {
            let p = g.input(Tensor::zeros(&[1, 320, 320, 1]));
            loss_mae(g, p, &ones, false).unwrap()
        }),
        1.0
    );
}

#[test]
fn mae_matches_naive_summation() {
    let (p, t) = (random(2, &[1, 16, 12, 1]), random(3, &[1, 16, 12, 1]));
    let mut naive = 0.0;
    for y in 0..16 {
        for x in 0..12 {
            let i = y * 12 + x;
            naive += (t.data()[i].abs() - p.data()[i].abs()).abs();
        }
    }
    naive /= 192.0;
    let got = scalar(|g| {
        let v = g.input(p.clone());
        loss_mae(g, v, &t, false).unwrap()
    });
    assert_eq!(got, naive);
    assert_eq!(mae(p.data(), t.data(), false), naive);
    // signed variant differs wherever signs disagree
    let signed = scalar(|g| {
        let v = g.input(p.clone());
        loss_mae(g, v, &t, true).unwrap()
    });
    assert!(signed > got);
}

fn dft_mag(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ph = -2.0
                        * std::f64::consts::PI
                        * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    acc += img[y * w + x] * Complex64::from_polar(1.0, ph);
                }
            }
            out[v * w + u] = acc.norm() / ((h * w) as f64).sqrt();
        }
    }
    out
}

#[test]
fn fmae_matches_direct_dft() {
    let (p, t) = (random(4, &[1, 12, 10, 1]), random(5, &[1, 12, 10, 1]));
    let (fp, ft) = (dft_mag(p.data(), 12, 10), dft_mag(t.data(), 12, 10));
    let oracle = fp.iter().zip(&ft).map(|(a, b)| (b - a).abs()).sum::<f64>() / 120.0;
    let got = scalar(|g| {
        let v = g.input(p.clone());
        loss_fmae(g, v, &t).unwrap()
    });
    assert!((got - oracle).abs() <= 1e-10 * oracle, "{got} vs {oracle}");
}

#[test]
fn fmae_ignores_circular_shifts_but_mae_does_not() {
    let t = random(6, &[1, 16, 16, 1]);
    assert_eq!(
        scalar(|g| {
            let v = g.input(t.clone());
            loss_fmae(g, v, &t).unwrap()
        }),
        0.0
    );
    for (dy, dx) in [(1, 0), (3, 5), (15, 7)] {
        let shifted = Tensor::from_fn(&[1, 16, 16, 1], |i| {
            let (y, x) = (i / 16, i % 16);
            t.data()[((y + dy) % 16) * 16 + (x + dx) % 16]
        });
        let f = scalar(|g| {
            let v = g.input(shifted.clone());
            loss_fmae(g, v, &t).unwrap()
        });
        assert!(f <= 1e-14, "fmae {f} after shift ({dy}, {dx})");
        let m = scalar(|g| {
            let v = g.input(shifted.clone());
            loss_mae(g, v, &t, false).unwrap()
        });
        assert!(m > 1e-3);
    }
}

#[test]
fn adversarial_examples() {
    for (p, want) in [
        (1.0, 0.0),
        (0.5, std::f64::consts::LN_2),
        ((-1.0f64).exp(), 1.0),
    ] {
        let got = scalar(|g| {
            let v = g.input(Tensor::full(&[3], p));
            loss_adversarial_g(g, v).unwrap()
        });
        assert!((got - want).abs() < 1e-15, "D = {p}: {got}");
    }
    let clamped = scalar(|g| {
        let v = g.input(Tensor::full(&[1], 0.0));
        loss_adversarial_g(g, v).unwrap()
    });
    assert!((clamped - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn discriminator_loss_examples() {
    let pair = |r: f64, f: f64| {
        scalar(|g| {
            let (a, b) = (
                g.input(Tensor::full(&[2], r)),
                g.input(Tensor::full(&[2], f)),
            );
            loss_discriminator(g, a, b).unwrap()
        })
    };
    assert_eq!(pair(1.0, 0.0), 0.0);
    assert!((pair(0.5, 0.5) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn weight_regularizer_examples() {
    let mut store = ParamStore::new();
    let w = store.add(
        "g.w",
        ParamKind::Weight,
        Tensor::new(&[1], vec![-2.5]).unwrap(),
    );
    store.add("g.b", ParamKind::Bias, Tensor::full(&[3], 7.0));
    store.add("g.bn.gamma", ParamKind::BnScale, Tensor::full(&[3], 7.0));
    store.add("d.w", ParamKind::Weight, Tensor::full(&[3], 7.0));
    let ids = regularized_params(&store, "g.");
    assert_eq!(ids, vec![w]);
    let mut g = Graph::new(&mut store, Mode::Eval);
    let v = loss_weight_reg(&mut g, &ids).unwrap();
    assert_eq!(g.value(v).item(), 2.5);
    let z = loss_weight_reg(&mut g, &[]).unwrap();
    assert_eq!(g.value(z).item(), 0.0);

    let mut store = ParamStore::new();
    let ids: Vec<_> = (0..4)
        .map(|i| {
            store.add(
                format!("g.w{i}"),
                ParamKind::Weight,
                random(10 + i, &[3, 5]),
            )
        })
        .collect();
    let naive: f64 = ids
        .iter()
        .map(|id| store.value(*id).data().iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    let mut g = Graph::new(&mut store, Mode::Eval);
    let v = loss_weight_reg(&mut g, &ids).unwrap();
    assert_eq!(g.value(v).item(), naive);
}

/// Tiny generator (8 -> 16 px) and discriminator sharing one store.
fn tiny(seed: u64) -> (ParamStore, Generator, Discriminator) {
    let gcfg = GeneratorConfig {
        alpha: 2,
        stage_sizes: vec![4, 2, 4, 8],
        block_layers: vec![2, 1, 2, 1],
        growth: 2,
        r0: 3,
        dropout: 0.0,
        bn: BnConfig::default(),
    };
    let dcfg = DiscriminatorConfig {
        in_channels: 3,
        input_size: 8,
        conv_stack: vec![ConvSpec {
            kernel: 3,
            channels: 4,
            stride: 2,
        }],
        fc_sizes: vec![4, 2],
        minibatch_grid: 2,
        dropout: 0.5,
        bn: BnConfig::default(),
    };
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, seed, BnConfig::default());
    let gen = Generator::build(&mut b, &gcfg).unwrap();
    let d = Discriminator::build(&mut b, &dcfg).unwrap();
    (store, gen, d)
}

struct Sample {
    input: Tensor,
    truth: Tensor,
    cond: Tensor,
}

fn sample(seed: u64) -> Sample {
    Sample {
        input: random(seed, &[2, 4, 4, 2]),
        truth: random(seed + 1, &[2, 8, 8, 1]),
        cond: random(seed + 2, &[2, 8, 8, 2]),
    }
}

fn mixed(
    g: &mut Graph,
    gen: &Generator,
    d: &Discriminator,
    s: &Sample,
    w: &LossWeights,
) -> MixedLoss {
    let x = g.input(s.input.clone());
    let pred = gen.forward(g, x).unwrap();
    let c = g.input(s.cond.clone());
    let score = if w.lambda2 != 0.0 {
        Some(d.discriminate_minibatch(g, pred, c).unwrap())
    } else {
        None
    };
    let reg = regularized_params(g.store(), "g.");
    loss_mixed(g, pred, &s.truth, score, &reg, w, false).unwrap()
}

#[test]
fn mixed_loss_recomposes_exactly() {
    let (mut store, gen, d) = tiny(1);
    let s = sample(20);
    for w in [
        LossWeights::phase1(),
        LossWeights::phase2(),
        LossWeights {
            lambda1: 3.0,
            beta1: 0.2,
            beta2: 0.7,
            lambda2: 0.4,
            lambda3: 0.1,
        },
    ] {
        let mut g = Graph::with_seed(&mut store, Mode::Train, 3);
        let l = mixed(&mut g, &gen, &d, &s, &w);
        let b = l.breakdown;
        assert_eq!(b.total, g.value(l.total).item());
        assert_eq!(b.total, w.combine(b.mae, b.fmae, b.adv, b.reg));
        let formula = w.lambda1 * (w.beta1 * b.mae + w.beta2 * b.fmae)
            + w.lambda2 * b.adv
            + w.lambda3 * b.reg;
        assert!((b.total - formula).abs() <= 1e-13 * formula.abs());
        assert!(b.mae > 0.0 && b.adv > 0.0 && b.reg > 0.0);
    }
}

#[test]
fn phase_one_logs_zero_fmae_and_phase_two_does_not() {
    let (mut store, gen, d) = tiny(2);
    let s = sample(30);
    let mut g = Graph::with_seed(&mut store, Mode::Train, 3);
    assert_eq!(
        mixed(&mut g, &gen, &d, &s, &LossWeights::phase1())
            .breakdown
            .fmae,
        0.0
    );
    let mut g = Graph::with_seed(&mut store, Mode::Train, 3);
    assert!(
        mixed(&mut g, &gen, &d, &s, &LossWeights::phase2())
            .breakdown
            .fmae
            > 0.0
    );
}

#[test]
fn identity_prediction_has_zero_data_loss() {
    let t = random(7, &[1, 8, 8, 1]);
    let w = LossWeights {
        lambda1: 1.0,
        beta1: 1.0,
        beta2: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    let got = scalar(|g| {
        let p = g.input(t.clone());
        loss_mixed(g, p, &t, None, &[], &w, false).unwrap().total
    });
    assert_eq!(got, 0.0);
}

#[test]
fn doubling_lambda2_changes_only_the_adversarial_share() {
    let (mut store, gen, d) = tiny(3);
    let s = sample(40);
    let w1 = LossWeights::phase2();
    let w2 = LossWeights {
        lambda2: 2.0 * w1.lambda2,
        ..w1
    };
    let mut g = Graph::with_seed(&mut store, Mode::Train, 3);
    let a = mixed(&mut g, &gen, &d, &s, &w1).breakdown;
    let mut g = Graph::with_seed(&mut store, Mode::Train, 3);
    let b = mixed(&mut g, &gen, &d, &s, &w2).breakdown;
    assert_eq!((a.mae, a.fmae, a.adv, a.reg), (b.mae, b.fmae, b.adv, b.reg));
    assert!((b.total - a.total - w1.lambda2 * a.adv).abs() <= 1e-12 * b.total);
}

#[test]
fn mixed_loss_without_a_score_is_rejected_when_adversarial() {
    let t = random(8, &[1, 4, 4, 1]);
    let mut store = ParamStore::new();
    let mut g = Graph::new(&mut store, Mode::Eval);
    let p = g.input(t.clone());
    assert!(loss_mixed(&mut g, p, &t, None, &[], &LossWeights::phase1(), false).is_err());
    let bad = Tensor::zeros(&[1, 5, 4, 1]);
    assert!(loss_mae(&mut g, p, &bad, false).is_err());
    assert!(loss_fmae(&mut g, p, &bad).is_err());
}

const SEEDS: u64 = 20;

#[test]
fn mixed_loss_gradient_through_generator_and_discriminator() {
    let w = LossWeights {
        lambda1: 1.0,
        beta1: 0.7,
        beta2: 0.3,
        lambda2: 0.5,
        lambda3: 0.01,
    };
    for seed in 0..SEEDS {
        let (mut store, gen, d) = tiny(100 + seed);
        let s = sample(200 + 3 * seed);
        let eval = |store: &mut ParamStore| {
            let mut g = Graph::with_seed(store, Mode::Train, seed);
            let l = mixed(&mut g, &gen, &d, &s, &w);
            g.value(l.total).item()
        };
        store.zero_grad();
        {
            let mut g = Graph::with_seed(&mut store, Mode::Train, seed);
            let l = mixed(&mut g, &gen, &d, &s, &w);
            g.backward(l.total).unwrap();
        }
        for id in store.trainable_with_prefix("g.") {
            let analytic = store.get(id).grad.data().to_vec();
            let at = store.value(id).clone();
            let num = numeric_grad(
                |t| {
                    store.get_mut(id).value = t.clone();
                    eval(&mut store)
                },
                &at,
                1e-6,
            );
            store.get_mut(id).value = at;
            let err = max_rel_error(&analytic, &num, 1e-5);
            assert!(
                err <= 1e-4,
                "seed {seed}: {} relative error {err:e}",
                store.get(id).name
            );
        }
    }
}

#[test]
fn discriminator_loss_gradient_wrt_discriminator_params() {
    for seed in 0..SEEDS {
        let (mut store, _, d) = tiny(300 + seed);
        let (real, fake, cond) = (
            random(seed, &[2, 8, 8, 1]),
            random(seed + 50, &[2, 8, 8, 1]),
            random(seed + 99, &[2, 8, 8, 2]),
        );
        let build = |g: &mut Graph| {
            let c = g.input(cond.clone());
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            let pr = d.discriminate_minibatch(g, r, c).unwrap();
            let pf = d.discriminate_minibatch(g, f, c).unwrap();
            loss_discriminator(g, pr, pf).unwrap()
        };
        store.zero_grad();
        {
            let mut g = Graph::with_seed(&mut store, Mode::Train, seed);
            let l = build(&mut g);
            g.backward(l).unwrap();
        }
        for id in store.trainable_with_prefix("d.") {
            let analytic = store.get(id).grad.data().to_vec();
            let at = store.value(id).clone();
            let num = numeric_grad(
                |t| {
                    store.get_mut(id).value = t.clone();
                    let mut g = Graph::with_seed(&mut store, Mode::Train, seed);
                    let l = build(&mut g);
                    g.value(l).item()
                },
                &at,
                1e-6,
            );
            store.get_mut(id).value = at;
            let err = max_rel_error(&analytic, &num, 1e-5);
            assert!(
                err <= 1e-4,
                "seed {seed}: {} relative error {err:e}",
                store.get(id).name
            );
        }
    }
}

fn test_image(n: usize) -> Vec<f64> {
    phase_extract(&sample_object(&Ensemble::cells(), n, n, 0.3, 77), false).values
}

#[test]
fn identical_images_score_perfectly() {
    let img = test_image(64);
    let m = metric_suite(&img, &img, 64, 64);
    assert_eq!(m.mae, 0.0);
    assert!((m.ssim - 1.0).abs() < 1e-12);
    assert_eq!(m.psnr_db, PSNR_CAP_DB);
    assert_eq!(m.fm, frequency_measure(&img, 64, 64));
    assert!((0.0..=1.0).contains(&m.fm));
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let a = test_image(48);
    let b: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(i, v)| v * 0.8 + 0.05 * ((i * 7919) % 13) as f64 / 13.0)
        .collect();
    let range = dynamic_range(&a);
    let (ab, ba) = (ssim(&a, &b, 48, 48, range), ssim(&b, &a, 48, 48, range));
    assert!((ab - ba).abs() < 1e-14);
    assert!(ab < 1.0 && ab > -1.0);
}

#[test]
fn frequency_measure_falls_under_blur() {
    let img = test_image(128);
    let fms: Vec<f64> = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
        .iter()
        .map(|&s| {
            if s == 0.0 {
                frequency_measure(&img, 128, 128)
            } else {
                frequency_measure(&gaussian_blur(&img, 128, 128, s), 128, 128)
            }
        })
        .collect();
    assert!(fms.windows(2).all(|w| w[1] < w[0]), "{fms:?}");
}

#[test]
fn band_limited_image_stays_inside_twice_the_pupil() {
    let n = 64;
    let pixel = 0.3;
    let cutoff = 0.2 / 0.514;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lat = Lattice {
        width: n,
        height: n,
        pixel_size: pixel,
    };
    let mut spec: Vec<Complex64> = (0..n * n)
        .map(|i| {
            let (fx, fy) = lat.frequency(i / n, i % n);
            if fx.hypot(fy) <= cutoff {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    fpm_core::fft::Fft2::new(n, n).inverse(&mut spec);
    let img: Vec<f64> = spec.iter().map(|c| c.re).collect();
    assert!(energy_beyond(&img, n, n, pixel, 2.0 * cutoff) <= 1e-3);
}

#[test]
fn darkfield_reconstruction_extends_past_twice_the_pupil() {
    let (n, pixel, r) = (128, 0.3, 4);
    let obj = sample_object(&Ensemble::cells(), n, n, pixel, 21);
    let pupil = make_pupil(
        0.2,
        0.514,
        Lattice {
            width: n / r,
            height: n / r,
            pixel_size: pixel * r as f64,
        },
    )
    .unwrap();
    let two_na = 2.0 * 0.2 / 0.514;
    let beyond = |desc: PatternDescriptor| {
        let pat = build_pattern(&desc).unwrap();
        let stack = forward_capture(&obj, &pat, &pupil, r, &NoiseConfig::disabled()).unwrap();
        let rec = fpm_reconstruct(&stack, &pat, &pupil, &OracleConfig::default()).unwrap();
        let mut spec = rec.field.values().to_vec();
        fpm_core::fft::Fft2::new(n, n).forward(&mut spec);
        let e = spectrum_band_energy(&spec, n, n, pixel, &[two_na], true);
        e[1] / (e[0] + e[1])
    };
    let p4 = beyond(PatternDescriptor::Preset {
        preset: Preset::P4,
        grid: LedGrid::default(),
    });
    let p1 = beyond(PatternDescriptor::Preset {
        preset: Preset::P1,
        grid: LedGrid::default(),
    });
    let single = beyond(PatternDescriptor::Explicit {
        k: vec![(0.0, 0.0)],
        wavelength: 0.514,
        na_objective: 0.2,
    });
    assert!(single < 1e-12, "single LED {single}");
    assert!(p4 > 10.0 * p1.max(1e-9), "P4 {p4} vs P1 {p1}");
}

#[test]
fn coverage_plot_marks_three_circles() {
    let img = test_image(64);
    let plot = fourier_coverage_plot(&img, 64, 64, 0.3, 0.2, 0.514);
    assert_eq!(plot.dimensions(), (64, 64));
    for colour in COVERAGE_COLOURS {
        assert!(
            plot.pixels().any(|p| p.0 == colour),
            "missing circle {colour:?}"
        );
    }
}
