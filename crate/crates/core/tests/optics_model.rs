use fpm_core::fft::{bin_of, signed_index};
use fpm_core::optics::*;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn random_object(n: usize, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * n)
        .map(|_| Complex64::from_polar(rng.random_range(0.2..1.5), rng.random_range(-PI..PI)))
        .collect();
    ComplexField::new(n, n, 0.3, values).unwrap()
}

fn pupil_for(n_low: usize) -> PupilMask {
    make_pupil(
        0.2,
        0.514,
        Lattice {
            width: n_low,
            height: n_low,
            pixel_size: 1.2 / 4.0 * 2.0,
        },
    )
    .unwrap()
}

/// Direct O(N^4) evaluation of the capture model without any FFT.
fn direct_capture(obj: &ComplexField, led: &Led, pupil: &PupilMask, r: usize) -> Vec<f64> {
    let (w, h) = (obj.width(), obj.height());
    let (lw, lh) = (w / r, h / r);
    let dk = 1.0 / (w as f64 * obj.pixel_size());
    let sx = (led.kx / dk).round() as isize;
    let sy = (led.ky / dk).round() as isize;
    let norm_hi = 1.0 / ((w * h) as f64).sqrt();
    let norm_lo = 1.0 / ((lw * lh) as f64).sqrt();
    let mut spec = vec![Complex64::new(0.0, 0.0); lw * lh];
    for v in 0..lh {
        for u in 0..lw {
            let p = pupil.values[v * lw + u];
            if p.norm() == 0.0 {
                continue;
            }
            let fy = signed_index(v, lh) - sy;
            let fx = signed_index(u, lw) - sx;
            if bin_of(fy, h).is_none() || bin_of(fx, w).is_none() {
                continue;
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0
                        * PI
                        * (fx as f64 * x as f64 / w as f64 + fy as f64 * y as f64 / h as f64);
                    acc += obj.values()[y * w + x] * Complex64::from_polar(1.0, ang);
                }
            }
            spec[v * lw + u] = acc * norm_hi * p / r as f64;
        }
    }
    let mut out = vec![0.0; lw * lh];
    for y in 0..lh {
        for x in 0..lw {
            let mut acc = Complex64::new(0.0, 0.0);
            for v in 0..lh {
                for u in 0..lw {
                    let ang = 2.0
                        * PI
                        * (signed_index(u, lw) as f64 * x as f64 / lw as f64
                            + signed_index(v, lh) as f64 * y as f64 / lh as f64);
                    acc += spec[v * lw + u] * Complex64::from_polar(1.0, ang);
                }
            }
            out[y * lw + x] = (acc * norm_lo).norm_sqr();
        }
    }
    out
}

#[test]
fn fft_capture_matches_direct_dft() {
    for (n, seed) in [(16usize, 1u64), (16, 2), (32, 3)] {
        let obj = random_object(n, seed);
        let pupil = pupil_for(n / 2);
        let pat = build_pattern(&PatternDescriptor::Preset {
            preset: Preset::P4,
            grid: LedGrid::default(),
        })
        .unwrap();
        let stack = forward_capture(&obj, &pat, &pupil, 2, &NoiseConfig::disabled()).unwrap();
        for i in [0, 4, pat.alpha() - 1] {
            let slow = direct_capture(&obj, &pat.leds[i], &pupil, 2);
            let fast = stack.frame(i);
            let scale = slow.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10 * scale, "n {n} led {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn darkfield_frames_are_dimmer_than_brightfield_for_flat_objects() {
    // LED k-vectors snap to the object's frequency bins; 256 px keeps the snap
    // error below the NA gap between the outermost BF and innermost DF LED
    let n = 256;
    let obj = ComplexField::new(n, n, 0.3, vec![Complex64::new(1.0, 0.0); n * n]).unwrap();
    let pupil = make_pupil(
        0.2,
        0.514,
        Lattice {
            width: 64,
            height: 64,
            pixel_size: 1.2,
        },
    )
    .unwrap();
    for preset in [Preset::P2, Preset::P3, Preset::P4] {
        let pat = build_pattern(&PatternDescriptor::Preset {
            preset,
            grid: LedGrid::default(),
        })
        .unwrap();
        let stack = forward_capture(&obj, &pat, &pupil, 4, &NoiseConfig::disabled()).unwrap();
        let mean = |i: usize| stack.frame(i).iter().sum::<f64>() / stack.frame(i).len() as f64;
        let bf_min = (0..pat.bf_count()).map(mean).fold(f64::INFINITY, f64::min);
        let df_max = (pat.bf_count()..pat.alpha()).map(mean).fold(0.0, f64::max);
        assert!(df_max < bf_min, "{preset:?}: {df_max} vs {bf_min}");
    }
}

#[test]
fn p2_stack_has_49_channels() {
    let n = 64;
    let obj = random_object(n, 9);
    let pupil = make_pupil(
        0.2,
        0.514,
        Lattice {
            width: 16,
            height: 16,
            pixel_size: 1.2,
        },
    )
    .unwrap();
    let pat = build_pattern(&PatternDescriptor::Preset {
        preset: Preset::P2,
        grid: LedGrid::default(),
    })
    .unwrap();
    let stack = forward_capture(&obj, &pat, &pupil, 4, &NoiseConfig::disabled()).unwrap();
    assert_eq!((stack.alpha, stack.width, stack.height), (49, 16, 16));
}

#[test]
fn noise_is_seeded_and_non_negative() {
    let obj = random_object(32, 4);
    let pupil = pupil_for(16);
    let pat = build_pattern(&PatternDescriptor::Preset {
        preset: Preset::P1,
        grid: LedGrid::default(),
    })
    .unwrap();
    let noise = NoiseConfig {
        dark: 0.01,
        sigma: 0.05,
        seed: 3,
    };
    let a = forward_capture(&obj, &pat, &pupil, 2, &noise).unwrap();
    let b = forward_capture(&obj, &pat, &pupil, 2, &noise).unwrap();
    assert_eq!(a, b);
    assert!(a.frames.iter().all(|v| *v >= 0.0));
    let clean = forward_capture(&obj, &pat, &pupil, 2, &NoiseConfig::disabled()).unwrap();
    assert_ne!(a, clean);
}

#[test]
fn overlap_of_two_leds() {
    let rho = 0.2 / 0.514;
    let pair = |d: f64| {
        let pat = build_pattern(&PatternDescriptor::Explicit {
            k: vec![(0.0, 0.0), (d, 0.0)],
            wavelength: 0.514,
            na_objective: 0.2,
        })
        .unwrap();
        fourier_overlap(&pat, rho)
    };
    assert_eq!(pair(0.0).per_led, vec![1.0, 1.0]);
    assert_eq!(pair(2.0 * rho).per_led, vec![0.0, 0.0]);
    assert!(!pair(2.0 * rho).compatible());

    // Monte-Carlo estimate of the lens area at centre distance rho
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 400_000;
    let mut hits = 0usize;
    let mut inside = 0usize;
    while inside < trials {
        let (x, y) = (rng.random_range(-rho..rho), rng.random_range(-rho..rho));
        if x.hypot(y) > rho {
            continue;
        }
        inside += 1;
        if (x - rho).hypot(y) <= rho {
            hits += 1;
        }
    }
    let mc = hits as f64 / trials as f64;
    let analytic = pair(rho).per_led[0];
    assert!((analytic - mc).abs() < 0.005, "{analytic} vs {mc}");
    assert!((analytic - 0.391).abs() < 1e-3);
}

#[test]
fn dense_grid_meets_overlap_requirement() {
    let pat = build_pattern(&PatternDescriptor::Full {
        max_na: 0.4,
        grid: LedGrid::default(),
    })
    .unwrap();
    assert!(fourier_overlap(&pat, 0.2 / 0.514).compatible());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn captures_are_non_negative(seed in any::<u64>(), preset in 0usize..4, sigma in 0.0f64..0.2) {
        let preset = [Preset::P1, Preset::P2, Preset::P3, Preset::P4][preset];
        let obj = random_object(32, seed);
        let pupil = make_pupil(0.2, 0.514, Lattice { width: 8, height: 8, pixel_size: 1.2 }).unwrap();
        let pat = build_pattern(&PatternDescriptor::Preset { preset, grid: LedGrid::default() }).unwrap();
        let noise = NoiseConfig { dark: 0.0, sigma, seed };
        let stack = forward_capture(&obj, &pat, &pupil, 4, &noise).unwrap();
        prop_assert!(stack.frames.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }
}
