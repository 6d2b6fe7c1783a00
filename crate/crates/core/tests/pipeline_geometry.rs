use fpm_core::optics::{IntensityStack, Label};
use fpm_core::pipeline::*;
use fpm_core::raster::PhaseImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn brightfield_frame_over_its_own_background_is_one() {
    let frame: Vec<f64> = (0..48)
        .map(|i| 0.5 + (i as f64 * 0.3).cos().abs())
        .collect();
    let stack = IntensityStack::new(8, 6, 1, frame.clone()).unwrap();
    let cal = Calibration {
        background: Some(frame),
        dark: None,
    };
    let out = preprocess(&stack, &[Label::BF], &cal).unwrap();
    assert!(out.frames.iter().all(|v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn darkfield_frame_equal_to_dark_is_zero() {
    let frame: Vec<f64> = (0..48).map(|i| (i % 7) as f64).collect();
    let stack = IntensityStack::new(8, 6, 1, frame.clone()).unwrap();
    let cal = Calibration {
        background: None,
        dark: Some(frame),
    };
    let out = preprocess(&stack, &[Label::DF], &cal).unwrap();
    assert!(out.frames.iter().all(|v| *v == 0.0));
}

#[test]
fn calibration_size_mismatch_is_an_error() {
    let stack = IntensityStack::new(4, 4, 1, vec![1.0; 16]).unwrap();
    let cal = Calibration {
        background: Some(vec![1.0; 15]),
        dark: None,
    };
    assert!(preprocess(&stack, &[Label::BF], &cal).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn preprocess_is_idempotent_under_neutral_calibration(seed in any::<u64>(), w in 2usize..20, h in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<f64> = (0..2 * w * h).map(|_| rng.random_range(0.0..3.0)).collect();
        let stack = IntensityStack::new(w, h, 2, frames).unwrap();
        let cal = Calibration { background: Some(vec![1.7; w * h]), dark: Some(vec![0.0; w * h]) };
        let labels = [Label::BF, Label::DF];
        let once = preprocess(&stack, &labels, &cal).unwrap();
        let twice = preprocess(&once, &labels, &cal).unwrap();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn random_patches_replay() {
    let g = TileGeometry::full();
    let a = patch_offsets(688, 552, &g, PatchMode::Random { count: 50, seed: 4 }).unwrap();
    let b = patch_offsets(688, 552, &g, PatchMode::Random { count: 50, seed: 4 }).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&(x, y)| x <= 688 - 64 && y <= 552 - 64));
}

#[test]
fn single_patch_region() {
    let offs = patch_offsets(64, 64, &TileGeometry::full(), PatchMode::Grid).unwrap();
    assert_eq!(offs, vec![(0, 0)]);
}

#[test]
fn grid_patches_carry_channels_last() {
    let stack = IntensityStack::new(20, 20, 2, (0..800).map(f64::from).collect()).unwrap();
    let patches = extract_patches(&stack, &TileGeometry::desk(), PatchMode::Grid).unwrap();
    let (t, (x0, y0)) = &patches[patches.len() - 1];
    assert_eq!((*x0, *y0), (4, 4));
    assert_eq!(t[0], (4 * 20 + 4) as f64);
    assert_eq!(t[1], (400 + 4 * 20 + 4) as f64);
}

#[test]
fn bilinear_reproduces_constants_and_ramps() {
    let c = bilinear_resize(&[3.2; 64 * 64], 64, 64, 1, 80, 80);
    assert!(c.iter().all(|v| (v - 3.2).abs() < 1e-12));
    let ramp: Vec<f64> = (0..64 * 64).map(|i| 0.25 * (i % 64) as f64 - 1.0).collect();
    let up = bilinear_resize(&ramp, 64, 64, 1, 80, 80);
    for y in 0..80 {
        for x in 0..80 {
            let expect = 0.25 * (x as f64 * 63.0 / 79.0) - 1.0;
            assert!((up[y * 80 + x] - expect).abs() <= 1e-6);
        }
    }
}

#[test]
fn bilinear_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let src: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let up = bilinear_resize(&src, 4, 4, 1, 8, 8);
    for y in 0..8 {
        for x in 0..8 {
            let (sx, sy) = (x as f64 * 3.0 / 7.0, y as f64 * 3.0 / 7.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(3), (y0 + 1).min(3));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            let f = |yy: usize, xx: usize| src[yy * 4 + xx];
            let expect = (1.0 - ty) * ((1.0 - tx) * f(y0, x0) + tx * f(y0, x1))
                + ty * ((1.0 - tx) * f(y1, x0) + tx * f(y1, x1));
            assert!((up[y * 8 + x] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn constant_patches_stitch_to_a_constant() {
    let rects: Vec<(usize, usize)> = vec![(0, 0), (10, 0), (0, 7), (10, 7), (5, 3)];
    let patches: Vec<(PhaseImage, (usize, usize))> = rects
        .into_iter()
        .map(|o| (PhaseImage::filled(16, 12, 0.7), o))
        .collect();
    let canvas = alpha_blend_stitch(&patches, 26, 19).unwrap();
    assert!(canvas.values.iter().all(|v| (v - 0.7).abs() < 1e-14));
}

#[test]
fn two_patches_blend_linearly() {
    let a = (PhaseImage::filled(8, 1, 0.0), (0, 0));
    let b = (PhaseImage::filled(8, 1, 1.0), (3, 0));
    let row = alpha_blend_stitch(&[a, b], 11, 1).unwrap().values;
    assert!(row[..3].iter().all(|v| *v == 0.0));
    assert!(row[8..].iter().all(|v| *v == 1.0));
    assert!(row.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(row[5], 0.5);
    for (x, v) in row.iter().enumerate().take(8).skip(3) {
        assert!((v - ((x - 3) as f64 + 0.5) / 5.0).abs() < 1e-15);
    }
}

#[test]
fn gaps_are_reported() {
    let a = (PhaseImage::filled(4, 4, 1.0), (0, 0));
    let b = (PhaseImage::filled(4, 4, 1.0), (6, 0));
    match alpha_blend_stitch(&[a, b], 10, 4) {
        Err(PipelineError::Gap { count, x, y }) => assert_eq!((count, x, y), (8, 4, 0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn full_inference_plan() {
    let plan = inference_plan(2560, 2160, &TileGeometry::full()).unwrap();
    assert_eq!(plan.inputs.len(), 2288);
    assert_eq!((plan.canvas_width, plan.canvas_height), (12800, 10800));
    assert!(plan.outputs.iter().all(|r| r.w == 320 && r.h == 320));
    let stitch = StitchPlan::new(plan.canvas_width, plan.canvas_height, &plan.outputs).unwrap();
    stitch.verify(1e-9).unwrap();
}

#[test]
fn split_extract_stitch_round_trip() {
    let geom = TileGeometry::desk();
    let (low_w, low_h) = (60, 52);
    let (w, h) = (low_w * geom.r, low_h * geom.r);
    let smooth: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (x * 0.013).sin() + (y * 0.021).cos() * 0.5
        })
        .collect();
    for image in [
        PhaseImage::filled(w, h, -0.4),
        PhaseImage::new(w, h, smooth).unwrap(),
    ] {
        let plan = inference_plan(low_w, low_h, &geom).unwrap();
        let patches: Vec<(PhaseImage, (usize, usize))> = plan
            .outputs
            .iter()
            .map(|r| (image.crop(r.x, r.y, r.w, r.h).unwrap(), (r.x, r.y)))
            .collect();
        let back = alpha_blend_stitch(&patches, w, h).unwrap();
        for (a, b) in back.values.iter().zip(&image.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
