use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use musical_core::indicator::{Family, IndicatorVariant, ThresholdMode};
use musical_core::metrics::{resolution, FineImage, LinesGeometry, RatioConfig};
use musical_core::psf::{sample_steering_vector, PsfModel, WindowGeometry};
use musical_core::reconstruct::{
    analyze_windows, cardinality_from_analysis, reconstruct, reconstruct_from_analysis,
    ReconstructionConfig, SingularValueTable,
};
use musical_core::simulate::{
    render_stack, DetectorSpec, Emitter, Photokinetics, Scene, SceneKind, SimulationConfig,
};
use musical_core::stack_io::{
    load_stack, read_image, write_image, write_stack, ImageStack, SampleFormat,
};

const PIXEL: f64 = 80.0;

/// Four blinking emitters in a 16 x 16 field, 120 frames.
fn small_stack(seed: u64) -> ImageStack {
    let emitters = vec![
        Emitter::new(600.0, 600.0, 0.0),
        Emitter::new(700.0, 640.0, 0.0),
        Emitter::new(560.0, 720.0, 100.0),
        Emitter::new(760.0, 760.0, 0.0),
    ];
    let scene = Scene::custom(emitters).unwrap();
    let pk = Photokinetics::from_duty_cycle(0.2, 10.0, 50.0).unwrap();
    let mut det = DetectorSpec::new(16, 16, PIXEL);
    det.frames = 120;
    let psf = PsfModel::gaussian(665.0, 1.42).unwrap();
    render_stack(&scene, &pk, &det, &psf, seed).unwrap().stack
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn hard_scheme_matches_a_direct_per_subpixel_reference() {
    let stack = small_stack(3);
    let variant = IndicatorVariant::new(Family::Musical, ThresholdMode::Manual { log10_sigma0: 2.3 });
    let cfg = ReconstructionConfig::for_stack(&stack, variant).unwrap();
    let recon = reconstruct(&stack, &cfg).unwrap();

    // Reference: SVD of every window, projector norms, (‖g_S‖/‖g_N‖)^α.
    let (side, s) = (cfg.window_side, cfg.subpixels);
    let half = side / 2;
    let sigma0 = 10f64.powf(2.3);
    let geom = WindowGeometry::new(side, PIXEL).unwrap();
    let frames = stack.frames();
    let mut worst = 0.0f64;
    for r in half..stack.height() - half {
        for c in half..stack.width() - half {
            let a = DMatrix::from_fn(side * side, stack.num_frames(), |k, t| {
                frames[[t, r - half + k / side, c - half + k % side]]
            });
            let svd = a.svd(true, false);
            let u = svd.u.unwrap();
            for ky in 0..s {
                for kx in 0..s {
                    let off = |k: usize| ((k as f64 + 0.5) / s as f64 - 0.5) * PIXEL;
                    let g = sample_steering_vector(&cfg.psf, (off(kx), off(ky), 0.0), &geom).unwrap();
                    let g = DVector::from_column_slice(&g.values);
                    let (mut gs, mut gn) = (0.0, 0.0);
                    for (i, &sv) in svd.singular_values.iter().enumerate() {
                        let p = u.column(i).dot(&g).powi(2);
                        if sv >= sigma0 {
                            gs += p;
                        } else {
                            gn += p;
                        }
                    }
                    let expected = (gs.sqrt() / gn.sqrt()).powf(cfg.indicator.alpha);
                    let got = recon.image[[r * s + ky, c * s + kx]];
                    worst = worst.max(rel(got, expected));
                }
            }
        }
    }
    assert!(worst < 1e-9, "worst relative error {worst:e}");
}

#[test]
fn soft_reconstructions_ignore_stack_scale() {
    let stack = small_stack(4);
    for v in [IndicatorVariant::MUSICAL_S, IndicatorVariant::EV_S] {
        let cfg = ReconstructionConfig::for_stack(&stack, v).unwrap();
        let base = reconstruct(&stack, &cfg).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = reconstruct(&stack.scaled(c).unwrap(), &cfg).unwrap();
            for (a, b) in base.image.iter().zip(scaled.image.iter()) {
                assert!(rel(*a, *b) < 1e-6, "{v} x{c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn output_is_independent_of_thread_count() {
    let stack = small_stack(5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            IndicatorVariant::ALL.map(|v| {
                let cfg = ReconstructionConfig::for_stack(&stack, v).unwrap();
                reconstruct(&stack, &cfg).unwrap().image
            })
        })
    };
    let one = run(1);
    let many = run(3);
    for (a, b) in one.iter().zip(&many) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn rule_b_cardinality_never_exceeds_rule_a() {
    let stack = small_stack(6);
    let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_A).unwrap();
    let analysis = analyze_windows(&stack, cfg.window_side).unwrap();
    let a = cardinality_from_analysis(&analysis, &cfg).unwrap();
    let b = cardinality_from_analysis(&analysis, &cfg.with_variant(IndicatorVariant::MUSICAL_B)).unwrap();
    assert!(a.counts.iter().zip(&b.counts).all(|(a, b)| b <= a));
    assert!(a.counts.iter().sum::<usize>() > b.counts.iter().sum::<usize>());
}

#[test]
fn singular_value_table_matches_direct_svd() {
    let stack = small_stack(7);
    let analysis = analyze_windows(&stack, 7).unwrap();
    let table = SingularValueTable::from_analysis(&analysis);
    let frames = stack.frames();
    for row in &table.rows {
        let a = DMatrix::from_fn(49, stack.num_frames(), |k, t| {
            frames[[t, row.row - 3 + k / 7, row.col - 3 + k % 7]]
        });
        let mut sv: Vec<f64> = a.singular_values().iter().copied().collect();
        sv.sort_by(|x, y| y.total_cmp(x));
        assert!(rel(row.sigma, sv[row.order - 1]) < 1e-9, "{row:?} vs {}", sv[row.order - 1]);
    }
}

#[test]
fn reconstruction_and_stack_survive_a_disk_round_trip() {
    let stack = small_stack(8);
    let dir = tempfile::tempdir().unwrap();
    let stack_path = dir.path().join("stack.tif");
    let format = SampleFormat::lossless_for(stack.frames().iter());
    assert_ne!(format, SampleFormat::F32);
    write_stack(&stack_path, &stack, format).unwrap();
    assert_eq!(load_stack(&stack_path, *stack.calibration()).unwrap(), stack);

    let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_S).unwrap();
    let recon = reconstruct(&stack, &cfg).unwrap();
    let image_path = dir.path().join("recon.tif");
    write_image(&image_path, &recon.image, SampleFormat::F32).unwrap();
    let back = read_image(&image_path).unwrap();
    for (a, b) in recon.image.iter().zip(back.iter()) {
        assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
    }
    let scaled = recon.to_u16(&recon.image);
    write_image(&image_path, &scaled, SampleFormat::U16).unwrap();
    assert_eq!(read_image(&image_path).unwrap(), scaled);
}

/// Regression baseline for identical flat frames with Poisson noise only.
const NOISE_ONLY_P99_OVER_P50: f64 = 2.322679963410348;

#[test]
fn noise_only_stack_has_no_structure() {
    let (h, w, t) = (24, 24, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Poisson::new(100.0).unwrap();
    let frames = Array3::from_shape_fn((t, h, w), |_| noise.sample(&mut rng));
    let cal = musical_core::Calibration::new(PIXEL, 665.0, 1.42).unwrap();
    let stack = ImageStack::new(frames, cal).unwrap();
    let cfg = ReconstructionConfig::for_stack(&stack, IndicatorVariant::MUSICAL_A).unwrap();
    let recon = reconstruct(&stack, &cfg).unwrap();
    let values = recon.processed_values();
    let ratio = percentile(values.clone(), 0.99) / percentile(values, 0.5);
    println!("noise-only p99/p50 = {ratio:.15}");
    assert!(ratio < 10.0, "{ratio}");
    assert!(rel(ratio, NOISE_ONLY_P99_OVER_P50) < 1e-6, "{ratio}");
}

#[test]
fn crossing_lines_resolve_below_the_diffraction_limit() {
    // A seed not used by the acceptance suite.
    let sim = SimulationConfig::standard(SceneKind::Lines, 7).run().unwrap();
    let cfg = ReconstructionConfig::for_stack(&sim.stack, IndicatorVariant::MUSICAL_B).unwrap();
    let analysis = analyze_windows(&sim.stack, cfg.window_side).unwrap();
    let recon = reconstruct_from_analysis(&analysis, &cfg).unwrap();
    let geom = LinesGeometry::try_from(&sim.scene.geometry).unwrap();
    let res = resolution(&FineImage::from_reconstruction(&recon), &geom, &RatioConfig::default());
    let sep = res.separation_nm().expect("lines resolved");
    assert!(sep < 285.0, "{sep}");
}
