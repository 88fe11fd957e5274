use std::f64::consts::PI;
use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssct_core::tomo::{restrict, FbpOperator, FilterWindow, Geometry, ProjectionSubset, Projector};
use ssct_core::{Image, Sinogram};
use ssct_nnkit::{LinearOp, Tensor};

fn desk_geometry(n: usize, angles: usize) -> Geometry {
    let n_det = (n as f64 * 1.5).ceil() as usize;
    let spacing = n as f64 * 2f64.sqrt() / n_det as f64;
    Geometry::parallel(angles, PI, n_det, spacing, n, n, 2.0 / n as f64).unwrap()
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_shape_fn((n, n), |_| rng.random::<f64>())
}

fn random_sino(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Sinogram {
    Sinogram::from_shape_fn(shape, |_| rng.random::<f64>())
}

fn disk(n: usize, radius_px: f64) -> Image {
    let c = (n as f64 - 1.0) / 2.0;
    Image::from_shape_fn((n, n), |(r, col)| {
        let (dy, dx) = (r as f64 - c, col as f64 - c);
        if dy * dy + dx * dx <= radius_px * radius_px {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn adjoint_identity_64_by_64_with_128_angles() {
    let geom = desk_geometry(64, 128);
    let proj = Projector::new(geom.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = random_image(64, &mut rng);
        let y = random_sino(geom.sino_shape(), &mut rng);
        let lhs = (&proj.project(&x).unwrap() * &y).sum();
        let rhs = (&x * &proj.backproject(&y).unwrap()).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    assert!(worst < 1e-4, "relative error {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn fbp_adjoint_identity() {
    let geom = desk_geometry(16, 12);
    let op = FbpOperator::new(geom.clone(), FilterWindow::Hann);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = random_sino(geom.sino_shape(), &mut rng);
    let x = random_image(16, &mut rng);
    let lhs = (&op.fbp(&y).unwrap() * &x).sum();
    let rhs = (&y * &op.fbp_adjoint(&x).unwrap()).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn linear_op_trait_matches_methods() {
    let geom = desk_geometry(16, 8);
    let proj = Projector::new(geom.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(16, &mut rng);
    let t = Tensor::from_array2(&x);
    let a = proj.apply(&t);
    let b = proj.project(&x).unwrap();
    assert_eq!(a.data(), b.as_slice().unwrap());
}

#[test]
fn disk_chord_length() {
    // A centred disk of radius ρ (physical units) has central chord 2ρ.
    let n = 64;
    let geom = desk_geometry(n, 4);
    let radius_px = 20.0;
    let sino = Projector::new(geom.clone()).project(&disk(n, radius_px)).unwrap();
    let centre = sino.row(0).iter().cloned().fold(f64::MIN, f64::max);
    let expected = 2.0 * radius_px * geom.pixel_size();
    assert!((centre - expected).abs() / expected < 0.03, "{centre} vs {expected}");
}

#[test]
fn fbp_recovers_uniform_disk_interior() {
    let n = 64;
    let geom = desk_geometry(n, 128);
    let x = disk(n, 24.0);
    let sino = Projector::new(geom.clone()).project(&x).unwrap();
    let rec = FbpOperator::new(geom, FilterWindow::None).fbp(&sino).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let mut acc = 0.0;
    let mut count = 0;
    for ((r, col), v) in rec.indexed_iter() {
        if (r as f64 - c).hypot(col as f64 - c) < 16.0 {
            acc += v;
            count += 1;
        }
    }
    let mean = acc / count as f64;
    assert!((mean - 1.0).abs() < 0.05, "interior mean {mean}");
}

#[test]
fn fbp_of_a_quarter_of_the_angles_is_consistent() {
    let n = 64;
    let geom = desk_geometry(n, 128);
    let x = disk(n, 24.0);
    let sino = Projector::new(geom.clone()).project(&x).unwrap();
    let subset = ProjectionSubset::interleaved(128, 4, 1);
    let sub_geom = restrict(&geom, &subset).unwrap();
    let rec = FbpOperator::new(sub_geom, FilterWindow::None)
        .fbp(&subset.select_rows(&sino))
        .unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let inner: Vec<f64> = rec
        .indexed_iter()
        .filter(|((r, col), _)| (*r as f64 - c).hypot(*col as f64 - c) < 16.0)
        .map(|(_, v)| *v)
        .collect();
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "interior mean {mean}");
}

#[test]
fn fbp_is_linear_in_the_sinogram() {
    let geom = desk_geometry(16, 10);
    let op = FbpOperator::new(geom.clone(), FilterWindow::Hann);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_sino(geom.sino_shape(), &mut rng);
    let b = random_sino(geom.sino_shape(), &mut rng);
    let lhs = op.fbp(&(&a * 2.0 + &b)).unwrap();
    let rhs = op.fbp(&a).unwrap() * 2.0 + op.fbp(&b).unwrap();
    for (u, v) in lhs.iter().zip(rhs.iter()) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn projection_is_deterministic() {
    let geom = desk_geometry(32, 40);
    let proj = Projector::new(geom.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_image(32, &mut rng);
    let y = random_sino(geom.sino_shape(), &mut rng);
    assert_eq!(proj.project(&x).unwrap(), proj.project(&x).unwrap());
    assert_eq!(proj.backproject(&y).unwrap(), proj.backproject(&y).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projector_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let geom = desk_geometry(12, 7);
        let proj = Projector::new(geom);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(12, &mut rng);
        let y = random_image(12, &mut rng);
        let lhs = proj.project(&(&x * alpha + &y * beta)).unwrap();
        let rhs = proj.project(&x).unwrap() * alpha + proj.project(&y).unwrap() * beta;
        for (u, v) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_holds_for_arbitrary_geometry(
        seed in any::<u64>(),
        n_angles in 1usize..12,
        n_det in 4usize..24,
        spacing in 0.3f64..2.0,
    ) {
        let geom = Geometry::parallel(n_angles, PI, n_det, spacing, 10, 10, 0.2).unwrap();
        let proj = Projector::new(geom.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(10, &mut rng);
        let y = random_sino(geom.sino_shape(), &mut rng);
        let lhs = (&proj.project(&x).unwrap() * &y).sum();
        let rhs = (&x * &proj.backproject(&y).unwrap()).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
