use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use ssct_core::calibration::{
    deconvolve_rows, estimate_blur_sigma, estimate_gain, estimate_gain_corrected, estimate_noise_std,
    CalibrationInput,
};
use ssct_core::simulation::{
    gaussian_kernel, sample_bg_noise, simulate_dark, simulate_from_line_integrals,
    BlurredGaussianNoiseModel, NoiseMode, PhysicsParams,
};

const FRAMES: usize = 1024;
const WIDTH: usize = 96;

fn blurred_params() -> PhysicsParams {
    PhysicsParams {
        blur: true,
        ..Default::default()
    }
}

fn flats(params: &PhysicsParams, frames: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = Array2::zeros((1, WIDTH));
    (0..frames)
        .map(|_| simulate_from_line_integrals(&zero, params, NoiseMode::Noisy, &mut rng).unwrap())
        .collect()
}

fn darks(params: &PhysicsParams, frames: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| simulate_dark((1, WIDTH), params, &mut rng).unwrap())
        .collect()
}

fn scaled_poisson(gamma: f64, mean: f64, shape: (usize, usize), frames: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Poisson::new(mean / gamma).unwrap();
    (0..frames)
        .map(|_| Array2::from_shape_fn(shape, |_| gamma * dist.sample(&mut rng)))
        .collect()
}

#[test]
fn blur_width_is_recovered_from_flats() {
    let input = CalibrationInput::new(flats(&blurred_params(), FRAMES, 1)).unwrap();
    let sigma = estimate_blur_sigma(&input).unwrap();
    assert!((sigma - 0.8).abs() <= 0.1, "sigma {sigma}");
}

#[test]
fn unblurred_flats_show_no_blur() {
    let input = CalibrationInput::new(flats(&PhysicsParams::default(), FRAMES, 2)).unwrap();
    assert!(estimate_blur_sigma(&input).unwrap() < 0.1);
}

#[test]
fn blur_estimate_is_scale_invariant() {
    let frames = flats(&blurred_params(), 256, 3);
    let a = estimate_blur_sigma(&CalibrationInput::new(frames.clone()).unwrap()).unwrap();
    let scaled = frames.into_iter().map(|f| f * 3.7).collect();
    let b = estimate_blur_sigma(&CalibrationInput::new(scaled).unwrap()).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn gain_of_pure_poisson_counts() {
    let input = CalibrationInput::new(scaled_poisson(1.0, 400.0, (100, 100), 300, 4)).unwrap();
    let g = estimate_gain(&input).unwrap();
    assert!((0.95..=1.05).contains(&g), "gain {g}");
}

#[test]
fn gain_of_scaled_poisson_counts() {
    let input = CalibrationInput::new(scaled_poisson(2.0, 500.0, (8, WIDTH), FRAMES, 5)).unwrap();
    let g = estimate_gain(&input).unwrap();
    assert!((g - 2.0).abs() <= 0.05 * 2.0, "gain {g}");
}

#[test]
fn gain_of_gaussian_noise_is_variance_over_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dist = Normal::new(200.0, 5.0).unwrap();
    let frames = (0..FRAMES)
        .map(|_| Array2::from_shape_fn((4, 32), |_| dist.sample(&mut rng)))
        .collect();
    let g = estimate_gain(&CalibrationInput::new(frames).unwrap()).unwrap();
    assert!((g - 25.0 / 200.0).abs() < 0.05 * 0.125, "gain {g}");
}

#[test]
fn gain_rejects_nonpositive_means() {
    let frames = vec![Array2::from_elem((1, 4), -1.0), Array2::from_elem((1, 4), 1.0)];
    assert!(estimate_gain(&CalibrationInput::new(frames).unwrap()).is_err());
}

fn blurred_white(std: f64, kernel: &[f64], frames: usize, seed: u64) -> Vec<Array2<f64>> {
    let energy: f64 = kernel.iter().map(|v| v * v).sum();
    let model = BlurredGaussianNoiseModel::new(std * energy.sqrt(), kernel.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| sample_bg_noise(&model, (1, WIDTH), &mut rng) + 3.0)
        .collect()
}

#[test]
fn noise_std_after_deconvolution_with_the_true_kernel() {
    let kernel = gaussian_kernel(0.8);
    let input = CalibrationInput::new(blurred_white(1.0, &kernel, FRAMES, 7)).unwrap();
    let s = estimate_noise_std(&input, &kernel).unwrap();
    assert!((s - 1.0).abs() < 0.05, "std {s}");
}

#[test]
fn noise_std_after_deconvolution_with_the_estimated_kernel() {
    let kernel = gaussian_kernel(0.8);
    let input = CalibrationInput::new(blurred_white(0.02, &kernel, FRAMES, 8)).unwrap();
    let sigma = estimate_blur_sigma(&input).unwrap();
    let s = estimate_noise_std(&input, &gaussian_kernel(sigma)).unwrap();
    assert!((s - 0.02).abs() < 0.1 * 0.02, "std {s} (blur {sigma})");
}

#[test]
fn deconvolution_inverts_a_circular_blur() {
    let kernel = gaussian_kernel(0.6);
    let x = Array2::from_shape_fn((2, 32), |(i, j)| ((i * 32 + j) as f64 * 0.37).sin());
    // Circular blur, to match the deconvolution's boundary model.
    let r = kernel.len() / 2;
    let y = Array2::from_shape_fn(x.dim(), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, w)| w * x[[i, (j + 32 + k - r) % 32]])
            .sum::<f64>()
    });
    let back = deconvolve_rows(&y, &kernel).unwrap();
    let err = (&back - &x).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    assert!(err < 0.05, "max error {err}");
}

#[test]
fn end_to_end_recovery_of_blur_read_noise_and_gain() {
    let params = blurred_params();
    let flats = CalibrationInput::new(flats(&params, FRAMES, 9)).unwrap();
    let darks = CalibrationInput::new(darks(&params, FRAMES, 10)).unwrap();
    let sigma = estimate_blur_sigma(&flats).unwrap();
    let kernel = gaussian_kernel(sigma);
    let gain = estimate_gain_corrected(&flats, &darks, &kernel).unwrap();
    // Read noise is added after the blur, so darks need no deconvolution.
    let v = estimate_noise_std(&darks, &[1.0]).unwrap().powi(2);
    assert!((sigma - 0.8).abs() < 0.15 * 0.8, "blur {sigma}");
    assert!((v - 50.0).abs() < 0.15 * 50.0, "read variance {v}");
    assert!((gain - 1.0).abs() < 0.15, "gain {gain}");
}

#[test]
fn two_frames_run_with_a_wide_tolerance() {
    let kernel = gaussian_kernel(0.8);
    let frames = blurred_white(1.0, &kernel, 2, 11);
    let s = estimate_noise_std(&CalibrationInput::new(frames).unwrap(), &kernel).unwrap();
    // The mean of a 1-degree-of-freedom sample std is 0.80σ; ±35% band.
    assert!((0.5..1.1).contains(&s), "std {s}");
}
