use proptest::prelude::*;
use vitprobe::corrupt::{
    corrupt, corrupt_batch, corrupt_indexed, CorruptionKind, CorruptionSpec, NOISE_SIGMAS,
};
use vitprobe::data::{synth_generate, DatasetSpec};
use vitprobe::Tensor;

fn probe_set() -> Tensor<f32> {
    synth_generate(&DatasetSpec::synth("probe-set", 100, 17))
        .unwrap()
        .images()
        .clone()
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

fn channel_means(img: &Tensor<f32>) -> Vec<f64> {
    let plane = img.shape()[1] * img.shape()[2];
    img.data()
        .chunks_exact(plane)
        .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect()
}

fn moments(px: &[f32]) -> (f64, f64) {
    let n = px.len() as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard normal density and distribution function.
fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard deviation of `N(0, σ²)` clipped symmetrically at `±a·σ`.
fn clipped_normal_std(sigma: f64, a: f64) -> f64 {
    let tail = 1.0 - big_phi(a);
    let second = (1.0 - 2.0 * tail) - 2.0 * a * phi(a) + 2.0 * a * a * tail;
    sigma * second.sqrt()
}

#[test]
fn mse_grows_with_severity() {
    let images = probe_set();
    for kind in CorruptionKind::ALL {
        let errors: Vec<f64> = (1..=5)
            .map(|s| {
                let spec = CorruptionSpec::new(kind, s, 21).unwrap();
                mse(corrupt_batch(&images, &spec).unwrap().data(), images.data())
            })
            .collect();
        assert!(errors[0] > 0.0, "{kind}: {errors:?}");
        assert!(errors.windows(2).all(|w| w[0] <= w[1]), "{kind}: {errors:?}");
    }
}

#[test]
fn outputs_stay_in_range_and_reproduce() {
    let images = probe_set();
    for kind in CorruptionKind::ALL {
        for s in 1..=5 {
            let spec = CorruptionSpec::new(kind, s, 5).unwrap();
            let a = corrupt_batch(&images, &spec).unwrap();
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind} {s}");
            let b = corrupt_batch(&images, &spec).unwrap();
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{kind} {s}");
        }
    }
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::SpeckleNoise, CorruptionKind::Snow] {
        let a = corrupt_batch(&images, &CorruptionSpec::new(kind, 5, 5).unwrap()).unwrap();
        let b = corrupt_batch(&images, &CorruptionSpec::new(kind, 5, 6).unwrap()).unwrap();
        assert_ne!(a, b, "{kind}");
    }
}

#[test]
fn contrast_keeps_channel_means() {
    // Values stay well inside [0, 1] after scaling, so nothing clips.
    let img = Tensor::new(
        vec![3, 32, 32],
        (0..3 * 32 * 32)
            .map(|i| 0.35 + 0.3 * (((i * 7919) % 1009) as f32 / 1008.0))
            .collect(),
    )
    .unwrap();
    let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5, 0).unwrap();
    let out = corrupt(&img, &spec).unwrap();
    for (a, b) in channel_means(&img).iter().zip(channel_means(&out)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let gray = Tensor::full(&[3, 8, 8], 0.5f32);
    assert_eq!(corrupt(&gray, &spec).unwrap(), gray);
}

#[test]
fn noise_moments() {
    // Clipping puts the expected std 4.85% under σ, so the sample must be
    // large enough that estimator noise cannot push it past 5%.
    let img = Tensor::full(&[3, 600, 600], 0.5f32);
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 3).unwrap();
    let out = corrupt(&img, &spec).unwrap();
    let n = out.len() as f64;
    let (mean, std) = moments(out.data());
    let sigma = NOISE_SIGMAS[4] as f64;
    assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
    // Clipping at 0 and 1 cuts the tails at ±0.5/σ.
    let expected = clipped_normal_std(sigma, 0.5 / sigma);
    assert!((std - expected).abs() < 0.01 * expected, "std {std} vs {expected}");
    assert!((mean - 0.5).abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");

    let spec = CorruptionSpec::new(CorruptionKind::SpeckleNoise, 5, 3).unwrap();
    let (mean, std) = moments(corrupt(&img, &spec).unwrap().data());
    assert!((std - 0.5 * sigma).abs() < 0.05 * 0.5 * sigma, "speckle std {std}");
    assert!((mean - 0.5).abs() < 4.0 * sigma / n.sqrt(), "speckle mean {mean}");
}

#[test]
fn motion_blur_keeps_interior_ramps() {
    let (h, w) = (32, 32);
    let ramp = |c: usize| {
        move |i: usize| 0.2 + 0.01 * (i % w) as f32 + (0.004 + 0.001 * c as f32) * (i / w) as f32
    };
    let data: Vec<f32> = (0..3).flat_map(|c| (0..h * w).map(ramp(c))).collect();
    let img = Tensor::new(vec![3, h, w], data).unwrap();
    for seed in 0..10 {
        let spec = CorruptionSpec::new(CorruptionKind::MotionBlur, 5, seed).unwrap();
        let out = corrupt_indexed(&img, &spec, seed).unwrap();
        let plane = h * w;
        for c in 0..3 {
            let mut diff = 0.0f64;
            for y in 6..h - 6 {
                for x in 6..w - 6 {
                    let k = c * plane + y * w + x;
                    diff += out.data()[k] as f64 - img.data()[k] as f64;
                }
            }
            let mean_diff = diff / ((h - 12) * (w - 12)) as f64;
            assert!(mean_diff.abs() < 1e-6, "seed {seed} channel {c}: {mean_diff}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_image_stays_in_range(
        px in prop::collection::vec(0.0f32..=1.0, 3 * 8 * 8),
        kind in prop::sample::select(CorruptionKind::ALL.to_vec()),
        severity in 1u8..=5,
        seed in 0u64..1000,
    ) {
        let img = Tensor::new(vec![3, 8, 8], px).unwrap();
        let spec = CorruptionSpec::new(kind, severity, seed).unwrap();
        let out = corrupt(&img, &spec).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(out, corrupt(&img, &spec).unwrap());
    }
}
