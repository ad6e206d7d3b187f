use burstsr::imaging::{synthesize_burst, BurstConfig, MotionSpec, Psf};
use burstsr::net::layers::Conv2d;
use burstsr::net::{Autodiff, NetGrads, NetParams, DECODER, FEATURES, MOTION_HEAD};
use burstsr::raster::Raster;
use burstsr::spmc::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn burst_frames(n: usize, frames: usize, seed: u64) -> Vec<FeatureMap<f64>> {
    let hr = Raster::from_fn(2 * n, 2 * n, 1, |y, x, _| {
        0.5 + 0.2 * (0.9 * x as f64 + 0.3 * y as f64).sin() + 0.1 * (0.5 * y as f64).cos()
    });
    let cfg = BurstConfig {
        frames,
        scale: 2,
        psf: Psf::delta(),
        motion: MotionSpec::Random,
        snr: f64::INFINITY,
        seed,
        ..BurstConfig::default()
    };
    let b = synthesize_burst(&hr, &cfg).unwrap();
    b.frames.iter().map(FeatureMap::from_raster).collect()
}

/// All layers random, including the ones that start at zero, with a head
/// that produces flows of a fraction of a pixel.
fn dense_params(seed: u64) -> NetParams<f64> {
    let mut p = NetParams::<f64>::new(1, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    p.layers[DECODER[2]] = Conv2d::uniform(FEATURES, 1, 1, &mut rng);
    let mut head = Conv2d::uniform(16, 2, 1, &mut rng);
    head.weight.iter_mut().for_each(|w| *w *= 0.3);
    p.layers[MOTION_HEAD] = head;
    p
}

fn objective(p: &NetParams<f64>, frames: &[FeatureMap<f64>], probe: &[f64]) -> f64 {
    let out = Autodiff::new().forward(p, frames, 2, None).unwrap();
    out.data.iter().zip(probe).map(|(a, b)| a * b).sum()
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let frames = burst_frames(8, 2, 5);
    let p = dense_params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let probe: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ad = Autodiff::new();
    let out = ad.forward(&p, &frames, 2, None).unwrap();
    let g = FeatureMap::from_vec(out.height, out.width, 1, probe.clone()).unwrap();
    let grads: NetGrads<f64> = ad.backward(&p, &g, false).unwrap();

    let n = p.param_count();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.random_range(0..n);
        let mut plus = p.clone();
        plus.set(i, p.get(i) + h);
        let mut minus = p.clone();
        minus.set(i, p.get(i) - h);
        let numeric =
            (objective(&plus, &frames, &probe) - objective(&minus, &frames, &probe)) / (2.0 * h);
        let analytic = grads.get(i);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn frozen_motion_gets_no_gradient() {
    let frames = burst_frames(8, 3, 1);
    let p = dense_params(4);
    let mut ad = Autodiff::new();
    let out = ad.forward(&p, &frames, 2, None).unwrap();
    let g = FeatureMap::from_vec(out.height, out.width, 1, vec![1.0; out.data.len()]).unwrap();
    assert!(ad.backward(&p, &g, true).unwrap().motion_is_zero());
    assert!(!ad.backward(&p, &g, false).unwrap().motion_is_zero());
}
