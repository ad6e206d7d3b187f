use std::sync::OnceLock;

use burstsr::net::layers::Conv2d;
use burstsr::net::{
    estimate_flow, mean_epe, pretrain_motion, pretrain_motion_on, translation_pair,
    translation_pairs, NetParams, PretrainConfig, MOTION_HEAD,
};
use burstsr::{Error, FlowField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Pretrained {
    params: NetParams<f32>,
    history: Vec<f64>,
}

fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut params = NetParams::<f32>::new(1, 0).unwrap();
        let history = pretrain_motion(&mut params, &PretrainConfig::default()).unwrap();
        Pretrained { params, history }
    })
}

fn mean_magnitude(f: &FlowField, crop: usize) -> f64 {
    let (h, w) = (f.height(), f.width());
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let [u, v] = f.get(y, x);
            sum += (u * u + v * v).sqrt();
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn fresh_network_predicts_no_motion() {
    let p = NetParams::<f64>::new(1, 3).unwrap();
    let pair = translation_pair(24, (0.5, -0.5), 2, 1).unwrap();
    let flow = estimate_flow(&pair.frame, &pair.reference, &p).unwrap();
    assert!(flow.is_zero());
}

#[test]
fn identical_frames_give_near_zero_flow() {
    let p = &pretrained().params;
    for seed in 0..4 {
        let pair = translation_pair(32, (0.0, 0.0), 2, 500 + seed).unwrap();
        let flow = estimate_flow(&pair.reference, &pair.reference, p).unwrap();
        let m = mean_magnitude(&flow, 4);
        assert!(m < 0.1, "seed {seed}: mean |flow| {m}");
    }
}

#[test]
fn half_quarter_translation_is_recovered() {
    let p = &pretrained().params;
    let pair = translation_pair(32, (0.5, 0.25), 2, 900).unwrap();
    let epe = mean_epe(p, std::slice::from_ref(&pair), 4).unwrap();
    assert!(epe < 0.25, "EPE {epe}");
}

#[test]
fn held_out_pairs_meet_the_epe_bound() {
    let p = &pretrained().params;
    let val = translation_pairs(32, 32, 1.0, 2, 12345).unwrap();
    let epe = mean_epe(p, &val, 4).unwrap();
    assert!(epe < 0.25, "validation EPE {epe}");
}

#[test]
fn best_loss_so_far_improves() {
    let h = &pretrained().history;
    let early = h[..50].iter().cloned().fold(f64::INFINITY, f64::min);
    let late = h.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(late < early, "best {late} not below early best {early}");
    assert!(h.iter().all(|l| l.is_finite()));
}

#[test]
fn zero_shift_pairs_keep_flow_at_zero() {
    let mut p = NetParams::<f64>::new(1, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    p.layers[MOTION_HEAD] = Conv2d::uniform(16, 2, 1, &mut rng);
    let still: Vec<_> = (0..4)
        .map(|i| translation_pair(16, (0.0, 0.0), 2, 300 + i).unwrap())
        .collect();
    let before = p.clone();
    let history = pretrain_motion_on(&mut p, &still, 20, 1e-3, 2).unwrap();
    assert!(history.iter().all(|&e| e < 1e-5), "{history:?}");
    assert_eq!(p, before);
    for pair in &still {
        let flow = estimate_flow(&pair.frame, &pair.reference, &p).unwrap();
        assert!(flow.is_zero());
    }
    let shifted = translation_pair(16, (0.6, -0.6), 2, 77).unwrap();
    assert!(!estimate_flow(&shifted.frame, &shifted.reference, &p)
        .unwrap()
        .is_zero());
}

#[test]
fn empty_pair_set_is_rejected() {
    let mut p = NetParams::<f32>::new(1, 0).unwrap();
    let r = pretrain_motion_on(&mut p, &[], 10, 1e-3, 4);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn mismatched_shapes_are_rejected() {
    let p = NetParams::<f64>::new(1, 0).unwrap();
    let a = translation_pair(16, (0.0, 0.0), 2, 1).unwrap();
    let b = translation_pair(20, (0.0, 0.0), 2, 1).unwrap();
    assert!(estimate_flow(&a.frame, &b.reference, &p).is_err());
}
