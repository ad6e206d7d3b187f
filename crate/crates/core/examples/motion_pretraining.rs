//! Pretrain the flow estimator on synthetic translation pairs and check it
//! on a few held-out shifts.

use burstsr::net::{
    estimate_flow, mean_epe, pretrain_motion, translation_pair, translation_pairs, NetParams,
    PretrainConfig,
};

fn main() -> burstsr::Result<()> {
    let mut params = NetParams::<f32>::new(1, 0)?;
    let cfg = PretrainConfig::default();
    let history = pretrain_motion(&mut params, &cfg)?;
    println!(
        "{} steps: EPE {:.3} -> {:.3}",
        cfg.steps,
        history[0],
        history.last().expect("steps")
    );

    let held_out = translation_pairs(16, 32, 1.0, 2, 99)?;
    println!(
        "held-out EPE {:.3} px",
        mean_epe(&params, &held_out, cfg.crop)?
    );
    for shift in [(0.0, 0.0), (0.5, 0.25), (-0.75, 0.4)] {
        let pair = translation_pair(32, shift, 2, 1234)?;
        let flow = estimate_flow(&pair.frame, &pair.reference, &params)?;
        let [u, v] = flow.mean();
        println!(
            "shift ({:+.2}, {:+.2}) -> mean flow ({u:+.3}, {v:+.3})",
            shift.0, shift.1
        );
    }
    Ok(())
}
