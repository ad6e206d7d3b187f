//! Desk-scale training run: motion pretraining, then end-to-end training on
//! synthetic 8-frame bursts, then a comparison against bicubic upsampling.
//!
//! `cargo run --release --example train_network -- [epochs] [train] [val]`

use std::time::Instant;

use burstsr::classic::bicubic_upsample;
use burstsr::imaging::{synthesize_burst, BurstConfig, Psf};
use burstsr::net::{
    evaluate, forward, mean_epe, pretrain_motion, synthetic_dataset, train, translation_pairs,
    NetParams, PretrainConfig, TrainConfig,
};
use burstsr::quality::{gain_fraction, lsf_analysis, EdgeOrientation, EdgeRoi, Rect};
use burstsr::scene::{edge_scene, procedural_scene};

fn main() -> burstsr::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let epochs = args.first().copied().unwrap_or(30);
    let n_train = args.get(1).copied().unwrap_or(200);
    let n_val = args.get(2).copied().unwrap_or(50);
    let t0 = Instant::now();

    let train_set = synthetic_dataset(n_train, 64, 8, 2, 800.0, 1)?;
    let val_set = synthetic_dataset(n_val, 64, 8, 2, 800.0, 2)?;
    println!("data ready in {:.1}s", t0.elapsed().as_secs_f64());

    let mut params = NetParams::<f32>::new(1, 0)?;
    let history = pretrain_motion(&mut params, &PretrainConfig::default())?;
    let pairs = translation_pairs(32, 32, 1.0, 2, 99)?;
    println!(
        "motion pretraining: train EPE {:.3} -> {:.3}, held-out EPE {:.3} ({:.1}s)",
        history[0],
        history.last().unwrap(),
        mean_epe(&params, &pairs, 4)?,
        t0.elapsed().as_secs_f64()
    );

    let cfg = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let outcome = train(params, &train_set, &val_set, &cfg, |r| {
        println!(
            "epoch {:>2}  train {:.5}  val {:.5}  ({:.0}s)",
            r.epoch,
            r.train_loss.unwrap_or(f64::NAN),
            r.val_loss,
            t0.elapsed().as_secs_f64()
        );
    })?;
    let net = outcome.params;

    let l1 = evaluate(&net, &val_set, 2)?;
    let mut wins = 0;
    for (smp, l) in val_set.iter().zip(&l1) {
        let bic = bicubic_upsample(smp.burst.reference(), 2)?;
        if *l < burstsr::classic::l1_error(&bic, &smp.truth)? {
            wins += 1;
        }
    }
    let first = outcome.history[0].val_loss;
    println!(
        "best epoch {}  val L1 {:.5} (epoch 0: {:.5}, drop {:.1}%)  beats bicubic on {}/{}",
        outcome.best_epoch,
        outcome.best_val,
        first,
        100.0 * (1.0 - outcome.best_val / first),
        wins,
        val_set.len()
    );

    let cfg = BurstConfig {
        frames: 8,
        psf: Psf::gaussian_on_grid(0.5, 2)?,
        seed: 5,
        ..BurstConfig::default()
    };
    let edge = synthesize_burst(&edge_scene(128, 5.0, 0.2, 0.8), &cfg)?;
    let roi = EdgeRoi::new(Rect::new(24, 32, 80, 64), EdgeOrientation::Vertical);
    let f_sr = lsf_analysis(&forward(&edge, &net, 2)?, &roi)?.fwhm;
    let f_bic = lsf_analysis(&bicubic_upsample(edge.reference(), 2)?, &roi)?.fwhm;
    println!(
        "edge FWHM: bicubic {f_bic:.3}  net {f_sr:.3}  ratio {:.3}",
        f_bic / f_sr
    );

    let scene = synthesize_burst(
        &procedural_scene(256, 77),
        &BurstConfig {
            frames: 8,
            seed: 6,
            ..cfg
        },
    )?;
    let frac = gain_fraction(
        &forward(&scene, &net, 2)?,
        &bicubic_upsample(scene.reference(), 2)?,
        0.1,
    )?;
    println!(
        "spectral gain > 1 in {:.0}% of bins above 0.1 cy/px",
        100.0 * frac
    );
    println!("total {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    Ok(())
}
