//! The SPMC block on its own: a polyphase burst fuses back to the exact HR
//! image, and the backward pass gives gradients for features and flows.

use burstsr::imaging::{synthesize_burst, BurstConfig, Decimation, MotionSpec, Psf};
use burstsr::scene::procedural_scene;
use burstsr::spmc::{FeatureMap, FlowMap, SpmcBlock, SpmcOptions};

fn main() -> burstsr::Result<()> {
    let hr = procedural_scene(32, 2);
    let cfg = BurstConfig {
        frames: 4,
        psf: Psf::delta(),
        motion: MotionSpec::Translational(vec![(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]),
        snr: f64::INFINITY,
        decimation: Decimation::PointSample,
        ..BurstConfig::default()
    };
    let burst = synthesize_burst(&hr, &cfg)?;
    let feats: Vec<FeatureMap<f64>> = burst.frames.iter().map(FeatureMap::from_raster).collect();
    let flows: Vec<FlowMap<f64>> = burst
        .true_flows
        .as_ref()
        .expect("recorded")
        .iter()
        .map(FlowMap::from_field)
        .collect();

    let mut block = SpmcBlock::new(SpmcOptions::new(2));
    let fused = block.forward(feats, flows)?;
    println!(
        "coverage {:.0}%, max error vs HR {:.1e}",
        100.0 * fused.coverage(),
        fused.to_feature_map().to_raster().max_abs_diff(&hr)
    );

    // d(sum of outputs)/d(inputs)
    let ones = vec![1.0; fused.values.len()];
    let g = block.backward(&ones)?;
    let total: f64 = g.features.iter().flat_map(|f| &f.data).sum();
    let flow_norm: f64 = g
        .flows
        .iter()
        .flat_map(|f| f.u.iter().chain(&f.v))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    println!("feature gradient mass {total:.3}, flow gradient norm {flow_norm:.3e}");
    Ok(())
}
