//! Radially averaged power spectra of a classic reconstruction and of
//! bicubic upsampling, and the fraction of bins where the former has more power.

use burstsr::classic::{bicubic_upsample, classic_sr, ClassicParams};
use burstsr::imaging::{synthesize_burst, BurstConfig, Decimation};
use burstsr::quality::{gain_fraction, power_spectrum, spectrum_gain};
use burstsr::scene::procedural_scene;

fn main() -> burstsr::Result<()> {
    let hr = procedural_scene(256, 5);
    let burst = synthesize_burst(
        &hr,
        &BurstConfig {
            frames: 16,
            seed: 5,
            ..BurstConfig::default()
        },
    )?;
    let sr = classic_sr(
        &burst,
        2,
        &ClassicParams::for_system(2, 0.5, Decimation::BlockAverage)?,
    )?;
    let bic = bicubic_upsample(burst.reference(), 2)?;

    let spec = power_spectrum(&sr)?;
    let gain = spectrum_gain(&sr, &bic)?;
    for i in (0..spec.freqs.len()).step_by(8) {
        println!(
            "f {:.3} cy/px  power {:.3e}  gain {:.2}",
            spec.freqs[i], spec.power[i], gain[i]
        );
    }
    println!(
        "gain > 1 in {:.0}% of bins above 0.1 cy/px",
        100.0 * gain_fraction(&sr, &bic, 0.1)?
    );
    Ok(())
}
