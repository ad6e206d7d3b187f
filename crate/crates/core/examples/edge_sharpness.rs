//! Slanted-edge sharpness of bicubic and classic reconstructions: FWHM of
//! the line spread function and the resulting SR ratio, as a CSV table.

use burstsr::classic::{bicubic_upsample, classic_sr, ClassicParams};
use burstsr::imaging::{synthesize_burst, BurstConfig, Decimation};
use burstsr::quality::report::{fwhm_csv, FwhmRow};
use burstsr::quality::{lsf_analysis, sr_ratio, EdgeOrientation, EdgeRoi, Rect};
use burstsr::scene::edge_scene;

fn main() -> burstsr::Result<()> {
    let mut rows = Vec::new();
    for (band, sigma) in [0.8, 1.0, 1.2].into_iter().enumerate() {
        let hr = edge_scene(128, 5.0, 0.2, 0.8);
        let cfg = BurstConfig {
            frames: 24,
            psf: burstsr::Psf::gaussian_on_grid(sigma, 2)?,
            seed: band as u64,
            ..BurstConfig::default()
        };
        let burst = synthesize_burst(&hr, &cfg)?;
        let params = ClassicParams::for_system(2, sigma, Decimation::BlockAverage)?;
        let roi = EdgeRoi::new(Rect::new(12, 16, 40, 32), EdgeOrientation::Vertical);
        let native = lsf_analysis(burst.reference(), &roi)?.fwhm;
        let hr_roi = EdgeRoi::new(roi.rect.scaled(2), roi.orientation);
        let bic = lsf_analysis(&bicubic_upsample(burst.reference(), 2)?, &hr_roi)?.fwhm;
        let sr = lsf_analysis(&classic_sr(&burst, 2, &params)?, &hr_roi)?.fwhm;
        rows.push(FwhmRow {
            band: band + 1,
            fwhm_native: native,
            fwhm_bicubic: bic,
            fwhm_sr: sr,
            sr_ratio: sr_ratio(bic, sr)?,
        });
    }
    print!("{}", fwhm_csv(&rows));
    Ok(())
}
