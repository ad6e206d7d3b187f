//! Image quality measures: edge sharpness, radial power spectra,
//! natural-scene statistics and radiometric comparisons.

mod edge;
mod nss;
pub mod report;
mod spectrum;
mod stats;

pub use edge::{
    esf_from_edge, fwhm, lsf_analysis, round_ratio, sr_ratio, EdgeOrientation, EdgeRoi, Esf,
    LsfResult, ESF_BIN,
};
pub use nss::{
    aggd_fit, mscn, nss_features, quality_score, AggdParams, NssModel, NSS_FEATURES, NSS_PATCH,
};
pub use spectrum::{gain_fraction, power_spectrum, spectrum_gain, RadialSpectrum, SPECTRUM_BINS};
pub use stats::{
    band_means, ndvi, pearson_corr, spectral_match, stats_compare, transect, StatsComparison,
};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, height: usize, width: usize) -> Self {
        Rect {
            y0,
            x0,
            height,
            width,
        }
    }

    pub fn full(image: &Raster) -> Self {
        Rect::new(0, 0, image.height(), image.width())
    }

    pub fn scaled(&self, s: usize) -> Self {
        Rect::new(self.y0 * s, self.x0 * s, self.height * s, self.width * s)
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub(crate) fn check_inside(&self, image: &Raster) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("empty region"));
        }
        if self.y0 + self.height > image.height() || self.x0 + self.width > image.width() {
            return Err(Error::invalid(format!("region {self:?} exceeds the image")));
        }
        Ok(())
    }
}
