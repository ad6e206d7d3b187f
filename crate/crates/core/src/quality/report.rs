//! CSV and JSON report writers. Numbers are printed with fixed precision so
//! identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::quality::RadialSpectrum;
use crate::raster::write_atomic;

pub const FWHM_HEADER: &str = "band,fwhm_native,fwhm_bicubic,fwhm_sr,sr_ratio";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FwhmRow {
    pub band: usize,
    pub fwhm_native: f64,
    pub fwhm_bicubic: f64,
    pub fwhm_sr: f64,
    pub sr_ratio: f64,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".to_string()
    }
}

pub fn fwhm_csv(rows: &[FwhmRow]) -> String {
    let mut s = String::from(FWHM_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.band,
            num(r.fwhm_native),
            num(r.fwhm_bicubic),
            num(r.fwhm_sr),
            num(r.sr_ratio)
        );
    }
    s
}

/// Two-column profile.
pub fn profile_csv(x_name: &str, y_name: &str, xs: &[f64], ys: &[f64]) -> String {
    let mut s = format!("{x_name},{y_name}\n");
    for (x, y) in xs.iter().zip(ys) {
        let _ = writeln!(s, "{},{}", num(*x), num(*y));
    }
    s
}

pub fn spectrum_csv(spec: &RadialSpectrum) -> String {
    profile_csv("freq", "power", &spec.freqs, &spec.power)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fwhm_table_layout() {
        let csv = fwhm_csv(&[FwhmRow {
            band: 1,
            fwhm_native: 1.4,
            fwhm_bicubic: 3.0,
            fwhm_sr: 1.8,
            sr_ratio: 1.7,
        }]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("band,fwhm_native,fwhm_bicubic,fwhm_sr,sr_ratio")
        );
        assert_eq!(lines.next(), Some("1,1.400000,3.000000,1.800000,1.700000"));
    }
}
