//! Radiometric comparisons: ROI band means, correlation, NDVI, transects
//! and masked summary statistics.

use crate::error::{Error, Result};
use crate::imaging::{sample_bilinear, Boundary};
use crate::quality::Rect;
use crate::raster::Raster;

pub fn band_means(image: &Raster, roi: &Rect) -> Result<Vec<f64>> {
    roi.check_inside(image)?;
    let n = (roi.height * roi.width) as f64;
    Ok((0..image.channels())
        .map(|c| {
            let mut s = 0.0;
            for y in roi.y0..roi.y0 + roi.height {
                for x in roi.x0..roi.x0 + roi.width {
                    s += image.get(y, x, c);
                }
            }
            s / n
        })
        .collect())
}

/// Largest relative deviation of ROI band means, `|after − before| / |before|`.
/// ROIs are given on the `before` grid and scaled onto `after`.
pub fn spectral_match(before: &Raster, after: &Raster, rois: &[Rect]) -> Result<f64> {
    if rois.is_empty() {
        return Err(Error::invalid("no regions given"));
    }
    if before.channels() != after.channels() {
        return Err(Error::invalid("band counts differ"));
    }
    let s = after.height() / before.height().max(1);
    if s == 0 || after.height() != s * before.height() || after.width() != s * before.width() {
        return Err(Error::invalid(
            "after grid is not an integer multiple of before",
        ));
    }
    let mut worst: f64 = 0.0;
    for roi in rois {
        let a = band_means(before, roi)?;
        let b = band_means(after, &roi.scaled(s))?;
        for (x, y) in a.iter().zip(&b) {
            let d = if x == y {
                0.0
            } else if *x == 0.0 {
                f64::INFINITY
            } else {
                (y - x).abs() / x.abs()
            };
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "need two equal-length samples of at least 2",
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `(nir − red) / (nir + red)`, 0 where the sum vanishes.
pub fn ndvi(red: &Raster, nir: &Raster) -> Result<Raster> {
    if !red.same_shape(nir) {
        return Err(Error::invalid("red and NIR differ in shape"));
    }
    let data = red
        .data()
        .iter()
        .zip(nir.data())
        .map(|(&r, &n)| if n + r == 0.0 { 0.0 } else { (n - r) / (n + r) })
        .collect();
    Raster::from_vec(red.height(), red.width(), red.channels(), data)
}

/// Bilinear samples at unit spacing from `from` toward `to`, both `(y, x)`.
pub fn transect(
    image: &Raster,
    channel: usize,
    from: (f64, f64),
    to: (f64, f64),
) -> Result<Vec<f64>> {
    if channel >= image.channels() {
        return Err(Error::invalid("channel out of range"));
    }
    let (dy, dx) = (to.0 - from.0, to.1 - from.1);
    let len = (dy * dy + dx * dx).sqrt();
    if !len.is_finite() {
        return Err(Error::invalid("non-finite transect"));
    }
    let n = len.floor() as usize + 1;
    let (uy, ux) = if len > 0.0 {
        (dy / len, dx / len)
    } else {
        (0.0, 0.0)
    };
    Ok((0..n)
        .map(|i| {
            let t = i as f64;
            sample_bilinear(
                image,
                from.0 + t * uy,
                from.1 + t * ux,
                channel,
                Boundary::Replicate,
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StatsComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    /// `|mean_a − mean_b| / mean_b`
    pub relative_mean_difference: f64,
}

/// Population statistics over the pixels (all channels) where `mask` is set.
pub fn stats_compare(a: &Raster, b: &Raster, mask: Option<&[bool]>) -> Result<StatsComparison> {
    if !a.same_shape(b) {
        return Err(Error::invalid("shape mismatch"));
    }
    let px = a.height() * a.width();
    if let Some(m) = mask {
        if m.len() != px {
            return Err(Error::invalid("mask size differs from the image"));
        }
    }
    let ch = a.channels();
    let keep = |i: usize| mask.is_none_or(|m| m[i / ch]);
    let pick = |r: &Raster| -> Vec<f64> {
        r.data()
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| v)
            .collect()
    };
    let (va, vb) = (pick(a), pick(b));
    if va.is_empty() {
        return Err(Error::invalid("mask selects no pixels"));
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (
            m,
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
        )
    };
    let (mean_a, std_a) = moments(&va);
    let (mean_b, std_b) = moments(&vb);
    let relative_mean_difference = if mean_a == mean_b {
        0.0
    } else {
        (mean_a - mean_b).abs() / mean_b.abs()
    };
    Ok(StatsComparison {
        mean_a,
        mean_b,
        std_a,
        std_b,
        relative_mean_difference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_extremes() {
        let a = [1.0, 2.0, 4.0, 3.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let aff: Vec<f64> = a.iter().map(|v| 3.0 * v + 2.0).collect();
        assert_eq!(pearson_corr(&a, &a).unwrap(), 1.0);
        assert_eq!(pearson_corr(&a, &neg).unwrap(), -1.0);
        assert!((pearson_corr(&a, &aff).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_corr(&a, &[1.0; 4]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn ndvi_values() {
        let r = Raster::filled(2, 2, 1, 0.05);
        let n = Raster::filled(2, 2, 1, 0.40);
        assert!((ndvi(&r, &n).unwrap().get(0, 0, 0) - 0.7778).abs() < 1e-4);
        assert!(ndvi(&r, &r).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Raster::zeros(2, 2, 1);
        assert_eq!(ndvi(&z, &z).unwrap().get(1, 1, 0), 0.0);
    }

    #[test]
    fn transect_of_constant() {
        let img = Raster::filled(10, 10, 1, 0.3);
        let t = transect(&img, 0, (1.0, 1.0), (8.0, 5.0)).unwrap();
        assert_eq!(t.len(), 9);
        assert!(t.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn band_scaled() {
        let before = Raster::from_fn(4, 4, 2, |_, _, c| 1.0 + c as f64);
        let after = Raster::from_fn(8, 8, 2, |_, _, c| if c == 1 { 2.0 * 1.1 } else { 1.0 });
        let d = spectral_match(&before, &after, &[Rect::new(0, 0, 2, 2)]).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert_eq!(
            spectral_match(&before, &before, &[Rect::new(0, 0, 4, 4)]).unwrap(),
            0.0
        );
        assert!(band_means(&before, &Rect::new(0, 0, 0, 2)).is_err());
    }

    #[test]
    fn summary_statistics() {
        let a = Raster::filled(3, 3, 1, 3.41);
        let b = Raster::filled(3, 3, 1, 3.32);
        let s = stats_compare(&a, &b, None).unwrap();
        assert!((s.relative_mean_difference - 0.0271).abs() < 1e-4);
        let c = Raster::filled(3, 3, 1, 2.0);
        let d = Raster::filled(3, 3, 1, 4.0);
        assert_eq!(
            stats_compare(&d, &c, None)
                .unwrap()
                .relative_mean_difference,
            1.0
        );
        assert!(stats_compare(&a, &b, Some(&[false; 9])).is_err());
    }
}
