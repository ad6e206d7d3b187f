//! Slanted-edge sharpness: supersampled edge spread, line spread and its
//! full width at half maximum.

use crate::error::{Error, Result};
use crate::quality::Rect;
use crate::raster::Raster;

/// Supersampling bin width in pixels.
pub const ESF_BIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EdgeOrientation {
    /// Edge line runs top to bottom; the profile is taken along x.
    Vertical,
    /// Edge line runs left to right; the profile is taken along y.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EdgeRoi {
    pub rect: Rect,
    pub orientation: EdgeOrientation,
}

impl EdgeRoi {
    pub fn new(rect: Rect, orientation: EdgeOrientation) -> Self {
        EdgeRoi { rect, orientation }
    }
}

/// Edge spread sampled at `start + i·bin` pixels from the fitted edge,
/// oriented dark to bright.
#[derive(Debug, Clone, PartialEq)]
pub struct Esf {
    pub bin: f64,
    pub start: f64,
    /// Mean value of the samples falling in each bin.
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    mean_offset: Vec<f64>,
    spread: Vec<f64>,
    /// Edge slant in degrees from the nominal axis.
    pub angle_deg: f64,
}

impl Esf {
    pub fn position(&self, i: usize) -> f64 {
        self.start + i as f64 * self.bin
    }

    /// Bin averages moved to the bin centers: a local quadratic accounts for
    /// where the samples actually sat inside each bin.
    pub fn centered(&self) -> Vec<f64> {
        let e = &self.values;
        let n = e.len();
        if n < 3 {
            return e.clone();
        }
        let b = self.bin;
        (0..n)
            .map(|i| {
                let (l, r) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let (l, r) = if i == 0 {
                    (0, 2)
                } else if i == n - 1 {
                    (n - 3, n - 1)
                } else {
                    (l, r)
                };
                let m = (l + r) / 2;
                let d1 = (e[r] - e[l]) / ((r - l) as f64 * b);
                let d2 = (e[r] - 2.0 * e[m] + e[l]) / (b * b);
                let delta = self.mean_offset[i];
                e[i] - d1 * delta - 0.5 * d2 * (self.spread[i] + delta * delta)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsfResult {
    pub esf: Esf,
    /// Derivative of the edge spread per pixel, at the ESF positions.
    pub lsf: Vec<f64>,
    /// Pixels of the measured image.
    pub fwhm: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| {
        (a + (x - mx).powi(2), b + (x - mx) * (y - my))
    });
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

/// Slanted-edge supersampling: the edge line is fitted through per-row
/// centroids of the gradient, every pixel is binned by its perpendicular
/// distance to that line and the bins are averaged.
pub fn esf_from_edge(image: &Raster, roi: &EdgeRoi) -> Result<Esf> {
    roi.rect.check_inside(image)?;
    let luma = image.channel_mean();
    let Rect {
        y0,
        x0,
        height,
        width,
    } = roi.rect;
    // rows run along the edge, cols across it
    let (rows, cols) = match roi.orientation {
        EdgeOrientation::Vertical => (height, width),
        EdgeOrientation::Horizontal => (width, height),
    };
    if cols < 4 || rows < 2 {
        return Err(Error::invalid("region too small for edge analysis"));
    }
    let at = |r: usize, c: usize| match roi.orientation {
        EdgeOrientation::Vertical => luma.get(y0 + r, x0 + c, 0),
        EdgeOrientation::Horizontal => luma.get(y0 + c, x0 + r, 0),
    };

    let diffs: Vec<Vec<f64>> = (0..rows)
        .map(|r| (0..cols - 1).map(|c| at(r, c + 1) - at(r, c)).collect())
        .collect();
    let contrast: f64 = diffs.iter().map(|d| d.iter().sum::<f64>()).sum::<f64>() / rows as f64;
    let mut all: Vec<f64> = diffs.iter().flatten().copied().collect();
    let med = median(&mut all);
    let mut dev: Vec<f64> = all.iter().map(|v| (v - med).abs()).collect();
    let noise = 1.4826 * median(&mut dev);
    let scale = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .fold(0.0f64, |m, (r, c)| m.max(at(r, c).abs()));
    if !(contrast.abs() > 1e-9 * scale.max(1e-300)) || contrast.abs() <= 5.0 * noise {
        return Err(Error::NoEdge);
    }
    let sign = contrast.signum();

    let centroids = |window: Option<(f64, f64, f64)>| -> Vec<(f64, f64)> {
        (0..rows)
            .filter_map(|r| {
                let (mut m0, mut m1) = (0.0, 0.0);
                for (c, &d) in diffs[r].iter().enumerate() {
                    let pos = c as f64 + 0.5;
                    if let Some((a, b, half)) = window {
                        if (pos - (a + b * r as f64)).abs() > half {
                            continue;
                        }
                    }
                    let g = (sign * d).max(0.0);
                    m0 += g;
                    m1 += g * pos;
                }
                (m0 > 0.0).then(|| (r as f64, m1 / m0))
            })
            .collect()
    };
    let (mut a, mut b) = fit_line(&centroids(None)).ok_or(Error::NoEdge)?;
    let half = (cols as f64 / 4.0).max(8.0);
    for _ in 0..2 {
        (a, b) = fit_line(&centroids(Some((a, b, half)))).ok_or(Error::NoEdge)?;
    }

    let norm = (1.0 + b * b).sqrt();
    let mut samples: Vec<(i64, f64, f64)> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let dist = sign * (c as f64 - (a + b * r as f64)) / norm;
            let k = (dist / ESF_BIN).round() as i64;
            samples.push((k, dist - k as f64 * ESF_BIN, at(r, c)));
        }
    }
    let kmin = samples.iter().map(|s| s.0).min().expect("nonempty");
    let kmax = samples.iter().map(|s| s.0).max().expect("nonempty");
    let n = (kmax - kmin + 1) as usize;
    let mut counts = vec![0usize; n];
    let mut sum = vec![0.0; n];
    let mut off = vec![0.0; n];
    let mut off2 = vec![0.0; n];
    for &(k, o, v) in &samples {
        let i = (k - kmin) as usize;
        counts[i] += 1;
        sum[i] += v;
        off[i] += o;
        off2[i] += o * o;
    }
    let mut values = vec![f64::NAN; n];
    let mut mean_offset = vec![0.0; n];
    let mut spread = vec![0.0; n];
    for i in 0..n {
        if counts[i] > 0 {
            let c = counts[i] as f64;
            values[i] = sum[i] / c;
            mean_offset[i] = off[i] / c;
            spread[i] = (off2[i] / c - mean_offset[i].powi(2)).max(0.0);
        }
    }
    // Empty interior bins: linear interpolation between filled neighbors.
    let filled: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
    for w in filled.windows(2) {
        let (l, r) = (w[0], w[1]);
        for i in l + 1..r {
            let t = (i - l) as f64 / (r - l) as f64;
            values[i] = values[l] * (1.0 - t) + values[r] * t;
            spread[i] = ESF_BIN * ESF_BIN / 12.0;
        }
    }
    Ok(Esf {
        bin: ESF_BIN,
        start: kmin as f64 * ESF_BIN,
        values,
        counts,
        mean_offset,
        spread,
        angle_deg: b.atan().to_degrees(),
    })
}

/// Edge spread, line spread (fourth-order central differences of the
/// centered ESF) and FWHM in pixels.
pub fn lsf_analysis(image: &Raster, roi: &EdgeRoi) -> Result<LsfResult> {
    let esf = esf_from_edge(image, roi)?;
    let e = esf.centered();
    let n = e.len();
    let h = esf.bin;
    let lsf: Vec<f64> = (0..n)
        .map(|i| {
            if i >= 3 && i + 3 < n {
                (e[i + 3] - 9.0 * e[i + 2] + 45.0 * e[i + 1] - 45.0 * e[i - 1] + 9.0 * e[i - 2]
                    - e[i - 3])
                    / (60.0 * h)
            } else if i >= 2 && i + 2 < n {
                (-e[i + 2] + 8.0 * e[i + 1] - 8.0 * e[i - 1] + e[i - 2]) / (12.0 * h)
            } else if i >= 1 && i + 1 < n {
                (e[i + 1] - e[i - 1]) / (2.0 * h)
            } else if i == 0 {
                (e[1] - e[0]) / h
            } else {
                (e[n - 1] - e[n - 2]) / h
            }
        })
        .collect();
    let width = fwhm(&lsf)? * h;
    Ok(LsfResult {
        esf,
        lsf,
        fwhm: width,
    })
}

/// Width in samples between the two half-maximum crossings of a single
/// peaked profile, by cubic interpolation. The maximum is refined with a
/// parabola through the highest sample and its neighbors.
pub fn fwhm(profile: &[f64]) -> Result<f64> {
    if profile.len() < 3 || profile.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "profile needs at least three finite samples",
        ));
    }
    let (peak, &top) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    if !(top > 0.0) {
        return Err(Error::AmbiguousPeak("no positive peak".into()));
    }
    // the true maximum generally falls between samples
    let top = if peak > 0 && peak + 1 < profile.len() {
        let (a, c) = (profile[peak - 1], profile[peak + 1]);
        let curv = a - 2.0 * top + c;
        if curv < 0.0 {
            top - (a - c).powi(2) / (8.0 * curv)
        } else {
            top
        }
    } else {
        top
    };
    let half = 0.5 * top;
    let left = (0..peak)
        .rev()
        .find(|&i| profile[i] <= half)
        .ok_or_else(|| {
            Error::AmbiguousPeak("profile does not fall to half maximum on the left".into())
        })?;
    let right = (peak + 1..profile.len())
        .find(|&i| profile[i] <= half)
        .ok_or_else(|| {
            Error::AmbiguousPeak("profile does not fall to half maximum on the right".into())
        })?;
    if profile[..left]
        .iter()
        .chain(&profile[right + 1..])
        .any(|&v| v > half)
    {
        return Err(Error::AmbiguousPeak(
            "a second lobe exceeds half maximum".into(),
        ));
    }
    let cross = |lo: usize, hi: usize| -> f64 {
        let (a, b) = (profile[lo], profile[hi]);
        let t = (half - a) / (b - a);
        if lo == 0 || hi + 1 >= profile.len() {
            return lo as f64 + t;
        }
        // cubic through four samples, refined by Newton from the linear guess
        let p = [profile[lo - 1], a, b, profile[hi + 1]];
        let f = |t: f64| {
            let (m, z, o, q) = (t + 1.0, t, t - 1.0, t - 2.0);
            -p[0] * z * o * q / 6.0 + p[1] * m * o * q / 2.0 - p[2] * m * z * q / 2.0
                + p[3] * m * z * o / 6.0
        };
        let mut x = t;
        for _ in 0..8 {
            let d = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6;
            if d == 0.0 {
                break;
            }
            x = (x - (f(x) - half) / d).clamp(0.0, 1.0);
        }
        lo as f64 + x
    };
    let xl = cross(left, left + 1);
    let xr = cross(right - 1, right);
    Ok(xr - xl)
}

/// Sharpening factor of a reconstruction against interpolation on the
/// same grid.
pub fn sr_ratio(fwhm_bicubic: f64, fwhm_sr: f64) -> Result<f64> {
    if !(fwhm_bicubic > 0.0 && fwhm_sr > 0.0) || !fwhm_bicubic.is_finite() || !fwhm_sr.is_finite() {
        return Err(Error::invalid("widths must be positive and finite"));
    }
    Ok(fwhm_bicubic / fwhm_sr)
}

/// One decimal, as reported.
pub fn round_ratio(r: f64) -> f64 {
    (r * 10.0).round() / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::slanted_edge;

    const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

    fn gauss_profile(sigma: f64, step: f64) -> Vec<f64> {
        let n = (8.0 * sigma / step) as i64;
        (-n..=n)
            .map(|i| (-(i as f64 * step).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect()
    }

    #[test]
    fn triangle_width() {
        assert_eq!(fwhm(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn gaussian_widths() {
        let w = fwhm(&gauss_profile(1.0, 0.01)).unwrap() * 0.01;
        assert!((w / FWHM_PER_SIGMA - 1.0).abs() < 0.01, "{w}");
        let w = fwhm(&gauss_profile(0.5944, 0.01)).unwrap() * 0.01;
        assert!((w / 1.4 - 1.0).abs() < 0.01, "{w}");
    }

    #[test]
    fn two_peaks_are_ambiguous() {
        let p = [0.0, 1.0, 0.2, 0.9, 0.0];
        assert!(matches!(fwhm(&p), Err(Error::AmbiguousPeak(_))));
        assert!(matches!(
            fwhm(&[0.0, 0.0, 0.0]),
            Err(Error::AmbiguousPeak(_))
        ));
    }

    #[test]
    fn ratios() {
        assert_eq!(round_ratio(sr_ratio(3.0, 1.8).unwrap()), 1.7);
        assert_eq!(round_ratio(sr_ratio(4.8, 2.6).unwrap()), 1.8);
        assert_eq!(sr_ratio(2.0, 2.0).unwrap(), 1.0);
        assert!(sr_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn constant_image_has_no_edge() {
        let img = Raster::filled(32, 32, 1, 0.4);
        let roi = EdgeRoi::new(Rect::full(&img), EdgeOrientation::Vertical);
        assert!(matches!(esf_from_edge(&img, &roi), Err(Error::NoEdge)));
    }

    #[test]
    fn ideal_step_within_one_bin() {
        let img = slanted_edge(64, 64, 5.0, 0.0, 1.0, 0.0);
        let roi = EdgeRoi::new(Rect::full(&img), EdgeOrientation::Vertical);
        let esf = esf_from_edge(&img, &roi).unwrap();
        let mixed = esf
            .values
            .iter()
            .filter(|&&v| v > 1e-9 && v < 1.0 - 1e-9)
            .count();
        assert!(mixed <= 1, "{mixed} {:?}", esf.values);
    }

    #[test]
    fn blurred_step_matches_cdf() {
        let img = slanted_edge(64, 64, 5.0, 0.2, 0.8, 1.0);
        let roi = EdgeRoi::new(Rect::full(&img), EdgeOrientation::Vertical);
        let esf = esf_from_edge(&img, &roi).unwrap();
        for (i, v) in esf.values.iter().enumerate() {
            let x = esf.position(i);
            let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
            assert!(((v - 0.2) / 0.6 - cdf).abs() < 0.02, "{x} {v}");
        }
    }

    #[test]
    fn horizontal_edges_and_polarity() {
        let v = slanted_edge(64, 64, 4.0, 0.9, 0.1, 1.0);
        let roi = EdgeRoi::new(Rect::full(&v), EdgeOrientation::Vertical);
        let a = lsf_analysis(&v, &roi).unwrap().fwhm;
        let mut t = Raster::zeros(64, 64, 1);
        for y in 0..64 {
            for x in 0..64 {
                t.set(x, y, 0, v.get(y, x, 0));
            }
        }
        let roi = EdgeRoi::new(Rect::full(&t), EdgeOrientation::Horizontal);
        let b = lsf_analysis(&t, &roi).unwrap().fwhm;
        assert!((a - b).abs() < 1e-12);
        assert!((a / FWHM_PER_SIGMA - 1.0).abs() < 0.01, "{a}");
    }
}
