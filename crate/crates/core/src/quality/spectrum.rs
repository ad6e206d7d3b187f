//! Radially averaged power spectrum.

use crate::error::{Error, Result};
use crate::fft::{bin_freq, fft2d, hann, C64};
use crate::raster::Raster;

pub const SPECTRUM_BINS: usize = 64;

/// Mean power per radial frequency annulus over [0, 0.5] cycles/pixel.
///
/// The mean-removed image is Hann-windowed before the transform and scaled
/// by `1 / (H·W·Σw²)`; the squared mean is added back at DC. Summing
/// `power[i]·counts[i]` plus `corner_power` therefore gives the
/// window-weighted mean square of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    /// Bin centers, cycles/pixel.
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// Standard deviation of the samples within each bin.
    pub spread: Vec<f64>,
    /// Power at radial frequencies above 0.5 (the corners of the 2-D plane).
    pub corner_power: f64,
}

impl RadialSpectrum {
    pub fn bin_width(&self) -> f64 {
        0.5 / self.freqs.len() as f64
    }

    pub fn total_power(&self) -> f64 {
        self.power
            .iter()
            .zip(&self.counts)
            .map(|(p, &c)| p * c as f64)
            .sum::<f64>()
            + self.corner_power
    }
}

pub fn power_spectrum(image: &Raster) -> Result<RadialSpectrum> {
    let (h, w) = (image.height(), image.width());
    if h < 2 || w < 2 {
        return Err(Error::invalid("image too small for a spectrum"));
    }
    let luma = image.channel_mean();
    let mean = luma.mean();
    let (wy, wx) = (hann(h), hann(w));
    let mut buf: Vec<C64> = (0..h * w)
        .map(|i| C64::new((luma.data()[i] - mean) * wy[i / w] * wx[i % w], 0.0))
        .collect();
    let wsum: f64 = wy.iter().map(|v| v * v).sum::<f64>() * wx.iter().map(|v| v * v).sum::<f64>();
    fft2d(&mut buf, h, w, false);
    let norm = 1.0 / (h as f64 * w as f64 * wsum);

    let nb = SPECTRUM_BINS;
    let step = 0.5 / nb as f64;
    let mut sum = vec![0.0; nb];
    let mut sum2 = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let mut corner = 0.0;
    for (i, c) in buf.iter().enumerate() {
        let (fy, fx) = (bin_freq(i / w, h), bin_freq(i % w, w));
        let mut p = c.norm_sqr() * norm;
        if i == 0 {
            p += mean * mean;
        }
        let r = (fx * fx + fy * fy).sqrt();
        let k = (r / step).floor() as usize;
        if k < nb {
            sum[k] += p;
            sum2[k] += p * p;
            counts[k] += 1;
        } else if r <= 0.5 + 1e-12 {
            // exactly 0.5 (Nyquist on an axis) belongs to the last bin
            sum[nb - 1] += p;
            sum2[nb - 1] += p * p;
            counts[nb - 1] += 1;
        } else {
            corner += p;
        }
    }
    let power: Vec<f64> = (0..nb)
        .map(|k| {
            if counts[k] > 0 {
                sum[k] / counts[k] as f64
            } else {
                0.0
            }
        })
        .collect();
    let spread = (0..nb)
        .map(|k| {
            if counts[k] > 1 {
                let n = counts[k] as f64;
                ((sum2[k] - n * power[k] * power[k]) / (n - 1.0))
                    .max(0.0)
                    .sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(RadialSpectrum {
        freqs: (0..nb).map(|k| (k as f64 + 0.5) * step).collect(),
        power,
        counts,
        spread,
        corner_power: corner,
    })
}

/// Per-bin power ratio `sr / baseline`. Bins empty in both give 1.
pub fn spectrum_gain(sr: &Raster, baseline: &Raster) -> Result<Vec<f64>> {
    if sr.height() != baseline.height() || sr.width() != baseline.width() {
        return Err(Error::invalid("images differ in size"));
    }
    let a = power_spectrum(sr)?;
    let b = power_spectrum(baseline)?;
    Ok(a.power
        .iter()
        .zip(&b.power)
        .map(|(&p, &q)| {
            if p == q {
                1.0
            } else if q > 0.0 {
                p / q
            } else {
                f64::INFINITY
            }
        })
        .collect())
}

/// Share of populated bins with center above `min_freq` whose gain
/// exceeds 1.
pub fn gain_fraction(sr: &Raster, baseline: &Raster, min_freq: f64) -> Result<f64> {
    let gain = spectrum_gain(sr, baseline)?;
    let spec = power_spectrum(baseline)?;
    let sel: Vec<f64> = gain
        .iter()
        .zip(spec.freqs.iter().zip(&spec.counts))
        .filter(|(_, (&f, &c))| f > min_freq && c > 0)
        .map(|(&g, _)| g)
        .collect();
    if sel.is_empty() {
        return Err(Error::invalid(
            "no populated bins above the frequency floor",
        ));
    }
    Ok(sel.iter().filter(|&&g| g > 1.0).count() as f64 / sel.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_is_pure_dc() {
        let s = power_spectrum(&Raster::filled(64, 64, 1, 2.0)).unwrap();
        assert!((s.power[0] - 4.0).abs() < 1e-12);
        assert!(s.power[1..].iter().all(|&p| p < 1e-20));
        assert_eq!(s.counts[0], 1);
    }

    #[test]
    fn sinusoid_peak_bin() {
        let img = Raster::from_fn(64, 64, 1, |_, x, _| {
            1.0 + (2.0 * std::f64::consts::PI * 0.25 * x as f64).sin()
        });
        let s = power_spectrum(&img).unwrap();
        let best = (1..SPECTRUM_BINS)
            .max_by(|&a, &b| s.power[a].total_cmp(&s.power[b]))
            .unwrap();
        let k = (0.25 / s.bin_width()).floor() as usize;
        assert_eq!(best, k);
    }

    #[test]
    fn energy_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.3).unwrap();
        let img = Raster::from_fn(48, 40, 1, |_, _, _| 1.0 + n.sample(&mut rng));
        let s = power_spectrum(&img).unwrap();
        let (wy, wx) = (hann(48), hann(40));
        let m = img.mean();
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..48 {
            for x in 0..40 {
                let w2 = (wy[y] * wx[x]).powi(2);
                num += w2 * (img.get(y, x, 0) - m).powi(2);
                den += w2;
            }
        }
        assert!((s.total_power() - (num / den + m * m)).abs() < 1e-9);
    }

    #[test]
    fn gain_of_identical_images() {
        let img = Raster::from_fn(32, 32, 1, |y, x, _| ((x * 7 + y * 3) % 11) as f64);
        assert!(spectrum_gain(&img, &img).unwrap().iter().all(|&g| g == 1.0));
        assert!(spectrum_gain(&img, &Raster::zeros(16, 32, 1)).is_err());
    }
}
