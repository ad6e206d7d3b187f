//! Procedural HR scenes: textured single-band scenes, multiband land-cover
//! scenes with per-class spectral signatures, and slanted edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Separable Gaussian blur with replicated edges.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let (h, w, ch) = img.shape();
    let mut tmp = Raster::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += kj * img.get_clamped(y as isize, x as isize + j as isize - r, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Raster::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += kj * tmp.get_clamped(y as isize + j as isize - r, x as isize, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    Ok(out)
}

fn standardized(img: Raster) -> Raster {
    let n = img.data().len() as f64;
    let mean = img.mean();
    let var = img
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(1e-12);
    img.map(|v| (v - mean) / sd)
}

/// Zero-mean unit-variance multi-scale correlated noise.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut acc = Raster::zeros(size, size, 1);
    for sigma in [1.5, 3.0, 6.0] {
        let white = Raster::from_fn(size, size, 1, |_, _, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let layer = standardized(gaussian_blur(&white, sigma).expect("positive sigma"));
        let weight = rng.random_range(0.2..1.0);
        acc.data_mut()
            .iter_mut()
            .zip(layer.data())
            .for_each(|(a, l)| *a += weight * l);
    }
    standardized(acc)
}

/// Anti-aliased coverage of a random disk or rotated rectangle.
fn random_shape(size: usize, rng: &mut ChaCha8Rng) -> Raster {
    const SS: usize = 4;
    let n = size as f64;
    let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let inside: Box<dyn Fn(f64, f64) -> bool> = if rng.random::<f64>() < 0.5 {
        let r = rng.random_range(4.0..25.0) * n / 128.0;
        Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) < r * r)
    } else {
        let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let a = rng.random_range(4.0..30.0) * n / 128.0;
        let b = rng.random_range(4.0..30.0) * n / 128.0;
        let (c, s) = (th.cos(), th.sin());
        Box::new(move |x, y| {
            let u = (x - cx) * c + (y - cy) * s;
            let v = -(x - cx) * s + (y - cy) * c;
            u.abs() < a && v.abs() < b
        })
    };
    Raster::from_fn(size, size, 1, |y, x, _| {
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let px = x as f64 + sx as f64 / SS as f64;
                let py = y as f64 + sy as f64 / SS as f64;
                hits += inside(px, py) as usize;
            }
        }
        hits as f64 / (SS * SS) as f64
    })
}

/// Single-band textured scene with a handful of sharp-edged objects,
/// values in [0.02, 0.98].
pub fn procedural_scene(size: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = texture(size, &mut rng).map(|v| 0.5 + 0.12 * v);
    let count = rng.random_range(3..9);
    for _ in 0..count {
        let amp = rng.random_range(-0.3..0.3);
        let shape = random_shape(size, &mut rng);
        img.data_mut()
            .iter_mut()
            .zip(shape.data())
            .for_each(|(v, m)| *v += amp * m);
    }
    img.map(|v| v.clamp(0.02, 0.98))
}

/// `n` scenes with seeds derived from `seed`.
pub fn scene_corpus(n: usize, size: usize, seed: u64) -> Vec<Raster> {
    (0..n)
        .map(|i| procedural_scene(size, crate::imaging::derive_seed(seed, i as u64)))
        .collect()
}

/// Reflectance-like signatures over four bands (blue, green, red, NIR).
pub const SIGNATURES: [(&str, [f64; 4]); 4] = [
    ("water", [0.08, 0.06, 0.04, 0.02]),
    ("vegetation", [0.04, 0.08, 0.05, 0.40]),
    ("soil", [0.12, 0.16, 0.22, 0.28]),
    ("cloud", [0.70, 0.72, 0.72, 0.70]),
];

/// Band index of red and near-infrared in multiband scenes.
pub const RED_BAND: usize = 2;
pub const NIR_BAND: usize = 3;

/// Four-band scene built from a smooth class map; each pixel carries its
/// class signature modulated by a mild shared texture.
#[derive(Debug, Clone)]
pub struct MultibandScene {
    pub image: Raster,
    /// Class index per pixel into [`SIGNATURES`].
    pub classes: Vec<u8>,
}

impl MultibandScene {
    /// At most one square of side `side` per class whose pixels all belong
    /// to that class, as `(y0, x0, class)`.
    pub fn homogeneous_rois(&self, side: usize) -> Vec<(usize, usize, u8)> {
        let (h, w) = (self.image.height(), self.image.width());
        let mut out = Vec::new();
        let mut seen = [false; 4];
        let step = (side / 4).max(1);
        for y0 in (0..h.saturating_sub(side)).step_by(step) {
            for x0 in (0..w.saturating_sub(side)).step_by(step) {
                let c = self.classes[y0 * w + x0];
                if seen[c as usize] {
                    continue;
                }
                let uniform =
                    (y0..y0 + side).all(|y| (x0..x0 + side).all(|x| self.classes[y * w + x] == c));
                if uniform {
                    seen[c as usize] = true;
                    out.push((y0, x0, c));
                }
            }
        }
        out
    }
}

pub fn multiband_scene(size: usize, seed: u64) -> MultibandScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Raster::from_fn(size, size, 1, |_, _, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let field = gaussian_blur(&white, (size as f64 / 16.0).max(1.0)).expect("positive sigma");
    let field = standardized(field);
    let detail = texture(size, &mut rng);
    // Quartile-like thresholds give all four classes a share of the area.
    let cuts = [-0.7, 0.0, 0.8];
    let classes: Vec<u8> = field
        .data()
        .iter()
        .map(|&v| cuts.iter().filter(|&&c| v > c).count() as u8)
        .collect();
    let image = Raster::from_fn(size, size, 4, |y, x, b| {
        let class = classes[y * size + x] as usize;
        let t = detail.get(y, x, 0);
        SIGNATURES[class].1[b] * (1.0 + 0.05 * t)
    });
    MultibandScene { image, classes }
}

/// Edge through the image center at `angle_deg` from vertical, stepping
/// from `low` (left) to `high` (right). The profile across the edge is a
/// Gaussian CDF of width `sigma` pixels, point-sampled; `sigma == 0` gives
/// a hard step.
pub fn slanted_edge(
    height: usize,
    width: usize,
    angle_deg: f64,
    low: f64,
    high: f64,
    sigma: f64,
) -> Raster {
    let th = angle_deg.to_radians();
    let (nx, ny) = (th.cos(), -th.sin());
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    Raster::from_fn(height, width, 1, |y, x, _| {
        let d = (x as f64 - cx) * nx + (y as f64 - cy) * ny;
        let t = if sigma > 0.0 {
            0.5 * (1.0 + erf(d / (sigma * std::f64::consts::SQRT_2)))
        } else if d > 0.0 {
            1.0
        } else if d < 0.0 {
            0.0
        } else {
            0.5
        };
        low + (high - low) * t
    })
}

/// Hard slanted edge with box-filter anti-aliasing (`ss × ss` samples per
/// pixel), as an HR scene for burst synthesis.
pub fn edge_scene(size: usize, angle_deg: f64, low: f64, high: f64) -> Raster {
    const SS: usize = 8;
    let th = angle_deg.to_radians();
    let (nx, ny) = (th.cos(), -th.sin());
    let c = (size as f64 - 1.0) / 2.0;
    Raster::from_fn(size, size, 1, |y, x, _| {
        let mut hits = 0;
        for sy in 0..SS {
            for sx in 0..SS {
                let px = x as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64;
                let py = y as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64;
                hits += ((px - c) * nx + (py - c) * ny > 0.0) as usize;
            }
        }
        low + (high - low) * hits as f64 / (SS * SS) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_and_bounded() {
        let a = procedural_scene(48, 3);
        assert_eq!(a, procedural_scene(48, 3));
        assert_ne!(a, procedural_scene(48, 4));
        assert!(a.data().iter().all(|&v| (0.02..=0.98).contains(&v)));
    }

    #[test]
    fn blur_preserves_constants() {
        let c = Raster::filled(10, 10, 2, 0.3);
        assert!(gaussian_blur(&c, 2.0).unwrap().max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn multiband_classes_and_rois() {
        let s = multiband_scene(64, 1);
        assert_eq!(s.image.channels(), 4);
        for (y0, x0, c) in s.homogeneous_rois(6) {
            for y in y0..y0 + 6 {
                for x in x0..x0 + 6 {
                    assert_eq!(s.classes[y * 64 + x], c);
                }
            }
        }
    }

    #[test]
    fn edge_levels() {
        let e = slanted_edge(32, 32, 5.0, 0.1, 0.9, 0.0);
        assert_eq!(e.get(16, 0, 0), 0.1);
        assert_eq!(e.get(16, 31, 0), 0.9);
        let a = edge_scene(32, 5.0, 0.1, 0.9);
        assert_eq!(a.get(16, 0, 0), 0.1);
        assert!((a.mean() - 0.5).abs() < 0.01);
    }
}
