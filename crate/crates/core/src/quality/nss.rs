//! Natural-scene statistics: MSCN coefficients, asymmetric generalized
//! Gaussian fits and a distance-to-pristine quality score.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::imaging::{convolve, decimate, Boundary, Psf};
use crate::raster::Raster;

pub const NSS_FEATURES: usize = 36;

/// Intensity scale the MSCN stabilizing constant of 1 refers to:
/// unit-range images are read as 8-bit digital numbers.
const DN_SCALE: f64 = 255.0;

fn window() -> Psf {
    let sigma: f64 = 7.0 / 6.0;
    let taps = (-3i32..=3)
        .flat_map(|y| {
            (-3i32..=3).map(move |x| (-f64::from(x * x + y * y) / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    Psf::from_taps(3, 1.0, taps).expect("valid window")
}

/// `(I − μ) / (σ + 1)` with local moments from a 7×7 Gaussian window,
/// computed on the channel mean.
pub fn mscn(image: &Raster) -> Result<Raster> {
    if image.height() < 7 || image.width() < 7 {
        return Err(Error::invalid("image smaller than the 7x7 window"));
    }
    let luma = image.channel_mean();
    let w = window();
    let mu = convolve(&luma, &w, Boundary::Replicate)?;
    let sq = convolve(&luma.map(|v| v * v), &w, Boundary::Replicate)?;
    let data = luma
        .data()
        .iter()
        .zip(mu.data().iter().zip(sq.data()))
        .map(|(&v, (&m, &s))| {
            // rounding residue of the window sum on flat patches
            let d = if (v - m).abs() <= 1e-12 * (v.abs() + 1.0) {
                0.0
            } else {
                v - m
            };
            d / ((s - m * m).max(0.0).sqrt() + 1.0)
        })
        .collect();
    Raster::from_vec(luma.height(), luma.width(), 1, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdParams {
    pub alpha: f64,
    pub sigma_left: f64,
    pub sigma_right: f64,
}

impl AggdParams {
    /// Mean of the distribution.
    pub fn mean(&self) -> f64 {
        if self.sigma_left == 0.0 && self.sigma_right == 0.0 {
            return 0.0;
        }
        let a = self.alpha;
        let scale = ((ln_gamma(1.0 / a) - ln_gamma(3.0 / a)) * 0.5).exp();
        (self.sigma_right - self.sigma_left) * (ln_gamma(2.0 / a) - ln_gamma(1.0 / a)).exp() * scale
    }
}

fn rho(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

const ALPHA_MIN: f64 = 0.05;
const ALPHA_MAX: f64 = 10.0;

fn invert_rho(target: f64) -> f64 {
    // rho rises monotonically from 0 toward 3/4
    if target <= rho(ALPHA_MIN) {
        return ALPHA_MIN;
    }
    if target >= rho(ALPHA_MAX) {
        return ALPHA_MAX;
    }
    let mut lo = ALPHA_MIN;
    let mut a = ALPHA_MIN;
    while a < ALPHA_MAX {
        let next = (a + 0.05).min(ALPHA_MAX);
        if rho(next) >= target {
            lo = a;
            break;
        }
        a = next;
    }
    let mut hi = (lo + 0.05).min(ALPHA_MAX);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rho(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Moment-matching fit. All-zero input yields the symmetric zero-variance
/// point `(2, 0, 0)`.
pub fn aggd_fit(samples: &[f64]) -> AggdParams {
    let (mut nl, mut sl, mut nr, mut sr) = (0usize, 0.0, 0usize, 0.0);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &x in samples {
        if x < 0.0 {
            nl += 1;
            sl += x * x;
        } else if x > 0.0 {
            nr += 1;
            sr += x * x;
        }
        abs_sum += x.abs();
        sq_sum += x * x;
    }
    if sq_sum == 0.0 {
        return AggdParams {
            alpha: 2.0,
            sigma_left: 0.0,
            sigma_right: 0.0,
        };
    }
    let mut sigma_left = if nl > 0 { (sl / nl as f64).sqrt() } else { 0.0 };
    let mut sigma_right = if nr > 0 { (sr / nr as f64).sqrt() } else { 0.0 };
    if sigma_left == 0.0 {
        sigma_left = sigma_right;
    }
    if sigma_right == 0.0 {
        sigma_right = sigma_left;
    }
    let n = samples.len() as f64;
    let gamma = sigma_left / sigma_right;
    let r = (abs_sum / n).powi(2) / (sq_sum / n);
    let big_r = r * (gamma.powi(3) + 1.0) * (gamma + 1.0) / (gamma * gamma + 1.0).powi(2);
    AggdParams {
        alpha: invert_rho(big_r),
        sigma_left,
        sigma_right,
    }
}

fn scale_features(m: &Raster, out: &mut Vec<f64>) {
    let (h, w) = (m.height(), m.width());
    let p = aggd_fit(m.data());
    out.push(p.alpha);
    out.push(0.5 * (p.sigma_left.powi(2) + p.sigma_right.powi(2)));
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prod = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                    prod.push(
                        m.get(y as usize, x as usize, 0) * m.get(yy as usize, xx as usize, 0),
                    );
                }
            }
        }
        let p = aggd_fit(&prod);
        out.extend([
            p.alpha,
            p.mean(),
            p.sigma_left.powi(2),
            p.sigma_right.powi(2),
        ]);
    }
}

/// 18 statistics per scale at full and half resolution. Unit-range
/// intensities are mapped to the 0–255 scale first.
pub fn nss_features(image: &Raster) -> Result<Vec<f64>> {
    if image.height() < 14 || image.width() < 14 {
        return Err(Error::invalid("image too small for two-scale statistics"));
    }
    let mut img = image.channel_mean().map(|v| v * DN_SCALE);
    let mut out = Vec::with_capacity(NSS_FEATURES);
    for scale in 0..2 {
        if scale == 1 {
            let (h, w) = (img.height() / 2 * 2, img.width() / 2 * 2);
            img = decimate(&img.crop(0, 0, h, w)?, 2)?;
        }
        scale_features(&mscn(&img)?, &mut out);
    }
    debug_assert_eq!(out.len(), NSS_FEATURES);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct Fitted {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    lambda: f64,
}

/// Pristine feature statistics. The default value is unfitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NssModel {
    fitted: Option<Fitted>,
}

/// Side of the tiles the pristine corpus is cut into before fitting.
pub const NSS_PATCH: usize = 32;

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Non-overlapping `NSS_PATCH` tiles; an image smaller than a tile is kept whole.
fn tiles(image: &Raster) -> Result<Vec<Raster>> {
    let (h, w) = (image.height(), image.width());
    if h < NSS_PATCH || w < NSS_PATCH {
        return Ok(vec![image.clone()]);
    }
    let mut out = Vec::with_capacity((h / NSS_PATCH) * (w / NSS_PATCH));
    for y in (0..=h - NSS_PATCH).step_by(NSS_PATCH) {
        for x in (0..=w - NSS_PATCH).step_by(NSS_PATCH) {
            out.push(image.crop(y, x, NSS_PATCH, NSS_PATCH)?);
        }
    }
    Ok(out)
}

/// Shrinkage intensity toward the diagonal (Schäfer and Strimmer, target D):
/// estimated variance of the sample correlations over their squared sum.
fn shrinkage(rows: &[Vec<f64>], mean: &[f64], cov: &[f64]) -> f64 {
    let n = NSS_FEATURES;
    let m = rows.len() as f64;
    if m < 3.0 {
        return 1.0;
    }
    let sd: Vec<f64> = (0..n).map(|j| cov[j * n + j].sqrt()).collect();
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..n)
                .map(|j| {
                    if sd[j] > 0.0 {
                        (r[j] - mean[j]) / sd[j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    let mut w = vec![0.0; rows.len()];
    for i in 0..n {
        for j in i + 1..n {
            for (wk, zk) in w.iter_mut().zip(&z) {
                *wk = zk[i] * zk[j];
            }
            let wbar = w.iter().sum::<f64>() / m;
            num += m / (m - 1.0).powi(3) * w.iter().map(|x| (x - wbar).powi(2)).sum::<f64>();
            den += (m / (m - 1.0) * wbar).powi(2);
        }
    }
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

impl NssModel {
    /// Fits on the [`NSS_PATCH`] tiles of every corpus image.
    pub fn fit(corpus: &[Raster]) -> Result<NssModel> {
        let mut rows = Vec::new();
        for img in corpus {
            for t in tiles(img)? {
                rows.push(nss_features(&t)?);
            }
        }
        NssModel::from_features(&rows)
    }

    /// Mean and covariance of the rows, with the off-diagonal entries shrunk
    /// by a data-driven factor.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<NssModel> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("empty pristine corpus".into()));
        }
        let n = NSS_FEATURES;
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("feature vectors must have 36 entries"));
        }
        let m = rows.len() as f64;
        let mean: Vec<f64> = (0..n)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m)
            .collect();
        let denom = (m - 1.0).max(1.0);
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let c = rows
                    .iter()
                    .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                    .sum::<f64>()
                    / denom;
                cov[i * n + j] = c;
                cov[j * n + i] = c;
            }
        }
        let lambda = shrinkage(rows, &mean, &cov);
        let avg_var = (0..n).map(|i| cov[i * n + i]).sum::<f64>() / n as f64;
        let floor = 1e-6 * avg_var.max(1e-12) + 1e-12;
        let mut reg = cov.clone();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    reg[i * n + j] *= 1.0 - lambda;
                }
            }
            reg[i * n + i] += floor;
        }
        let chol =
            cholesky(&reg, n).ok_or_else(|| Error::invalid("covariance not positive definite"))?;
        Ok(NssModel {
            fitted: Some(Fitted {
                mean,
                cov,
                chol,
                lambda,
            }),
        })
    }

    /// Shrinkage applied to the off-diagonal covariance.
    pub fn shrinkage(&self) -> Option<f64> {
        self.fitted.as_ref().map(|f| f.lambda)
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.fitted.as_ref().map(|f| f.mean.as_slice())
    }

    /// Unregularized sample covariance, row-major 36×36.
    pub fn covariance(&self) -> Option<&[f64]> {
        self.fitted.as_ref().map(|f| f.cov.as_slice())
    }

    /// Mahalanobis distance of a feature vector under the shrunk covariance.
    pub fn distance(&self, features: &[f64]) -> Result<f64> {
        let f = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::State("quality model has not been fitted".into()))?;
        let n = NSS_FEATURES;
        if features.len() != n {
            return Err(Error::invalid("feature vectors must have 36 entries"));
        }
        // forward substitution: L z = (x − μ)
        let mut z = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| f.chol[i * n + k] * z[k]).sum();
            z[i] = (features[i] - f.mean[i] - s) / f.chol[i * n + i];
        }
        Ok(z.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// Distance to pristine statistics; larger means less natural.
pub fn quality_score(image: &Raster, model: &NssModel) -> Result<f64> {
    if !model.is_fitted() {
        return Err(Error::State("quality model has not been fitted".into()));
    }
    model.distance(&nss_features(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Gamma, StandardNormal};

    #[test]
    fn gaussian_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
        let p = aggd_fit(&s);
        assert!((p.alpha / 2.0 - 1.0).abs() < 0.05, "{p:?}");
        assert!((p.sigma_left / p.sigma_right - 1.0).abs() < 0.05);
    }

    #[test]
    fn laplacian_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = Exp::new(1.0).unwrap();
        let s: Vec<f64> = (0..200_000)
            .map(|_| {
                let v: f64 = e.sample(&mut rng);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let p = aggd_fit(&s);
        assert!((p.alpha - 1.0).abs() < 0.1, "{p:?}");
    }

    #[test]
    fn asymmetric_recovery() {
        let (alpha, sl, sr) = (0.8, 1.0, 2.0);
        let beta = |s: f64| s * ((ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)) * 0.5).exp();
        let (bl, br) = (beta(sl), beta(sr));
        let g = Gamma::new(1.0 / alpha, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s: Vec<f64> = (0..400_000)
            .map(|_| {
                let mag = g.sample(&mut rng).powf(1.0 / alpha);
                if rng.random::<f64>() < bl / (bl + br) {
                    -bl * mag
                } else {
                    br * mag
                }
            })
            .collect();
        let p = aggd_fit(&s);
        assert!((p.alpha / alpha - 1.0).abs() < 0.1, "{p:?}");
        assert!((p.sigma_left / sl - 1.0).abs() < 0.1, "{p:?}");
        assert!((p.sigma_right / sr - 1.0).abs() < 0.1, "{p:?}");
    }

    #[test]
    fn constant_image_is_defined() {
        let c = Raster::filled(32, 32, 1, 0.5);
        assert!(mscn(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let f = nss_features(&c).unwrap();
        assert_eq!(f.len(), NSS_FEATURES);
        assert_eq!(&f[..2], &[2.0, 0.0]);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn two_rows_use_the_diagonal() {
        let a: Vec<f64> = (0..NSS_FEATURES).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let m = NssModel::from_features(&[a.clone(), b]).unwrap();
        assert_eq!(m.shrinkage(), Some(1.0));
        assert!(m.distance(&a).unwrap().is_finite());
    }

    #[test]
    fn corpus_is_tiled() {
        let img = crate::scene::procedural_scene(64, 3);
        let m = NssModel::fit(std::slice::from_ref(&img)).unwrap();
        let l = m.shrinkage().unwrap();
        assert!((0.0..=1.0).contains(&l), "{l}");
        let whole = NssModel::fit(&[img.crop(0, 0, 20, 20).unwrap()]).unwrap();
        assert_eq!(whole.shrinkage(), Some(1.0));
    }

    #[test]
    fn unfitted_model_is_a_state_error() {
        let img = Raster::filled(32, 32, 1, 0.5);
        assert!(matches!(
            quality_score(&img, &NssModel::default()),
            Err(Error::State(_))
        ));
    }
}
