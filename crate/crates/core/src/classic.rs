//! Shift-and-fuse reconstruction: global registration, bilinear
//! accumulation on the HR grid, hole infill and Wiener restoration.

use crate::error::{Error, Result};
use crate::fft::{bin_freq, fft2d, hann, C64};
use crate::imaging::{Burst, Decimation, Psf};
use crate::raster::{FlowField, Raster};
use crate::spmc::{spmc_forward, FeatureMap, FlowMap, SpmcOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicParams {
    /// Refine the integer correlation peak to sub-pixel precision.
    pub subpixel_refine: bool,
    /// Noise-to-signal ratio of the Wiener filter.
    pub wiener_nsr: f64,
    /// Splat kernel radius in HR pixels; only the bilinear kernel (1.0) exists.
    pub splat_radius: f64,
    /// Use the burst's recorded flows instead of estimating translations.
    pub use_true_flows: bool,
    /// HR position of LR pixel (0, 0), see [`Decimation::grid_offset`].
    pub grid_offset: f64,
    /// HR-grid blur to invert after fusion; `None` skips restoration.
    pub restore_psf: Option<Psf>,
}

impl Default for ClassicParams {
    fn default() -> Self {
        ClassicParams {
            subpixel_refine: true,
            wiener_nsr: 1e-2,
            splat_radius: 1.0,
            use_true_flows: false,
            grid_offset: Decimation::BlockAverage.grid_offset(2),
            restore_psf: None,
        }
    }
}

impl ClassicParams {
    /// Parameters matched to a system with a Gaussian optics blur of
    /// `sigma_lr` LR pixels and the given detector model.
    pub fn for_system(scale: usize, sigma_lr: f64, decimation: Decimation) -> Result<Self> {
        // Gaussian stand-in for optics ⊗ detector box on the HR grid.
        let s = scale as f64;
        let box_var = match decimation {
            Decimation::BlockAverage => (s * s - 1.0) / 12.0,
            Decimation::PointSample => 0.0,
        };
        let sigma_hr = ((sigma_lr * s).powi(2) + box_var).sqrt();
        let restore_psf = if sigma_hr > 0.0 {
            Some(Psf::gaussian(
                (sigma_hr).max(1e-6),
                (3.0 * sigma_hr).ceil().max(1.0) as usize,
            )?)
        } else {
            None
        };
        Ok(ClassicParams {
            grid_offset: decimation.grid_offset(scale),
            restore_psf,
            ..ClassicParams::default()
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.wiener_nsr >= 0.0) {
            return Err(Error::invalid("wiener_nsr must be non-negative"));
        }
        if self.splat_radius != 1.0 {
            return Err(Error::invalid(
                "only the bilinear splat (radius 1) is supported",
            ));
        }
        Ok(())
    }
}

fn windowed_luma(img: &Raster) -> Vec<C64> {
    let (h, w) = (img.height(), img.width());
    let luma = img.channel_mean();
    let mean = luma.mean();
    let (wy, wx) = (hann(h), hann(w));
    (0..h * w)
        .map(|i| C64::new((luma.data()[i] - mean) * wy[i / w] * wx[i % w], 0.0))
        .collect()
}

/// Global translation `(dx, dy)` such that `frame(p) ≈ reference(p + d)`,
/// i.e. the flow carrying frame pixels into reference coordinates.
///
/// Phase correlation with a Gaussian spectral weight, so the correlation
/// surface is a smooth blob; the sub-pixel offset is the vertex of a
/// parabola through the log of the peak and its two neighbors per axis.
pub fn estimate_translation(
    reference: &Raster,
    frame: &Raster,
    subpixel_refine: bool,
) -> Result<(f64, f64)> {
    if reference.height() != frame.height() || reference.width() != frame.width() {
        return Err(Error::invalid("frames differ in shape"));
    }
    let (h, w) = (reference.height(), reference.width());
    let mut a = windowed_luma(reference);
    let mut b = windowed_luma(frame);
    let energy = |v: &[C64]| v.iter().map(|c| c.norm_sqr()).sum::<f64>();
    if energy(&a) < 1e-20 || energy(&b) < 1e-20 {
        return Err(Error::NoSignal(
            "constant image cannot be registered".into(),
        ));
    }
    fft2d(&mut a, h, w, false);
    fft2d(&mut b, h, w, false);
    // Peak width of one pixel in the spatial domain.
    let sigma_f = 1.0 / (2.0 * std::f64::consts::PI);
    let mut r: Vec<C64> = (0..h * w)
        .map(|i| {
            let cross = a[i] * b[i].conj();
            let mag = cross.norm();
            if mag < 1e-300 {
                return C64::default();
            }
            let (fy, fx) = (bin_freq(i / w, h), bin_freq(i % w, w));
            let weight = (-(fx * fx + fy * fy) / (2.0 * sigma_f * sigma_f)).exp();
            cross / mag * weight
        })
        .collect();
    fft2d(&mut r, h, w, true);

    let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
    for (i, v) in r.iter().enumerate() {
        if v.re > best {
            best = v.re;
            bi = i;
        }
    }
    if !(best > 0.0) {
        return Err(Error::NoSignal("no correlation peak".into()));
    }
    let (py, px) = (bi / w, bi % w);
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.rem_euclid(h as isize) as usize;
        let xx = x.rem_euclid(w as isize) as usize;
        r[yy * w + xx].re
    };
    let signed = |p: usize, n: usize| -> f64 {
        if p > n / 2 {
            p as f64 - n as f64
        } else {
            p as f64
        }
    };
    let (mut dy, mut dx) = (signed(py, h), signed(px, w));
    if subpixel_refine {
        let (y, x) = (py as isize, px as isize);
        dx += vertex(at(y, x - 1), best, at(y, x + 1));
        dy += vertex(at(y - 1, x), best, at(y + 1, x));
    }
    // The correlation of reference against frame peaks at the displacement
    // taking frame samples back to the reference.
    Ok((dx, dy))
}

fn vertex(l: f64, c: f64, r: f64) -> f64 {
    let tiny = 1e-12 * c.abs().max(1e-300);
    if l > tiny && r > tiny {
        let (l, c, r) = (l.ln(), c.ln(), r.ln());
        let den = 2.0 * (l - 2.0 * c + r);
        if den.abs() > 1e-15 {
            return ((l - r) / den).clamp(-0.5, 0.5);
        }
    }
    let den = 2.0 * (l - 2.0 * c + r);
    if den.abs() > 1e-15 {
        ((l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Fused HR image plus its coverage bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftAndAdd {
    pub image: Raster,
    /// Accumulated bilinear weight per HR pixel (single channel).
    pub weights: Raster,
    /// HR pixels with no coverage, filled by interpolation.
    pub filled: Vec<bool>,
}

impl ShiftAndAdd {
    pub fn filled_count(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }
}

/// Splats every LR pixel of every frame at HR position
/// `s·(p + flow_k(p)) + grid_offset`, normalizes by the accumulated
/// bilinear weight and fills uncovered pixels from covered neighbors.
pub fn shift_and_add(
    frames: &[Raster],
    flows: &[FlowField],
    s: usize,
    grid_offset: f64,
) -> Result<ShiftAndAdd> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no frames".into()));
    }
    if flows.len() != frames.len() {
        return Err(Error::invalid("one flow per frame required"));
    }
    let feats: Vec<FeatureMap<f64>> = frames.iter().map(FeatureMap::from_raster).collect();
    let fl: Vec<FlowMap<f64>> = flows.iter().map(FlowMap::from_field).collect();
    let opts = SpmcOptions::new(s).with_origin(grid_offset);
    let fused = spmc_forward(&feats, &fl, &opts)?;
    let (hh, hw, d) = (fused.height, fused.width, fused.depth);
    let filled: Vec<bool> = (0..hh * hw).map(|i| !fused.covered(i)).collect();
    if filled.iter().all(|&f| f) {
        return Err(Error::EmptyInput(
            "no frame sample landed on the HR grid".into(),
        ));
    }
    let mut image = fused.to_feature_map().to_raster();
    if filled.iter().any(|&f| f) {
        infill(&mut image, &filled);
    }
    let weights = Raster::from_vec(hh, hw, 1, fused.weights.clone())?;
    debug_assert_eq!(image.channels(), d);
    Ok(ShiftAndAdd {
        image,
        weights,
        filled,
    })
}

/// Translations as constant flow fields on an `h × w` grid.
pub fn translation_flows(shifts: &[(f64, f64)], h: usize, w: usize) -> Vec<FlowField> {
    shifts
        .iter()
        .map(|&(dx, dy)| FlowField::constant(h, w, dx, dy))
        .collect()
}

/// Linear interpolation between the nearest covered pixels along the row
/// and the column, averaged; pixels with no covered pixel on either axis
/// take the mean of already-filled 4-neighbors in a sweep.
fn infill(img: &mut Raster, holes: &[bool]) {
    let (h, w, ch) = img.shape();
    let src = img.clone();
    let mut done: Vec<bool> = holes.iter().map(|&f| !f).collect();
    let lerp_axis = |n: usize, at: &dyn Fn(usize) -> usize, i: usize, c: usize| -> Option<f64> {
        let lo = (0..i).rev().find(|&j| !holes[at(j)]);
        let hi = (i + 1..n).find(|&j| !holes[at(j)]);
        match (lo, hi) {
            (Some(a), Some(b)) => {
                let t = (i - a) as f64 / (b - a) as f64;
                Some(src.data()[at(a) * ch + c] * (1.0 - t) + src.data()[at(b) * ch + c] * t)
            }
            (Some(a), None) => Some(src.data()[at(a) * ch + c]),
            (None, Some(b)) => Some(src.data()[at(b) * ch + c]),
            (None, None) => None,
        }
    };
    for y in 0..h {
        for x in 0..w {
            if !holes[y * w + x] {
                continue;
            }
            let row = |j: usize| y * w + j;
            let col = |j: usize| j * w + x;
            let mut any = false;
            for c in 0..ch {
                let est: Vec<f64> = [lerp_axis(w, &row, x, c), lerp_axis(h, &col, y, c)]
                    .into_iter()
                    .flatten()
                    .collect();
                if !est.is_empty() {
                    any = true;
                    img.set(y, x, c, est.iter().sum::<f64>() / est.len() as f64);
                }
            }
            done[y * w + x] = any;
        }
    }
    // Anything left has no covered pixel in its row or column.
    while done.iter().any(|&d| !d) {
        let snapshot = done.clone();
        for y in 0..h {
            for x in 0..w {
                if snapshot[y * w + x] {
                    continue;
                }
                let nb: Vec<(usize, usize)> = [(0, -1), (0, 1), (-1, 0), (1, 0)]
                    .iter()
                    .map(|&(dy, dx)| (y as isize + dy, x as isize + dx))
                    .filter(|&(yy, xx)| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize)
                    .map(|(yy, xx)| (yy as usize, xx as usize))
                    .filter(|&(yy, xx)| snapshot[yy * w + xx])
                    .collect();
                if nb.is_empty() {
                    continue;
                }
                for c in 0..ch {
                    let v = nb.iter().map(|&(yy, xx)| img.get(yy, xx, c)).sum::<f64>()
                        / nb.len() as f64;
                    img.set(y, x, c, v);
                }
                done[y * w + x] = true;
            }
        }
    }
}

/// Frequency-domain Wiener deconvolution `H* / (|H|² + nsr)` per channel,
/// on the half-sample symmetric extension of the image.
pub fn deblur_wiener(image: &Raster, psf: &Psf, nsr: f64) -> Result<Raster> {
    if !(nsr >= 0.0) {
        return Err(Error::invalid("nsr must be non-negative"));
    }
    let (h, w, ch) = image.shape();
    let (eh, ew) = (2 * h, 2 * w);
    let r = psf.radius() as isize;
    if psf.size() > eh || psf.size() > ew {
        return Err(Error::invalid("kernel larger than the padded image"));
    }
    // Kernel centered on the origin with periodic wrap.
    let mut kernel = vec![C64::default(); eh * ew];
    for dy in -r..=r {
        for dx in -r..=r {
            let y = dy.rem_euclid(eh as isize) as usize;
            let x = dx.rem_euclid(ew as isize) as usize;
            kernel[y * ew + x].re += psf.tap(dy, dx);
        }
    }
    fft2d(&mut kernel, eh, ew, false);
    // Correlation kernel: spectrum of k(-x) is conj(K) for real taps.
    let filter: Vec<C64> = kernel
        .iter()
        .map(|k| {
            let hk = k.conj();
            let den = hk.norm_sqr() + nsr;
            if den < 1e-300 {
                C64::default()
            } else {
                hk.conj() / den
            }
        })
        .collect();

    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * n - 1 - i };
    let mut out = Raster::zeros(h, w, ch);
    let mut buf = vec![C64::default(); eh * ew];
    for c in 0..ch {
        for y in 0..eh {
            for x in 0..ew {
                buf[y * ew + x] = C64::new(image.get(mirror(y, h), mirror(x, w), c), 0.0);
            }
        }
        fft2d(&mut buf, eh, ew, false);
        buf.iter_mut().zip(&filter).for_each(|(b, f)| *b *= f);
        fft2d(&mut buf, eh, ew, true);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, c, buf[y * ew + x].re);
            }
        }
    }
    Ok(out)
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Catmull-Rom bicubic interpolation to `s·H × s·W` with pixel-center
/// alignment and replicated edges.
pub fn bicubic_upsample(image: &Raster, s: usize) -> Result<Raster> {
    if s == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    if s == 1 {
        return Ok(image.clone());
    }
    let (h, w, ch) = image.shape();
    let (oh, ow) = (h * s, w * s);
    let taps = |o: usize| -> (isize, [f64; 4]) {
        let src = (o as f64 + 0.5) / s as f64 - 0.5;
        let base = src.floor();
        (base as isize, catmull_rom(src - base))
    };
    // Horizontal pass then vertical.
    let mut tmp = Raster::zeros(h, ow, ch);
    for x in 0..ow {
        let (b, k) = taps(x);
        for y in 0..h {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += kj * image.get_clamped(y as isize, b - 1 + j as isize, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = Raster::zeros(oh, ow, ch);
    for y in 0..oh {
        let (b, k) = taps(y);
        for x in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += kj * tmp.get_clamped(b - 1 + j as isize, x as isize, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    Ok(out)
}

/// Per-frame flows for the classic path: recorded flows when requested and
/// available, otherwise one estimated global translation per frame.
pub fn burst_flows(burst: &Burst, params: &ClassicParams) -> Result<Vec<FlowField>> {
    burst.validate()?;
    if params.use_true_flows {
        if let Some(f) = &burst.true_flows {
            return Ok(f.clone());
        }
    }
    let reference = burst.reference();
    let (h, w) = (reference.height(), reference.width());
    let mut flows = vec![FlowField::zeros(h, w)];
    for frame in &burst.frames[1..] {
        let (dx, dy) = estimate_translation(reference, frame, params.subpixel_refine)?;
        flows.push(FlowField::constant(h, w, dx, dy));
    }
    Ok(flows)
}

/// Registration, shift-and-add and Wiener restoration rescaled to unit gain
/// at zero frequency. A single-frame burst degenerates to interpolation
/// followed by restoration.
pub fn classic_sr(burst: &Burst, s: usize, params: &ClassicParams) -> Result<Raster> {
    params.validate()?;
    if s == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let flows = burst_flows(burst, params)?;
    let fused = shift_and_add(&burst.frames, &flows, s, params.grid_offset)?;
    match &params.restore_psf {
        Some(psf) => {
            // undo the filter's attenuation of the mean so radiometry is kept
            let h0: f64 = psf.taps().iter().sum();
            let gain = (h0 * h0 + params.wiener_nsr) / h0;
            Ok(deblur_wiener(&fused.image, psf, params.wiener_nsr)?.map(|v| v * gain))
        }
        None => Ok(fused.image),
    }
}

/// Mean absolute difference; shapes must agree.
pub fn l1_error(a: &Raster, b: &Raster) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid("shape mismatch"));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{convolve, warp, Boundary};

    fn smooth_scene(h: usize, w: usize) -> Raster {
        Raster::from_fn(h, w, 1, |y, x, _| {
            let (x, y) = (x as f64, y as f64);
            1.0 + 0.4 * (0.31 * x + 0.17 * y).sin()
                + 0.3 * (0.23 * y - 0.11 * x).cos()
                + 0.2 * (0.07 * x * 1.3 + 0.41 * y).sin()
        })
    }

    fn textured_scene(h: usize, w: usize) -> Raster {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Raster::from_fn(h, w, 1, |_, _, _| rng.random::<f64>());
        let blurred =
            convolve(&noise, &Psf::gaussian(1.5, 5).unwrap(), Boundary::Replicate).unwrap();
        blurred.map(|v| v + 0.5)
    }

    #[test]
    fn identical_frames_register_at_zero() {
        let a = textured_scene(48, 48);
        let (dx, dy) = estimate_translation(&a, &a, true).unwrap();
        assert!(dx.abs() < 1e-9 && dy.abs() < 1e-9, "{dx} {dy}");
    }

    #[test]
    fn integer_shift_is_exact() {
        let a = textured_scene(64, 64);
        let b = warp(
            &a,
            &FlowField::constant(64, 64, 3.0, -2.0),
            Boundary::Replicate,
        )
        .unwrap();
        let got = estimate_translation(&a, &b, false).unwrap();
        assert_eq!(got, (3.0, -2.0), "{got:?}");
        let (dx, dy) = estimate_translation(&a, &b, true).unwrap();
        assert!((dx - 3.0).abs() < 0.05 && (dy + 2.0).abs() < 0.05);
    }

    #[test]
    fn subpixel_shift_recovered() {
        let a = textured_scene(64, 64);
        let b = warp(
            &a,
            &FlowField::constant(64, 64, 0.25, 0.5),
            Boundary::Replicate,
        )
        .unwrap();
        let (dx, dy) = estimate_translation(&a, &b, true).unwrap();
        assert!((dx - 0.25).abs() < 0.05, "{dx}");
        assert!((dy - 0.5).abs() < 0.05, "{dy}");
        let (rx, ry) = estimate_translation(&b, &a, true).unwrap();
        assert!((rx + dx).abs() < 0.05 && (ry + dy).abs() < 0.05);
    }

    #[test]
    fn constant_image_has_no_signal() {
        let c = Raster::filled(16, 16, 1, 2.0);
        assert!(matches!(
            estimate_translation(&c, &c, true),
            Err(Error::NoSignal(_))
        ));
    }

    #[test]
    fn single_frame_identity() {
        let f = smooth_scene(9, 7);
        let out = shift_and_add(std::slice::from_ref(&f), &[FlowField::zeros(9, 7)], 1, 0.0).unwrap();
        assert_eq!(out.image, f);
        assert_eq!(out.filled_count(), 0);
    }

    #[test]
    fn constant_burst_stays_constant() {
        let frames = vec![Raster::filled(6, 6, 1, 4.5); 3];
        let flows = translation_flows(&[(0.0, 0.0), (0.3, -0.7), (1.2, 0.45)], 6, 6);
        let out = shift_and_add(&frames, &flows, 2, 0.0).unwrap();
        for (i, v) in out.image.data().iter().enumerate() {
            if !out.filled[i] {
                assert!((v - 4.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn holes_are_flagged_and_filled() {
        let f = Raster::from_fn(4, 4, 1, |_, x, _| x as f64);
        let out = shift_and_add(&[f], &[FlowField::zeros(4, 4)], 2, 0.0).unwrap();
        assert_eq!(out.filled_count(), 64 - 16);
        // Odd columns sit halfway between covered neighbors.
        assert!((out.image.get(0, 1, 0) - 0.5).abs() < 1e-12);
        assert!(out.image.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_samples_outside_grid() {
        let f = Raster::filled(2, 2, 1, 1.0);
        let err = shift_and_add(&[f], &[FlowField::constant(2, 2, 50.0, 50.0)], 2, 0.0);
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn wiener_delta_identity() {
        let img = smooth_scene(12, 10);
        let out = deblur_wiener(&img, &Psf::delta(), 0.0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
        let damped = deblur_wiener(&img, &Psf::delta(), 1.0).unwrap();
        assert!(damped.max_abs_diff(&img.map(|v| v * 0.5)) < 1e-12);
    }

    #[test]
    fn wiener_inverts_known_blur() {
        let img = smooth_scene(64, 64);
        let psf = Psf::gaussian(1.0, 4).unwrap();
        let blurred = convolve(&img, &psf, Boundary::Replicate).unwrap();
        let out = deblur_wiener(&blurred, &psf, 1e-6).unwrap();
        let range = 2.0;
        let mut err: f64 = 0.0;
        for y in 8..56 {
            for x in 8..56 {
                err = err.max((out.get(y, x, 0) - img.get(y, x, 0)).abs());
            }
        }
        assert!(err < 1e-3 * range, "{err}");
    }

    #[test]
    fn bicubic_contracts() {
        let img = smooth_scene(5, 6);
        assert_eq!(bicubic_upsample(&img, 1).unwrap(), img);
        let c = bicubic_upsample(&Raster::filled(5, 5, 2, 3.0), 3).unwrap();
        assert!(c.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let ramp = Raster::from_fn(8, 8, 1, |y, x, _| 2.0 * x as f64 - 0.5 * y as f64);
        let up = bicubic_upsample(&ramp, 2).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                let sx = (x as f64 + 0.5) / 2.0 - 0.5;
                let sy = (y as f64 + 0.5) / 2.0 - 0.5;
                assert!((up.get(y, x, 0) - (2.0 * sx - 0.5 * sy)).abs() < 1e-12);
            }
        }
    }
}
