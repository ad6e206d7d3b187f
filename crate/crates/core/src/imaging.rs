//! Image formation: motion, optical blur, detector integration and noise.
//!
//! A low-resolution frame is produced from a high-resolution scene by
//! warping it with the frame's motion, blurring it with the system PSF,
//! block-averaging it onto the coarse detector grid and adding Gaussian
//! noise whose standard deviation is the scene mean divided by the SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Raster};

/// How samples outside the grid are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Clamp to the nearest edge sample.
    #[default]
    Replicate,
    /// Samples outside the grid read as zero.
    Zero,
}

impl Boundary {
    #[inline]
    fn fetch(self, img: &Raster, y: isize, x: isize, c: usize) -> f64 {
        match self {
            Boundary::Replicate => img.get_clamped(y, x, c),
            Boundary::Zero => {
                if y < 0 || x < 0 || y >= img.height() as isize || x >= img.width() as isize {
                    0.0
                } else {
                    img.get(y as usize, x as usize, c)
                }
            }
        }
    }
}

/// Discrete point-spread function.
///
/// `spacing` is the tap pitch measured in LR pixels, so a kernel built for
/// the HR grid of a ×2 system has spacing 0.5. Taps always sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    radius: usize,
    spacing: f64,
    taps: Vec<f64>,
}

impl Psf {
    pub fn delta() -> Psf {
        Psf {
            radius: 0,
            spacing: 1.0,
            taps: vec![1.0],
        }
    }

    /// Sampled isotropic Gaussian on a unit-pitch grid, renormalized to sum 1.
    pub fn gaussian(sigma: f64, radius: usize) -> Result<Psf> {
        Self::gaussian_with_spacing(sigma, radius, 1.0)
    }

    /// Gaussian of width `sigma_lr` (LR pixels) sampled on the HR grid of a
    /// ×`scale` system, with a radius covering three standard deviations.
    pub fn gaussian_on_grid(sigma_lr: f64, scale: usize) -> Result<Psf> {
        if scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        let sigma_taps = sigma_lr * scale as f64;
        let radius = (3.0 * sigma_taps).ceil().max(1.0) as usize;
        Self::gaussian_with_spacing(sigma_lr, radius, 1.0 / scale as f64)
    }

    /// Gaussian with `sigma` in LR pixels sampled every `spacing` LR pixels.
    pub fn gaussian_with_spacing(sigma: f64, radius: usize, spacing: f64) -> Result<Psf> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("tap spacing must be positive"));
        }
        let sigma_taps = sigma / spacing;
        if (radius as f64) < (3.0 * sigma_taps).ceil() {
            return Err(Error::invalid(format!(
                "radius {radius} shorter than 3 sigma ({sigma_taps} taps)"
            )));
        }
        let n = 2 * radius + 1;
        let r = radius as isize;
        let mut taps = Vec::with_capacity(n * n);
        for y in -r..=r {
            for x in -r..=r {
                let d2 = (x * x + y * y) as f64;
                taps.push((-d2 / (2.0 * sigma_taps * sigma_taps)).exp());
            }
        }
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Ok(Psf {
            radius,
            spacing,
            taps,
        })
    }

    /// Arbitrary kernel of side `2 * radius + 1`; normalized to sum 1.
    pub fn from_taps(radius: usize, spacing: f64, taps: Vec<f64>) -> Result<Psf> {
        let n = 2 * radius + 1;
        if taps.len() != n * n {
            return Err(Error::invalid("kernel must be (2r+1)x(2r+1)"));
        }
        let sum: f64 = taps.iter().sum();
        if !sum.is_finite() || sum.abs() < 1e-300 {
            return Err(Error::invalid("kernel taps must have a nonzero finite sum"));
        }
        Ok(Psf {
            radius,
            spacing,
            taps: taps.into_iter().map(|t| t / sum).collect(),
        })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dy, dx)` from the center.
    #[inline]
    pub fn tap(&self, dy: isize, dx: isize) -> f64 {
        let n = self.size() as isize;
        let r = self.radius as isize;
        self.taps[((dy + r) * n + dx + r) as usize]
    }

    /// Modulation transfer at `freq` cycles per LR pixel: magnitude of the
    /// DTFT of the central kernel row, normalized to unity at DC.
    pub fn mtf(&self, freq: f64) -> f64 {
        let r = self.radius as isize;
        let (mut re, mut im, mut dc) = (0.0, 0.0, 0.0);
        for x in -r..=r {
            let k = self.tap(0, x);
            let phase = -2.0 * std::f64::consts::PI * freq * x as f64 * self.spacing;
            re += k * phase.cos();
            im += k * phase.sin();
            dc += k;
        }
        (re * re + im * im).sqrt() / dc
    }
}

/// Free-function form of [`Psf::mtf`].
pub fn mtf_of_psf(psf: &Psf, freq: f64) -> f64 {
    psf.mtf(freq)
}

/// Bilinear resampling of `image` at `p + flow(p)`.
pub fn warp(image: &Raster, flow: &FlowField, boundary: Boundary) -> Result<Raster> {
    if flow.height() != image.height() || flow.width() != image.width() {
        return Err(Error::invalid(format!(
            "flow {}x{} does not match image {}x{}",
            flow.height(),
            flow.width(),
            image.height(),
            image.width()
        )));
    }
    let mut out = Raster::zeros(image.height(), image.width(), image.channels());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let [u, v] = flow.get(y, x);
            let sx = x as f64 + u;
            let sy = y as f64 + v;
            for c in 0..image.channels() {
                out.set(y, x, c, sample_bilinear(image, sy, sx, c, boundary));
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation at fractional position `(y, x)`.
#[inline]
pub fn sample_bilinear(image: &Raster, y: f64, x: f64, c: usize, boundary: Boundary) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v00 = boundary.fetch(image, yi, xi, c);
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    let v01 = boundary.fetch(image, yi, xi + 1, c);
    let v10 = boundary.fetch(image, yi + 1, xi, c);
    let v11 = boundary.fetch(image, yi + 1, xi + 1, c);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

/// Per-channel 2-D correlation with `psf`.
pub fn convolve(image: &Raster, psf: &Psf, boundary: Boundary) -> Result<Raster> {
    let n = psf.size();
    if n > image.height() || n > image.width() {
        return Err(Error::invalid(format!(
            "kernel {n}x{n} larger than image {}x{}",
            image.height(),
            image.width()
        )));
    }
    if psf.radius() == 0 {
        return Ok(image.map(|v| v * psf.taps()[0]));
    }
    let r = psf.radius() as isize;
    let mut out = Raster::zeros(image.height(), image.width(), image.channels());
    for y in 0..image.height() as isize {
        for x in 0..image.width() as isize {
            for c in 0..image.channels() {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += psf.tap(dy, dx) * boundary.fetch(image, y + dy, x + dx, c);
                    }
                }
                out.set(y as usize, x as usize, c, acc);
            }
        }
    }
    Ok(out)
}

/// Detector sampling model used when reducing the HR grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decimation {
    /// Mean over each non-overlapping `s × s` block (area integration).
    #[default]
    BlockAverage,
    /// Top-left sample of each block; used by exact interleave checks.
    PointSample,
}

impl Decimation {
    /// Position of the LR pixel center inside its HR block, in HR pixels.
    pub fn grid_offset(self, scale: usize) -> f64 {
        match self {
            Decimation::BlockAverage => (scale as f64 - 1.0) / 2.0,
            Decimation::PointSample => 0.0,
        }
    }
}

/// Non-overlapping `s × s` block average.
pub fn decimate(image: &Raster, s: usize) -> Result<Raster> {
    decimate_with(image, s, Decimation::BlockAverage)
}

pub fn decimate_with(image: &Raster, s: usize, mode: Decimation) -> Result<Raster> {
    if s == 0 {
        return Err(Error::invalid("decimation factor must be at least 1"));
    }
    if !image.height().is_multiple_of(s) || !image.width().is_multiple_of(s) {
        return Err(Error::invalid(format!(
            "{}x{} not divisible by {s}",
            image.height(),
            image.width()
        )));
    }
    if s == 1 {
        return Ok(image.clone());
    }
    let (h, w, ch) = (image.height() / s, image.width() / s, image.channels());
    let norm = 1.0 / (s * s) as f64;
    Ok(Raster::from_fn(h, w, ch, |y, x, c| match mode {
        Decimation::PointSample => image.get(y * s, x * s, c),
        Decimation::BlockAverage => {
            let mut acc = 0.0;
            for by in 0..s {
                for bx in 0..s {
                    acc += image.get(y * s + by, x * s + bx, c);
                }
            }
            acc * norm
        }
    }))
}

/// Block-average binning from the LAC grid to the GAC grid.
pub fn bin_gac(image: &Raster, factor: usize) -> Result<Raster> {
    decimate(image, factor)
}

/// Ground sample distance after binning by `factor`.
pub fn binned_pixel_size(pixel_size_m: f64, factor: usize) -> f64 {
    pixel_size_m * factor as f64
}

/// Additive zero-mean Gaussian noise with std `mean(image) / snr`.
/// `snr = ∞` returns the input unchanged.
pub fn add_noise(image: &Raster, snr: f64, seed: u64) -> Result<Raster> {
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    if snr.is_infinite() {
        return Ok(image.clone());
    }
    let std = image.mean().abs() / snr;
    if std == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(image.map(|v| v + normal.sample(&mut rng)))
}

/// Frame motion relative to the reference, in LR pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionSpec {
    /// Uniform shifts in `[0, 1)²` drawn from the config seed; frame 0 is pinned at zero.
    Random,
    /// One global `(dx, dy)` per frame.
    Translational(Vec<(f64, f64)>),
    /// One displacement field per frame, defined on the HR grid in LR pixel units.
    Dense(Vec<FlowField>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurstConfig {
    pub frames: usize,
    pub scale: usize,
    /// Blur kernel sampled on the HR grid.
    pub psf: Psf,
    pub motion: MotionSpec,
    /// Signal-to-noise ratio; `f64::INFINITY` disables noise.
    pub snr: f64,
    pub seed: u64,
    pub decimation: Decimation,
}

impl Default for BurstConfig {
    fn default() -> Self {
        BurstConfig {
            frames: 24,
            scale: 2,
            psf: Psf::gaussian_on_grid(0.5, 2).expect("default psf"),
            motion: MotionSpec::Random,
            snr: 800.0,
            seed: 0,
            decimation: Decimation::BlockAverage,
        }
    }
}

impl BurstConfig {
    /// One frame, no blur, no motion, no noise, unit scale.
    pub fn identity() -> Self {
        BurstConfig {
            frames: 1,
            scale: 1,
            psf: Psf::delta(),
            motion: MotionSpec::Translational(vec![(0.0, 0.0)]),
            snr: f64::INFINITY,
            seed: 0,
            decimation: Decimation::BlockAverage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("burst needs at least one frame"));
        }
        if self.scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid("snr must be positive"));
        }
        match &self.motion {
            MotionSpec::Random => {}
            MotionSpec::Translational(v) => {
                if v.len() != self.frames {
                    return Err(Error::invalid(format!(
                        "{} shifts for {} frames",
                        v.len(),
                        self.frames
                    )));
                }
                if v[0] != (0.0, 0.0) {
                    return Err(Error::invalid("reference frame must have zero motion"));
                }
            }
            MotionSpec::Dense(v) => {
                if v.len() != self.frames {
                    return Err(Error::invalid("one flow field per frame required"));
                }
                if !v[0].is_zero() {
                    return Err(Error::invalid("reference frame must have zero motion"));
                }
            }
        }
        Ok(())
    }

    /// Per-frame global shifts, drawing them for [`MotionSpec::Random`].
    pub fn shifts(&self) -> Option<Vec<(f64, f64)>> {
        match &self.motion {
            MotionSpec::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX));
                Some(
                    (0..self.frames)
                        .map(|k| {
                            if k == 0 {
                                (0.0, 0.0)
                            } else {
                                (rng.random::<f64>(), rng.random::<f64>())
                            }
                        })
                        .collect(),
                )
            }
            MotionSpec::Translational(v) => Some(v.clone()),
            MotionSpec::Dense(_) => None,
        }
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ordered low-resolution frames; frame 0 is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    pub frames: Vec<Raster>,
    pub true_flows: Option<Vec<FlowField>>,
    pub hr_truth: Option<Raster>,
}

impl Burst {
    pub fn new(frames: Vec<Raster>) -> Result<Burst> {
        let b = Burst {
            frames,
            true_flows: None,
            hr_truth: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn reference_index(&self) -> usize {
        0
    }

    pub fn reference(&self) -> &Raster {
        &self.frames[0]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::EmptyInput("burst has no frames".into()))?;
        if self.frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::invalid("burst frames differ in shape"));
        }
        if let Some(flows) = &self.true_flows {
            if flows.len() != self.frames.len() {
                return Err(Error::invalid("one true flow per frame required"));
            }
            if !flows[0].is_zero() {
                return Err(Error::invalid("reference flow must be zero"));
            }
        }
        Ok(())
    }

    /// Reorders frames (and their flows); `order[0]` must stay 0.
    pub fn permuted(&self, order: &[usize]) -> Result<Burst> {
        if order.len() != self.frames.len() || order.first() != Some(&0) {
            return Err(Error::invalid("permutation must keep the reference first"));
        }
        let mut seen = vec![false; order.len()];
        for &i in order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("not a permutation"));
            }
        }
        Ok(Burst {
            frames: order.iter().map(|&i| self.frames[i].clone()).collect(),
            true_flows: self
                .true_flows
                .as_ref()
                .map(|f| order.iter().map(|&i| f[i].clone()).collect()),
            hr_truth: self.hr_truth.clone(),
        })
    }
}

/// Runs the full degradation chain once per frame.
pub fn synthesize_burst(hr: &Raster, cfg: &BurstConfig) -> Result<Burst> {
    cfg.validate()?;
    let s = cfg.scale;
    if !hr.height().is_multiple_of(s) || !hr.width().is_multiple_of(s) {
        return Err(Error::invalid(format!(
            "scene {}x{} not divisible by scale {s}",
            hr.height(),
            hr.width()
        )));
    }
    let (lh, lw) = (hr.height() / s, hr.width() / s);
    let shifts = cfg.shifts();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut flows = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let (hr_flow, lr_flow) = match (&shifts, &cfg.motion) {
            (Some(sh), _) => {
                let (dx, dy) = sh[k];
                (
                    FlowField::constant(hr.height(), hr.width(), dx * s as f64, dy * s as f64),
                    FlowField::constant(lh, lw, dx, dy),
                )
            }
            (None, MotionSpec::Dense(fields)) => {
                let f = &fields[k];
                if f.height() != hr.height() || f.width() != hr.width() {
                    return Err(Error::invalid(
                        "dense motion must be defined on the HR grid",
                    ));
                }
                (f.scaled(s as f64), block_average_flow(f, s))
            }
            (None, _) => unreachable!("shifts are defined for non-dense motion"),
        };
        let moved = if hr_flow.is_zero() {
            hr.clone()
        } else {
            warp(hr, &hr_flow, Boundary::Replicate)?
        };
        let blurred = convolve(&moved, &cfg.psf, Boundary::Replicate)?;
        let lr = decimate_with(&blurred, s, cfg.decimation)?;
        frames.push(add_noise(&lr, cfg.snr, derive_seed(cfg.seed, k as u64))?);
        flows.push(lr_flow);
    }
    Ok(Burst {
        frames,
        true_flows: Some(flows),
        hr_truth: Some(hr.clone()),
    })
}

fn block_average_flow(f: &FlowField, s: usize) -> FlowField {
    let (h, w) = (f.height() / s, f.width() / s);
    let mut out = FlowField::zeros(h, w);
    let n = (s * s) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0, 0.0];
            for by in 0..s {
                for bx in 0..s {
                    let [u, v] = f.get(y * s + by, x * s + bx);
                    acc[0] += u;
                    acc[1] += v;
                }
            }
            out.set(y, x, [acc[0] / n, acc[1] / n]);
        }
    }
    out
}

/// Minimum number of frames for a ×`s` reconstruction.
pub fn required_samples(s: f64) -> usize {
    (s * s).ceil() as usize
}

/// Sub-pixel shift step (LR pixels) that tiles the phase grid at factor `s`.
pub fn required_shift(s: f64) -> f64 {
    1.0 / s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseCoverage {
    pub scale: usize,
    /// Row-major `scale × scale` occupancy; row indexes the y phase.
    pub counts: Vec<usize>,
    pub feasible: bool,
}

impl PhaseCoverage {
    pub fn count(&self, phase_y: usize, phase_x: usize) -> usize {
        self.counts[phase_y * self.scale + phase_x]
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Bins the fractional parts of `shifts` into the `s × s` phase grid.
pub fn phase_coverage(shifts: &[(f64, f64)], s: usize) -> Result<PhaseCoverage> {
    if shifts.is_empty() {
        return Err(Error::EmptyInput("no shifts".into()));
    }
    if s == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let cell = |d: f64| -> usize {
        let frac = d - d.floor();
        ((frac * s as f64 + 1e-9).floor() as usize) % s
    };
    let mut counts = vec![0; s * s];
    for &(dx, dy) in shifts {
        counts[cell(dy) * s + cell(dx)] += 1;
    }
    let feasible = counts.iter().all(|&c| c > 0);
    Ok(PhaseCoverage {
        scale: s,
        counts,
        feasible,
    })
}
