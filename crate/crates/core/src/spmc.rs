//! Sub-pixel motion compensation (SPMC) feature shift-and-add.
//!
//! Every LR feature vector `f_k(p)` is splatted with bilinear weights onto
//! the four HR cells around `s·(p + flow_k(p)) + origin`. Values and weights
//! are summed over frames and the fused map is their ratio:
//!
//! ```text
//! A(q) = Σ_k Σ_p w(q; s·(p + flow_k(p))) f_k(p)
//! W(q) = Σ_k Σ_p w(q; s·(p + flow_k(p)))
//! J(q) = A(q) / W(q)   where W(q) > eps, else 0 (flagged)
//! ```
//!
//! The block has no parameters. The backward pass differentiates `J` with
//! respect to both the features and the flows, including the flow
//! dependence of the normalizing weight. Splats landing outside the HR grid
//! are dropped and their weight is reported in [`HrFeature::clipped_weight`].
//!
//! Frames are accumulated in a canonical order derived from their content,
//! so the output is bit-identical under any permutation of the inputs.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raster::{FlowField, Raster};
use crate::real::Real;

/// Normalization floor for the fused weight map.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Channel-planar feature map: `depth` planes of `height × width` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<R> {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<R>,
}

impl<R: Real> FeatureMap<R> {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        FeatureMap {
            height,
            width,
            depth,
            data: vec![R::zero(); height * width * depth],
        }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::invalid("feature data length does not match shape"));
        }
        Ok(FeatureMap {
            height,
            width,
            depth,
            data,
        })
    }

    /// Planar copy of an interleaved raster.
    pub fn from_raster(r: &Raster) -> Self {
        let (h, w, c) = r.shape();
        let mut data = vec![R::zero(); h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] = R::of(r.data()[i * c + ch]);
            }
        }
        FeatureMap {
            height: h,
            width: w,
            depth: c,
            data,
        }
    }

    pub fn to_raster(&self) -> Raster {
        let n = self.height * self.width;
        Raster::from_fn(self.height, self.width, self.depth, |y, x, c| {
            self.data[c * n + y * self.width + x].as_f64()
        })
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[R] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Planar displacement field in LR pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap<R> {
    pub height: usize,
    pub width: usize,
    pub u: Vec<R>,
    pub v: Vec<R>,
}

impl<R: Real> FlowMap<R> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f64, v: f64) -> Self {
        FlowMap {
            height,
            width,
            u: vec![R::of(u); height * width],
            v: vec![R::of(v); height * width],
        }
    }

    pub fn from_field(f: &FlowField) -> Self {
        FlowMap {
            height: f.height(),
            width: f.width(),
            u: f.data().iter().map(|uv| R::of(uv[0])).collect(),
            v: f.data().iter().map(|uv| R::of(uv[1])).collect(),
        }
    }

    pub fn to_field(&self) -> FlowField {
        let data = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| [u.as_f64(), v.as_f64()])
            .collect();
        FlowField::from_vec(self.height, self.width, data).expect("shape is consistent")
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_zero())
    }
}

/// Fused HR feature map with its accumulated weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HrFeature<R> {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Channel-planar fused values; zero where the cell is uncovered.
    pub values: Vec<R>,
    pub weights: Vec<R>,
    /// Total splat weight that fell outside the HR grid.
    pub clipped_weight: f64,
    pub eps: R,
}

impl<R: Real> HrFeature<R> {
    #[inline]
    pub fn covered(&self, i: usize) -> bool {
        self.weights[i] > self.eps
    }

    pub fn coverage(&self) -> f64 {
        let n = self.weights.len();
        (0..n).filter(|&i| self.covered(i)).count() as f64 / n.max(1) as f64
    }

    pub fn to_feature_map(&self) -> FeatureMap<R> {
        FeatureMap {
            height: self.height,
            width: self.width,
            depth: self.depth,
            data: self.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpmcOptions {
    pub scale: usize,
    pub eps: f64,
    /// HR-pixel offset added to every splat position. Zero maps LR pixel
    /// `p` onto HR cell `s·p`; `(s - 1) / 2` centers it in its block.
    pub origin: f64,
}

impl SpmcOptions {
    pub fn new(scale: usize) -> Self {
        SpmcOptions {
            scale,
            eps: DEFAULT_EPS,
            origin: 0.0,
        }
    }

    pub fn with_origin(mut self, origin: f64) -> Self {
        self.origin = origin;
        self
    }
}

/// Gradients returned by the backward pass, in the caller's frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmcGrads<R> {
    pub features: Vec<FeatureMap<R>>,
    pub flows: Vec<FlowMap<R>>,
}

fn check_inputs<R: Real>(
    features: &[FeatureMap<R>],
    flows: &[FlowMap<R>],
    opts: &SpmcOptions,
) -> Result<()> {
    let first = features
        .first()
        .ok_or_else(|| Error::EmptyInput("no frames to fuse".into()))?;
    if opts.scale == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    if flows.len() != features.len() {
        return Err(Error::invalid(format!(
            "{} flows for {} feature maps",
            flows.len(),
            features.len()
        )));
    }
    for (f, fl) in features.iter().zip(flows) {
        if f.height != first.height || f.width != first.width || f.depth != first.depth {
            return Err(Error::invalid("feature maps differ in shape"));
        }
        if fl.height != f.height || fl.width != f.width {
            return Err(Error::invalid("flow shape does not match its feature map"));
        }
        if f.data.len() != f.height * f.width * f.depth
            || fl.u.len() != f.height * f.width
            || fl.v.len() != f.height * f.width
        {
            return Err(Error::invalid("buffer length does not match shape"));
        }
    }
    Ok(())
}

fn cmp_slices<R: Real>(a: &[R], b: &[R]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Content-derived accumulation order, independent of input order.
/// Frames comparing equal are identical, so their relative order is moot.
fn canonical_order<R: Real>(features: &[FeatureMap<R>], flows: &[FlowMap<R>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        cmp_slices(&flows[a].u, &flows[b].u)
            .then_with(|| cmp_slices(&flows[a].v, &flows[b].v))
            .then_with(|| cmp_slices(&features[a].data, &features[b].data))
    });
    order
}

/// One bilinear splat: up to four `(cell, weight, dweight/dX, dweight/dY)`.
#[derive(Clone, Copy)]
struct Splat<R> {
    cell: usize,
    w: R,
    dwx: R,
    dwy: R,
}

#[inline]
fn splat_targets<R: Real>(
    px: R,
    py: R,
    hr_w: usize,
    hr_h: usize,
    out: &mut [Option<Splat<R>>; 4],
) -> R {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = R::one();
    let xs = [(x0, one - fx, -one), (x0 + one, fx, one)];
    let ys = [(y0, one - fy, -one), (y0 + one, fy, one)];
    let mut clipped = R::zero();
    let mut i = 0;
    for &(yy, wy, dy) in &ys {
        for &(xx, wx, dx) in &xs {
            let w = wx * wy;
            let inside = xx >= R::zero()
                && yy >= R::zero()
                && xx < R::of(hr_w as f64)
                && yy < R::of(hr_h as f64);
            out[i] = if inside {
                let cell = yy.as_f64() as usize * hr_w + xx.as_f64() as usize;
                Some(Splat {
                    cell,
                    w,
                    dwx: dx * wy,
                    dwy: wx * dy,
                })
            } else {
                clipped += w;
                None
            };
            i += 1;
        }
    }
    clipped
}

struct Accum<R> {
    acc: Vec<R>,
    wsum: Vec<R>,
    clipped: f64,
}

/// Splat list of one frame as `(lr pixel, splat)` in pixel-major order.
fn frame_splats<R: Real>(
    fl: &FlowMap<R>,
    opts: &SpmcOptions,
    out: &mut Vec<(usize, Splat<R>)>,
) -> f64 {
    let (h, w) = (fl.height, fl.width);
    let s = opts.scale;
    let (hh, hw) = (h * s, w * s);
    let sr = R::of(s as f64);
    let origin = R::of(opts.origin);
    let mut targets = [None; 4];
    let mut clipped = 0.0;
    out.clear();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = sr * (R::of(x as f64) + fl.u[p]) + origin;
            let py = sr * (R::of(y as f64) + fl.v[p]) + origin;
            clipped += splat_targets(px, py, hw, hh, &mut targets).as_f64();
            out.extend(targets.iter().flatten().map(|t| (p, *t)));
        }
    }
    clipped
}

fn accumulate<R: Real>(
    features: &[FeatureMap<R>],
    flows: &[FlowMap<R>],
    opts: &SpmcOptions,
    order: &[usize],
) -> Accum<R> {
    let (h, w, d) = (features[0].height, features[0].width, features[0].depth);
    let hn = h * opts.scale * w * opts.scale;
    let mut acc = vec![R::zero(); hn * d];
    let mut wsum = vec![R::zero(); hn];
    let mut clipped = 0.0;
    let mut splats = Vec::with_capacity(4 * h * w);
    for &k in order {
        clipped += frame_splats(&flows[k], opts, &mut splats);
        for (_, t) in &splats {
            wsum[t.cell] += t.w;
        }
        for c in 0..d {
            let src = features[k].plane(c);
            let dst = &mut acc[c * hn..(c + 1) * hn];
            for (p, t) in &splats {
                dst[t.cell] += t.w * src[*p];
            }
        }
    }
    Accum { acc, wsum, clipped }
}

/// Splats, accumulates and normalizes `features` onto the HR grid.
pub fn spmc_forward<R: Real>(
    features: &[FeatureMap<R>],
    flows: &[FlowMap<R>],
    opts: &SpmcOptions,
) -> Result<HrFeature<R>> {
    check_inputs(features, flows, opts)?;
    let order = canonical_order(features, flows);
    Ok(normalize(
        features,
        opts,
        accumulate(features, flows, opts, &order),
    ))
}

fn normalize<R: Real>(features: &[FeatureMap<R>], opts: &SpmcOptions, a: Accum<R>) -> HrFeature<R> {
    let (h, w, d) = (features[0].height, features[0].width, features[0].depth);
    let (hh, hw) = (h * opts.scale, w * opts.scale);
    let hn = hh * hw;
    let eps = R::of(opts.eps);
    let mut values = a.acc;
    for c in 0..d {
        for (v, &wi) in values[c * hn..(c + 1) * hn].iter_mut().zip(&a.wsum) {
            *v = if wi > eps { *v / wi } else { R::zero() };
        }
    }
    HrFeature {
        height: hh,
        width: hw,
        depth: d,
        values,
        weights: a.wsum,
        clipped_weight: a.clipped,
        eps,
    }
}

/// Feature shift-and-add with the default floor and grid origin.
pub fn fuse<R: Real>(
    features: &[FeatureMap<R>],
    flows: &[FlowMap<R>],
    scale: usize,
) -> Result<HrFeature<R>> {
    spmc_forward(features, flows, &SpmcOptions::new(scale))
}

/// Analytic backward pass of [`spmc_forward`].
///
/// `grad_values` is dL/dJ in the planar layout of [`HrFeature::values`].
pub fn spmc_backward<R: Real>(
    grad_values: &[R],
    features: &[FeatureMap<R>],
    flows: &[FlowMap<R>],
    out: &HrFeature<R>,
    opts: &SpmcOptions,
) -> Result<SpmcGrads<R>> {
    check_inputs(features, flows, opts)?;
    let (h, w, d) = (features[0].height, features[0].width, features[0].depth);
    let s = opts.scale;
    let (hh, hw) = (h * s, w * s);
    let hn = hh * hw;
    if out.height != hh || out.width != hw || out.depth != d || grad_values.len() != hn * d {
        return Err(Error::invalid(
            "upstream gradient does not match the fused shape",
        ));
    }

    // dL/dA = g / W and dL/dW = -Σ_c g·J / W on covered cells.
    let mut g_acc = vec![R::zero(); hn * d];
    let mut g_w = vec![R::zero(); hn];
    let inv: Vec<R> = (0..hn)
        .map(|i| {
            if out.covered(i) {
                R::one() / out.weights[i]
            } else {
                R::zero()
            }
        })
        .collect();
    for c in 0..d {
        let gv = &grad_values[c * hn..(c + 1) * hn];
        let jv = &out.values[c * hn..(c + 1) * hn];
        let ga = &mut g_acc[c * hn..(c + 1) * hn];
        for i in 0..hn {
            ga[i] = gv[i] * inv[i];
            g_w[i] -= gv[i] * jv[i] * inv[i];
        }
    }

    let sr = R::of(s as f64);
    let n = h * w;
    let mut grads = SpmcGrads {
        features: Vec::with_capacity(features.len()),
        flows: Vec::with_capacity(features.len()),
    };
    let mut splats = Vec::with_capacity(4 * n);
    let mut gws = Vec::with_capacity(4 * n);
    for (f, fl) in features.iter().zip(flows) {
        frame_splats(fl, opts, &mut splats);
        let mut gf = FeatureMap::zeros(h, w, d);
        gws.clear();
        gws.extend(splats.iter().map(|(_, t)| g_w[t.cell]));
        for c in 0..d {
            let ga = &g_acc[c * hn..(c + 1) * hn];
            let src = f.plane(c);
            let dst = &mut gf.data[c * n..(c + 1) * n];
            for ((p, t), gw) in splats.iter().zip(gws.iter_mut()) {
                let g = ga[t.cell];
                dst[*p] += t.w * g;
                *gw += g * src[*p];
            }
        }
        let mut gflow = FlowMap::zeros(h, w);
        for ((p, t), &gw) in splats.iter().zip(&gws) {
            gflow.u[*p] += gw * t.dwx;
            gflow.v[*p] += gw * t.dwy;
        }
        gflow
            .u
            .iter_mut()
            .chain(gflow.v.iter_mut())
            .for_each(|v| *v *= sr);
        grads.features.push(gf);
        grads.flows.push(gflow);
    }
    Ok(grads)
}

type Saved<R> = (Vec<FeatureMap<R>>, Vec<FlowMap<R>>, HrFeature<R>);

/// Stateful wrapper that keeps the forward inputs for the backward pass.
#[derive(Debug, Clone)]
pub struct SpmcBlock<R> {
    opts: SpmcOptions,
    saved: Option<Saved<R>>,
}

impl<R: Real> SpmcBlock<R> {
    pub fn new(opts: SpmcOptions) -> Self {
        SpmcBlock { opts, saved: None }
    }

    pub fn options(&self) -> &SpmcOptions {
        &self.opts
    }

    pub fn forward(
        &mut self,
        features: Vec<FeatureMap<R>>,
        flows: Vec<FlowMap<R>>,
    ) -> Result<&HrFeature<R>> {
        let out = spmc_forward(&features, &flows, &self.opts)?;
        self.saved = Some((features, flows, out));
        Ok(&self.saved.as_ref().expect("just saved").2)
    }

    pub fn backward(&self, grad_values: &[R]) -> Result<SpmcGrads<R>> {
        let (f, fl, out) = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("spmc backward called before forward".into()))?;
        spmc_backward(grad_values, f, fl, out, &self.opts)
    }

    pub fn clear(&mut self) {
        self.saved = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        t: usize,
        h: usize,
        w: usize,
        d: usize,
        flow_amp: f64,
    ) -> (Vec<FeatureMap<f64>>, Vec<FlowMap<f64>>) {
        let feats = (0..t)
            .map(|_| {
                FeatureMap::from_vec(
                    h,
                    w,
                    d,
                    (0..h * w * d)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let flows = (0..t)
            .map(|_| FlowMap {
                height: h,
                width: w,
                u: (0..h * w)
                    .map(|_| rng.random_range(-flow_amp..flow_amp))
                    .collect(),
                v: (0..h * w)
                    .map(|_| rng.random_range(-flow_amp..flow_amp))
                    .collect(),
            })
            .collect();
        (feats, flows)
    }

    #[test]
    fn identity_case() {
        let f = FeatureMap::from_vec(3, 4, 2, (0..24).map(|i| i as f64 * 0.5).collect()).unwrap();
        let out = fuse(std::slice::from_ref(&f), &[FlowMap::zeros(3, 4)], 1).unwrap();
        assert_eq!(out.values, f.data);
        assert!(out.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weights_count_identical_frames() {
        let f = FeatureMap::<f64>::zeros(4, 4, 1);
        let out = fuse(&vec![f; 5], &vec![FlowMap::zeros(4, 4); 5], 1).unwrap();
        assert!(out.weights.iter().all(|&w| w == 5.0));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let none: Vec<FeatureMap<f64>> = vec![];
        assert!(matches!(fuse(&none, &[], 2), Err(Error::EmptyInput(_))));
        let f = FeatureMap::<f64>::zeros(4, 4, 1);
        assert!(fuse(std::slice::from_ref(&f), &[FlowMap::zeros(4, 5)], 2).is_err());
        assert!(fuse(&[f], &[], 2).is_err());
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let b = SpmcBlock::<f64>::new(SpmcOptions::new(2));
        assert!(matches!(b.backward(&[]), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, fl) = random_instance(&mut rng, 2, 4, 4, 2, 1.0);
        let opts = SpmcOptions::new(2);
        let out = spmc_forward(&f, &fl, &opts).unwrap();
        let g = spmc_backward(&vec![0.0; out.values.len()], &f, &fl, &out, &opts).unwrap();
        assert!(g.features.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        assert!(g.flows.iter().all(|m| m.is_zero()));
    }

    #[test]
    fn identity_backward_passes_gradient_through() {
        let f = FeatureMap::from_vec(3, 3, 1, (0..9).map(f64::from).collect()).unwrap();
        let opts = SpmcOptions::new(1);
        let out = spmc_forward(std::slice::from_ref(&f), &[FlowMap::zeros(3, 3)], &opts).unwrap();
        let up: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let g = spmc_backward(&up, &[f], &[FlowMap::zeros(3, 3)], &out, &opts).unwrap();
        assert_eq!(g.features[0].data, up);
    }

    #[test]
    fn mass_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (f, fl) = random_instance(&mut rng, 4, 6, 5, 1, 2.5);
        let out = spmc_forward(&f, &fl, &SpmcOptions::new(2)).unwrap();
        let total: f64 = out.weights.iter().sum::<f64>() + out.clipped_weight;
        assert!((total - 4.0 * 30.0).abs() < 1e-9, "{total}");
        assert!(out.clipped_weight > 0.0);
    }

    #[test]
    fn uncovered_cells_are_zero() {
        let f = FeatureMap::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = fuse(&[f], &[FlowMap::zeros(2, 2)], 2).unwrap();
        assert_eq!(out.coverage(), 0.25);
        assert_eq!(out.values[1], 0.0);
        assert!(!out.covered(1));
    }
}
