//! 3×3 convolution (im2col + GEMM), ReLU and bilinear resizing, each with
//! its backward pass. Tensors are channel-planar [`FeatureMap`]s.

use rand::Rng;

use crate::real::{gemm, MatRef, Real};
use crate::spmc::FeatureMap;

const K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<R> {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `cout × cin × 3 × 3`, row-major.
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

/// Gradients of one convolution's weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<R> {
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

impl<R: Real> ConvGrad<R> {
    pub fn zeros_like(c: &Conv2d<R>) -> Self {
        ConvGrad {
            weight: vec![R::zero(); c.weight.len()],
            bias: vec![R::zero(); c.bias.len()],
        }
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - K) / stride + 1
}

impl<R: Real> Conv2d<R> {
    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Conv2d {
            cin,
            cout,
            stride,
            weight: vec![R::zero(); cout * cin * K * K],
            bias: vec![R::zero(); cout],
        }
    }

    /// Weights and biases uniform in ±1/√fan_in.
    pub fn uniform(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((cin * K * K) as f64).sqrt();
        let mut c = Conv2d::zeros(cin, cout, stride);
        for w in c.weight.iter_mut().chain(c.bias.iter_mut()) {
            *w = R::of(rng.random_range(-bound..bound));
        }
        c
    }

    pub fn fan_in(&self) -> usize {
        self.cin * K * K
    }

    /// Valid output columns `[lo, hi)` for tap `kx` and the first input column.
    fn span(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let st = self.stride;
        // ix = ox·stride + kx − 1 must lie in [0, w)
        let lo = if kx == 0 { 1usize.div_ceil(st) } else { 0 };
        let hi = ((w + 1 - kx).div_ceil(st)).min(wo);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &FeatureMap<R>, ho: usize, wo: usize) -> Vec<R> {
        let (h, w, st) = (x.height, x.width, self.stride);
        let p = ho * wo;
        let mut cols = vec![R::zero(); self.cin * K * K * p];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..K {
                for kx in 0..K {
                    let row = &mut cols[((ci * K + ky) * K + kx) * p..][..p];
                    let (lo, hi) = self.span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * st + kx - 1;
                        if st == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src[ix0 + i * st];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[R], h: usize, w: usize, ho: usize, wo: usize) -> FeatureMap<R> {
        let p = ho * wo;
        let st = self.stride;
        let mut g = FeatureMap::zeros(h, w, self.cin);
        for ci in 0..self.cin {
            let plane = &mut g.data[ci * h * w..][..h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &cols[((ci * K + ky) * K + kx) * p..][..p];
                    let (lo, hi) = self.span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * st + kx - 1;
                        if st == 1 {
                            dst[ix0..ix0 + (hi - lo)]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        } else {
                            for (i, &v) in src.iter().enumerate() {
                                dst[ix0 + i * st] += v;
                            }
                        }
                    }
                }
            }
        }
        g
    }

    /// Unfolded input patches, kept from the forward pass for the backward one.
    pub fn columns(&self, x: &FeatureMap<R>) -> Columns<R> {
        assert_eq!(x.depth, self.cin, "conv input depth");
        let (ho, wo) = (
            out_size(x.height, self.stride),
            out_size(x.width, self.stride),
        );
        Columns {
            data: self.im2col(x, ho, wo),
            height: x.height,
            width: x.width,
            out_height: ho,
            out_width: wo,
        }
    }

    pub fn forward(&self, x: &FeatureMap<R>) -> FeatureMap<R> {
        self.forward_columns(&self.columns(x))
    }

    pub fn forward_columns(&self, cols: &Columns<R>) -> FeatureMap<R> {
        let p = cols.out_height * cols.out_width;
        let mut out = FeatureMap::zeros(cols.out_height, cols.out_width, self.cout);
        for (co, b) in self.bias.iter().enumerate() {
            out.data[co * p..][..p].iter_mut().for_each(|v| *v = *b);
        }
        let kk = self.fan_in();
        gemm(
            R::one(),
            MatRef::new(&self.weight, self.cout, kk),
            false,
            MatRef::new(&cols.data, kk, p),
            false,
            R::one(),
            &mut out.data,
        );
        out
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx when
    /// `need_input` is set.
    pub fn backward(
        &self,
        x: &FeatureMap<R>,
        grad_out: &FeatureMap<R>,
        grad: &mut ConvGrad<R>,
        need_input: bool,
    ) -> Option<FeatureMap<R>> {
        self.backward_columns(&self.columns(x), grad_out, grad, need_input)
    }

    pub fn backward_columns(
        &self,
        cols: &Columns<R>,
        grad_out: &FeatureMap<R>,
        grad: &mut ConvGrad<R>,
        need_input: bool,
    ) -> Option<FeatureMap<R>> {
        let (ho, wo) = (grad_out.height, grad_out.width);
        assert_eq!(
            (ho, wo),
            (cols.out_height, cols.out_width),
            "gradient shape"
        );
        let p = ho * wo;
        let kk = self.fan_in();
        for (co, gb) in grad.bias.iter_mut().enumerate() {
            *gb += grad_out.data[co * p..][..p].iter().copied().sum::<R>();
        }
        gemm(
            R::one(),
            MatRef::new(&grad_out.data, self.cout, p),
            false,
            MatRef::new(&cols.data, kk, p),
            true,
            R::one(),
            &mut grad.weight,
        );
        if !need_input {
            return None;
        }
        let mut gcols = vec![R::zero(); kk * p];
        gemm(
            R::one(),
            MatRef::new(&self.weight, self.cout, kk),
            true,
            MatRef::new(&grad_out.data, self.cout, p),
            false,
            R::zero(),
            &mut gcols,
        );
        Some(self.col2im(&gcols, cols.height, cols.width, ho, wo))
    }
}

/// im2col matrix of one conv input.
#[derive(Debug, Clone)]
pub struct Columns<R> {
    data: Vec<R>,
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
}

pub fn relu_inplace<R: Real>(x: &mut FeatureMap<R>) {
    x.data.iter_mut().for_each(|v| {
        if *v < R::zero() {
            *v = R::zero()
        }
    });
}

/// Zeroes the gradient where the ReLU output was not positive.
pub fn relu_backward<R: Real>(out: &FeatureMap<R>, grad: &mut FeatureMap<R>) {
    grad.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= R::zero() {
            *g = R::zero()
        }
    });
}

/// Source taps of half-pixel-aligned linear resampling from `n` to `m`.
fn taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `h × w` (pixel-center alignment, edge clamped).
pub fn resize_bilinear<R: Real>(x: &FeatureMap<R>, h: usize, w: usize) -> FeatureMap<R> {
    let ty = taps(x.height, h);
    let tx = taps(x.width, w);
    let mut out = FeatureMap::zeros(h, w, x.depth);
    for c in 0..x.depth {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = R::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = R::of(fx);
                let top = src[y0 * x.width + x0] * (R::one() - fx) + src[y0 * x.width + x1] * fx;
                let bot = src[y1 * x.width + x0] * (R::one() - fx) + src[y1 * x.width + x1] * fx;
                dst[oy * w + ox] = top * (R::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<R: Real>(
    grad_out: &FeatureMap<R>,
    h: usize,
    w: usize,
) -> FeatureMap<R> {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut g = FeatureMap::zeros(h, w, grad_out.depth);
    for c in 0..grad_out.depth {
        let src = grad_out.plane(c);
        let dst = &mut g.data[c * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = R::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = R::of(fx);
                let v = src[oy * ow + ox];
                let (top, bot) = (v * (R::one() - fy), v * fy);
                dst[y0 * w + x0] += top * (R::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (R::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(c: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let (ho, wo) = (out_size(x.height, c.stride), out_size(x.width, c.stride));
        let mut out = FeatureMap::zeros(ho, wo, c.cout);
        for co in 0..c.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias[co];
                    for ci in 0..c.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * c.stride + ky) as isize - 1;
                                let ix = (ox * c.stride + kx) as isize - 1;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < x.height
                                    && (ix as usize) < x.width
                                {
                                    acc += c.weight[((co * c.cin + ci) * 3 + ky) * 3 + kx]
                                        * x.data
                                            [(ci * x.height + iy as usize) * x.width + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn random_map(h: usize, w: usize, d: usize, rng: &mut impl Rng) -> FeatureMap<f64> {
        FeatureMap::from_vec(
            h,
            w,
            d,
            (0..h * w * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let c = Conv2d::<f64>::uniform(3, 4, stride, &mut rng);
            let x = random_map(7, 6, 3, &mut rng);
            let a = c.forward(&x);
            let b = naive(&c, &x);
            assert_eq!((a.height, a.width), (b.height, b.width));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> is linear in x and w: check both gradients by exact identities
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for stride in [1, 2] {
            let c = Conv2d::<f64>::uniform(2, 3, stride, &mut rng);
            let x = random_map(5, 6, 2, &mut rng);
            let y = c.forward(&x);
            let g = random_map(y.height, y.width, y.depth, &mut rng);
            let mut grad = ConvGrad::zeros_like(&c);
            let gx = c.backward(&x, &g, &mut grad, true).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
            let mut c0 = c.clone();
            c0.bias.iter_mut().for_each(|b| *b = 0.0);
            let lin = c0.forward(&x);
            assert!((dot(&lin.data, &g.data) - dot(&gx.data, &x.data)).abs() < 1e-10);
            assert!((dot(&lin.data, &g.data) - dot(&grad.weight, &c.weight)).abs() < 1e-10);
            let gsum: f64 = g.data.iter().sum();
            assert!((grad.bias.iter().sum::<f64>() - gsum).abs() < 1e-10);
        }
    }

    #[test]
    fn resize_adjoint_and_constants() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = random_map(4, 5, 2, &mut rng);
        let y = resize_bilinear(&x, 8, 10);
        let g = random_map(8, 10, 2, &mut rng);
        let gx = resize_bilinear_backward(&g, 4, 5);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        assert!((dot(&y.data, &g.data) - dot(&gx.data, &x.data)).abs() < 1e-12);
        let c = FeatureMap::from_vec(3, 3, 1, vec![2.0; 9]).unwrap();
        assert!(resize_bilinear(&c, 6, 6)
            .data
            .iter()
            .all(|&v| (v - 2.0f64).abs() < 1e-15));
    }
}
