//! The fixed multi-frame network: per-frame encoder, hourglass motion
//! estimator, SPMC fusion and decoder, with a hand-written reverse pass.
//!
//! ```text
//! x_k        = (frame_k - mean_0) / std_0
//! features_k = E(x_k)                          32 channels, LR grid
//! flow_k     = (H(frame_k, frame_0) - H(frame_0, frame_k)) / 2, flow_0 = 0
//! J          = SPMC(features, flows)           HR grid
//! SR         = D(J) + W(SPMC(frames, flows))
//! ```
//!
//! `W` is a fixed Wiener restoration for the training optics, so the second
//! term is a parameter-free skip path and the decoder learns a correction to
//! a restored shift-and-add of the raw frames.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::classic::{deblur_wiener, ClassicParams};
use crate::error::{Error, Result};
use crate::imaging::{Burst, Decimation};
use crate::net::layers::{
    relu_backward, relu_inplace, resize_bilinear, resize_bilinear_backward, Columns, Conv2d,
    ConvGrad,
};
use crate::raster::{FlowField, Raster};
use crate::real::Real;
use crate::spmc::{spmc_backward, spmc_forward, FeatureMap, FlowMap, HrFeature, SpmcOptions};

/// Feature depth of encoder output and decoder input.
pub const FEATURES: usize = 32;

pub const ENCODER: [usize; 3] = [0, 1, 2];
pub const DECODER: [usize; 3] = [3, 4, 5];
pub const MOTION_DOWN1: usize = 6;
pub const MOTION_DOWN2: usize = 7;
pub const MOTION_UP1: usize = 8;
pub const MOTION_UP2: usize = 9;
pub const MOTION_HEAD: usize = 10;

pub const LAYER_NAMES: [&str; 11] = [
    "encoder.0",
    "encoder.1",
    "encoder.2",
    "decoder.0",
    "decoder.1",
    "decoder.2",
    "motion.down1",
    "motion.down2",
    "motion.up1",
    "motion.up2",
    "motion.head",
];

/// `(cin, cout, stride)` per layer for `c` image channels.
pub fn layer_shapes(c: usize) -> [(usize, usize, usize); 11] {
    [
        (c, FEATURES, 1),
        (FEATURES, FEATURES, 1),
        (FEATURES, FEATURES, 1),
        (FEATURES, FEATURES, 1),
        (FEATURES, FEATURES, 1),
        (FEATURES, c, 1),
        (2 * c, 16, 2),
        (16, 32, 2),
        (32, 16, 1),
        (16, 16, 1),
        (16, 2, 1),
    ]
}

pub fn is_motion_layer(i: usize) -> bool {
    i >= MOTION_DOWN1
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<R> {
    pub channels: usize,
    pub layers: Vec<Conv2d<R>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads<R> {
    pub layers: Vec<ConvGrad<R>>,
}

impl<R: Real> NetGrads<R> {
    pub fn zeros_like(p: &NetParams<R>) -> Self {
        NetGrads {
            layers: p.layers.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &NetGrads<R>, k: R) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight
                .iter_mut()
                .zip(&b.weight)
                .for_each(|(x, y)| *x += *y * k);
            a.bias
                .iter_mut()
                .zip(&b.bias)
                .for_each(|(x, y)| *x += *y * k);
        }
    }

    pub fn motion_is_zero(&self) -> bool {
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, _)| is_motion_layer(*i))
            .all(|(_, g)| g.weight.iter().chain(&g.bias).all(|v| *v == R::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.iter().chain(&g.bias).all(|v| v.is_finite()))
    }
}

impl<R: Real> NetParams<R> {
    /// Seeded uniform ±1/√fan_in initialization. The flow head and the
    /// decoder's output layer start at zero, so the untrained network
    /// predicts zero motion and returns the restored shift-and-add of the
    /// frames.
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("network needs at least one channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_shapes(channels)
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                if i == MOTION_HEAD || i == DECODER[2] {
                    Conv2d::zeros(cin, cout, stride)
                } else {
                    Conv2d::uniform(cin, cout, stride, &mut rng)
                }
            })
            .collect();
        Ok(NetParams { channels, layers })
    }

    pub fn zeros(channels: usize) -> Self {
        NetParams {
            channels,
            layers: layer_shapes(channels)
                .iter()
                .map(|&(a, b, s)| Conv2d::zeros(a, b, s))
                .collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> NetParams<S> {
        let conv = |c: &Conv2d<R>| Conv2d {
            cin: c.cin,
            cout: c.cout,
            stride: c.stride,
            weight: c.weight.iter().map(|v| S::of(v.as_f64())).collect(),
            bias: c.bias.iter().map(|v| S::of(v.as_f64())).collect(),
        };
        NetParams {
            channels: self.channels,
            layers: self.layers.iter().map(conv).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Flat view of parameter `i` in a fixed global order (weights then bias,
    /// layer by layer).
    pub fn get(&self, mut i: usize) -> R {
        for l in &self.layers {
            if i < l.weight.len() {
                return l.weight[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: R) {
        for l in &mut self.layers {
            if i < l.weight.len() {
                l.weight[i] = v;
                return;
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                l.bias[i] = v;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }
}

impl<R: Real> NetGrads<R> {
    pub fn get(&self, mut i: usize) -> R {
        for l in &self.layers {
            if i < l.weight.len() {
                return l.weight[i];
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }
}

/// Text description of the architecture; its digest identifies checkpoints.
pub fn architecture(channels: usize) -> String {
    let mut s = String::from("burst-spmc-net v1;skip=wiener-spmc-frames;motion=antisymmetric,pooled-standardized;encoder-input=ref-standardized");
    for (name, (cin, cout, stride)) in LAYER_NAMES.iter().zip(layer_shapes(channels)) {
        s.push_str(&format!(";{name}:conv3x3:{cin}->{cout}/s{stride}"));
    }
    s
}

pub fn architecture_hash(channels: usize) -> String {
    let d = Sha256::digest(architecture(channels).as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
struct EncTape<R> {
    cols: [Columns<R>; 3],
    a1: FeatureMap<R>,
    a2: FeatureMap<R>,
}

#[derive(Debug, Clone)]
struct HalfTape<R> {
    x: FeatureMap<R>,
    a: FeatureMap<R>,
    b: FeatureMap<R>,
    ub: FeatureMap<R>,
    u1: FeatureMap<R>,
    us: FeatureMap<R>,
    u2: FeatureMap<R>,
}

/// Tapes of the two estimator passes, `(frame, reference)` then swapped.
#[derive(Debug, Clone)]
struct MotionTape<R>([HalfTape<R>; 2]);

#[derive(Debug, Clone)]
struct DecTape<R> {
    cols: [Columns<R>; 3],
    c1: FeatureMap<R>,
    c2: FeatureMap<R>,
}

/// Stacks a frame pair, standardized by the pooled mean and spread of both.
fn motion_input<R: Real>(frame: &FeatureMap<R>, reference: &FeatureMap<R>) -> FeatureMap<R> {
    let all = || frame.data.iter().chain(&reference.data).map(|v| v.as_f64());
    let n = (frame.data.len() + reference.data.len()) as f64;
    let mean = all().sum::<f64>() / n;
    let var = all().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let inv = 1.0 / (var.sqrt() + 1e-3);
    let (m, k) = (R::of(mean), R::of(inv));
    let mut data = Vec::with_capacity(2 * frame.data.len());
    data.extend(frame.data.iter().map(|&v| (v - m) * k));
    data.extend(reference.data.iter().map(|&v| (v - m) * k));
    FeatureMap {
        height: frame.height,
        width: frame.width,
        depth: 2 * frame.depth,
        data,
    }
}

/// Mean and inverse spread used to standardize a burst by its reference.
fn spread<R: Real>(reference: &FeatureMap<R>) -> (R, R) {
    let n = reference.data.len() as f64;
    let mean = reference.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = reference
        .data
        .iter()
        .map(|v| (v.as_f64() - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    (R::of(mean), R::of(1.0 / (var.sqrt() + 1e-3)))
}

/// Optics blur (LR pixels) the skip-path restoration inverts.
pub const SKIP_SIGMA: f64 = 0.5;

/// Wiener restoration of the fused frames for the training optics, with unit
/// DC gain. On the mirrored extension the operator is a symmetric matrix, so
/// it is also its own adjoint.
fn restore<R: Real>(x: &FeatureMap<R>, s: usize) -> Result<FeatureMap<R>> {
    let p = ClassicParams::for_system(s, SKIP_SIGMA, Decimation::BlockAverage)?;
    let Some(psf) = &p.restore_psf else {
        return Ok(x.clone());
    };
    let h0: f64 = psf.taps().iter().sum();
    let gain = (h0 * h0 + p.wiener_nsr) / h0;
    Ok(FeatureMap::from_raster(
        &deblur_wiener(&x.to_raster(), psf, p.wiener_nsr)?.map(|v| v * gain),
    ))
}

fn add_into<R: Real>(a: &mut FeatureMap<R>, b: &FeatureMap<R>) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
}

impl<R: Real> NetParams<R> {
    fn encode_t(&self, x: &FeatureMap<R>) -> (FeatureMap<R>, EncTape<R>) {
        let [l0, l1, l2] = ENCODER.map(|i| &self.layers[i]);
        let k0 = l0.columns(x);
        let mut a1 = l0.forward_columns(&k0);
        relu_inplace(&mut a1);
        let k1 = l1.columns(&a1);
        let mut a2 = l1.forward_columns(&k1);
        relu_inplace(&mut a2);
        let k2 = l2.columns(&a2);
        let f = l2.forward_columns(&k2);
        (
            f,
            EncTape {
                cols: [k0, k1, k2],
                a1,
                a2,
            },
        )
    }

    fn encode_backward(&self, t: &EncTape<R>, g: &FeatureMap<R>, grads: &mut NetGrads<R>) {
        let [l0, l1, l2] = ENCODER.map(|i| &self.layers[i]);
        let mut g2 = l2
            .backward_columns(&t.cols[2], g, &mut grads.layers[ENCODER[2]], true)
            .expect("input gradient");
        relu_backward(&t.a2, &mut g2);
        let mut g1 = l1
            .backward_columns(&t.cols[1], &g2, &mut grads.layers[ENCODER[1]], true)
            .expect("input gradient");
        relu_backward(&t.a1, &mut g1);
        l0.backward_columns(&t.cols[0], &g1, &mut grads.layers[ENCODER[0]], false);
    }

    /// Antisymmetrized estimate `(H(frame, ref) - H(ref, frame)) / 2`, so
    /// identical inputs give exactly zero flow.
    fn motion_t(
        &self,
        frame: &FeatureMap<R>,
        reference: &FeatureMap<R>,
    ) -> (FlowMap<R>, MotionTape<R>) {
        let (fwd, t0) = self.motion_half(frame, reference);
        let (bwd, t1) = self.motion_half(reference, frame);
        let half = R::of(0.5);
        let mix = |a: &[R], b: &[R]| a.iter().zip(b).map(|(&p, &q)| (p - q) * half).collect();
        let flow = FlowMap {
            height: fwd.height,
            width: fwd.width,
            u: mix(&fwd.u, &bwd.u),
            v: mix(&fwd.v, &bwd.v),
        };
        (flow, MotionTape([t0, t1]))
    }

    fn motion_backward(&self, t: &MotionTape<R>, g: &FlowMap<R>, grads: &mut NetGrads<R>) {
        let scaled = |k: f64| FlowMap {
            height: g.height,
            width: g.width,
            u: g.u.iter().map(|&v| v * R::of(k)).collect(),
            v: g.v.iter().map(|&v| v * R::of(k)).collect(),
        };
        self.motion_half_backward(&t.0[0], &scaled(0.5), grads);
        self.motion_half_backward(&t.0[1], &scaled(-0.5), grads);
    }

    fn motion_half(
        &self,
        frame: &FeatureMap<R>,
        reference: &FeatureMap<R>,
    ) -> (FlowMap<R>, HalfTape<R>) {
        let x = motion_input(frame, reference);
        let mut a = self.layers[MOTION_DOWN1].forward(&x);
        relu_inplace(&mut a);
        let mut b = self.layers[MOTION_DOWN2].forward(&a);
        relu_inplace(&mut b);
        let ub = resize_bilinear(&b, a.height, a.width);
        let mut u1 = self.layers[MOTION_UP1].forward(&ub);
        relu_inplace(&mut u1);
        let mut s1 = u1.clone();
        add_into(&mut s1, &a);
        let us = resize_bilinear(&s1, x.height, x.width);
        let mut u2 = self.layers[MOTION_UP2].forward(&us);
        relu_inplace(&mut u2);
        let head = self.layers[MOTION_HEAD].forward(&u2);
        let n = head.height * head.width;
        let flow = FlowMap {
            height: head.height,
            width: head.width,
            u: head.data[..n].to_vec(),
            v: head.data[n..].to_vec(),
        };
        (
            flow,
            HalfTape {
                x,
                a,
                b,
                ub,
                u1,
                us,
                u2,
            },
        )
    }

    fn motion_half_backward(&self, t: &HalfTape<R>, g: &FlowMap<R>, grads: &mut NetGrads<R>) {
        let mut data = g.u.clone();
        data.extend_from_slice(&g.v);
        let gh = FeatureMap {
            height: g.height,
            width: g.width,
            depth: 2,
            data,
        };
        let mut gu2 = self.layers[MOTION_HEAD]
            .backward(&t.u2, &gh, &mut grads.layers[MOTION_HEAD], true)
            .expect("input gradient");
        relu_backward(&t.u2, &mut gu2);
        let gus = self.layers[MOTION_UP2]
            .backward(&t.us, &gu2, &mut grads.layers[MOTION_UP2], true)
            .expect("input gradient");
        let gs1 = resize_bilinear_backward(&gus, t.a.height, t.a.width);
        let mut ga = gs1.clone();
        let mut gu1 = gs1;
        relu_backward(&t.u1, &mut gu1);
        let gub = self.layers[MOTION_UP1]
            .backward(&t.ub, &gu1, &mut grads.layers[MOTION_UP1], true)
            .expect("input gradient");
        let mut gb = resize_bilinear_backward(&gub, t.b.height, t.b.width);
        relu_backward(&t.b, &mut gb);
        let ga2 = self.layers[MOTION_DOWN2]
            .backward(&t.a, &gb, &mut grads.layers[MOTION_DOWN2], true)
            .expect("input gradient");
        add_into(&mut ga, &ga2);
        relu_backward(&t.a, &mut ga);
        self.layers[MOTION_DOWN1].backward(&t.x, &ga, &mut grads.layers[MOTION_DOWN1], false);
    }

    fn decode_t(&self, j: FeatureMap<R>) -> (FeatureMap<R>, DecTape<R>) {
        let [l0, l1, l2] = DECODER.map(|i| &self.layers[i]);
        let k0 = l0.columns(&j);
        drop(j);
        let mut c1 = l0.forward_columns(&k0);
        relu_inplace(&mut c1);
        let k1 = l1.columns(&c1);
        let mut c2 = l1.forward_columns(&k1);
        relu_inplace(&mut c2);
        let k2 = l2.columns(&c2);
        let out = l2.forward_columns(&k2);
        (
            out,
            DecTape {
                cols: [k0, k1, k2],
                c1,
                c2,
            },
        )
    }

    fn decode_backward(
        &self,
        t: &DecTape<R>,
        g: &FeatureMap<R>,
        grads: &mut NetGrads<R>,
    ) -> FeatureMap<R> {
        let [l0, l1, l2] = DECODER.map(|i| &self.layers[i]);
        let mut g2 = l2
            .backward_columns(&t.cols[2], g, &mut grads.layers[DECODER[2]], true)
            .expect("input gradient");
        relu_backward(&t.c2, &mut g2);
        let mut g1 = l1
            .backward_columns(&t.cols[1], &g2, &mut grads.layers[DECODER[1]], true)
            .expect("input gradient");
        relu_backward(&t.c1, &mut g1);
        l0.backward_columns(&t.cols[0], &g1, &mut grads.layers[DECODER[0]], true)
            .expect("input gradient")
    }
}

/// Forward activations kept for the reverse pass.
#[derive(Debug, Clone)]
struct Tape<R> {
    opts: SpmcOptions,
    enc: Vec<EncTape<R>>,
    motion: Vec<Option<MotionTape<R>>>,
    frames: Vec<FeatureMap<R>>,
    features: Vec<FeatureMap<R>>,
    flows: Vec<FlowMap<R>>,
    fused: HrFeature<R>,
    skip: HrFeature<R>,
    dec: DecTape<R>,
}

/// Runs the network and records what the backward pass needs.
#[derive(Debug, Clone, Default)]
pub struct Autodiff<R> {
    tape: Option<Tape<R>>,
}

fn check_frames<R>(frames: &[FeatureMap<R>], channels: usize) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptyInput("burst has no frames".into()))?;
    if first.depth != channels {
        return Err(Error::invalid(format!(
            "frames have {} channels, network expects {channels}",
            first.depth
        )));
    }
    if frames
        .iter()
        .any(|f| f.height != first.height || f.width != first.width || f.depth != first.depth)
    {
        return Err(Error::invalid("frames differ in shape"));
    }
    Ok(())
}

/// HR position of LR pixel (0, 0) for the block-averaged frames the
/// network is trained on.
pub fn net_grid_offset(s: usize) -> f64 {
    Decimation::BlockAverage.grid_offset(s)
}

impl<R: Real> Autodiff<R> {
    pub fn new() -> Self {
        Autodiff { tape: None }
    }

    /// SR output for `frames` (reference first). Supplied `flows` replace
    /// the motion estimator.
    pub fn forward(
        &mut self,
        params: &NetParams<R>,
        frames: &[FeatureMap<R>],
        s: usize,
        flows: Option<&[FlowMap<R>]>,
    ) -> Result<FeatureMap<R>> {
        check_frames(frames, params.channels)?;
        if s == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        let opts = SpmcOptions::new(s).with_origin(net_grid_offset(s));
        let (h, w) = (frames[0].height, frames[0].width);
        let mut enc = Vec::with_capacity(frames.len());
        let mut features = Vec::with_capacity(frames.len());
        let (m, k) = spread(&frames[0]);
        for f in frames {
            let x = FeatureMap {
                data: f.data.iter().map(|&v| (v - m) * k).collect(),
                ..f.clone()
            };
            let (feat, t) = params.encode_t(&x);
            features.push(feat);
            enc.push(t);
        }
        let mut motion = Vec::with_capacity(frames.len());
        let flow_maps: Vec<FlowMap<R>> = match flows {
            Some(given) => {
                if given.len() != frames.len()
                    || given.iter().any(|f| f.height != h || f.width != w)
                {
                    return Err(Error::invalid(
                        "one flow per frame with the frame's shape required",
                    ));
                }
                motion.resize(frames.len(), None);
                given.to_vec()
            }
            None => {
                let mut out = vec![FlowMap::zeros(h, w)];
                motion.push(None);
                for f in &frames[1..] {
                    let (fl, t) = params.motion_t(f, &frames[0]);
                    out.push(fl);
                    motion.push(Some(t));
                }
                out
            }
        };
        let fused = spmc_forward(&features, &flow_maps, &opts)?;
        let skip = spmc_forward(frames, &flow_maps, &opts)?;
        let restored = restore(&skip.to_feature_map(), s)?;
        let (mut out, dec) = params.decode_t(fused.to_feature_map());
        out.data
            .iter_mut()
            .zip(&restored.data)
            .for_each(|(o, v)| *o += *v);
        self.tape = Some(Tape {
            opts,
            enc,
            motion,
            frames: frames.to_vec(),
            features,
            flows: flow_maps,
            fused,
            skip,
            dec,
        });
        Ok(out)
    }

    /// Flows used by the last forward pass.
    pub fn flows(&self) -> Option<&[FlowMap<R>]> {
        self.tape.as_ref().map(|t| t.flows.as_slice())
    }

    /// Parameter gradients for upstream gradient `grad_out` (dL/dSR). With
    /// `freeze_motion` the motion estimator receives exactly zero gradient.
    pub fn backward(
        &self,
        params: &NetParams<R>,
        grad_out: &FeatureMap<R>,
        freeze_motion: bool,
    ) -> Result<NetGrads<R>> {
        let t = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if grad_out.data.len() != t.skip.values.len() {
            return Err(Error::invalid(
                "upstream gradient does not match the output",
            ));
        }
        let mut grads = NetGrads::zeros_like(params);
        let gj = params.decode_backward(&t.dec, grad_out, &mut grads);
        let g_feat = spmc_backward(&gj.data, &t.features, &t.flows, &t.fused, &t.opts)?;
        for (tape, g) in t.enc.iter().zip(&g_feat.features) {
            params.encode_backward(tape, g, &mut grads);
        }
        if !freeze_motion && t.motion.iter().any(Option::is_some) {
            let g_restored = restore(grad_out, t.opts.scale)?;
            let g_skip = spmc_backward(&g_restored.data, &t.frames, &t.flows, &t.skip, &t.opts)?;
            for (k, tape) in t.motion.iter().enumerate() {
                if let Some(tape) = tape {
                    let mut gf = g_feat.flows[k].clone();
                    gf.u.iter_mut()
                        .zip(&g_skip.flows[k].u)
                        .for_each(|(a, b)| *a += *b);
                    gf.v.iter_mut()
                        .zip(&g_skip.flows[k].v)
                        .for_each(|(a, b)| *a += *b);
                    params.motion_backward(tape, &gf, &mut grads);
                }
            }
        }
        Ok(grads)
    }

    pub fn clear(&mut self) {
        self.tape = None;
    }
}

/// Mean endpoint error of the estimated flow against a constant target
/// `(dx, dy)`, ignoring a `crop`-pixel border, with motion-layer gradients
/// when `grads` is given.
pub fn flow_epe<R: Real>(
    params: &NetParams<R>,
    frame: &FeatureMap<R>,
    reference: &FeatureMap<R>,
    target: (f64, f64),
    crop: usize,
    grads: Option<&mut NetGrads<R>>,
) -> Result<f64> {
    check_frames(&[frame.clone(), reference.clone()], params.channels)?;
    let (h, w) = (frame.height, frame.width);
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::invalid("crop leaves no pixels"));
    }
    let (flow, tape) = params.motion_t(frame, reference);
    let n = ((h - 2 * crop) * (w - 2 * crop)) as f64;
    let mut g = FlowMap::zeros(h, w);
    let mut total = 0.0;
    for y in crop..h - crop {
        for x in crop..w - crop {
            let i = y * w + x;
            let du = flow.u[i].as_f64() - target.0;
            let dv = flow.v[i].as_f64() - target.1;
            let e = (du * du + dv * dv + 1e-12).sqrt();
            total += e;
            g.u[i] = R::of(du / (e * n));
            g.v[i] = R::of(dv / (e * n));
        }
    }
    if let Some(grads) = grads {
        params.motion_backward(&tape, &g, grads);
    }
    Ok(total / n)
}

fn to_map<R: Real>(r: &Raster) -> FeatureMap<R> {
    FeatureMap::from_raster(r)
}

/// Encoder applied to `frame` as given. [`forward`] first standardizes every
/// frame by the reference frame's mean and spread.
pub fn encode<R: Real>(frame: &Raster, params: &NetParams<R>) -> Result<FeatureMap<R>> {
    if frame.channels() != params.channels {
        return Err(Error::invalid(format!(
            "frame has {} channels, network expects {}",
            frame.channels(),
            params.channels
        )));
    }
    Ok(params.encode_t(&to_map(frame)).0)
}

pub fn estimate_flow<R: Real>(
    frame: &Raster,
    reference: &Raster,
    params: &NetParams<R>,
) -> Result<FlowField> {
    if frame.shape() != reference.shape() {
        return Err(Error::invalid("frame and reference differ in shape"));
    }
    if frame.channels() != params.channels {
        return Err(Error::invalid("channel count does not match the network"));
    }
    Ok(params
        .motion_t(&to_map(frame), &to_map(reference))
        .0
        .to_field())
}

pub fn decode<R: Real>(hr: &HrFeature<R>, params: &NetParams<R>) -> Result<Raster> {
    if hr.depth != FEATURES {
        return Err(Error::invalid(format!(
            "decoder expects {FEATURES} feature channels, got {}",
            hr.depth
        )));
    }
    Ok(params.decode_t(hr.to_feature_map()).0.to_raster())
}

/// Super-resolves `burst` by factor `s` with estimated motion.
pub fn forward<R: Real>(burst: &Burst, params: &NetParams<R>, s: usize) -> Result<Raster> {
    forward_with_flows(burst, params, s, None)
}

/// As [`forward`], with optional externally supplied flows (one per frame).
pub fn forward_with_flows<R: Real>(
    burst: &Burst,
    params: &NetParams<R>,
    s: usize,
    flows: Option<&[FlowField]>,
) -> Result<Raster> {
    burst.validate()?;
    let frames: Vec<FeatureMap<R>> = burst.frames.iter().map(to_map).collect();
    let maps: Option<Vec<FlowMap<R>>> = flows.map(|f| f.iter().map(FlowMap::from_field).collect());
    let out = Autodiff::new().forward(params, &frames, s, maps.as_deref())?;
    Ok(out.to_raster())
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Raster, truth: &Raster) -> Result<f64> {
    if !pred.same_shape(truth) {
        return Err(Error::invalid("prediction and truth differ in shape"));
    }
    Ok(l1_with_grad(pred.data(), truth.data()).0)
}

/// Mean absolute difference and its gradient; the subgradient at zero
/// residual is zero.
pub fn l1_with_grad<R: Real>(pred: &[R], truth: &[R]) -> (f64, Vec<R>) {
    let n = pred.len() as f64;
    let k = R::of(1.0 / n);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.as_f64().abs();
            if d > R::zero() {
                k
            } else if d < R::zero() {
                -k
            } else {
                R::zero()
            }
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{synthesize_burst, BurstConfig, MotionSpec, Psf};

    fn tiny_burst(h: usize, frames: usize, seed: u64) -> Burst {
        let hr = Raster::from_fn(2 * h, 2 * h, 1, |y, x, _| {
            0.5 + 0.2 * ((x as f64 * 0.7 + seed as f64).sin() * (y as f64 * 0.45).cos())
        });
        let cfg = BurstConfig {
            frames,
            scale: 2,
            psf: Psf::delta(),
            motion: MotionSpec::Random,
            snr: f64::INFINITY,
            seed,
            ..BurstConfig::default()
        };
        synthesize_burst(&hr, &cfg).unwrap()
    }

    #[test]
    fn swapping_inputs_negates_flow() {
        let mut p = NetParams::<f64>::new(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.layers[MOTION_HEAD] = Conv2d::uniform(16, 2, 1, &mut rng);
        let b = tiny_burst(12, 2, 3);
        let ab = estimate_flow(&b.frames[1], &b.frames[0], &p).unwrap();
        let ba = estimate_flow(&b.frames[0], &b.frames[1], &p).unwrap();
        assert!(!ab.is_zero());
        assert_eq!(ab, ba.scaled(-1.0));
        assert!(estimate_flow(&b.frames[0], &b.frames[0], &p)
            .unwrap()
            .is_zero());
    }

    #[test]
    fn skip_restoration_is_self_adjoint() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draw = || {
            FeatureMap::<f64>::from_vec(
                10,
                14,
                1,
                (0..140).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (x, y) = (draw(), draw());
        let dot = |a: &FeatureMap<f64>, b: &FeatureMap<f64>| {
            a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>()
        };
        let lhs = dot(&restore(&x, 2).unwrap(), &y);
        let rhs = dot(&x, &restore(&y, 2).unwrap());
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn shapes() {
        let p = NetParams::<f32>::new(1, 0).unwrap();
        let b = tiny_burst(16, 3, 1);
        assert_eq!(encode(&b.frames[0], &p).unwrap().depth, FEATURES);
        let out = forward(&b, &p, 2).unwrap();
        assert_eq!(out.shape(), (32, 32, 1));
        let bad = Raster::zeros(16, 16, 2);
        assert!(encode(&bad, &p).is_err());
    }

    #[test]
    fn fresh_head_predicts_no_motion() {
        let p = NetParams::<f64>::new(1, 0).unwrap();
        let b = tiny_burst(16, 2, 2);
        assert!(estimate_flow(&b.frames[1], &b.frames[0], &p)
            .unwrap()
            .is_zero());
    }

    #[test]
    fn zero_params_zero_output() {
        let p = NetParams::<f64>::zeros(1);
        let b = tiny_burst(8, 2, 3);
        assert!(encode(&b.frames[0], &p)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let hr = HrFeature {
            height: 16,
            width: 16,
            depth: FEATURES,
            values: vec![0.0; 16 * 16 * FEATURES],
            weights: vec![1.0; 256],
            clipped_weight: 0.0,
            eps: 1e-8,
        };
        assert!(decode(&hr, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_values() {
        let a = Raster::from_vec(1, 2, 1, vec![1.0, 3.0]).unwrap();
        let b = Raster::from_vec(1, 2, 1, vec![3.0, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 2.0);
        assert_eq!(l1_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        assert_eq!(l1_with_grad(&[1.0f64], &[1.0]).1, vec![0.0]);
    }

    #[test]
    fn backward_needs_forward() {
        let p = NetParams::<f64>::zeros(1);
        let g = FeatureMap::zeros(4, 4, 1);
        assert!(matches!(
            Autodiff::new().backward(&p, &g, false),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn architecture_hash_is_stable() {
        assert_eq!(architecture_hash(1), architecture_hash(1));
        assert_ne!(architecture_hash(1), architecture_hash(4));
        assert_eq!(architecture_hash(1).len(), 64);
    }
}
