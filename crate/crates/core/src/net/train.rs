//! Optimizer, early stopping, synthetic datasets and the training loops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{derive_seed, synthesize_burst, Burst, BurstConfig, MotionSpec, Psf};
use crate::net::model::{flow_epe, is_motion_layer, l1_with_grad, Autodiff, NetGrads, NetParams};
use crate::raster::Raster;
use crate::real::Real;
use crate::scene::procedural_scene;
use crate::spmc::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch side.
    pub patch: usize,
    pub scale: usize,
    pub lr_encdec: f64,
    pub lr_motion: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub freeze_motion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            patch: 64,
            scale: 2,
            lr_encdec: 1e-4,
            lr_motion: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 30,
            early_stop_patience: 5,
            seed: 0,
            freeze_motion: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encdec > 0.0 && self.lr_motion > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.scale == 0 || self.patch == 0 {
            return Err(Error::invalid(
                "batch size, scale and patch must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::invalid("invalid Adam constants"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per layer tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<R: Real>(params: &NetParams<R>) -> Self {
        let sizes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of a single tensor. `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<R: Real>(
    param: &mut [R],
    grad: &[R],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        param[i] = R::of(param[i].as_f64() - step);
    }
}

/// Adam over all layers: encoder/decoder at `lr_encdec`, motion at
/// `lr_motion`. A zero learning rate leaves its group untouched.
pub fn adam_step<R: Real>(
    params: &mut NetParams<R>,
    grads: &NetGrads<R>,
    state: &mut AdamState,
    lr_encdec: f64,
    lr_motion: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step;
    for (i, (layer, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let lr = if is_motion_layer(i) {
            lr_motion
        } else {
            lr_encdec
        };
        if lr == 0.0 {
            continue;
        }
        let (m, v) = (
            &mut state.m[2 * i..2 * i + 2],
            &mut state.v[2 * i..2 * i + 2],
        );
        let (mw, mb) = m.split_at_mut(1);
        let (vw, vb) = v.split_at_mut(1);
        adam_update(
            &mut layer.weight,
            &g.weight,
            &mut mw[0],
            &mut vw[0],
            t,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
        adam_update(
            &mut layer.bias,
            &g.bias,
            &mut mb[0],
            &mut vb[0],
            t,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; an epoch counts as an improvement only
/// if it is strictly lower.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        Ok(EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        })
    }

    pub fn update(&mut self, epoch: usize, val: f64) -> StopDecision {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// A burst with its HR ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub burst: Burst,
    pub truth: Raster,
}

/// Procedural scenes of `patch·s` pixels degraded into `frames`-frame bursts
/// with random sub-pixel shifts.
pub fn synthetic_dataset(
    n: usize,
    patch: usize,
    frames: usize,
    s: usize,
    snr: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    let psf = Psf::gaussian_on_grid(0.5, s)?;
    (0..n)
        .map(|i| {
            let truth = procedural_scene(patch * s, derive_seed(seed, 2 * i as u64));
            let cfg = BurstConfig {
                frames,
                scale: s,
                psf: psf.clone(),
                motion: MotionSpec::Random,
                snr,
                seed: derive_seed(seed, 2 * i as u64 + 1),
                ..BurstConfig::default()
            };
            let burst = synthesize_burst(&truth, &cfg)?;
            Ok(Sample { burst, truth })
        })
        .collect()
}

/// A reference frame, a frame displaced by a known global shift and that shift.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationPair {
    pub reference: Raster,
    pub frame: Raster,
    pub shift: (f64, f64),
}

/// Noise-free pair of `size × size` LR frames with the given shift.
pub fn translation_pair(
    size: usize,
    shift: (f64, f64),
    s: usize,
    seed: u64,
) -> Result<TranslationPair> {
    let hr = procedural_scene(size * s, seed);
    let cfg = BurstConfig {
        frames: 2,
        scale: s,
        psf: Psf::gaussian_on_grid(0.5, s)?,
        motion: MotionSpec::Translational(vec![(0.0, 0.0), shift]),
        snr: f64::INFINITY,
        seed,
        ..BurstConfig::default()
    };
    let b = synthesize_burst(&hr, &cfg)?;
    let mut frames = b.frames.into_iter();
    let reference = frames.next().expect("two frames");
    let frame = frames.next().expect("two frames");
    Ok(TranslationPair {
        reference,
        frame,
        shift,
    })
}

/// Pairs with shifts uniform in `[-max_shift, max_shift]²`.
pub fn translation_pairs(
    n: usize,
    size: usize,
    max_shift: f64,
    s: usize,
    seed: u64,
) -> Result<Vec<TranslationPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let shift = (
                rng.random_range(-max_shift..=max_shift),
                rng.random_range(-max_shift..=max_shift),
            );
            translation_pair(size, shift, s, derive_seed(seed, i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub pairs_per_step: usize,
    /// LR side of the generated pairs.
    pub size: usize,
    pub max_shift: f64,
    pub lr: f64,
    /// Border excluded from the endpoint error.
    pub crop: usize,
    pub scale: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            pairs_per_step: 8,
            size: 32,
            max_shift: 1.0,
            lr: 1e-3,
            crop: 4,
            scale: 2,
            seed: 0,
        }
    }
}

/// Mean endpoint error over `pairs`.
pub fn mean_epe<R: Real>(
    params: &NetParams<R>,
    pairs: &[TranslationPair],
    crop: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no pairs".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let f = FeatureMap::from_raster(&p.frame);
        let r = FeatureMap::from_raster(&p.reference);
        total += flow_epe(params, &f, &r, p.shift, crop, None)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Fits the motion estimator alone to endpoint error on freshly drawn
/// translation pairs. Returns the per-step training EPE.
pub fn pretrain_motion<R: Real>(
    params: &mut NetParams<R>,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let tc = TrainConfig::default();
    let mut state = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pairs = translation_pairs(
            cfg.pairs_per_step,
            cfg.size,
            cfg.max_shift,
            cfg.scale,
            rng.random(),
        )?;
        let (loss, grads) = epe_batch(params, &pairs, cfg.crop)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::TrainingFailure {
                epoch: step,
                reason: "non-finite pretraining loss".into(),
            });
        }
        adam_step(params, &grads, &mut state, 0.0, cfg.lr, &tc);
        history.push(loss);
    }
    Ok(history)
}

/// Motion pretraining on a fixed set of pairs, `steps` full-batch updates.
pub fn pretrain_motion_on<R: Real>(
    params: &mut NetParams<R>,
    pairs: &[TranslationPair],
    steps: usize,
    lr: f64,
    crop: usize,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no translation pairs to pretrain on"));
    }
    let tc = TrainConfig::default();
    let mut state = AdamState::new(params);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = epe_batch(params, pairs, crop)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::TrainingFailure {
                epoch: step,
                reason: "non-finite pretraining loss".into(),
            });
        }
        adam_step(params, &grads, &mut state, 0.0, lr, &tc);
        history.push(loss);
    }
    Ok(history)
}

fn epe_batch<R: Real>(
    params: &NetParams<R>,
    pairs: &[TranslationPair],
    crop: usize,
) -> Result<(f64, NetGrads<R>)> {
    let mut grads = NetGrads::zeros_like(params);
    let mut loss = 0.0;
    let k = R::of(1.0 / pairs.len() as f64);
    for p in pairs {
        let mut g = NetGrads::zeros_like(params);
        let f = FeatureMap::from_raster(&p.frame);
        let r = FeatureMap::from_raster(&p.reference);
        loss += flow_epe(params, &f, &r, p.shift, crop, Some(&mut g))?;
        grads.add_scaled(&g, k);
    }
    Ok((loss / pairs.len() as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training L1 over the epoch's batches; `None` for epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    /// Parameters at the best validation epoch.
    pub params: NetParams<R>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn frames_of<R: Real>(b: &Burst) -> Vec<FeatureMap<R>> {
    b.frames.iter().map(FeatureMap::from_raster).collect()
}

/// Per-sample L1 of the network output against truth.
pub fn evaluate<R: Real>(params: &NetParams<R>, samples: &[Sample], s: usize) -> Result<Vec<f64>> {
    let mut ad = Autodiff::new();
    samples
        .iter()
        .map(|smp| {
            let out = ad.forward(params, &frames_of(&smp.burst), s, None)?;
            let truth: Vec<R> = smp.truth.data().iter().map(|&v| R::of(v)).collect();
            if out.data.len() != truth.len() {
                return Err(Error::invalid("truth does not match the output shape"));
            }
            Ok(out
                .data
                .iter()
                .zip(&truth)
                .map(|(a, b)| (*a - *b).as_f64().abs())
                .sum::<f64>()
                / truth.len() as f64)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mini-batch training with per-epoch validation and early stopping.
/// `on_epoch` sees each record as it is produced.
pub fn train<R: Real>(
    init: NetParams<R>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<R>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let s = cfg.scale;
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();

    let val0 = mean(&evaluate(&params, val_set, s)?);
    if !val0.is_finite() {
        return Err(Error::TrainingFailure {
            epoch: 0,
            reason: "non-finite validation loss".into(),
        });
    }
    let rec = EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: val0,
    };
    on_epoch(&rec);
    history.push(rec);
    stopper.update(0, val0);
    let mut best = params.clone();
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut ad = Autodiff::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = NetGrads::zeros_like(&params);
            let k = R::of(1.0 / batch.len() as f64);
            for &i in batch {
                let smp = &train_set[i];
                let out = ad.forward(&params, &frames_of(&smp.burst), s, None)?;
                let truth: Vec<R> = smp.truth.data().iter().map(|&v| R::of(v)).collect();
                let (loss, g) = l1_with_grad(&out.data, &truth);
                if !loss.is_finite() {
                    return Err(Error::TrainingFailure {
                        epoch,
                        reason: "non-finite training loss".into(),
                    });
                }
                epoch_loss += loss;
                let gmap = FeatureMap {
                    height: out.height,
                    width: out.width,
                    depth: out.depth,
                    data: g,
                };
                grads.add_scaled(&ad.backward(&params, &gmap, cfg.freeze_motion)?, k);
            }
            if !grads.all_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            let lr_m = if cfg.freeze_motion {
                0.0
            } else {
                cfg.lr_motion
            };
            adam_step(&mut params, &grads, &mut state, cfg.lr_encdec, lr_m, cfg);
            if !params.all_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite parameters".into(),
                });
            }
        }
        ad.clear();
        let val = mean(&evaluate(&params, val_set, s)?);
        if !val.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: "non-finite validation loss".into(),
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: Some(epoch_loss / train_set.len() as f64),
            val_loss: val,
        };
        on_epoch(&rec);
        history.push(rec);
        match stopper.update(epoch, val) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: stopper.best_epoch,
        best_val: stopper.best,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_curve() {
        let mut es = EarlyStopping::new(3).unwrap();
        let curve = [5.0, 4.0, 4.0, 4.0, 4.0];
        let mut stopped = None;
        for (e, &v) in curve.iter().enumerate() {
            if es.update(e, v) == StopDecision::Stop {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(4));
        assert_eq!(es.best_epoch, 1);
        assert_eq!(es.best, 4.0);
        assert!(EarlyStopping::new(0).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = [1.0f64, -2.0, 0.5];
        let g = [0.3, -4.0, 0.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_zero_grad_fixed_point() {
        let mut p = NetParams::<f64>::new(1, 4).unwrap();
        let before = p.clone();
        let g = NetGrads::zeros_like(&p);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, 1e-4, 1e-5, &TrainConfig::default());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_motion: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_shapes() {
        let d = synthetic_dataset(2, 8, 3, 2, 800.0, 1).unwrap();
        assert_eq!(d[0].burst.frames.len(), 3);
        assert_eq!(d[0].burst.frames[0].shape(), (8, 8, 1));
        assert_eq!(d[0].truth.shape(), (16, 16, 1));
        assert_ne!(d[0].truth, d[1].truth);
        let p = translation_pair(8, (0.5, 0.25), 2, 3).unwrap();
        assert_eq!(p.frame.shape(), (8, 8, 1));
    }

    #[test]
    fn empty_sets_rejected() {
        let p = NetParams::<f32>::new(1, 0).unwrap();
        let d = synthetic_dataset(1, 8, 2, 2, 800.0, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(p.clone(), &[], &d, &cfg, |_| {}),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            train(p, &d, &[], &cfg, |_| {}),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn nan_input_reports_epoch() {
        let p = NetParams::<f32>::new(1, 0).unwrap();
        let mut d = synthetic_dataset(1, 8, 2, 2, 800.0, 1).unwrap();
        let v = d.clone();
        d[0].truth = d[0].truth.map(|_| f64::NAN);
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        match train(p, &d, &v, &cfg, |_| {}) {
            Err(Error::TrainingFailure { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
