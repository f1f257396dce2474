//! Stage-1 training: joint v-prediction over RGB/depth/normal with one
//! shared timestep per sample, per-channel modality normalization, AdamW
//! and an EMA shadow for sampling.
//!
//! The actual loss/gradient computation is a pure function of (weights,
//! batch, timesteps, noises), which is what the finite-difference checks
//! exercise; `Stage1Trainer::step` wraps it with the randomness and the
//! optimizer update.

use crate::autograd::PadMode;
use crate::conditioning::{dropout_conditions_stage1, SizeCrop};
use crate::nn::{AdamW, Ctx, Ema, VarStore};
use crate::schedule::NoiseSchedule;
use crate::synthworld::{rasterize_skeleton, ModalityBundle};
use crate::tensor::Tensor;
use crate::unet::{ForwardInput, StructuralUNet, UNetError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate channel: modality {modality} channel {channel} has std {std:e}")]
    DegenerateChannel { modality: String, channel: usize, std: f64 },
    #[error("empty calibration split")]
    EmptyCalibration,
    #[error("stats missing modality {0}")]
    MissingModality(String),
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: u64, diagnostics: String },
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
}

/// Which target the network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    V,
    Eps,
}

/// Per-modality, per-channel mean/std fitted on a calibration split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub channels: BTreeMap<String, Vec<(f64, f64)>>,
}

impl ModalityStats {
    pub fn normalize_nchw(&self, modality: &str, t: &Tensor) -> Result<Tensor, TrainError> {
        self.affine_nchw(modality, t, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_nchw(&self, modality: &str, t: &Tensor) -> Result<Tensor, TrainError> {
        self.affine_nchw(modality, t, |v, m, s| v * s + m)
    }

    fn affine_nchw(
        &self,
        modality: &str,
        t: &Tensor,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<Tensor, TrainError> {
        let stats = self
            .channels
            .get(modality)
            .ok_or_else(|| TrainError::MissingModality(modality.to_string()))?;
        let s = t.shape();
        let (leading, c, hw) = match s.len() {
            3 => (1, s[0], s[1] * s[2]),
            4 => (s[0], s[1], s[2] * s[3]),
            _ => panic!("expected CHW or NCHW, got {:?}", s),
        };
        assert_eq!(c, stats.len(), "channel count mismatch for {}", modality);
        let mut out = t.clone();
        for n in 0..leading {
            for ci in 0..c {
                let (mean, std) = stats[ci];
                let base = (n * c + ci) * hw;
                for v in &mut out.data_mut()[base..base + hw] {
                    *v = f(*v, mean, std);
                }
            }
        }
        Ok(out)
    }
}

/// Fit per-channel moments over a calibration split.
pub fn fit_modality_stats<'a>(
    bundles: impl IntoIterator<Item = &'a ModalityBundle>,
) -> Result<ModalityStats, TrainError> {
    let mut acc: BTreeMap<String, Vec<(f64, f64, usize)>> = BTreeMap::new();
    let mut count = 0usize;
    for b in bundles {
        count += 1;
        for (name, t) in [("rgb", &b.rgb), ("depth", &b.depth), ("normal", &b.normal)] {
            let c = t.shape()[0];
            let hw = t.shape()[1] * t.shape()[2];
            let slot = acc.entry(name.to_string()).or_insert_with(|| vec![(0.0, 0.0, 0); c]);
            for ci in 0..c {
                let data = &t.data()[ci * hw..(ci + 1) * hw];
                let s: f64 = data.iter().sum();
                let s2: f64 = data.iter().map(|&v| v * v).sum();
                slot[ci].0 += s;
                slot[ci].1 += s2;
                slot[ci].2 += hw;
            }
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyCalibration);
    }
    let mut out = ModalityStats::default();
    for (name, slots) in acc {
        let mut chan = Vec::new();
        for (ci, (s, s2, n)) in slots.into_iter().enumerate() {
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            if std <= 1e-6 {
                return Err(TrainError::DegenerateChannel { modality: name, channel: ci, std });
            }
            chan.push((mean, std));
        }
        out.channels.insert(name, chan);
    }
    Ok(out)
}

/// One `t ~ U[1, T]` per batch element; the same value serves every
/// modality of that element.
pub fn sample_shared_timestep<R: Rng>(batch_size: usize, t_count: usize, rng: &mut R) -> Vec<usize> {
    assert!(t_count >= 1);
    (0..batch_size).map(|_| rng.gen_range(1..=t_count)).collect()
}

/// A normalized training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub modalities: BTreeMap<String, Tensor>,
    pub pose: Tensor,
    pub attrs: Vec<Option<[usize; 3]>>,
    pub size_crop: Vec<SizeCrop>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    /// Stack normalized bundles (and their pose rasters) into a batch.
    pub fn from_bundles(
        bundles: &[&ModalityBundle],
        stats: &ModalityStats,
    ) -> Result<Self, TrainError> {
        assert!(!bundles.is_empty());
        let res = bundles[0].resolution;
        let mut mods = BTreeMap::new();
        for name in ["rgb", "depth", "normal"] {
            let planes: Vec<Tensor> = bundles
                .iter()
                .map(|b| {
                    let t = match name {
                        "rgb" => &b.rgb,
                        "depth" => &b.depth,
                        _ => &b.normal,
                    };
                    stats.normalize_nchw(name, t)
                })
                .collect::<Result<_, _>>()?;
            let refs: Vec<&Tensor> = planes.iter().collect();
            mods.insert(name.to_string(), Tensor::stack(&refs));
        }
        let rasters: Vec<Tensor> =
            bundles.iter().map(|b| rasterize_skeleton(&b.keypoints, b.resolution, res)).collect();
        let refs: Vec<&Tensor> = rasters.iter().collect();
        Ok(Self {
            modalities: mods,
            pose: Tensor::stack(&refs),
            attrs: bundles.iter().map(|b| Some(b.attrs.as_ids())).collect(),
            size_crop: bundles.iter().map(|b| SizeCrop::full(b.resolution)).collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub total: f64,
    pub per_modality: BTreeMap<String, f64>,
}

/// Fixed randomness for one step, drawn up front so the loss is a pure
/// function of the weights given this struct.
#[derive(Clone, Debug)]
pub struct StepNoise {
    /// Shared case: one entry per sample. Per-modality case: an extra map.
    pub t: Vec<usize>,
    pub t_per_modality: Option<BTreeMap<String, Vec<usize>>>,
    pub eps: BTreeMap<String, Tensor>,
    pub attrs: Vec<Option<[usize; 3]>>,
    pub pose: Tensor,
}

/// Draw all per-step randomness in a fixed order: timesteps, then one noise
/// tensor per modality (name order), then condition dropout per sample.
pub fn draw_step_noise<R: Rng>(
    batch: &Batch,
    t_count: usize,
    shared_t: bool,
    dropout_rate: f64,
    rng: &mut R,
) -> StepNoise {
    let n = batch.len();
    let t = sample_shared_timestep(n, t_count, rng);
    let t_per_modality = if shared_t {
        None
    } else {
        Some(
            batch
                .modalities
                .keys()
                .map(|k| (k.clone(), sample_shared_timestep(n, t_count, rng)))
                .collect(),
        )
    };
    let eps = batch
        .modalities
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::randn(v.shape(), rng)))
        .collect();
    let mut attrs = Vec::with_capacity(n);
    let mut pose = batch.pose.clone();
    let pose_plane: usize = batch.pose.shape()[1..].iter().product();
    for (i, a) in batch.attrs.iter().enumerate() {
        let single = Tensor::new(
            &batch.pose.shape()[1..],
            batch.pose.data()[i * pose_plane..(i + 1) * pose_plane].to_vec(),
        );
        let (a2, p2) = dropout_conditions_stage1(*a, &single, dropout_rate, rng);
        attrs.push(a2);
        pose.data_mut()[i * pose_plane..(i + 1) * pose_plane].copy_from_slice(p2.data());
    }
    StepNoise { t, t_per_modality, eps, attrs, pose }
}

fn timesteps_for<'a>(noise: &'a StepNoise, modality: &str) -> &'a [usize] {
    match &noise.t_per_modality {
        Some(map) => &map[modality],
        None => &noise.t,
    }
}

/// Forward + per-modality loss as tape nodes. Pure in (weights, batch,
/// noise). Returns the loss values and the context for backprop.
pub fn stage1_losses<'a>(
    net: &StructuralUNet,
    vs: &'a VarStore,
    batch: &Batch,
    noise: &StepNoise,
    schedule: &NoiseSchedule,
    param: Parameterization,
) -> Result<(Ctx<'a>, crate::autograd::Value, BTreeMap<String, crate::autograd::Value>), TrainError> {
    let mut noisy = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for (name, x) in &batch.modalities {
        let ts = timesteps_for(noise, name);
        let eps = &noise.eps[name];
        let n = batch.len();
        let plane: usize = x.shape()[1..].iter().product();
        let mut z = Tensor::zeros(x.shape());
        let mut tgt = Tensor::zeros(x.shape());
        for i in 0..n {
            let (a, s) = (schedule.alpha(ts[i]), schedule.sigma(ts[i]));
            for j in 0..plane {
                let xi = x.data()[i * plane + j];
                let ei = eps.data()[i * plane + j];
                z.data_mut()[i * plane + j] = a * xi + s * ei;
                tgt.data_mut()[i * plane + j] = match param {
                    Parameterization::V => a * ei - s * xi,
                    Parameterization::Eps => ei,
                };
            }
        }
        noisy.insert(name.clone(), z);
        targets.insert(name.clone(), tgt);
    }

    let mut cx = Ctx::new(vs);
    let preds = forward_with_noise(net, &mut cx, &noisy, noise, batch)?;
    let mut per = BTreeMap::new();
    let mut total = None;
    for (name, pred) in preds {
        let tv = cx.input(targets.remove(&name).unwrap());
        let l = cx.tape.mse(pred, tv);
        total = Some(match total {
            Some(t) => cx.tape.add(t, l),
            None => l,
        });
        per.insert(name, l);
    }
    Ok((cx, total.expect("at least one modality"), per))
}

/// Forward dispatch that honors per-modality timesteps for the
/// different-timesteps ablation: each branch gets its own time embedding
/// and the trunk receives their mean.
fn forward_with_noise(
    net: &StructuralUNet,
    cx: &mut Ctx,
    noisy: &BTreeMap<String, Tensor>,
    noise: &StepNoise,
    batch: &Batch,
) -> Result<BTreeMap<String, crate::autograd::Value>, TrainError> {
    match &noise.t_per_modality {
        None => Ok(net.forward(
            cx,
            ForwardInput {
                noisy,
                t: &noise.t,
                attrs: &noise.attrs,
                size_crop: &batch.size_crop,
                pose: Some(&noise.pose),
                pad_mode: PadMode::Zeros,
            },
        )?),
        Some(map) => Ok(net.forward_per_modality_t(
            cx,
            noisy,
            map,
            &noise.attrs,
            &batch.size_crop,
            Some(&noise.pose),
        )?),
    }
}

pub struct Stage1Trainer {
    pub net: StructuralUNet,
    pub vs: VarStore,
    pub opt: AdamW,
    pub ema: Ema,
    pub schedule: NoiseSchedule,
    pub stats: ModalityStats,
    pub dropout_rate: f64,
    pub param: Parameterization,
    /// `false` switches to independently sampled per-modality timesteps.
    pub shared_timestep: bool,
    pub step: u64,
    rng: ChaCha8Rng,
    pub loss_history: Vec<StepLosses>,
}

impl Stage1Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        net: StructuralUNet,
        vs: VarStore,
        schedule: NoiseSchedule,
        stats: ModalityStats,
        lr: f64,
        weight_decay: f64,
        dropout_rate: f64,
        ema_decay: f64,
        seed: u64,
    ) -> Self {
        let ema = Ema::new(&vs, ema_decay, |_| true);
        Self {
            net,
            vs,
            opt: AdamW::new(lr, weight_decay),
            ema,
            schedule,
            stats,
            dropout_rate,
            param: Parameterization::V,
            shared_timestep: true,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_history: Vec::new(),
        }
    }

    /// One optimization step over a normalized batch.
    pub fn step(&mut self, batch: &Batch) -> Result<StepLosses, TrainError> {
        let noise = draw_step_noise(
            batch,
            self.schedule.t_count,
            self.shared_timestep,
            self.dropout_rate,
            &mut self.rng,
        );
        if self.shared_timestep {
            debug_assert!(noise.t_per_modality.is_none());
        }
        let (mut cx, total, per) =
            stage1_losses(&self.net, &self.vs, batch, &noise, &self.schedule, self.param)?;
        let total_v = cx.tape.value(total).data()[0];
        let per_v: BTreeMap<String, f64> =
            per.iter().map(|(k, &v)| (k.clone(), cx.tape.value(v).data()[0])).collect();
        if !total_v.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                diagnostics: format!("losses {:?}, t {:?}", per_v, noise.t),
            });
        }
        let grads = cx.grads_by_name(total);
        self.opt.step(&mut self.vs, &grads);
        self.ema.update(&self.vs);
        self.step += 1;
        let rec = StepLosses { step: self.step, total: total_v, per_modality: per_v };
        self.loss_history.push(rec.clone());
        Ok(rec)
    }

    /// Weights with the EMA shadow applied (used for sampling/eval).
    pub fn ema_weights(&self) -> VarStore {
        self.ema.apply_to(&self.vs)
    }
}

/// Write the loss history as CSV (step, total, then one column per
/// modality in name order).
pub fn loss_history_csv(history: &[StepLosses]) -> String {
    let mut out = String::new();
    if history.is_empty() {
        return out;
    }
    let names: Vec<&String> = history[0].per_modality.keys().collect();
    out.push_str("step,total");
    for n in &names {
        out.push_str(&format!(",{}", n));
    }
    out.push('\n');
    for rec in history {
        out.push_str(&format!("{},{:.17e}", rec.step, rec.total));
        for n in &names {
            out.push_str(&format!(",{:.17e}", rec.per_modality[*n]));
        }
        out.push('\n');
    }
    out
}
