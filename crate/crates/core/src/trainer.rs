//! Training loops for the enhancement module (supervised, Huber against the
//! high-resolution volume) and for the registration cascade (unsupervised),
//! plus the pairwise evaluation suite.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{downsample_labels, Checkpoint, Dataset, Degraded};
use crate::engine::init::substream;
use crate::engine::{adam_step, lr_schedule, AdamState, Real, ScheduleCfg, Shape5, Tape, Tensor5};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::losses::{aux_loss, main_loss, smoothness_value, total_loss, LnccCfg, LossWeights};
use crate::metrics::{dice, ncc_global, psnr, ssim3d, MetricReportRow, SsimCfg};
use crate::regnet::{
    build_reg, cascade_forward_taped, rearrange_pair, register_sr_taped, RegConfig, RegModel,
};
use crate::rem::{build_rem_with, RemConfig, RemInit, RemModel};
use crate::resample::{warp_nearest, warp_trilinear_forward};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch: usize,
    /// Cube side of training crops; `None` trains on whole volumes.
    pub patch: Option<usize>,
    pub schedule: ScheduleCfg,
    pub weights: LossWeights,
    pub seed: u64,
    pub freeze_rem: bool,
    /// Degradation factor, 2 or 4.
    pub scale: usize,
    /// Crops drawn per training volume per epoch (enhancement training).
    pub patches_per_volume: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub huber_delta: f64,
    pub lncc: LnccCfg,
}

impl TrainCfg {
    /// 16³ crops in pairs, 8 crops per volume per epoch.
    pub fn rem_desk(scale: usize, seed: u64) -> Self {
        Self {
            epochs: 50,
            batch: 2,
            patch: Some(16),
            schedule: ScheduleCfg::rem_default(),
            weights: LossWeights::default(),
            seed,
            freeze_rem: true,
            scale,
            patches_per_volume: 8,
            max_steps: Some(2000),
            huber_delta: 0.1,
            lncc: LnccCfg::default(),
        }
    }

    /// Whole volumes, one ordered pair per step.
    pub fn cascade_desk(scale: usize, seed: u64) -> Self {
        Self {
            epochs: 10,
            batch: 1,
            patch: None,
            schedule: ScheduleCfg::cascade_default(),
            ..Self::rem_desk(scale, seed)
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.patches_per_volume == 0 {
            return Err(Error::Config(
                "epochs, batch and patches_per_volume must be >= 1".into(),
            ));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        if let Some(p) = self.patch {
            if p == 0 || dims.iter().any(|&d| p > d) {
                return Err(Error::Config(format!(
                    "patch {p} does not fit volume dims {dims:?}"
                )));
            }
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        self.schedule.validate()?;
        self.lncc.validate()
    }
}

/// Validation summary after one epoch; epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iteration: u64,
    /// Mean training loss of the epoch.
    pub train_loss: Option<f64>,
    pub val: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Mean of the `window` losses starting at `iter`.
    pub fn smoothed(&self, iter: usize, window: usize) -> Option<f64> {
        let end = iter.checked_add(window)?;
        let w = self.losses.get(iter..end)?;
        Some(w.iter().sum::<f64>() / window as f64)
    }

    pub fn best(&self, key: &str) -> Option<&EpochRecord> {
        self.epochs.iter().filter(|r| r.val.contains_key(key)).fold(
            None,
            |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val[key] >= r.val[key] => Some(b),
                _ => Some(r),
            },
        )
    }
}

#[derive(Clone, Debug)]
pub struct RemOutcome {
    /// Parameters of the best validation epoch.
    pub best: RemModel<f32>,
    pub last: RemModel<f32>,
    pub history: History,
    /// Full training state; feeding it back through `resume` continues the run.
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct CascadeOutcome {
    pub method: Method,
    pub best: RegModel<f32>,
    pub last: RegModel<f32>,
    /// Enhancement module the registration net was trained behind.
    pub rem: Option<RemModel<f32>>,
    pub history: History,
    pub checkpoint: Checkpoint,
}

/// Copies a `(1, 1, p, p, p)` crop starting at `origin`.
fn crop(t: &Tensor5<f32>, origin: [usize; 3], p: usize) -> Tensor5<f32> {
    Tensor5::from_fn(Shape5::new(1, 1, p, p, p), |[_, _, i, j, k]| {
        t.at([0, 0, origin[0] + i, origin[1] + j, origin[2] + k])
    })
}

fn stack(items: &[Tensor5<f32>]) -> Result<Tensor5<f32>> {
    let s = items[0].shape();
    let mut data = Vec::with_capacity(s.numel() * items.len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor5::from_vec(Shape5::new(items.len(), 1, s.0[2], s.0[3], s.0[4]), data)
}

fn meta_get<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks {key}")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta {key}: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Resuming is only defined for the same stream of samples and updates.
fn check_resumable(ck: &Checkpoint, trainer: &str, cfg: &TrainCfg) -> Result<()> {
    let kind: String = meta_get(ck, "trainer")?;
    if kind != trainer {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by the {kind} trainer, not {trainer}"
        )));
    }
    let old: TrainCfg = meta_get(ck, "train_cfg")?;
    let comparable = TrainCfg {
        epochs: cfg.epochs,
        max_steps: cfg.max_steps,
        ..old
    };
    if comparable != *cfg {
        return Err(Error::Checkpoint(
            "training config differs from the checkpoint beyond epochs and max_steps".into(),
        ));
    }
    Ok(())
}

fn rem_validation(
    rem: &RemModel<f32>,
    pairs: &[(&Degraded<f32>, &Tensor5<f32>)],
) -> Result<BTreeMap<String, f64>> {
    let ssim_cfg = SsimCfg::default();
    let (mut p, mut s) = (0.0, 0.0);
    for (d, gt) in pairs {
        let out = rem.apply(&d.lr_up)?;
        p += psnr(&out, gt, 1.0)?.value();
        s += ssim3d(&out, gt, &ssim_cfg)?;
    }
    let n = pairs.len() as f64;
    Ok(BTreeMap::from([
        ("psnr".to_string(), p / n),
        ("ssim".to_string(), s / n),
    ]))
}

/// Supervised training of a zero-tail enhancement module on crops of
/// `(upsampled low-resolution, original)` pairs from the training split.
/// Validation PSNR and SSIM are computed on whole validation volumes after
/// every epoch and select the returned model.
pub fn train_rem(
    ds: &Dataset,
    rem_cfg: RemConfig,
    cfg: &TrainCfg,
    resume: Option<&Checkpoint>,
) -> Result<RemOutcome> {
    let dims = ds.dims();
    cfg.validate(dims)?;
    if ds.split.train.is_empty() || ds.split.val.is_empty() {
        return Err(Error::Config(
            "enhancement training needs train and validation samples".into(),
        ));
    }
    let patch = cfg.patch.unwrap_or(dims[0]);
    if cfg.patch.is_none() && (dims[1] != patch || dims[2] != patch) {
        return Err(Error::Config(
            "whole-volume training needs cubic volumes; set a patch size".into(),
        ));
    }
    let degraded = ds.degraded(cfg.scale)?;
    let gt: Vec<&Tensor5<f32>> = ds.samples.iter().map(|s| &s.intensity).collect();
    let val: Vec<(&Degraded<f32>, &Tensor5<f32>)> = ds
        .split
        .val
        .iter()
        .map(|&i| (&degraded[i], gt[i]))
        .collect();

    let mut model: RemModel<f32> = build_rem_with(rem_cfg, cfg.seed, RemInit::ZeroTail)?;
    let mut adam = AdamState::default();
    let mut history = History::default();
    let mut best = model.clone();
    let mut start_epoch = 1;
    let mut iteration = 0u64;
    match resume {
        Some(ck) => {
            check_resumable(ck, "rem", cfg)?;
            if ck.rem != Some(rem_cfg) {
                return Err(Error::Checkpoint(
                    "checkpoint holds a different enhancement config".into(),
                ));
            }
            ck.load_params("rem", &mut model.params)?;
            ck.load_params("best/rem", &mut best.params)?;
            adam = ck.load_adam("rem")?;
            history = meta_get(ck, "history")?;
            start_epoch = meta_get::<usize>(ck, "epoch")? + 1;
            iteration = ck.iteration;
        }
        None => {
            let val0 = rem_validation(&model, &val)?;
            history.epochs.push(EpochRecord {
                epoch: 0,
                iteration: 0,
                train_loss: None,
                val: val0,
            });
        }
    }

    let per_epoch = (ds.split.train.len() * cfg.patches_per_volume / cfg.batch).max(1);
    let mut last_epoch = start_epoch - 1;
    for epoch in start_epoch..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| iteration >= m) {
            break;
        }
        let mut rng = substream(cfg.seed, "sampling/rem", epoch as u64);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for _ in 0..per_epoch {
            if cfg.max_steps.is_some_and(|m| iteration >= m) {
                break;
            }
            let mut xs = Vec::with_capacity(cfg.batch);
            let mut ys = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let v = ds.split.train[rng.random_range(0..ds.split.train.len())];
                let origin = dims.map(|d| rng.random_range(0..=d - patch));
                xs.push(crop(&degraded[v].lr_up, origin, patch));
                ys.push(crop(gt[v], origin, patch));
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(stack(&xs)?);
            let y = tape.constant(stack(&ys)?);
            let out = model.forward(&mut tape, &bound, x)?;
            let loss = tape.huber(out, y, cfg.huber_delta)?;
            let value = tape.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::NonFinite("train_rem loss"));
            }
            let grads = tape.backward(loss)?;
            model.params.collect_grads(&bound, &grads);
            adam_step(
                &mut model.params,
                &mut adam,
                lr_schedule(iteration, &cfg.schedule),
            )?;
            iteration += 1;
            history.losses.push(value);
            sum += value;
            steps += 1;
        }
        let val_metrics = rem_validation(&model, &val)?;
        let improved = history
            .best("psnr")
            .is_none_or(|b| val_metrics["psnr"] > b.val["psnr"]);
        if improved {
            best = model.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            iteration,
            train_loss: (steps > 0).then(|| sum / steps as f64),
            val: val_metrics,
        });
        last_epoch = epoch;
    }

    let mut ck = Checkpoint {
        rem: Some(rem_cfg),
        iteration,
        meta: serde_json::json!({
            "trainer": "rem",
            "epoch": last_epoch,
            "train_cfg": to_json(cfg)?,
            "history": to_json(&history)?,
        }),
        ..Checkpoint::default()
    };
    ck.add_params("rem", &model.params)?;
    ck.add_params("best/rem", &best.params)?;
    ck.add_adam("rem", &adam)?;
    Ok(RemOutcome {
        best,
        last: model,
        history,
        checkpoint: ck,
    })
}

/// Registration arms of the evaluation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Zero displacement; stands in for the affine baseline on pre-aligned phantoms.
    Identity,
    /// Registration of trilinear-upsampled volumes.
    RegDownUp,
    /// Registration of enhanced upsampled volumes.
    ReRegDownUp,
    /// Registration and scoring on the low-resolution grid.
    RegDown,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Identity,
        Method::RegDownUp,
        Method::ReRegDownUp,
        Method::RegDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::RegDownUp => "reg-down-up",
            Method::ReRegDownUp => "rereg-down-up",
            Method::RegDown => "reg-down",
        }
    }

    pub fn uses_rem(self) -> bool {
        self == Method::ReRegDownUp
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of identity, reg-down-up, rereg-down-up, reg-down"
                ))
            })
    }
}

/// Per-sample network inputs of one method at one scale.
struct MethodInputs {
    /// What the registration net sees.
    reg_in: Vec<Tensor5<f32>>,
    /// Upsampled low-resolution volumes, for the auxiliary term.
    lr_up: Vec<Tensor5<f32>>,
}

fn method_inputs(
    method: Method,
    degraded: &[Degraded<f32>],
    rem: Option<&RemModel<f32>>,
) -> Result<MethodInputs> {
    let lr_up: Vec<Tensor5<f32>> = degraded.iter().map(|d| d.lr_up.clone()).collect();
    let reg_in = match method {
        Method::Identity => Vec::new(),
        Method::RegDownUp => lr_up.clone(),
        Method::RegDown => degraded.iter().map(|d| d.lr.clone()).collect(),
        Method::ReRegDownUp => {
            let rem = rem
                .ok_or_else(|| Error::Config("rereg-down-up needs an enhancement module".into()))?;
            lr_up.iter().map(|x| rem.apply(x)).collect::<Result<_>>()?
        }
    };
    Ok(MethodInputs { reg_in, lr_up })
}

/// Volumes and label maps a method is scored on: the low-resolution grid
/// (block-majority labels) for `reg-down`, the original grid otherwise.
struct EvalGrid {
    images: Vec<Tensor5<f32>>,
    labels: Vec<LabelVolume>,
}

fn eval_grid(
    ds: &Dataset,
    method: Method,
    degraded: &[Degraded<f32>],
    scale: usize,
) -> Result<EvalGrid> {
    if method == Method::RegDown {
        Ok(EvalGrid {
            images: degraded.iter().map(|d| d.lr.clone()).collect(),
            labels: ds
                .samples
                .iter()
                .map(|s| downsample_labels(&s.labels, scale))
                .collect::<Result<_>>()?,
        })
    } else {
        Ok(EvalGrid {
            images: ds.samples.iter().map(|s| s.intensity.clone()).collect(),
            labels: ds.samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }
}

/// Displacement aligning sample `moving` to sample `fixed` on the method's
/// own grid; zero without a registration net.
fn pair_dvf(
    reg: Option<&RegModel<f32>>,
    inputs: &MethodInputs,
    grid: &EvalGrid,
    fixed: usize,
    moving: usize,
) -> Result<Tensor5<f32>> {
    let Some(reg) = reg else {
        let [l, w, h] = grid.labels[fixed].dims();
        return Ok(Tensor5::zeros(Shape5::new(1, 3, l, w, h)));
    };
    let pair = rearrange_pair(&stack(&[
        inputs.reg_in[fixed].clone(),
        inputs.reg_in[moving].clone(),
    ])?)?;
    reg.apply(&pair)
}

/// Ordered pairs used for cascade validation: pairs within the validation
/// split, or each validation sample against every training sample when it
/// holds a single volume.
fn validation_pairs(ds: &Dataset) -> Vec<(usize, usize)> {
    let val = &ds.split.val;
    let mut pairs = Vec::new();
    if val.len() >= 2 {
        for &f in val {
            for &m in val {
                if f != m {
                    pairs.push((f, m));
                }
            }
        }
    } else {
        for &v in val {
            for &t in &ds.split.train {
                pairs.push((v, t));
                pairs.push((t, v));
            }
        }
    }
    pairs
}

fn cascade_validation(
    reg: &RegModel<f32>,
    inputs: &MethodInputs,
    grid: &EvalGrid,
    pairs: &[(usize, usize)],
) -> Result<BTreeMap<String, f64>> {
    let (mut d, mut s) = (0.0, 0.0);
    for &(f, m) in pairs {
        let dvf = pair_dvf(Some(reg), inputs, grid, f, m)?;
        let warped = warp_nearest(&grid.labels[m], &dvf)?;
        d += dice(&warped, &grid.labels[f], None)?
            .mean
            .ok_or_else(|| Error::Config("validation pair has no labels".into()))?;
        s += smoothness_value(&dvf)?.f64();
    }
    let n = pairs.len() as f64;
    Ok(BTreeMap::from([
        ("dice".to_string(), d / n),
        ("smoothness".to_string(), s / n),
    ]))
}

/// Unsupervised training of a registration net on every ordered pair of
/// training samples, shuffled per epoch, degraded at `cfg.scale` and
/// prepared for `method`. For `rereg-down-up` the enhancement module sits in
/// front of the net and the auxiliary term is active; the other arms have no
/// enhancement module and train on the similarity and smoothness terms only.
/// Validation Dice of warped labels selects the returned model.
pub fn train_cascade(
    ds: &Dataset,
    method: Method,
    rem: Option<&RemModel<f32>>,
    reg_cfg: RegConfig,
    cfg: &TrainCfg,
    resume: Option<&Checkpoint>,
) -> Result<CascadeOutcome> {
    let dims = ds.dims();
    cfg.validate(dims)?;
    if method == Method::Identity {
        return Err(Error::Config(
            "the identity method has nothing to train".into(),
        ));
    }
    if ds.split.train.len() < 2 || ds.split.val.is_empty() {
        return Err(Error::Config(
            "cascade training needs at least two training samples and one validation sample".into(),
        ));
    }
    if cfg.patch.is_some_and(|p| dims.iter().any(|&d| d != p)) {
        return Err(Error::Config(
            "cascade training uses whole volumes; leave patch unset".into(),
        ));
    }
    let mut rem: Option<RemModel<f32>> = match (method.uses_rem(), rem) {
        (true, Some(r)) => Some(r.clone()),
        (true, None) => {
            return Err(Error::Config(
                "rereg-down-up needs an enhancement module".into(),
            ))
        }
        (false, _) => None,
    };
    let train_rem = rem.is_some() && !cfg.freeze_rem;
    if let Some(r) = rem.as_mut() {
        r.set_frozen(cfg.freeze_rem);
    }
    let reg_dims = if method == Method::RegDown {
        dims.map(|d| d / cfg.scale)
    } else {
        dims
    };
    let div = 1usize << reg_cfg.levels;
    if reg_dims.iter().any(|&d| d % div != 0) {
        return Err(Error::shape(
            "train_cascade",
            format!(
                "{} levels need dims divisible by {div}, got {reg_dims:?}",
                reg_cfg.levels
            ),
        ));
    }
    let weights = LossWeights {
        lambda1: if rem.is_some() {
            cfg.weights.lambda1
        } else {
            0.0
        },
        ..cfg.weights
    };

    let degraded = ds.degraded(cfg.scale)?;
    let mut inputs = method_inputs(method, &degraded, rem.as_ref())?;
    let grid = eval_grid(ds, method, &degraded, cfg.scale)?;
    let val_pairs = validation_pairs(ds);
    let reg_cfg = RegConfig {
        seed: cfg.seed,
        ..reg_cfg
    };
    let mut reg: RegModel<f32> = build_reg(reg_cfg)?;
    let mut best = reg.clone();
    let mut best_rem = rem.clone();
    let mut adam = AdamState::default();
    let mut rem_adam = AdamState::default();
    let mut history = History::default();
    let mut start_epoch = 1;
    let mut iteration = 0u64;
    match resume {
        Some(ck) => {
            check_resumable(ck, "cascade", cfg)?;
            if ck.reg != Some(reg_cfg) || meta_get::<Method>(ck, "method")? != method {
                return Err(Error::Checkpoint(
                    "checkpoint holds a different registration setup".into(),
                ));
            }
            ck.load_params("reg", &mut reg.params)?;
            ck.load_params("best/reg", &mut best.params)?;
            adam = ck.load_adam("reg")?;
            if let (Some(r), Some(b)) = (rem.as_mut(), best_rem.as_mut()) {
                ck.load_params("rem", &mut r.params)?;
                ck.load_params("best/rem", &mut b.params)?;
                if train_rem {
                    rem_adam = ck.load_adam("rem")?;
                }
            }
            history = meta_get(ck, "history")?;
            start_epoch = meta_get::<usize>(ck, "epoch")? + 1;
            iteration = ck.iteration;
            if train_rem {
                inputs = method_inputs(method, &degraded, rem.as_ref())?;
            }
        }
        None => {
            let val0 = cascade_validation(&reg, &inputs, &grid, &val_pairs)?;
            history.epochs.push(EpochRecord {
                epoch: 0,
                iteration: 0,
                train_loss: None,
                val: val0,
            });
        }
    }

    let mut pairs = Vec::new();
    for &f in &ds.split.train {
        for &m in &ds.split.train {
            if f != m {
                pairs.push((f, m));
            }
        }
    }
    let inv_batch = 1.0 / cfg.batch as f32;
    let mut last_epoch = start_epoch - 1;
    for epoch in start_epoch..=cfg.epochs {
        if cfg.max_steps.is_some_and(|m| iteration >= m) {
            break;
        }
        let mut order = pairs.clone();
        order.shuffle(&mut substream(cfg.seed, "sampling/cascade", epoch as u64));
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| iteration >= m) {
                break;
            }
            let mut step_loss = 0.0;
            for &(f, m) in chunk {
                let mut tape = Tape::new();
                let gb = reg.bind(&mut tape);
                let rb = rem.as_ref().map(|r| r.bind(&mut tape));
                let (f_in, m_in, dvf) = if train_rem {
                    let r = rem.as_ref().expect("present");
                    let fu = tape.constant(inputs.lr_up[f].clone());
                    let mu = tape.constant(inputs.lr_up[m].clone());
                    let out = cascade_forward_taped(
                        &mut tape,
                        r,
                        rb.as_ref().expect("bound"),
                        &reg,
                        &gb,
                        fu,
                        mu,
                    )?;
                    (out.f_sr, out.m_sr, out.dvf)
                } else {
                    let fv = tape.constant(inputs.reg_in[f].clone());
                    let mv = tape.constant(inputs.reg_in[m].clone());
                    let dvf = register_sr_taped(&mut tape, &reg, &gb, fv, mv)?;
                    (fv, mv, dvf)
                };
                let main = main_loss(&mut tape, dvf, f_in, m_in, &cfg.lncc)?;
                let smooth = tape.smoothness(dvf)?;
                let aux = match (&rem, &rb) {
                    (Some(r), Some(rb)) if weights.lambda1 > 0.0 => {
                        let mu = tape.constant(inputs.lr_up[m].clone());
                        aux_loss(&mut tape, r, rb, dvf, mu, f_in, cfg.huber_delta)?
                    }
                    _ => tape.constant(Tensor5::scalar(0.0)),
                };
                let total = total_loss(&mut tape, main, aux, smooth, &weights)?;
                let loss = tape.scale(total, inv_batch);
                let value = tape.value(total).item().f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite("train_cascade loss"));
                }
                let grads = tape.backward(loss)?;
                reg.params.collect_grads(&gb, &grads);
                if let (true, Some(r), Some(rb)) = (train_rem, rem.as_mut(), rb.as_ref()) {
                    r.params.collect_grads(rb, &grads);
                }
                step_loss += value / chunk.len() as f64;
            }
            let lr = lr_schedule(iteration, &cfg.schedule);
            adam_step(&mut reg.params, &mut adam, lr)?;
            if train_rem {
                adam_step(
                    &mut rem.as_mut().expect("present").params,
                    &mut rem_adam,
                    lr,
                )?;
            }
            iteration += 1;
            history.losses.push(step_loss);
            sum += step_loss;
            steps += 1;
        }
        if train_rem {
            inputs = method_inputs(method, &degraded, rem.as_ref())?;
        }
        let val_metrics = cascade_validation(&reg, &inputs, &grid, &val_pairs)?;
        let improved = history
            .best("dice")
            .is_none_or(|b| val_metrics["dice"] > b.val["dice"]);
        if improved {
            best = reg.clone();
            best_rem = rem.clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            iteration,
            train_loss: (steps > 0).then(|| sum / steps as f64),
            val: val_metrics,
        });
        last_epoch = epoch;
    }

    let mut ck = Checkpoint {
        rem: rem.as_ref().map(|r| r.cfg),
        reg: Some(reg_cfg),
        iteration,
        meta: serde_json::json!({
            "trainer": "cascade",
            "method": to_json(&method)?,
            "epoch": last_epoch,
            "train_cfg": to_json(cfg)?,
            "history": to_json(&history)?,
        }),
        ..Checkpoint::default()
    };
    ck.add_params("reg", &reg.params)?;
    ck.add_params("best/reg", &best.params)?;
    ck.add_adam("reg", &adam)?;
    if let (Some(r), Some(b)) = (&rem, &best_rem) {
        ck.add_params("rem", &r.params)?;
        ck.add_params("best/rem", &b.params)?;
        if train_rem {
            ck.add_adam("rem", &rem_adam)?;
        }
    }
    Ok(CascadeOutcome {
        method,
        best,
        last: reg,
        rem: best_rem,
        history,
        checkpoint: ck,
    })
}

/// Trained networks of one `(scale, method)` cell.
#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub rem: Option<RemModel<f32>>,
    pub reg: RegModel<f32>,
}

impl From<&CascadeOutcome> for TrainedCell {
    fn from(o: &CascadeOutcome) -> Self {
        Self {
            rem: o.rem.clone(),
            reg: o.best.clone(),
        }
    }
}

/// Trained models keyed by `(scale, method)`; the identity arm needs none.
#[derive(Clone, Debug, Default)]
pub struct SuiteModels {
    pub cells: BTreeMap<(usize, Method), TrainedCell>,
}

impl SuiteModels {
    pub fn insert(&mut self, scale: usize, method: Method, cell: TrainedCell) {
        self.cells.insert((scale, method), cell);
    }
}

/// Metrics of one registered pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub fixed: usize,
    pub moving: usize,
    pub dice: f64,
    pub ncc: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Registers every ordered pair of the listed samples with one method and
/// scores the warped moving volume against the fixed one: Dice on
/// nearest-warped labels, NCC, PSNR and SSIM on trilinearly warped
/// intensities. `reg-down` is scored on the low-resolution grid, every
/// other method on the original grid.
pub fn evaluate_pairs(
    ds: &Dataset,
    samples: &[usize],
    method: Method,
    scale: usize,
    models: &SuiteModels,
) -> Result<Vec<PairMetrics>> {
    let cell = match method {
        Method::Identity => None,
        _ => Some(models.cells.get(&(scale, method)).ok_or_else(|| {
            Error::Config(format!("no trained model for {method} at scale {scale}"))
        })?),
    };
    let degraded = ds.degraded(scale)?;
    let inputs = method_inputs(method, &degraded, cell.and_then(|c| c.rem.as_ref()))?;
    let grid = eval_grid(ds, method, &degraded, scale)?;
    let ssim_cfg = SsimCfg::default();
    let mut out = Vec::new();
    for &f in samples {
        for &m in samples {
            if f == m {
                continue;
            }
            let dvf = pair_dvf(cell.map(|c| &c.reg), &inputs, &grid, f, m)?;
            let (f_img, f_lab) = (&grid.images[f], &grid.labels[f]);
            let labels = warp_nearest(&grid.labels[m], &dvf)?;
            let image = warp_trilinear_forward(&grid.images[m], &dvf)?;
            out.push(PairMetrics {
                fixed: f,
                moving: m,
                dice: dice(&labels, f_lab, None)?
                    .mean
                    .ok_or_else(|| Error::Config(format!("pair {f}/{m} has no labels")))?,
                ncc: ncc_global(&image, f_img)?
                    .ok_or_else(|| Error::Config(format!("pair {f}/{m} has a constant volume")))?,
                psnr: psnr(&image, f_img, 1.0)?.value(),
                ssim: ssim3d(&image, f_img, &ssim_cfg)?,
            });
        }
    }
    Ok(out)
}

/// Mean metrics of every requested `(scale, method)` cell over all ordered
/// pairs of `test` samples, each test sample serving once as the fixed image.
pub fn evaluate_suite(
    ds: &Dataset,
    test: &[usize],
    models: &SuiteModels,
    scales: &[usize],
    methods: &[Method],
) -> Result<Vec<MetricReportRow>> {
    if test.len() < 2 {
        return Err(Error::Config(
            "evaluation needs at least two test samples".into(),
        ));
    }
    let mut rows = Vec::new();
    for &scale in scales {
        for &method in methods {
            let pairs = evaluate_pairs(ds, test, method, scale, models)?;
            let n = pairs.len() as f64;
            let mean = |g: fn(&PairMetrics) -> f64| pairs.iter().map(g).sum::<f64>() / n;
            rows.push(MetricReportRow {
                method: method.name().to_string(),
                scale: scale as u32,
                dice: mean(|p| p.dice),
                ncc: mean(|p| p.ncc),
                psnr: mean(|p| p.psnr),
                ssim: mean(|p| p.ssim),
            });
        }
    }
    Ok(rows)
}
