//! Small encoder-decoder predicting a dense displacement field from a
//! fixed/moving pair, and the REM → registration cascade.

use serde::{Deserialize, Serialize};

use crate::engine::init::{kaiming, substream};
use crate::engine::{ParamSet, Real, Shape5, Tape, Tensor5, Var};
use crate::error::{Error, Result};
use crate::rem::RemModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegConfig {
    /// Number of stride-2 encoder stages.
    pub levels: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl RegConfig {
    pub fn new(levels: usize, base_channels: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            levels,
            base_channels,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.levels > 8 {
            return Err(Error::Config(format!(
                "registration net needs 1 <= levels <= 8 and base_channels >= 1, got {} and {}",
                self.levels, self.base_channels
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `i`.
    fn enc_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Channels of decoder stage `i`; stage 0 runs at full resolution.
    fn dec_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.base_channels
        } else {
            self.base_channels << (i - 1)
        }
    }
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegModel<T> {
    pub cfg: RegConfig,
    pub params: ParamSet<T>,
}

fn conv_shape(cout: usize, cin: usize) -> Shape5 {
    Shape5::new(cout, cin, 3, 3, 3)
}

fn bias_shape(cout: usize) -> Shape5 {
    Shape5::new(1, cout, 1, 1, 1)
}

/// Builds the network with Kaiming-initialized hidden layers and a zeroed
/// output layer, so the initial field is identically zero.
pub fn build_reg<T: Real>(cfg: RegConfig) -> Result<RegModel<T>> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "init/reg", 0);
    let mut params = ParamSet::new();
    let mut cin = 2;
    for i in 0..cfg.levels {
        let cout = cfg.enc_channels(i);
        params.push(
            format!("enc.{i}.weight"),
            kaiming(conv_shape(cout, cin), &mut rng),
        )?;
        params.push(format!("enc.{i}.bias"), Tensor5::zeros(bias_shape(cout)))?;
        cin = cout;
    }
    for i in (0..cfg.levels).rev() {
        let skip = if i == 0 { 2 } else { cfg.enc_channels(i - 1) };
        let cout = cfg.dec_channels(i);
        params.push(
            format!("dec.{i}.weight"),
            kaiming(conv_shape(cout, cin + skip), &mut rng),
        )?;
        params.push(format!("dec.{i}.bias"), Tensor5::zeros(bias_shape(cout)))?;
        cin = cout;
    }
    params.push("out.weight", Tensor5::zeros(conv_shape(3, cin)))?;
    params.push("out.bias", Tensor5::zeros(bias_shape(3)))?;
    Ok(RegModel { cfg, params })
}

impl<T: Real> RegModel<T> {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Maps a `(1, 2, L, W, H)` pair to a `(1, 3, L, W, H)` field in voxels.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], pair: Var) -> Result<Var> {
        let s = tape.value(pair).shape();
        if s.channels() != 2 {
            return Err(Error::shape(
                "reg_forward",
                format!("expected 2 channels, got {s}"),
            ));
        }
        let factor = 1usize << self.cfg.levels;
        if s.spatial().iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(Error::shape(
                "reg_forward",
                format!("spatial dims of {s} must be divisible by {factor}"),
            ));
        }
        let levels = self.cfg.levels;
        let mut slot = 0;
        let mut next = || {
            let (w, b) = (bound[slot], bound[slot + 1]);
            slot += 2;
            (w, b)
        };
        let mut skips = vec![pair];
        let mut f = pair;
        for _ in 0..levels {
            let (w, b) = next();
            let c = tape.conv3d(f, w, b, 2)?;
            f = tape.relu(c);
            skips.push(f);
        }
        for i in (0..levels).rev() {
            let skip = skips[i];
            let dims = tape.value(skip).shape().spatial();
            let up = tape.resize_to(f, dims)?;
            let cat = tape.concat_channels(&[up, skip])?;
            let (w, b) = next();
            let c = tape.conv3d(cat, w, b, 1)?;
            f = tape.relu(c);
        }
        let (w, b) = next();
        tape.conv3d(f, w, b, 1)
    }

    /// Untaped inference.
    pub fn apply(&self, pair: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut tape = Tape::new();
        let bound: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let x = tape.constant(pair.clone());
        let z = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }
}

pub fn reg_forward<T: Real>(model: &RegModel<T>, pair: &Tensor5<T>) -> Result<Tensor5<T>> {
    model.apply(pair)
}

fn check_pair_layout(op: &'static str, s: Shape5, b: usize, c: usize) -> Result<()> {
    if s.batch() != b || s.channels() != c {
        return Err(Error::shape(
            op,
            format!("expected ({b},{c},L,W,H), got {s}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// `(2, 1, L, W, H) -> (1, 2, L, W, H)`: fixed to channel 0, moving to 1.
    pub fn rearrange_pair(&mut self, y: Var) -> Result<Var> {
        check_pair_layout("rearrange_pair", self.value(y).shape(), 2, 1)?;
        Ok(self.swap_batch_channel(y))
    }

    /// Inverse of [`Tape::rearrange_pair`].
    pub fn unrearrange_pair(&mut self, y: Var) -> Result<Var> {
        check_pair_layout("unrearrange_pair", self.value(y).shape(), 1, 2)?;
        Ok(self.swap_batch_channel(y))
    }
}

/// Untaped `(2, 1, ...) -> (1, 2, ...)`.
pub fn rearrange_pair<T: Real>(y: &Tensor5<T>) -> Result<Tensor5<T>> {
    check_pair_layout("rearrange_pair", y.shape(), 2, 1)?;
    Ok(crate::engine::ops::swap_bc(y))
}

/// Untaped `(1, 2, ...) -> (2, 1, ...)`.
pub fn unrearrange_pair<T: Real>(y: &Tensor5<T>) -> Result<Tensor5<T>> {
    check_pair_layout("unrearrange_pair", y.shape(), 1, 2)?;
    Ok(crate::engine::ops::swap_bc(y))
}

#[derive(Clone, Copy, Debug)]
pub struct CascadeVars {
    pub f_sr: Var,
    pub m_sr: Var,
    pub dvf: Var,
}

/// Enhances both upsampled images with the REM, then registers the results.
#[allow(clippy::too_many_arguments)]
pub fn cascade_forward_taped<T: Real>(
    tape: &mut Tape<T>,
    rem: &RemModel<T>,
    rem_bound: &[Var],
    reg: &RegModel<T>,
    reg_bound: &[Var],
    f_lr_up: Var,
    m_lr_up: Var,
) -> Result<CascadeVars> {
    let (fs, ms) = (tape.value(f_lr_up).shape(), tape.value(m_lr_up).shape());
    if fs != ms || fs.batch() != 1 || fs.channels() != 1 {
        return Err(Error::shape(
            "cascade_forward",
            format!("pair must be two (1,1,L,W,H) volumes, got {fs} and {ms}"),
        ));
    }
    let x = tape.stack_batch(&[f_lr_up, m_lr_up])?;
    let y = rem.forward(tape, rem_bound, x)?;
    let f_sr = tape.select_batch(y, 0)?;
    let m_sr = tape.select_batch(y, 1)?;
    let dvf = register_sr_taped(tape, reg, reg_bound, f_sr, m_sr)?;
    Ok(CascadeVars { f_sr, m_sr, dvf })
}

/// Registration half of the cascade, for already enhanced images.
pub fn register_sr_taped<T: Real>(
    tape: &mut Tape<T>,
    reg: &RegModel<T>,
    reg_bound: &[Var],
    f_sr: Var,
    m_sr: Var,
) -> Result<Var> {
    let stacked = tape.stack_batch(&[f_sr, m_sr])?;
    let pair = tape.rearrange_pair(stacked)?;
    reg.forward(tape, reg_bound, pair)
}

#[derive(Clone, Debug)]
pub struct CascadeOutput<T> {
    pub f_sr: Tensor5<T>,
    pub m_sr: Tensor5<T>,
    pub dvf: Tensor5<T>,
}

/// Untaped cascade.
pub fn cascade_forward<T: Real>(
    rem: &RemModel<T>,
    reg: &RegModel<T>,
    f_lr_up: &Tensor5<T>,
    m_lr_up: &Tensor5<T>,
) -> Result<CascadeOutput<T>> {
    let mut tape = Tape::new();
    let rb: Vec<Var> = rem
        .params
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    let gb: Vec<Var> = reg
        .params
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    let f = tape.constant(f_lr_up.clone());
    let m = tape.constant(m_lr_up.clone());
    let out = cascade_forward_taped(&mut tape, rem, &rb, reg, &gb, f, m)?;
    Ok(CascadeOutput {
        f_sr: tape.value(out.f_sr).clone(),
        m_sr: tape.value(out.m_sr).clone(),
        dvf: tape.value(out.dvf).clone(),
    })
}
