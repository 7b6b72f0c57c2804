//! Central finite-difference checks of every differentiable op, in `f64`.
//!
//! Random inputs are drawn away from the non-differentiable sets (ReLU and
//! Huber kinks, integer sample positions of the trilinear warp) so the
//! comparison measures the analytic gradient rather than a kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::init::substream;
use crate::engine::{Shape5, Tape, Tensor5, Var};
use crate::error::{Error, Result};
use crate::losses::{aux_loss, main_loss, total_loss, LnccCfg, LossWeights};
use crate::regnet::{build_reg, cascade_forward_taped, RegConfig};
use crate::rem::{build_rem, RemConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckCfg {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub instances: usize,
    pub seed: u64,
}

impl Default for GradcheckCfg {
    fn default() -> Self {
        Self {
            h: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            instances: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// An op fails outright if more than this share of its probes straddle a kink.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

/// A differentiable function of several tensors, evaluated on a fresh tape.
pub type TapeFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Value and branch signature of `f` at `inputs`.
fn eval_scalar(
    f: &TapeFn,
    inputs: &[Tensor5<f64>],
    proj: Option<&Tensor5<f64>>,
) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = match proj {
        Some(r) => tape
            .value(out)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum(),
        None => tape.value(out).item(),
    };
    Ok((value, tape.branch_signature()))
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdStats {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose ±h probe crossed a kink and were not compared.
    pub skipped: usize,
}

impl FdStats {
    fn merge(&mut self, o: FdStats) {
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

/// Largest elementwise `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// over the inputs flagged in `wrt`. Non-scalar outputs are reduced with a
/// fixed random projection. An entry is skipped when either probe lands on a
/// different smooth piece than the base point (branch signatures differ).
pub fn check_fn(
    f: &TapeFn,
    inputs: &[Tensor5<f64>],
    wrt: &[bool],
    cfg: &GradcheckCfg,
    rng: &mut ChaCha8Rng,
) -> Result<FdStats> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape();
    let proj = (!out_shape.is_scalar())
        .then(|| Tensor5::from_fn(out_shape, |_| rng.random_range(-1.0..1.0)));
    let loss = match &proj {
        Some(r) => {
            let rv = tape.constant(r.clone());
            let prod = tape.mul(out, rv)?;
            tape.sum(prod)
        }
        None => out,
    };
    let grads = tape.backward(loss)?;
    let base = tape.branch_signature();

    let mut stats = FdStats::default();
    let mut work = inputs.to_vec();
    for (idx, &g) in wrt.iter().enumerate() {
        if !g {
            continue;
        }
        let zeros = Tensor5::zeros(inputs[idx].shape());
        let analytic = grads.get(vars[idx]).unwrap_or(&zeros).clone();
        for e in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + cfg.h;
            let (up, sig_up) = eval_scalar(f, &work, proj.as_ref())?;
            work[idx].data_mut()[e] = orig - cfg.h;
            let (down, sig_down) = eval_scalar(f, &work, proj.as_ref())?;
            work[idx].data_mut()[e] = orig;
            if sig_up != base || sig_down != base {
                stats.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            stats.max_rel_err = stats.max_rel_err.max((a - numeric).abs() / denom);
            stats.checked += 1;
        }
    }
    Ok(stats)
}

fn uniform(shape: Shape5, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in ±1 with a dead band around zero.
fn away_from_zero(shape: Shape5, band: f64, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    Tensor5::from_fn(shape, |_| {
        let m = rng.random_range(band..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Displacements whose sample positions stay inside the grid and at least
/// 0.1 voxel from every integer coordinate.
fn safe_dvf(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor5<f64> {
    Tensor5::from_fn(
        Shape5::new(1, 3, dims[0], dims[1], dims[2]),
        |[_, c, i, j, k]| {
            let p = [i, j, k][c] as f64;
            let cell = rng.random_range(0..dims[c] - 1) as f64;
            cell + rng.random_range(0.1..0.9) - p
        },
    )
}

fn cube(b: usize, c: usize, n: usize) -> Shape5 {
    Shape5::new(b, c, n, n, n)
}

/// Names of the ops covered by [`run_suite`], in run order.
pub const SUITE: &[&str] = &[
    "conv3d",
    "conv3d_stride2",
    "relu",
    "add",
    "mul",
    "concat_channels",
    "trilinear_resize",
    "warp_trilinear",
    "lncc",
    "huber",
    "smoothness",
    "cascade_loss_8",
];

fn run_instance(op: &str, cfg: &GradcheckCfg, rng: &mut ChaCha8Rng) -> Result<FdStats> {
    let s4 = cube(1, 1, 4);
    match op {
        "conv3d" | "conv3d_stride2" => {
            let stride = if op == "conv3d" { 1 } else { 2 };
            let x = uniform(cube(2, 2, 4), -1.0, 1.0, rng);
            let w = uniform(Shape5::new(3, 2, 3, 3, 3), -0.5, 0.5, rng);
            let b = uniform(Shape5::new(1, 3, 1, 1, 1), -0.5, 0.5, rng);
            let f = move |t: &mut Tape<f64>, v: &[Var]| t.conv3d(v[0], v[1], v[2], stride);
            check_fn(&f, &[x, w, b], &[true, true, true], cfg, rng)
        }
        "relu" => {
            let x = away_from_zero(cube(1, 2, 4), 1e-2, rng);
            let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0]));
            check_fn(&f, &[x], &[true], cfg, rng)
        }
        "add" | "mul" => {
            let x = uniform(s4, -1.0, 1.0, rng);
            let y = uniform(s4, -1.0, 1.0, rng);
            let is_add = op == "add";
            let f = move |t: &mut Tape<f64>, v: &[Var]| {
                if is_add {
                    t.add(v[0], v[1])
                } else {
                    t.mul(v[0], v[1])
                }
            };
            check_fn(&f, &[x, y], &[true, true], cfg, rng)
        }
        "concat_channels" => {
            let x = uniform(cube(1, 2, 4), -1.0, 1.0, rng);
            let y = uniform(s4, -1.0, 1.0, rng);
            let f = |t: &mut Tape<f64>, v: &[Var]| t.concat_channels(&[v[0], v[1]]);
            check_fn(&f, &[x, y], &[true, true], cfg, rng)
        }
        "trilinear_resize" => {
            let scale = *[2.0, 0.5, 1.5].get(rng.random_range(0..3)).unwrap_or(&2.0);
            let x = uniform(cube(1, 2, 4), 0.0, 1.0, rng);
            let f = move |t: &mut Tape<f64>, v: &[Var]| t.trilinear_resize(v[0], scale);
            check_fn(&f, &[x], &[true], cfg, rng)
        }
        "warp_trilinear" => {
            let vol = uniform(cube(1, 1, 4), 0.0, 1.0, rng);
            let dvf = safe_dvf([4, 4, 4], rng);
            let f = |t: &mut Tape<f64>, v: &[Var]| t.warp_trilinear(v[0], v[1]);
            check_fn(&f, &[vol, dvf], &[true, true], cfg, rng)
        }
        "lncc" => {
            let a = uniform(s4, 0.0, 1.0, rng);
            let b = uniform(s4, 0.0, 1.0, rng);
            let lc = LnccCfg::new(3, 1e-5)?;
            let f = move |t: &mut Tape<f64>, v: &[Var]| t.lncc(v[0], v[1], &lc);
            check_fn(&f, &[a, b], &[true, true], cfg, rng)
        }
        "huber" => {
            let delta = 0.1;
            let a = uniform(s4, 0.0, 1.0, rng);
            // Differences drawn on either side of the kink at |d| = δ.
            let d = Tensor5::from_fn(s4, |_| {
                let m = if rng.random_bool(0.5) {
                    rng.random_range(0.0..0.09)
                } else {
                    rng.random_range(0.11..0.5)
                };
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            let b = Tensor5::from_fn(s4, |idx| a.at(idx) - d.at(idx));
            let f = move |t: &mut Tape<f64>, v: &[Var]| t.huber(v[0], v[1], delta);
            check_fn(&f, &[a, b], &[true, true], cfg, rng)
        }
        "smoothness" => {
            let z = uniform(cube(1, 3, 4), -2.0, 2.0, rng);
            let f = |t: &mut Tape<f64>, v: &[Var]| t.smoothness(v[0]);
            check_fn(&f, &[z], &[true], cfg, rng)
        }
        "cascade_loss_8" => cascade_instance(cfg, rng),
        other => Err(Error::Config(format!("unknown gradcheck op {other:?}"))),
    }
}

/// Total loss of the full cascade on an 8³ pair, differentiated with respect
/// to every registration parameter while the REM stays frozen.
fn cascade_instance(cfg: &GradcheckCfg, rng: &mut ChaCha8Rng) -> Result<FdStats> {
    let seed = rng.random::<u64>();
    let mut rem = build_rem::<f64>(RemConfig::new(Variant::I, 4, 2)?, seed)?;
    rem.set_frozen(true);
    let mut reg = build_reg::<f64>(RegConfig::new(1, 2, seed)?)?;
    // Hidden layers keep their init; the output layer gets a small random
    // kernel and a 0.4 voxel bias so no sample lands near an integer position.
    for p in reg.params.iter_mut() {
        if p.name == "out.weight" {
            p.value = uniform(p.value.shape(), -0.005, 0.005, rng);
        } else if p.name == "out.bias" {
            p.value = Tensor5::full(p.value.shape(), 0.4);
        }
    }
    let f_up = uniform(cube(1, 1, 8), 0.0, 1.0, rng);
    let m_up = uniform(cube(1, 1, 8), 0.0, 1.0, rng);
    let values: Vec<Tensor5<f64>> = reg.params.iter().map(|p| p.value.clone()).collect();
    let lc = LnccCfg::new(3, 1e-5)?;
    let weights = LossWeights::new(10.0, 0.1)?;
    let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let rb: Vec<Var> = rem
            .params
            .iter()
            .map(|p| t.constant(p.value.clone()))
            .collect();
        let fv = t.constant(f_up.clone());
        let mv = t.constant(m_up.clone());
        let out = cascade_forward_taped(t, &rem, &rb, &reg, v, fv, mv)?;
        let main = main_loss(t, out.dvf, out.f_sr, out.m_sr, &lc)?;
        let aux = aux_loss(t, &rem, &rb, out.dvf, mv, out.f_sr, 0.1)?;
        let smooth = t.smoothness(out.dvf)?;
        total_loss(t, main, aux, smooth, &weights)
    };
    let wrt = vec![true; values.len()];
    check_fn(&f, &values, &wrt, cfg, rng)
}

/// Runs one op over `cfg.instances` random instances.
pub fn check_op(op: &str, cfg: &GradcheckCfg) -> Result<OpReport> {
    let mut stats = FdStats::default();
    for i in 0..cfg.instances {
        let mut rng = substream(cfg.seed, op, i as u64);
        stats.merge(run_instance(op, cfg, &mut rng)?);
    }
    let total = stats.checked + stats.skipped;
    Ok(OpReport {
        op: op.to_string(),
        instances: cfg.instances,
        checked: stats.checked,
        skipped: stats.skipped,
        max_rel_err: stats.max_rel_err,
        passed: stats.max_rel_err <= cfg.rel_tol
            && (stats.skipped as f64) <= MAX_SKIP_FRACTION * total as f64,
    })
}

pub fn run_suite(cfg: &GradcheckCfg) -> Result<Vec<OpReport>> {
    SUITE.iter().map(|op| check_op(op, cfg)).collect()
}
