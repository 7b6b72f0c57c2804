//! Similarity, intensity and smoothness losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::engine::tensor::same_shape;
use crate::engine::{Real, Tape, Tensor5, Var};
use crate::error::{Error, Result};
use crate::rem::RemModel;
use crate::resample::ShiftVec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {lambda1}, {lambda2}"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnccCfg {
    /// Cube side of the window, odd and at least 3.
    pub window: usize,
    pub eps: f64,
}

impl LnccCfg {
    pub fn new(window: usize, eps: f64) -> Result<Self> {
        let cfg = Self { window, eps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "LNCC window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "LNCC eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

impl Default for LnccCfg {
    fn default() -> Self {
        Self {
            window: 5,
            eps: 1e-5,
        }
    }
}

/// Sums over a cube of half-width `r` clipped to the grid (zero padding).
/// The operator is self-adjoint.
pub(crate) fn box_sum<T: Real>(src: &[T], dims: [usize; 3], r: usize) -> Vec<T> {
    let [nl, nw, nh] = dims;
    let mut a = src.to_vec();
    let mut b = vec![T::zero(); src.len()];
    // stride and length per axis, H first
    for (stride, n) in [(1, nh), (nh, nw), (nh * nw, nl)] {
        let lines = src.len() / n;
        for line in 0..lines {
            let base = (line / stride) * stride * n + line % stride;
            for i in 0..n {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(n - 1);
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += a[base + j * stride];
                }
                b[base + i * stride] = acc;
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Number of in-grid voxels in each window.
pub(crate) fn window_counts<T: Real>(dims: [usize; 3], r: usize) -> Vec<T> {
    let axis = |n: usize| -> Vec<usize> {
        (0..n)
            .map(|i| (i + r).min(n - 1) - i.saturating_sub(r) + 1)
            .collect()
    };
    let (cl, cw, ch) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut out = Vec::with_capacity(dims.iter().product());
    for &a in &cl {
        for &b in &cw {
            for &c in &ch {
                out.push(T::of((a * b * c) as f64));
            }
        }
    }
    out
}

/// Per-window statistics of one plane.
struct WindowStats<T> {
    si: Vec<T>,
    sj: Vec<T>,
    cross: Vec<T>,
    var_i: Vec<T>,
    var_j: Vec<T>,
    /// Whether the variance was clamped at zero.
    clamp_i: Vec<bool>,
    clamp_j: Vec<bool>,
}

fn window_stats<T: Real>(i: &[T], j: &[T], dims: [usize; 3], r: usize, n: &[T]) -> WindowStats<T> {
    let ii: Vec<T> = i.iter().map(|&v| v * v).collect();
    let jj: Vec<T> = j.iter().map(|&v| v * v).collect();
    let ij: Vec<T> = i.iter().zip(j).map(|(&a, &b)| a * b).collect();
    let si = box_sum(i, dims, r);
    let sj = box_sum(j, dims, r);
    let si2 = box_sum(&ii, dims, r);
    let sj2 = box_sum(&jj, dims, r);
    let sij = box_sum(&ij, dims, r);
    let len = i.len();
    let mut cross = Vec::with_capacity(len);
    let mut var_i = Vec::with_capacity(len);
    let mut var_j = Vec::with_capacity(len);
    let mut clamp_i = Vec::with_capacity(len);
    let mut clamp_j = Vec::with_capacity(len);
    for p in 0..len {
        cross.push(sij[p] - si[p] * sj[p] / n[p]);
        let vi = si2[p] - si[p] * si[p] / n[p];
        let vj = sj2[p] - sj[p] * sj[p] / n[p];
        clamp_i.push(vi < T::zero());
        clamp_j.push(vj < T::zero());
        var_i.push(vi.max(T::zero()));
        var_j.push(vj.max(T::zero()));
    }
    WindowStats {
        si,
        sj,
        cross,
        var_i,
        var_j,
        clamp_i,
        clamp_j,
    }
}

fn check_lncc_inputs<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, cfg: &LnccCfg) -> Result<()> {
    cfg.validate()?;
    same_shape("lncc", a, b)?;
    if a.shape().channels() != 1 {
        return Err(Error::shape(
            "lncc",
            format!("expected 1 channel, got {}", a.shape()),
        ));
    }
    Ok(())
}

/// Untaped LNCC value.
pub fn lncc_value<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, cfg: &LnccCfg) -> Result<T> {
    check_lncc_inputs(a, b, cfg)?;
    Ok(lncc_forward(a, b, cfg))
}

fn lncc_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, cfg: &LnccCfg) -> T {
    let s = a.shape();
    let dims = s.spatial();
    let r = cfg.window / 2;
    let eps = T::of(cfg.eps);
    let n = window_counts::<T>(dims, r);
    let mut total = 0.0f64;
    for bi in 0..s.batch() {
        let st = window_stats(a.plane(bi, 0), b.plane(bi, 0), dims, r, &n);
        for p in 0..n.len() {
            let cc = st.cross[p] * st.cross[p] / (st.var_i[p] * st.var_j[p] + eps);
            total += cc.f64();
        }
    }
    T::of(total / a.len() as f64)
}

impl<T: Real> Tape<T> {
    /// Mean windowed squared correlation of two single-channel volumes.
    pub fn lncc(&mut self, a: Var, b: Var, cfg: &LnccCfg) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_lncc_inputs(ta, tb, cfg)?;
        let out = Tensor5::scalar(lncc_forward(ta, tb, cfg));
        let cfg = *cfg;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, ins, _, needs| {
                let (ga, gb) = lncc_backward(ins[0], ins[1], &cfg, g.item(), needs);
                vec![ga, gb]
            }),
        ))
    }

    /// Mean Huber penalty of `a − b`.
    pub fn huber(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("huber", ta, tb)?;
        check_delta(delta)?;
        let out = Tensor5::scalar(huber_forward(ta, tb, delta));
        let d = T::of(delta);
        let regimes: Vec<u64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| ((x - y).abs() <= d) as u64)
            .collect();
        self.record_branches(regimes);
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g, ins, _, needs| {
                let d = T::of(delta);
                let scale = g.item() / T::of(ins[0].len() as f64);
                let ga: Vec<T> = ins[0]
                    .data()
                    .iter()
                    .zip(ins[1].data())
                    .map(|(&x, &y)| {
                        let diff = x - y;
                        let clipped = if diff.abs() <= d {
                            diff
                        } else {
                            d * diff.signum()
                        };
                        clipped * scale
                    })
                    .collect();
                let ga = Tensor5::from_op("huber'", ins[0].shape(), ga);
                let gb = needs[1].then(|| ga.map(|v| -v));
                vec![needs[0].then_some(ga), gb]
            }),
        ))
    }

    /// Sum over the binary shifts of the squared differences `z − S_m z`.
    pub fn smoothness(&mut self, z: Var) -> Result<Var> {
        let t = self.value(z);
        check_dvf_channels(t)?;
        let out = Tensor5::scalar(smoothness_forward(t));
        Ok(self.push_op(
            out,
            vec![z],
            Box::new(|g, ins, _, _| vec![Some(smoothness_backward(ins[0], g.item()))]),
        ))
    }
}

fn lncc_backward<T: Real>(
    a: &Tensor5<T>,
    b: &Tensor5<T>,
    cfg: &LnccCfg,
    upstream: T,
    needs: &[bool],
) -> (Option<Tensor5<T>>, Option<Tensor5<T>>) {
    let s = a.shape();
    let dims = s.spatial();
    let r = cfg.window / 2;
    let eps = T::of(cfg.eps);
    let n = window_counts::<T>(dims, r);
    let scale = upstream / T::of(a.len() as f64);
    let two = T::of(2.0);
    let mut ga = needs[0].then(|| Tensor5::zeros(s));
    let mut gb = needs[1].then(|| Tensor5::zeros(s));
    let len = n.len();
    for bi in 0..s.batch() {
        let (i, j) = (a.plane(bi, 0), b.plane(bi, 0));
        let st = window_stats(i, j, dims, r, &n);
        // Derivatives with respect to the five box sums, per window.
        let mut d_si = vec![T::zero(); len];
        let mut d_sj = vec![T::zero(); len];
        let mut d_si2 = vec![T::zero(); len];
        let mut d_sj2 = vec![T::zero(); len];
        let mut d_sij = vec![T::zero(); len];
        for p in 0..len {
            let x = st.cross[p];
            let (y, z) = (st.var_i[p], st.var_j[p]);
            let den = y * z + eps;
            let gx = two * x / den * scale;
            let k = x * x / (den * den) * scale;
            let gy = if st.clamp_i[p] { T::zero() } else { -k * z };
            let gz = if st.clamp_j[p] { T::zero() } else { -k * y };
            d_sij[p] = gx;
            d_si[p] = -(gx * st.sj[p] + two * gy * st.si[p]) / n[p];
            d_sj[p] = -(gx * st.si[p] + two * gz * st.sj[p]) / n[p];
            d_si2[p] = gy;
            d_sj2[p] = gz;
        }
        let b_sij = box_sum(&d_sij, dims, r);
        if let Some(ga) = ga.as_mut() {
            let b_si = box_sum(&d_si, dims, r);
            let b_si2 = box_sum(&d_si2, dims, r);
            for (q, out) in ga.plane_mut(bi, 0).iter_mut().enumerate() {
                *out = b_si[q] + two * i[q] * b_si2[q] + j[q] * b_sij[q];
            }
        }
        if let Some(gb) = gb.as_mut() {
            let b_sj = box_sum(&d_sj, dims, r);
            let b_sj2 = box_sum(&d_sj2, dims, r);
            for (q, out) in gb.plane_mut(bi, 0).iter_mut().enumerate() {
                *out = b_sj[q] + two * j[q] * b_sj2[q] + i[q] * b_sij[q];
            }
        }
    }
    (ga, gb)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Config(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    Ok(())
}

fn huber_forward<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, delta: f64) -> T {
    let d = T::of(delta);
    let half = T::of(0.5);
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let e = (x - y).abs();
            let v = if e <= d {
                half * e * e
            } else {
                d * (e - half * d)
            };
            v.f64()
        })
        .sum();
    T::of(total / a.len() as f64)
}

/// Untaped Huber value.
pub fn huber_value<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, delta: f64) -> Result<T> {
    same_shape("huber", a, b)?;
    check_delta(delta)?;
    Ok(huber_forward(a, b, delta))
}

fn check_dvf_channels<T: Real>(z: &Tensor5<T>) -> Result<()> {
    if z.shape().channels() != 3 {
        return Err(Error::shape(
            "smoothness",
            format!("expected 3 channels, got {}", z.shape()),
        ));
    }
    Ok(())
}

/// Calls `f(p, p + m)` with flat plane offsets for every overlap voxel of
/// every non-zero shift.
fn for_each_shift_pair(dims: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let [_, nw, nh] = dims;
    for m in ShiftVec::all().into_iter().filter(|m| !m.is_zero()) {
        let [du, dv, dw] = m.components();
        let [ol, ow, oh] = m.overlap(dims);
        let step = (du * nw + dv) * nh + dw;
        for i in 0..ol {
            for j in 0..ow {
                let row = (i * nw + j) * nh;
                for k in 0..oh {
                    f(row + k, row + k + step);
                }
            }
        }
    }
}

fn smoothness_forward<T: Real>(z: &Tensor5<T>) -> T {
    let s = z.shape();
    let mut total = 0.0f64;
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let plane = z.plane(b, c);
            for_each_shift_pair(s.spatial(), |p, q| {
                let d = (plane[p] - plane[q]).f64();
                total += d * d;
            });
        }
    }
    T::of(total)
}

fn smoothness_backward<T: Real>(z: &Tensor5<T>, upstream: T) -> Tensor5<T> {
    let s = z.shape();
    let mut g = Tensor5::zeros(s);
    let two = T::of(2.0) * upstream;
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let plane = z.plane(b, c);
            let gp = g.plane_mut(b, c);
            for_each_shift_pair(s.spatial(), |p, q| {
                let d = two * (plane[p] - plane[q]);
                gp[p] += d;
                gp[q] -= d;
            });
        }
    }
    g
}

/// Untaped smoothness value.
pub fn smoothness_value<T: Real>(z: &Tensor5<T>) -> Result<T> {
    check_dvf_channels(z)?;
    Ok(smoothness_forward(z))
}

/// `−lncc(warp(m_sr, dvf), f_sr)`.
pub fn main_loss<T: Real>(
    tape: &mut Tape<T>,
    dvf: Var,
    f_sr: Var,
    m_sr: Var,
    cfg: &LnccCfg,
) -> Result<Var> {
    let warped = tape.warp_trilinear(m_sr, dvf)?;
    let sim = tape.lncc(warped, f_sr, cfg)?;
    Ok(tape.scale(sim, -T::one()))
}

/// `huber(rem(warp(m_lr_up, dvf)), f_sr)`: warp first, then enhance.
/// `rem_bound` is the output of [`RemModel::bind`] on the same tape.
pub fn aux_loss<T: Real>(
    tape: &mut Tape<T>,
    rem: &RemModel<T>,
    rem_bound: &[Var],
    dvf: Var,
    m_lr_up: Var,
    f_sr: Var,
    delta: f64,
) -> Result<Var> {
    let warped = tape.warp_trilinear(m_lr_up, dvf)?;
    let enhanced = rem.forward(tape, rem_bound, warped)?;
    tape.huber(enhanced, f_sr, delta)
}

/// `main + λ₁·aux + λ₂·reg` on the tape.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    main: Var,
    aux: Var,
    reg: Var,
    w: &LossWeights,
) -> Result<Var> {
    let a = tape.scale(aux, T::of(w.lambda1));
    let r = tape.scale(reg, T::of(w.lambda2));
    let s = tape.add(main, a)?;
    tape.add(s, r)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(main: f64, aux: f64, reg: f64, w: &LossWeights) -> f64 {
    main + w.lambda1 * aux + w.lambda2 * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape5;
    use crate::resample::shift_volume;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape5, seed: u64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    /// Per-window statistics gathered voxel by voxel.
    fn lncc_brute(a: &Tensor5<f64>, b: &Tensor5<f64>, window: usize, eps: f64) -> f64 {
        let s = a.shape();
        let [nl, nw, nh] = s.spatial();
        let r = (window / 2) as isize;
        let mut total = 0.0;
        for bi in 0..s.batch() {
            for i in 0..nl as isize {
                for j in 0..nw as isize {
                    for k in 0..nh as isize {
                        let mut xs = Vec::new();
                        let mut ys = Vec::new();
                        for di in -r..=r {
                            for dj in -r..=r {
                                for dk in -r..=r {
                                    let (p, q, t) = (i + di, j + dj, k + dk);
                                    if p < 0 || q < 0 || t < 0 {
                                        continue;
                                    }
                                    let (p, q, t) = (p as usize, q as usize, t as usize);
                                    if p >= nl || q >= nw || t >= nh {
                                        continue;
                                    }
                                    xs.push(a.at([bi, 0, p, q, t]));
                                    ys.push(b.at([bi, 0, p, q, t]));
                                }
                            }
                        }
                        let m = xs.len() as f64;
                        let ma = xs.iter().sum::<f64>() / m;
                        let mb = ys.iter().sum::<f64>() / m;
                        let cross: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - ma) * (y - mb)).sum();
                        let va: f64 = xs.iter().map(|x| (x - ma) * (x - ma)).sum();
                        let vb: f64 = ys.iter().map(|y| (y - mb) * (y - mb)).sum();
                        total += cross * cross / (va * vb + eps);
                    }
                }
            }
        }
        total / a.len() as f64
    }

    #[test]
    fn lncc_matches_windowed_oracle() {
        let shape = Shape5::new(1, 1, 5, 5, 5);
        for seed in 0..4 {
            let a = random(shape, seed);
            let b = random(shape, seed + 100);
            let cfg = LnccCfg::new(3, 1e-5).unwrap();
            let got = lncc_value(&a, &b, &cfg).unwrap();
            let want = lncc_brute(&a, &b, 3, 1e-5);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let shape = Shape5::new(2, 1, 4, 6, 5);
        let (a, b) = (random(shape, 7), random(shape, 8));
        let got = lncc_value(&a, &b, &LnccCfg::new(5, 1e-5).unwrap()).unwrap();
        assert!((got - lncc_brute(&a, &b, 5, 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn lncc_self_is_near_one_and_constant_is_near_zero() {
        let shape = Shape5::new(1, 1, 8, 8, 8);
        let a = random(shape, 1);
        let cfg = LnccCfg::default();
        let v = lncc_value(&a, &a, &cfg).unwrap();
        assert!(v <= 1.0 && 1.0 - v < 1e-3, "{v}");
        let c = Tensor5::full(shape, 0.4);
        assert!(lncc_value(&a, &c, &cfg).unwrap().abs() < 1e-6);
        let a32: Tensor5<f32> = a.cast();
        let v32 = lncc_value(&a32, &a32, &cfg).unwrap();
        assert!(1.0 - v32 < 1e-3, "{v32}");
    }

    #[test]
    fn lncc_rejects_bad_inputs() {
        let a = random(Shape5::new(1, 1, 4, 4, 4), 0);
        let b = random(Shape5::new(1, 1, 4, 4, 5), 0);
        assert!(matches!(
            lncc_value(&a, &b, &LnccCfg::default()),
            Err(Error::Shape { .. })
        ));
        let two = random(Shape5::new(1, 2, 4, 4, 4), 0);
        assert!(lncc_value(&two, &two, &LnccCfg::default()).is_err());
        assert!(LnccCfg::new(4, 1e-5).is_err());
        assert!(LnccCfg::new(1, 1e-5).is_err());
        assert!(LnccCfg::new(3, 0.0).is_err());
    }

    #[test]
    fn huber_closed_forms() {
        let shape = Shape5::new(1, 1, 3, 3, 3);
        let delta = 0.1;
        let zero = Tensor5::zeros(shape);
        assert_eq!(huber_value(&zero, &zero, delta).unwrap(), 0.0);
        let half = Tensor5::full(shape, delta / 2.0);
        let v = huber_value(&half, &zero, delta).unwrap();
        assert!((v - delta * delta / 8.0).abs() < 1e-15);
        let three = Tensor5::full(shape, 3.0 * delta);
        let v = huber_value(&zero, &three, delta).unwrap();
        assert!((v - 2.5 * delta * delta).abs() < 1e-15);
        assert!(huber_value(&zero, &zero, 0.0).is_err());
    }

    fn smoothness_brute(z: &Tensor5<f64>) -> f64 {
        ShiftVec::all()
            .into_iter()
            .map(|m| {
                shift_volume(z, m)
                    .difference()
                    .data()
                    .iter()
                    .map(|d| d * d)
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn smoothness_spike_and_ramp() {
        let mut z = Tensor5::zeros(Shape5::new(1, 3, 3, 3, 3));
        z.set([0, 1, 1, 1, 1], 1.0);
        assert_eq!(smoothness_value(&z).unwrap(), smoothness_brute(&z));
        // Centre spike: each of the 7 shifts sees it once as p and once as p + m.
        assert_eq!(smoothness_value(&z).unwrap(), 14.0);

        let slope = 0.7;
        let dims = [4, 3, 5];
        let ramp = Tensor5::from_fn(
            Shape5::new(1, 3, dims[0], dims[1], dims[2]),
            |[_, c, i, _, _]| {
                if c == 0 {
                    slope * i as f64
                } else {
                    0.0
                }
            },
        );
        let m = ShiftVec::new(1, 0, 0).unwrap();
        let term: f64 = shift_volume(&ramp, m)
            .difference()
            .data()
            .iter()
            .map(|d| d * d)
            .sum();
        let overlap: usize = m.overlap(dims).iter().product();
        assert!((term - slope * slope * overlap as f64).abs() < 1e-12);

        let c = Tensor5::full(Shape5::new(2, 3, 4, 4, 4), 0.3);
        assert_eq!(smoothness_value(&c).unwrap(), 0.0);
        assert!(smoothness_value(&Tensor5::<f64>::zeros(Shape5::new(1, 2, 3, 3, 3))).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss_value(-1.0, 0.0, 0.0, &w), -1.0);
        assert!((total_loss_value(-0.9, 0.02, 1000.0, &w) - (-0.69999)).abs() < 1e-12);
        let zero = LossWeights::new(0.0, 0.0).unwrap();
        assert_eq!(total_loss_value(-0.3, 5.0, 7.0, &zero), -0.3);
        assert!(LossWeights::new(-1.0, 0.0).is_err());

        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor5::scalar(-0.9));
        let a = tape.constant(Tensor5::scalar(0.02));
        let r = tape.constant(Tensor5::scalar(1000.0));
        let t = total_loss(&mut tape, m, a, r, &w).unwrap();
        assert!((tape.value(t).item() - (-0.69999)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lncc_symmetric_and_affine_invariant(seed in 0u64..1000, alpha in 0.5f64..3.0, beta in -1.0f64..1.0) {
            let shape = Shape5::new(1, 1, 5, 4, 6);
            let a = random(shape, seed);
            let b = random(shape, seed ^ 0xabc);
            let cfg = LnccCfg::new(3, 1e-5).unwrap();
            prop_assert_eq!(lncc_value(&a, &b, &cfg).unwrap(), lncc_value(&b, &a, &cfg).unwrap());
            let a32: Tensor5<f32> = a.cast();
            let b32: Tensor5<f32> = b.cast();
            prop_assert_eq!(lncc_value(&a32, &b32, &cfg).unwrap(), lncc_value(&b32, &a32, &cfg).unwrap());
            let sign = if seed % 2 == 0 { 1.0 } else { -1.0 };
            let affine = a.map(|v| sign * alpha * v + beta);
            let v = lncc_value(&a, &affine, &cfg).unwrap();
            prop_assert!((1.0 - v).abs() < 1e-3, "{}", v);
        }

        #[test]
        fn huber_symmetric_non_negative(seed in 0u64..1000, delta in 0.01f64..1.0) {
            let shape = Shape5::new(1, 1, 3, 4, 2);
            let a = random(shape, seed);
            let b = random(shape, seed + 1);
            let h = huber_value(&a, &b, delta).unwrap();
            prop_assert_eq!(h, huber_value(&b, &a, delta).unwrap());
            prop_assert!(h > 0.0);
            prop_assert_eq!(huber_value(&a, &a, delta).unwrap(), 0.0);
        }

        #[test]
        fn smoothness_matches_shift_oracle(seed in 0u64..1000, l in 1usize..5, w in 1usize..5, h in 1usize..5) {
            let z = random(Shape5::new(1, 3, l, w, h), seed);
            let v = smoothness_value(&z).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((v - smoothness_brute(&z)).abs() < 1e-10);
            let c = z.plane(0, 0)[0];
            let constant = Tensor5::from_fn(z.shape(), |[_, ch, ..]| c + ch as f64);
            prop_assert_eq!(smoothness_value(&constant).unwrap(), 0.0);
            if l * w * h > 1 {
                prop_assert!(v > 0.0);
            }
        }
    }
}
