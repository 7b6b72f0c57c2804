//! Trilinear resizing, displacement-field warping and the unit shift
//! operator used by the smoothness penalty.
//!
//! Resize uses half-voxel-centred coordinates `s = (t + 0.5)·(n_in/n_out) − 0.5`.
//! All sampling is border-clamped. Interpolation is written as nested lerps
//! `a + t·(b − a)`, so constant inputs and integer sample positions are
//! reproduced exactly.

use rayon::prelude::*;

use crate::engine::{Real, Shape5, Tape, Tensor5, Var};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// One axis of a clamped interpolation stencil.
#[derive(Clone, Copy, Debug)]
struct Stencil<T> {
    i0: usize,
    i1: usize,
    t: T,
    /// Sample position was outside the grid; the coordinate derivative is 0.
    clamped: bool,
}

#[inline]
fn stencil<T: Real>(c: T, n: usize) -> Stencil<T> {
    let hi = T::of((n - 1) as f64);
    if c < T::zero() || n == 1 {
        Stencil {
            i0: 0,
            i1: 0,
            t: T::zero(),
            clamped: true,
        }
    } else if c >= hi {
        Stencil {
            i0: n - 1,
            i1: n - 1,
            t: T::zero(),
            clamped: true,
        }
    } else {
        let f = c.floor();
        let i0 = f.to_usize().unwrap_or(0).min(n - 1);
        Stencil {
            i0,
            i1: (i0 + 1).min(n - 1),
            t: c - f,
            clamped: false,
        }
    }
}

/// The eight corner values of a stencil, indexed `[z][y][x]`.
#[inline]
fn corners<T: Real>(plane: &[T], dims: [usize; 3], s: &[Stencil<T>; 3]) -> [[[T; 2]; 2]; 2] {
    let [_, w, h] = dims;
    let zs = [s[0].i0, s[0].i1];
    let ys = [s[1].i0, s[1].i1];
    let xs = [s[2].i0, s[2].i1];
    let mut v = [[[T::zero(); 2]; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let row = (zs[a] * w + ys[b]) * h;
            v[a][b][0] = plane[row + xs[0]];
            v[a][b][1] = plane[row + xs[1]];
        }
    }
    v
}

#[inline]
fn interp<T: Real>(v: &[[[T; 2]; 2]; 2], t: [T; 3]) -> T {
    let c0 = lerp(
        lerp(v[0][0][0], v[0][0][1], t[2]),
        lerp(v[0][1][0], v[0][1][1], t[2]),
        t[1],
    );
    let c1 = lerp(
        lerp(v[1][0][0], v[1][0][1], t[2]),
        lerp(v[1][1][0], v[1][1][1], t[2]),
        t[1],
    );
    lerp(c0, c1, t[0])
}

/// d(interp)/d(t) along each axis.
#[inline]
fn interp_dt<T: Real>(v: &[[[T; 2]; 2]; 2], t: [T; 3]) -> [T; 3] {
    let c = |a: usize, b: usize| lerp(v[a][b][0], v[a][b][1], t[2]);
    let c0 = lerp(c(0, 0), c(0, 1), t[1]);
    let c1 = lerp(c(1, 0), c(1, 1), t[1]);
    let dz = c1 - c0;
    let dy = lerp(c(0, 1) - c(0, 0), c(1, 1) - c(1, 0), t[0]);
    let dxa = |a: usize| lerp(v[a][0][1] - v[a][0][0], v[a][1][1] - v[a][1][0], t[1]);
    let dx = lerp(dxa(0), dxa(1), t[0]);
    [dz, dy, dx]
}

#[inline]
fn sample_point<T: Real>(plane: &[T], dims: [usize; 3], c: [T; 3]) -> (T, [Stencil<T>; 3]) {
    let s = [
        stencil(c[0], dims[0]),
        stencil(c[1], dims[1]),
        stencil(c[2], dims[2]),
    ];
    let v = corners(plane, dims, &s);
    (interp(&v, [s[0].t, s[1].t, s[2].t]), s)
}

fn check_dvf<T: Real>(op: &'static str, vol: Shape5, dvf: &Tensor5<T>) -> Result<()> {
    let d = dvf.shape();
    if d.channels() != 3 || d.batch() != vol.batch() || d.spatial() != vol.spatial() {
        return Err(Error::shape(
            op,
            format!("volume {vol} vs displacement field {d}"),
        ));
    }
    Ok(())
}

#[inline]
fn index3(v: usize, dims: [usize; 3]) -> [usize; 3] {
    let k = v % dims[2];
    let j = (v / dims[2]) % dims[1];
    let i = v / (dims[1] * dims[2]);
    [i, j, k]
}

/// Position `x + d(x)` for voxel `v` of batch `b`.
#[inline]
fn displaced<T: Real>(dvf: &Tensor5<T>, b: usize, v: usize, dims: [usize; 3]) -> [T; 3] {
    let [i, j, k] = index3(v, dims);
    [
        T::of(i as f64) + dvf.plane(b, 0)[v],
        T::of(j as f64) + dvf.plane(b, 1)[v],
        T::of(k as f64) + dvf.plane(b, 2)[v],
    ]
}

/// Interpolation cell and clamp state of every sample position.
fn warp_cells<T: Real>(dvf: &Tensor5<T>) -> Vec<u64> {
    let s = dvf.shape();
    let dims = s.spatial();
    let mut cells = Vec::with_capacity(s.batch() * s.voxels() * 3);
    for b in 0..s.batch() {
        for v in 0..s.voxels() {
            let c = displaced(dvf, b, v, dims);
            for a in 0..3 {
                let st = stencil(c[a], dims[a]);
                cells.push(((st.i0 as u64) << 1) | st.clamped as u64);
            }
        }
    }
    cells
}

/// Samples every channel of `vol` at `x + d(x)` (border clamped).
pub fn warp_trilinear_forward<T: Real>(vol: &Tensor5<T>, dvf: &Tensor5<T>) -> Result<Tensor5<T>> {
    let s = vol.shape();
    check_dvf("warp_trilinear", s, dvf)?;
    let dims = s.spatial();
    let vox = s.voxels();
    let mut out = vec![T::zero(); s.numel()];
    out.par_chunks_mut(vox).enumerate().for_each(|(p, plane)| {
        let (b, c) = (p / s.channels(), p % s.channels());
        let src = vol.plane(b, c);
        for (v, o) in plane.iter_mut().enumerate() {
            *o = sample_point(src, dims, displaced(dvf, b, v, dims)).0;
        }
    });
    Ok(Tensor5::from_op("warp_trilinear", s, out))
}

fn warp_backward<T: Real>(
    vol: &Tensor5<T>,
    dvf: &Tensor5<T>,
    g: &Tensor5<T>,
    needs: &[bool],
) -> Vec<Option<Tensor5<T>>> {
    let s = vol.shape();
    let dims = s.spatial();
    let vox = s.voxels();
    let grad_vol = needs[0].then(|| {
        let mut gv = vec![T::zero(); s.numel()];
        gv.par_chunks_mut(vox).enumerate().for_each(|(p, gplane)| {
            let (b, c) = (p / s.channels(), p % s.channels());
            let gp = g.plane(b, c);
            let [_, w, h] = dims;
            for v in 0..vox {
                let c = displaced(dvf, b, v, dims);
                let st = [0, 1, 2].map(|a| stencil(c[a], dims[a]));
                let gval = gp[v];
                let zs = [(st[0].i0, T::one() - st[0].t), (st[0].i1, st[0].t)];
                let ys = [(st[1].i0, T::one() - st[1].t), (st[1].i1, st[1].t)];
                let xs = [(st[2].i0, T::one() - st[2].t), (st[2].i1, st[2].t)];
                for &(zi, wz) in &zs {
                    for &(yi, wy) in &ys {
                        for &(xi, wx) in &xs {
                            gplane[(zi * w + yi) * h + xi] += gval * wz * wy * wx;
                        }
                    }
                }
            }
        });
        Tensor5::from_op("warp'", s, gv)
    });
    let grad_dvf = needs[1].then(|| {
        let ds = dvf.shape();
        let mut gd = Tensor5::zeros(ds);
        for b in 0..s.batch() {
            let per_voxel: Vec<[T; 3]> = (0..vox)
                .into_par_iter()
                .map(|v| {
                    let c = displaced(dvf, b, v, dims);
                    let st = [0, 1, 2].map(|a| stencil(c[a], dims[a]));
                    let mut acc = [T::zero(); 3];
                    for c in 0..s.channels() {
                        let corner = corners(vol.plane(b, c), dims, &st);
                        let dt = interp_dt(&corner, [st[0].t, st[1].t, st[2].t]);
                        let gv = g.plane(b, c)[v];
                        for a in 0..3 {
                            if !st[a].clamped {
                                acc[a] += gv * dt[a];
                            }
                        }
                    }
                    acc
                })
                .collect();
            for a in 0..3 {
                let plane = gd.plane_mut(b, a);
                for (v, val) in per_voxel.iter().enumerate() {
                    plane[v] = val[a];
                }
            }
        }
        gd
    });
    vec![grad_vol, grad_dvf]
}

/// Resampling along one axis: for each output index, the clamped source
/// pair and lerp weight.
fn axis_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|t| {
            let s = ((t as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn resize_axis<T: Real>(
    data: &[T],
    shape: [usize; 5],
    axis: usize,
    n_out: usize,
) -> (Vec<T>, [usize; 5]) {
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let table: Vec<(usize, usize, T)> = axis_table(n_in, n_out)
        .into_iter()
        .map(|(a, b, w)| (a, b, T::of(w)))
        .collect();
    let mut out = vec![T::zero(); outer * n_out * inner];
    out.par_chunks_mut(n_out * inner)
        .enumerate()
        .for_each(|(o, chunk)| {
            let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
            for (t, &(i0, i1, w)) in table.iter().enumerate() {
                let (a, b) = (
                    &src[i0 * inner..(i0 + 1) * inner],
                    &src[i1 * inner..(i1 + 1) * inner],
                );
                for ((dst, &x0), &x1) in chunk[t * inner..(t + 1) * inner].iter_mut().zip(a).zip(b)
                {
                    *dst = lerp(x0, x1, w);
                }
            }
        });
    let mut s = shape;
    s[axis] = n_out;
    (out, s)
}

/// Adjoint of [`resize_axis`]: maps a gradient of the resized array back.
fn resize_axis_adjoint<T: Real>(
    g: &[T],
    in_shape: [usize; 5],
    axis: usize,
    n_out: usize,
) -> Vec<T> {
    let n_in = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let table: Vec<(usize, usize, T)> = axis_table(n_in, n_out)
        .into_iter()
        .map(|(a, b, w)| (a, b, T::of(w)))
        .collect();
    let mut out = vec![T::zero(); outer * n_in * inner];
    out.par_chunks_mut(n_in * inner)
        .enumerate()
        .for_each(|(o, chunk)| {
            let gsrc = &g[o * n_out * inner..(o + 1) * n_out * inner];
            for (t, &(i0, i1, w)) in table.iter().enumerate() {
                let gt = &gsrc[t * inner..(t + 1) * inner];
                for (j, &gv) in gt.iter().enumerate() {
                    chunk[i0 * inner + j] += gv * (T::one() - w);
                    chunk[i1 * inner + j] += gv * w;
                }
            }
        });
    out
}

/// Untaped trilinear resize to explicit spatial dims.
pub fn resize_to_forward<T: Real>(vol: &Tensor5<T>, dims: [usize; 3]) -> Result<Tensor5<T>> {
    if dims.contains(&0) {
        return Err(Error::shape(
            "trilinear_resize",
            format!("zero-size output {dims:?}"),
        ));
    }
    let mut shape = vol.shape().0;
    let mut data = vol.data().to_vec();
    for axis in (2..5).rev() {
        if shape[axis] != dims[axis - 2] {
            let (d, s) = resize_axis(&data, shape, axis, dims[axis - 2]);
            data = d;
            shape = s;
        }
    }
    Ok(Tensor5::from_op("trilinear_resize", Shape5(shape), data))
}

/// Output dims `⌊dim · scale⌋`.
pub fn scaled_dims(dims: [usize; 3], scale: f64) -> Result<[usize; 3]> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::shape(
            "trilinear_resize",
            format!("invalid scale {scale}"),
        ));
    }
    let out = dims.map(|d| (d as f64 * scale + 1e-9).floor() as usize);
    if out.contains(&0) {
        return Err(Error::shape(
            "trilinear_resize",
            format!("zero-size output for {dims:?} x {scale}"),
        ));
    }
    Ok(out)
}

pub fn trilinear_resize_forward<T: Real>(vol: &Tensor5<T>, scale: f64) -> Result<Tensor5<T>> {
    resize_to_forward(vol, scaled_dims(vol.shape().spatial(), scale)?)
}

/// Untaped border-clamped trilinear warp of `vol` by `dvf`.
pub fn warp_trilinear<T: Real>(vol: &Tensor5<T>, dvf: &Tensor5<T>) -> Result<Tensor5<T>> {
    warp_trilinear_forward(vol, dvf)
}

/// Nearest-neighbour warp of a label map by a batch-1 displacement field.
/// Positions are rounded half away from zero and border clamped.
pub fn warp_nearest<T: Real>(labels: &LabelVolume, dvf: &Tensor5<T>) -> Result<LabelVolume> {
    let dims = labels.dims();
    let ds = dvf.shape();
    if ds.channels() != 3 || ds.batch() != 1 || ds.spatial() != dims {
        return Err(Error::shape(
            "warp_nearest",
            format!("labels {dims:?} vs displacement field {ds}"),
        ));
    }
    let vox = dims.iter().product::<usize>();
    let data = (0..vox)
        .map(|v| {
            let c = displaced(dvf, 0, v, dims);
            let idx: [usize; 3] = std::array::from_fn(|a| {
                let r = c[a].f64().round().clamp(0.0, (dims[a] - 1) as f64);
                r as usize
            });
            labels.at(idx[0], idx[1], idx[2])
        })
        .collect();
    LabelVolume::new(dims, data)
}

impl<T: Real> Tape<T> {
    /// Trilinear resize to `⌊dim · scale⌋` per axis.
    pub fn trilinear_resize(&mut self, x: Var, scale: f64) -> Result<Var> {
        let dims = scaled_dims(self.value(x).shape().spatial(), scale)?;
        self.resize_to(x, dims)
    }

    pub fn resize_to(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let in_shape = self.value(x).shape();
        let out = resize_to_forward(self.value(x), dims)?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| {
                // Forward resized H, then W, then L; undo in reverse order.
                let mut shapes = Vec::new();
                let mut s = in_shape.0;
                for axis in (2..5).rev() {
                    if s[axis] != dims[axis - 2] {
                        shapes.push((s, axis));
                        s[axis] = dims[axis - 2];
                    }
                }
                let mut grad = g.data().to_vec();
                for &(s_in, axis) in shapes.iter().rev() {
                    grad = resize_axis_adjoint(&grad, s_in, axis, dims[axis - 2]);
                }
                vec![Some(Tensor5::from_op("trilinear_resize'", in_shape, grad))]
            }),
        ))
    }

    /// `vol` sampled at `x + dvf(x)`; differentiable in both arguments.
    pub fn warp_trilinear(&mut self, vol: Var, dvf: Var) -> Result<Var> {
        let out = warp_trilinear_forward(self.value(vol), self.value(dvf))?;
        let cells = warp_cells(self.value(dvf));
        self.record_branches(cells);
        Ok(self.push_op(
            out,
            vec![vol, dvf],
            Box::new(|g, ins, _, needs| warp_backward(ins[0], ins[1], g, needs)),
        ))
    }
}

/// Binary translation `m = (u, v, w)` of the smoothness penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ShiftVec([usize; 3]);

impl ShiftVec {
    pub fn new(u: usize, v: usize, w: usize) -> Result<Self> {
        if u > 1 || v > 1 || w > 1 {
            return Err(Error::Config(format!(
                "shift components must be 0 or 1, got ({u},{v},{w})"
            )));
        }
        Ok(Self([u, v, w]))
    }

    /// All eight binary shifts, `(0,0,0)` first.
    pub fn all() -> [ShiftVec; 8] {
        std::array::from_fn(|i| ShiftVec([(i >> 2) & 1, (i >> 1) & 1, i & 1]))
    }

    pub fn components(&self) -> [usize; 3] {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0, 0, 0]
    }

    /// Region over which both `z(p)` and `z(p + m)` exist.
    pub fn overlap(&self, dims: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| dims[a].saturating_sub(self.0[a]))
    }
}

/// `z` restricted to the overlap, paired with `S_m z = z(p + m)` on the same region.
#[derive(Clone, Debug)]
pub struct ShiftedPair<T> {
    pub base: Tensor5<T>,
    pub shifted: Tensor5<T>,
}

impl<T: Real> ShiftedPair<T> {
    /// `z − S_m z` over the overlap.
    pub fn difference(&self) -> Tensor5<T> {
        let d = self
            .base
            .data()
            .iter()
            .zip(self.shifted.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor5::from_op("shift", self.base.shape(), d)
    }
}

pub fn shift_volume<T: Real>(z: &Tensor5<T>, m: ShiftVec) -> ShiftedPair<T> {
    let s = z.shape();
    let o = m.overlap(s.spatial());
    let oshape = s.with_spatial(o);
    let [du, dv, dw] = m.components();
    let base = Tensor5::from_fn(oshape, |[b, c, i, j, k]| z.at([b, c, i, j, k]));
    let shifted = Tensor5::from_fn(oshape, |[b, c, i, j, k]| {
        z.at([b, c, i + du, j + dv, k + dw])
    });
    ShiftedPair { base, shifted }
}
