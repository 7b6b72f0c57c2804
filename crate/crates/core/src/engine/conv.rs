//! 3×3×3 convolution (cross-correlation, zero padding 1) with stride 1 or 2.
//!
//! The stride-1 path works on zero-padded copies of each input plane. With
//! the output laid out using the padded row and slab strides, every kernel
//! tap becomes a single contiguous axpy over the whole volume; the extra
//! columns and rows are discarded when the result is cropped. The input
//! gradient is the same kernel applied to the padded upstream gradient with
//! a flipped, transposed weight, and the weight gradient is a dot product
//! in the same layout.

use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::tensor::{Real, Shape5, Tensor5};
use crate::error::{Error, Result};

const TAPS: usize = 27;

#[derive(Clone, Copy, Debug)]
struct Padded {
    dims: [usize; 3],
    /// Row stride of the padded layout (H + 2).
    row: usize,
    /// Slab stride of the padded layout ((W + 2)(H + 2)).
    slab: usize,
}

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let row = dims[2] + 2;
        Self {
            dims,
            row,
            slab: (dims[1] + 2) * row,
        }
    }

    /// Length of a padded input buffer; the two trailing slack elements keep
    /// the last tap's slice in bounds.
    fn padded_len(&self) -> usize {
        (self.dims[0] + 2) * self.slab + 2
    }

    /// Length of the wide output layout: padded strides, trailing padding
    /// rows of the last slab dropped.
    fn wide_len(&self) -> usize {
        (self.dims[0] - 1) * self.slab + self.dims[1] * self.row
    }

    fn tap_offset(&self, tap: usize) -> usize {
        let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
        dz * self.slab + dy * self.row + dx
    }

    fn crop_into<T: Copy>(&self, wide: &[T], plane: &mut [T]) {
        let [l, w, h] = self.dims;
        for z in 0..l {
            for y in 0..w {
                let src = z * self.slab + y * self.row;
                plane[(z * w + y) * h..(z * w + y + 1) * h].copy_from_slice(&wide[src..src + h]);
            }
        }
    }
}

/// Accumulates `Σ_c Σ_tap w[c][tap] · shifted(padded[c])` into `wide`,
/// in blocks small enough to stay in L1.
fn accumulate_taps<T: Real>(geom: &Padded, wide: &mut [T], padded: &[Vec<T>], weights: &[T]) {
    const BLOCK: usize = 1024;
    let offsets: [usize; TAPS] = std::array::from_fn(|t| geom.tap_offset(t));
    for (bi, block) in wide.chunks_mut(BLOCK).enumerate() {
        let start = bi * BLOCK;
        let len = block.len();
        for (c, src) in padded.iter().enumerate() {
            let wc = &weights[c * TAPS..(c + 1) * TAPS];
            for (tap, &off) in offsets.iter().enumerate() {
                let wv = wc[tap];
                let s = &src[start + off..start + off + len];
                for (o, &v) in block.iter_mut().zip(s) {
                    *o += wv * v;
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums (fixed order, so the
/// result is deterministic).
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

fn pad_all<T: Real>(geom: &Padded, t: &Tensor5<T>) -> Vec<Vec<T>> {
    let s = t.shape();
    (0..s.batch() * s.channels())
        .into_par_iter()
        .map(|i| pad_plane(geom, t.plane(i / s.channels(), i % s.channels())))
        .collect()
}

fn pad_plane<T: Real>(geom: &Padded, plane: &[T]) -> Vec<T> {
    let [l, w, h] = geom.dims;
    let mut out = vec![T::zero(); geom.padded_len()];
    for z in 0..l {
        for y in 0..w {
            let src = &plane[(z * w + y) * h..(z * w + y + 1) * h];
            let dst = (z + 1) * geom.slab + (y + 1) * geom.row + 1;
            out[dst..dst + h].copy_from_slice(src);
        }
    }
    out
}

fn widen_plane<T: Real>(geom: &Padded, plane: &[T]) -> Vec<T> {
    let [l, w, h] = geom.dims;
    let mut out = vec![T::zero(); geom.wide_len()];
    for z in 0..l {
        for y in 0..w {
            let src = &plane[(z * w + y) * h..(z * w + y + 1) * h];
            let dst = z * geom.slab + y * geom.row;
            out[dst..dst + h].copy_from_slice(src);
        }
    }
    out
}

/// Stride-1 forward: `padded` holds `batch * cin` padded planes.
fn forward_s1<T: Real>(
    geom: &Padded,
    padded: &[Vec<T>],
    batch: usize,
    cin: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Vec<T> {
    let vox = geom.dims.iter().product::<usize>();
    let mut out = vec![T::zero(); batch * cout * vox];
    out.par_chunks_mut(vox).enumerate().for_each(|(i, plane)| {
        let (b, co) = (i / cout, i % cout);
        let mut wide = vec![T::zero(); geom.wide_len()];
        accumulate_taps(
            geom,
            &mut wide,
            &padded[b * cin..(b + 1) * cin],
            &weight[co * cin * TAPS..(co + 1) * cin * TAPS],
        );
        geom.crop_into(&wide, plane);
        if let Some(bias) = bias {
            let bv = bias[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    });
    out
}

/// Weight laid out as `(cin, cout, 27)` with every tap reversed.
fn flip_transpose<T: Real>(weight: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..TAPS {
                out[(ci * cout + co) * TAPS + (TAPS - 1 - tap)] =
                    weight[(co * cin + ci) * TAPS + tap];
            }
        }
    }
    out
}

struct ConvGrads<T> {
    input: Option<Vec<T>>,
    weight: Option<Vec<T>>,
    bias: Option<Vec<T>>,
}

fn backward_s1<T: Real>(
    geom: &Padded,
    input: &Tensor5<T>,
    weight: &[T],
    grad: &Tensor5<T>,
    cout: usize,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let s = input.shape();
    let (batch, cin) = (s.batch(), s.channels());
    let vox = s.voxels();

    let input_grad = needs[0].then(|| {
        let padded_g = pad_all(geom, grad);
        forward_s1(
            geom,
            &padded_g,
            batch,
            cout,
            &flip_transpose(weight, cout, cin),
            None,
            cin,
        )
    });

    let weight_grad = needs[1].then(|| {
        let padded_in = pad_all(geom, input);
        let wide_g: Vec<Vec<T>> = (0..batch * cout)
            .into_par_iter()
            .map(|i| widen_plane(geom, grad.plane(i / cout, i % cout)))
            .collect();
        let mut gw = vec![T::zero(); cout * cin * TAPS];
        gw.par_chunks_mut(TAPS).enumerate().for_each(|(i, taps)| {
            let (co, ci) = (i / cin, i % cin);
            for b in 0..batch {
                let g = &wide_g[b * cout + co];
                let src = &padded_in[b * cin + ci];
                for (tap, acc) in taps.iter_mut().enumerate() {
                    let off = geom.tap_offset(tap);
                    *acc += dot(g, &src[off..off + g.len()]);
                }
            }
        });
        gw
    });

    let bias_grad = needs[2].then(|| {
        (0..cout)
            .map(|co| {
                (0..batch)
                    .map(|b| {
                        grad.data()[(b * cout + co) * vox..(b * cout + co + 1) * vox]
                            .iter()
                            .copied()
                            .sum::<T>()
                    })
                    .fold(T::zero(), |a, v| a + v)
            })
            .collect()
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

fn out_dim(d: usize, stride: usize) -> usize {
    (d - 1) / stride + 1
}

/// Direct strided convolution, used for stride 2.
fn forward_strided<T: Real>(
    input: &Tensor5<T>,
    weight: &[T],
    bias: &[T],
    cout: usize,
    stride: usize,
) -> Tensor5<T> {
    let s = input.shape();
    let [l, w, h] = s.spatial();
    let od = [out_dim(l, stride), out_dim(w, stride), out_dim(h, stride)];
    let oshape = Shape5([s.batch(), cout, od[0], od[1], od[2]]);
    let cin = s.channels();
    let ovox = od.iter().product::<usize>();
    let mut out = vec![T::zero(); oshape.numel()];
    out.par_chunks_mut(ovox).enumerate().for_each(|(i, plane)| {
        let (b, co) = (i / cout, i % cout);
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        let src = input.plane(b, ci);
                        let wk = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
                        for tap in 0..TAPS {
                            let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
                            let (zi, yi, xi) = (
                                (z * stride + dz) as isize - 1,
                                (y * stride + dy) as isize - 1,
                                (x * stride + dx) as isize - 1,
                            );
                            if zi < 0 || yi < 0 || xi < 0 {
                                continue;
                            }
                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                            if zi >= l || yi >= w || xi >= h {
                                continue;
                            }
                            acc += wk[tap] * src[(zi * w + yi) * h + xi];
                        }
                    }
                    plane[(z * od[1] + y) * od[2] + x] = acc + bias[co];
                }
            }
        }
    });
    Tensor5::from_op("conv3d", oshape, out)
}

fn backward_strided<T: Real>(
    input: &Tensor5<T>,
    weight: &[T],
    grad: &Tensor5<T>,
    cout: usize,
    stride: usize,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let s = input.shape();
    let [l, w, h] = s.spatial();
    let od = grad.shape().spatial();
    let (batch, cin) = (s.batch(), s.channels());
    // (output voxel, tap, input voxel) triples with the input inside the volume.
    let pairs: Vec<(usize, usize, usize)> = {
        let mut v = Vec::new();
        for z in 0..od[0] {
            for y in 0..od[1] {
                for x in 0..od[2] {
                    let o = (z * od[1] + y) * od[2] + x;
                    for tap in 0..TAPS {
                        let (dz, dy, dx) = (tap / 9, (tap / 3) % 3, tap % 3);
                        let zi = (z * stride + dz).wrapping_sub(1);
                        let yi = (y * stride + dy).wrapping_sub(1);
                        let xi = (x * stride + dx).wrapping_sub(1);
                        if zi < l && yi < w && xi < h {
                            v.push((o, tap, (zi * w + yi) * h + xi));
                        }
                    }
                }
            }
        }
        v
    };

    let input_grad = needs[0].then(|| {
        let vox = s.voxels();
        let mut gi = vec![T::zero(); s.numel()];
        gi.par_chunks_mut(vox).enumerate().for_each(|(i, plane)| {
            let (b, ci) = (i / cin, i % cin);
            for co in 0..cout {
                let g = grad.plane(b, co);
                let wk = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
                for &(o, tap, ii) in &pairs {
                    plane[ii] += wk[tap] * g[o];
                }
            }
        });
        gi
    });

    let weight_grad = needs[1].then(|| {
        let mut gw = vec![T::zero(); cout * cin * TAPS];
        gw.par_chunks_mut(TAPS).enumerate().for_each(|(i, taps)| {
            let (co, ci) = (i / cin, i % cin);
            for b in 0..batch {
                let g = grad.plane(b, co);
                let src = input.plane(b, ci);
                for &(o, tap, ii) in &pairs {
                    taps[tap] += g[o] * src[ii];
                }
            }
        });
        gw
    });

    let bias_grad = needs[2].then(|| {
        (0..cout)
            .map(|co| {
                (0..batch)
                    .map(|b| grad.plane(b, co).iter().copied().sum::<T>())
                    .fold(T::zero(), |a, v| a + v)
            })
            .collect()
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

fn check_conv_shapes<T: Real>(
    x: &Tensor5<T>,
    w: &Tensor5<T>,
    b: &Tensor5<T>,
    stride: usize,
) -> Result<()> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if ws.spatial() != [3, 3, 3] {
        return Err(Error::shape(
            "conv3d",
            format!("kernel must be 3x3x3, got {ws}"),
        ));
    }
    if ws.channels() != xs.channels() {
        return Err(Error::shape(
            "conv3d",
            format!(
                "input has {} channels, kernel expects {}",
                xs.channels(),
                ws.channels()
            ),
        ));
    }
    if bs.numel() != ws.batch() {
        return Err(Error::shape(
            "conv3d",
            format!(
                "bias has {} values for {} output channels",
                bs.numel(),
                ws.batch()
            ),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape(
            "conv3d",
            format!("unsupported stride {stride}"),
        ));
    }
    if xs.spatial().contains(&0) {
        return Err(Error::shape("conv3d", format!("empty input {xs}")));
    }
    Ok(())
}

/// Untaped forward convolution; `weight` is `(Cout, Cin, 3, 3, 3)` and
/// `bias` holds `Cout` values in any shape.
pub fn conv3d_forward<T: Real>(
    x: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: &Tensor5<T>,
    stride: usize,
) -> Result<Tensor5<T>> {
    check_conv_shapes(x, weight, bias, stride)?;
    let cout = weight.shape().batch();
    if stride == 1 {
        let s = x.shape();
        let geom = Padded::new(s.spatial());
        let padded = pad_all(&geom, x);
        let data = forward_s1(
            &geom,
            &padded,
            s.batch(),
            s.channels(),
            weight.data(),
            Some(bias.data()),
            cout,
        );
        let shape = Shape5([s.batch(), cout, s.0[2], s.0[3], s.0[4]]);
        Ok(Tensor5::from_op("conv3d", shape, data))
    } else {
        Ok(forward_strided(x, weight.data(), bias.data(), cout, stride))
    }
}

impl<T: Real> Tape<T> {
    /// 3×3×3 cross-correlation with zero padding 1 and the given stride,
    /// bias added per output channel.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(weight), self.value(bias), stride)?;
        let cout = self.value(weight).shape().batch();
        Ok(self.push_op(
            out,
            vec![x, weight, bias],
            Box::new(move |g, ins, _, needs| {
                let (input, w, b) = (ins[0], ins[1], ins[2]);
                let needs = [needs[0], needs[1], needs[2]];
                let grads = if stride == 1 {
                    let geom = Padded::new(input.shape().spatial());
                    backward_s1(&geom, input, w.data(), g, cout, needs)
                } else {
                    backward_strided(input, w.data(), g, cout, stride, needs)
                };
                vec![
                    grads
                        .input
                        .map(|d| Tensor5::from_op("conv3d'", input.shape(), d)),
                    grads
                        .weight
                        .map(|d| Tensor5::from_op("conv3d'", w.shape(), d)),
                    grads
                        .bias
                        .map(|d| Tensor5::from_op("conv3d'", b.shape(), d)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
        Tensor5::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Plain seven-loop reference.
    fn naive(x: &Tensor5<f64>, w: &Tensor5<f64>, b: &Tensor5<f64>, stride: usize) -> Tensor5<f64> {
        let s = x.shape();
        let [l, wd, h] = s.spatial();
        let cout = w.shape().batch();
        let od = [out_dim(l, stride), out_dim(wd, stride), out_dim(h, stride)];
        let shape = Shape5([s.batch(), cout, od[0], od[1], od[2]]);
        Tensor5::from_fn(shape, |[bi, co, z, y, xx]| {
            let mut acc = b.data()[co];
            for ci in 0..s.channels() {
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let zi = (z * stride + dz) as isize - 1;
                            let yi = (y * stride + dy) as isize - 1;
                            let xi = (xx * stride + dx) as isize - 1;
                            if zi < 0
                                || yi < 0
                                || xi < 0
                                || zi >= l as isize
                                || yi >= wd as isize
                                || xi >= h as isize
                            {
                                continue;
                            }
                            acc += w.at([co, ci, dz, dy, dx])
                                * x.at([bi, ci, zi as usize, yi as usize, xi as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn all_ones_kernel_counts_receptive_field() {
        let x = Tensor5::full(Shape5::new(1, 1, 3, 3, 3), 1.0f64);
        let w = Tensor5::full(Shape5::new(1, 1, 3, 3, 3), 1.0);
        let b = Tensor5::zeros(Shape5::new(1, 1, 1, 1, 1));
        let y = conv3d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.at([0, 0, 1, 1, 1]), 27.0);
        for &(i, j, k) in &[(0, 0, 0), (2, 2, 2), (0, 2, 0), (2, 0, 2)] {
            assert_eq!(y.at([0, 0, i, j, k]), 8.0);
        }
        assert_eq!(y.at([0, 0, 0, 1, 1]), 18.0);
        assert_eq!(y.at([0, 0, 0, 0, 1]), 12.0);
    }

    #[test]
    fn dirac_kernel_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape5::new(2, 1, 5, 4, 6), &mut rng);
        let mut w = Tensor5::zeros(Shape5::new(1, 1, 3, 3, 3));
        w.set([0, 0, 1, 1, 1], 1.0);
        let y = conv3d_forward(&x, &w, &Tensor5::zeros(Shape5::SCALAR), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_shape_contract() {
        let x = Tensor5::<f32>::zeros(Shape5::new(2, 1, 16, 16, 16));
        let w = Tensor5::zeros(Shape5::new(16, 1, 3, 3, 3));
        let b = Tensor5::zeros(Shape5::new(1, 16, 1, 1, 1));
        assert_eq!(
            conv3d_forward(&x, &w, &b, 1).unwrap().shape(),
            Shape5::new(2, 16, 16, 16, 16)
        );
        assert_eq!(
            conv3d_forward(&x, &w, &b, 2).unwrap().shape(),
            Shape5::new(2, 16, 8, 8, 8)
        );
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor5::<f32>::zeros(Shape5::new(1, 2, 4, 4, 4));
        let w = Tensor5::zeros(Shape5::new(3, 1, 3, 3, 3));
        let b = Tensor5::zeros(Shape5::new(1, 3, 1, 1, 1));
        assert!(matches!(
            conv3d_forward(&x, &w, &b, 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn matches_naive_reference_for_both_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &stride in &[1, 2] {
            let x = random(Shape5::new(2, 3, 5, 6, 4), &mut rng);
            let w = random(Shape5::new(4, 3, 3, 3, 3), &mut rng);
            let b = random(Shape5::new(1, 4, 1, 1, 1), &mut rng);
            let fast = conv3d_forward(&x, &w, &b, stride).unwrap();
            let slow = naive(&x, &w, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn strided_and_padded_gradients_agree_with_adjoint_identity() {
        // <conv(x), g> must equal <x, conv^T(g)> and <w, dW>.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &stride in &[1, 2] {
            let x = random(Shape5::new(2, 2, 4, 5, 3), &mut rng);
            let w = random(Shape5::new(3, 2, 3, 3, 3), &mut rng);
            let zero_b = Tensor5::zeros(Shape5::new(1, 3, 1, 1, 1));
            let y = conv3d_forward(&x, &w, &zero_b, stride).unwrap();
            let g = random(y.shape(), &mut rng);
            let grads = if stride == 1 {
                backward_s1(
                    &Padded::new(x.shape().spatial()),
                    &x,
                    w.data(),
                    &g,
                    3,
                    [true, true, true],
                )
            } else {
                backward_strided(&x, w.data(), &g, 3, stride, [true, true, true])
            };
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x
                .data()
                .iter()
                .zip(grads.input.as_ref().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            let via_w: f64 = w
                .data()
                .iter()
                .zip(grads.weight.as_ref().unwrap())
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                (lhs - via_x).abs() < 1e-9,
                "stride {stride}: {lhs} vs {via_x}"
            );
            assert!(
                (lhs - via_w).abs() < 1e-9,
                "stride {stride}: {lhs} vs {via_w}"
            );
            let gb = grads.bias.unwrap();
            let expect: f64 = (0..2).map(|b| g.plane(b, 1).iter().sum::<f64>()).sum();
            assert!((gb[1] - expect).abs() < 1e-12);
        }
    }
}
