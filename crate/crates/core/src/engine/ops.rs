//! Elementwise, reduction and layout ops.

use super::tape::{Tape, Var};
use super::tensor::{same_shape, Real, Shape5, Tensor5};
use crate::error::{Error, Result};

fn zip_map<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        same_shape("add", a, b)?;
        let out = Tensor5::from_op("add", a.shape(), zip_map(a, b, |p, q| p + q));
        Ok(self.push_op(
            out,
            vec![x, y],
            Box::new(|g, _, _, needs| needs.iter().map(|&n| n.then(|| g.clone())).collect()),
        ))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        same_shape("sub", a, b)?;
        let out = Tensor5::from_op("sub", a.shape(), zip_map(a, b, |p, q| p - q));
        Ok(self.push_op(
            out,
            vec![x, y],
            Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            }),
        ))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        same_shape("mul", a, b)?;
        let out = Tensor5::from_op("mul", a.shape(), zip_map(a, b, |p, q| p * q));
        Ok(self.push_op(
            out,
            vec![x, y],
            Box::new(|g, ins, _, needs| {
                let ga = needs[0]
                    .then(|| Tensor5::from_op("mul'", g.shape(), zip_map(g, ins[1], |p, q| p * q)));
                let gb = needs[1]
                    .then(|| Tensor5::from_op("mul'", g.shape(), zip_map(g, ins[0], |p, q| p * q)));
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let signs: Vec<u64> = out.data().iter().map(|&v| (v > T::zero()) as u64).collect();
        self.record_branches(signs);
        self.push_op(
            out,
            vec![x],
            Box::new(|g, ins, _, _| {
                let d = zip_map(
                    g,
                    ins[0],
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                );
                vec![Some(Tensor5::from_op("relu'", g.shape(), d))]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor5::scalar(self.value(x).sum());
        self.push_op(
            out,
            vec![x],
            Box::new(|g, ins, _, _| vec![Some(Tensor5::full(ins[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Concatenates along the channel axis. All inputs must agree on batch
    /// and spatial dims.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape();
        for &v in xs {
            let s = self.value(v).shape();
            if s.batch() != first.batch() || s.spatial() != first.spatial() {
                return Err(Error::shape("concat_channels", format!("{first} vs {s}")));
            }
        }
        let counts: Vec<usize> = xs
            .iter()
            .map(|&v| self.value(v).shape().channels())
            .collect();
        let total: usize = counts.iter().sum();
        let shape = Shape5([first.batch(), total, first.0[2], first.0[3], first.0[4]]);
        let mut out = Tensor5::zeros(shape);
        for b in 0..shape.batch() {
            let mut co = 0;
            for &v in xs {
                let t = self.value(v);
                for c in 0..t.shape().channels() {
                    out.plane_mut(b, co).copy_from_slice(t.plane(b, c));
                    co += 1;
                }
            }
        }
        Ok(self.push_op(
            out,
            xs.to_vec(),
            Box::new(move |g, ins, _, needs| {
                let mut offset = 0;
                let mut res = Vec::with_capacity(ins.len());
                for (i, t) in ins.iter().enumerate() {
                    let nc = counts[i];
                    if needs[i] {
                        let mut gi = Tensor5::zeros(t.shape());
                        for b in 0..t.shape().batch() {
                            for c in 0..nc {
                                gi.plane_mut(b, c).copy_from_slice(g.plane(b, offset + c));
                            }
                        }
                        res.push(Some(gi));
                    } else {
                        res.push(None);
                    }
                    offset += nc;
                }
                res
            }),
        ))
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape();
        for &v in xs {
            let s = self.value(v).shape();
            if s != first {
                return Err(Error::shape("stack_batch", format!("{first} vs {s}")));
            }
        }
        let mut data = Vec::with_capacity(first.numel() * xs.len());
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape.0[0] *= xs.len();
        let out = Tensor5::from_op("stack_batch", shape, data);
        Ok(self.push_op(
            out,
            xs.to_vec(),
            Box::new(move |g, ins, _, needs| {
                let n = first.numel();
                (0..ins.len())
                    .map(|i| {
                        needs[i].then(|| {
                            Tensor5::from_op("stack'", first, g.data()[i * n..(i + 1) * n].to_vec())
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Extracts batch entry `index` as a tensor with batch size 1.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if index >= s.batch() {
            return Err(Error::shape(
                "select_batch",
                format!("index {index} of {s}"),
            ));
        }
        let n = s.numel() / s.batch();
        let mut shape = s;
        shape.0[0] = 1;
        let out = Tensor5::from_op(
            "select_batch",
            shape,
            t.data()[index * n..(index + 1) * n].to_vec(),
        );
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g, _, _, _| {
                let mut full = Tensor5::zeros(s);
                full.data_mut()[index * n..(index + 1) * n].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        ))
    }

    /// Exchanges the batch and channel axes: `(B, C, ...) -> (C, B, ...)`.
    pub fn swap_batch_channel(&mut self, x: Var) -> Var {
        let out = swap_bc(self.value(x));
        self.push_op(out, vec![x], Box::new(|g, _, _, _| vec![Some(swap_bc(g))]))
    }
}

pub(crate) fn swap_bc<T: Real>(t: &Tensor5<T>) -> Tensor5<T> {
    let s = t.shape();
    let swapped = Shape5([s.channels(), s.batch(), s.0[2], s.0[3], s.0[4]]);
    let mut out = Tensor5::zeros(swapped);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            out.plane_mut(c, b).copy_from_slice(t.plane(b, c));
        }
    }
    out
}
