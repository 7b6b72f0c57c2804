//! Resolution-enhancement module: a stack of 3×3×3 convolutions with ReLU,
//! applied to a trilinearly upsampled single-channel volume.
//!
//! Layout: head conv (1→k, ReLU), `n` intermediate convs (k→k, ReLU), tail
//! conv (k→1, linear). The three variants differ only in where the
//! parameter-free skip connections sit:
//!
//! * I: `x + tail(body(head(x)))`, image-domain residual.
//! * II: `tail(h + body(h))` with `h = head(x)`, feature-domain residual.
//! * III: every intermediate layer is `f + relu(conv(f))`, plus the image skip.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::init::{kaiming, substream};
use crate::engine::{ParamSet, Real, Shape5, Tape, Tensor5, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    I,
    II,
    III,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::I => "I",
            Variant::II => "II",
            Variant::III => "III",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Variant::I),
            "II" | "2" => Ok(Variant::II),
            "III" | "3" => Ok(Variant::III),
            other => Err(Error::Config(format!("unknown REM variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemConfig {
    pub variant: Variant,
    /// Filters per convolution.
    pub k: usize,
    /// Number of intermediate convolutions.
    pub n: usize,
}

pub const MAX_FILTERS: usize = 64;
pub const MAX_DEPTH: usize = 16;

impl RemConfig {
    pub fn new(variant: Variant, k: usize, n: usize) -> Result<Self> {
        let cfg = Self { variant, k, n };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.k > MAX_FILTERS || self.n > MAX_DEPTH {
            return Err(Error::Config(format!(
                "REM needs 1 <= k <= {MAX_FILTERS} and 1 <= n <= {MAX_DEPTH}, got k={} n={}",
                self.k, self.n
            )));
        }
        Ok(())
    }
}

/// Closed-form scalar count: head `27k + k`, each intermediate `27k² + k`,
/// tail `27k + 1`. Independent of the variant.
pub fn rem_param_count(cfg: &RemConfig) -> usize {
    let k = cfg.k;
    (27 * k + k) + cfg.n * (27 * k * k + k) + (27 * k + 1)
}

/// Initial weights. `ZeroTail` starts variants I and III at the identity map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemInit {
    Kaiming,
    ZeroTail,
}

#[derive(Clone, Debug)]
pub struct RemModel<T> {
    pub cfg: RemConfig,
    pub params: ParamSet<T>,
}

fn conv_shape(cout: usize, cin: usize) -> Shape5 {
    Shape5::new(cout, cin, 3, 3, 3)
}

fn bias_shape(cout: usize) -> Shape5 {
    Shape5::new(1, cout, 1, 1, 1)
}

/// Parameter names in binding order.
pub fn rem_param_names(n: usize) -> Vec<String> {
    let mut names = vec!["head.weight".to_string(), "head.bias".to_string()];
    for i in 0..n {
        names.push(format!("body.{i}.weight"));
        names.push(format!("body.{i}.bias"));
    }
    names.push("tail.weight".into());
    names.push("tail.bias".into());
    names
}

pub fn build_rem<T: Real>(cfg: RemConfig, seed: u64) -> Result<RemModel<T>> {
    build_rem_with(cfg, seed, RemInit::Kaiming)
}

pub fn build_rem_with<T: Real>(cfg: RemConfig, seed: u64, init: RemInit) -> Result<RemModel<T>> {
    cfg.validate()?;
    let mut rng = substream(seed, "init/rem", 0);
    let k = cfg.k;
    let mut params = ParamSet::new();
    params.push("head.weight", kaiming(conv_shape(k, 1), &mut rng))?;
    params.push("head.bias", Tensor5::zeros(bias_shape(k)))?;
    for i in 0..cfg.n {
        params.push(
            format!("body.{i}.weight"),
            kaiming(conv_shape(k, k), &mut rng),
        )?;
        params.push(format!("body.{i}.bias"), Tensor5::zeros(bias_shape(k)))?;
    }
    let tail = match init {
        RemInit::Kaiming => kaiming(conv_shape(1, k), &mut rng),
        RemInit::ZeroTail => Tensor5::zeros(conv_shape(1, k)),
    };
    params.push("tail.weight", tail)?;
    params.push("tail.bias", Tensor5::zeros(bias_shape(1)))?;
    debug_assert_eq!(params.numel(), rem_param_count(&cfg));
    Ok(RemModel { cfg, params })
}

impl<T: Real> RemModel<T> {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(frozen);
    }

    /// Records the params on `tape`; the result feeds [`RemModel::forward`].
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Applies the module to a `(B, 1, L, W, H)` input.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.channels() != 1 {
            return Err(Error::shape(
                "rem_forward",
                format!("expected 1 channel, got {s}"),
            ));
        }
        let n = self.cfg.n;
        let conv = |tape: &mut Tape<T>, f: Var, layer: usize| -> Result<Var> {
            tape.conv3d(f, bound[2 * layer], bound[2 * layer + 1], 1)
        };
        let head = conv(tape, x, 0)?;
        let h = tape.relu(head);
        let mut f = h;
        for i in 0..n {
            let c = conv(tape, f, i + 1)?;
            let a = tape.relu(c);
            f = match self.cfg.variant {
                Variant::III => tape.add(f, a)?,
                Variant::I | Variant::II => a,
            };
        }
        match self.cfg.variant {
            Variant::I | Variant::III => {
                let r = conv(tape, f, n + 1)?;
                tape.add(x, r)
            }
            Variant::II => {
                let skip = tape.add(h, f)?;
                conv(tape, skip, n + 1)
            }
        }
    }

    /// Untaped inference.
    pub fn apply(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        let mut tape = Tape::new();
        let frozen = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect::<Vec<_>>();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &frozen, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// `rem_forward(model, x)` as a free function.
pub fn rem_forward<T: Real>(model: &RemModel<T>, x: &Tensor5<T>) -> Result<Tensor5<T>> {
    model.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table_two_parameter_counts() {
        let cases = [
            (8, 8, 14_329, 14.3),
            (16, 8, 56_305, 56.3),
            (16, 16, 111_729, 111.7),
            (32, 8, 223_201, 223.2),
            (32, 16, 444_641, 444.6),
            (64, 8, 888_769, 888.8),
            (64, 16, 1_774_017, 1774.0),
        ];
        for (k, n, exact, thousands) in cases {
            let cfg = RemConfig::new(Variant::I, k, n).unwrap();
            assert_eq!(rem_param_count(&cfg), exact);
            let rounded = (exact as f64 / 100.0).round() / 10.0;
            assert_eq!(rounded, thousands);
        }
    }

    #[test]
    fn built_model_size_matches_formula_for_every_variant() {
        for variant in [Variant::I, Variant::II, Variant::III] {
            for (k, n) in [(8, 8), (16, 8), (2, 1), (5, 3)] {
                let cfg = RemConfig::new(variant, k, n).unwrap();
                let m: RemModel<f32> = build_rem(cfg, 1).unwrap();
                assert_eq!(m.num_params(), rem_param_count(&cfg));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RemConfig::new(Variant::I, 0, 4).is_err());
        assert!(RemConfig::new(Variant::I, 8, 0).is_err());
        assert!(RemConfig::new(Variant::I, 65, 4).is_err());
        assert!(RemConfig::new(Variant::I, 8, 17).is_err());
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = RemConfig::new(Variant::I, 16, 8).unwrap();
        let a: RemModel<f32> = build_rem(cfg, 42).unwrap();
        let b: RemModel<f32> = build_rem(cfg, 42).unwrap();
        let c: RemModel<f32> = build_rem(cfg, 43).unwrap();
        for ((pa, pb), pc) in a.params.iter().zip(b.params.iter()).zip(c.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
            if pa.name.ends_with("weight") {
                assert_ne!(pa.value, pc.value);
            }
        }
    }

    fn random_input(shape: Shape5, seed: u64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zeroed_variant_one_is_identity() {
        let cfg = RemConfig::new(Variant::I, 4, 2).unwrap();
        let mut m: RemModel<f64> = build_rem(cfg, 0).unwrap();
        for p in m.params.iter_mut() {
            p.value = Tensor5::zeros(p.value.shape());
        }
        let x = random_input(Shape5::new(2, 1, 5, 4, 6), 1);
        assert_eq!(m.apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_tail_init_is_identity_for_image_skip_variants() {
        for variant in [Variant::I, Variant::III] {
            let cfg = RemConfig::new(variant, 4, 2).unwrap();
            let m: RemModel<f64> = build_rem_with(cfg, 3, RemInit::ZeroTail).unwrap();
            let x = random_input(Shape5::new(1, 1, 4, 4, 4), 2);
            assert_eq!(m.apply(&x).unwrap(), x);
        }
    }

    #[test]
    fn output_shape_equals_input_shape() {
        for variant in [Variant::I, Variant::II, Variant::III] {
            let cfg = RemConfig::new(variant, 3, 2).unwrap();
            let m: RemModel<f32> = build_rem(cfg, 0).unwrap();
            let x = Tensor5::full(Shape5::new(2, 1, 3, 5, 4), 0.5f32);
            assert_eq!(m.apply(&x).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn rejects_multichannel_input() {
        let m: RemModel<f32> = build_rem(RemConfig::new(Variant::I, 2, 1).unwrap(), 0).unwrap();
        let x = Tensor5::zeros(Shape5::new(1, 2, 4, 4, 4));
        assert!(matches!(m.apply(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn variant_two_matches_straight_line_evaluation() {
        let cfg = RemConfig::new(Variant::II, 2, 1).unwrap();
        let mut m: RemModel<f64> = build_rem(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params.iter_mut() {
            p.value = Tensor5::from_fn(p.value.shape(), |_| rng.random_range(-0.5..0.5));
        }
        let x = random_input(Shape5::new(1, 1, 3, 3, 3), 4);
        let got = m.apply(&x).unwrap();

        // Independent evaluation: direct summation over each layer.
        let p = |name: &str| m.params.get(name).unwrap().value.clone();
        let conv = |input: &[Vec<f64>], w: &Tensor5<f64>, b: &Tensor5<f64>| -> Vec<Vec<f64>> {
            let cout = w.shape().batch();
            (0..cout)
                .map(|co| {
                    let mut out = vec![0.0; 27];
                    for z in 0..3usize {
                        for y in 0..3usize {
                            for xx in 0..3usize {
                                let mut acc = b.data()[co];
                                for (ci, plane) in input.iter().enumerate() {
                                    for dz in 0..3usize {
                                        for dy in 0..3usize {
                                            for dx in 0..3usize {
                                                let (zi, yi, xi) = (z + dz, y + dy, xx + dx);
                                                if zi == 0
                                                    || yi == 0
                                                    || xi == 0
                                                    || zi > 3
                                                    || yi > 3
                                                    || xi > 3
                                                {
                                                    continue;
                                                }
                                                acc += w.at([co, ci, dz, dy, dx])
                                                    * plane[((zi - 1) * 3 + yi - 1) * 3 + xi - 1];
                                            }
                                        }
                                    }
                                }
                                out[(z * 3 + y) * 3 + xx] = acc;
                            }
                        }
                    }
                    out
                })
                .collect()
        };
        let relu = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.into_iter()
                .map(|c| c.into_iter().map(|e| e.max(0.0)).collect())
                .collect()
        };
        let h = relu(conv(
            &[x.data().to_vec()],
            &p("head.weight"),
            &p("head.bias"),
        ));
        let f = relu(conv(&h, &p("body.0.weight"), &p("body.0.bias")));
        let skip: Vec<Vec<f64>> = h
            .iter()
            .zip(&f)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
            .collect();
        let out = conv(&skip, &p("tail.weight"), &p("tail.bias"));
        for (g, e) in got.data().iter().zip(&out[0]) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}
