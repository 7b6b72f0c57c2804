//! Synthetic labeled head phantoms and random smooth deformations.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::init::substream;
use crate::engine::{Shape5, Tensor5};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::losses::{box_sum, window_counts};
use crate::resample::{warp_nearest, warp_trilinear_forward};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomCfg {
    pub dims: [usize; 3],
    pub num_labels: u16,
    /// Largest displacement component of the individualizing field, voxels.
    pub amplitude: f64,
    pub smooth_sigma: f64,
    /// Half-width of the uniform per-region intensity offset.
    pub jitter: f64,
}

impl Default for PhantomCfg {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            num_labels: 6,
            amplitude: 4.0,
            smooth_sigma: 8.0,
            jitter: 0.03,
        }
    }
}

impl PhantomCfg {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!(
                "phantom dims must be >= 16 per axis, got {:?}",
                self.dims
            )));
        }
        if self.num_labels < 2 {
            return Err(Error::Config(format!(
                "phantom needs at least 2 labels, got {}",
                self.num_labels
            )));
        }
        if !(self.amplitude >= 0.0) || !(self.smooth_sigma > 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config(
                "phantom amplitude and jitter must be >= 0 and smooth_sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// `(1, 1, L, W, H)` in [0, 1].
    pub intensity: Tensor5<f32>,
    pub labels: LabelVolume,
}

/// Nominal intensity of each label before jitter.
fn region_intensity(label: u16, num_labels: u16) -> f64 {
    const SECTORS: [f64; 6] = [0.7, 0.88, 0.6, 0.95, 0.78, 0.66];
    match label {
        0 => 0.0,
        1 => 0.45,
        l if l == num_labels => 0.2,
        l => SECTORS[(l as usize - 2) % SECTORS.len()],
    }
}

/// Label of the undeformed phantom at normalized coordinates in [-1, 1]³.
fn base_label(u: [f64; 3], num_labels: u16) -> u16 {
    let rho = ((u[0] / 0.85).powi(2) + (u[1] / 0.8).powi(2) + (u[2] / 0.75).powi(2)).sqrt();
    if rho > 1.0 {
        return 0;
    }
    let azimuth = u[1].atan2(u[2]);
    // Folded inner boundary of the outer shell.
    let inner = 0.74 + 0.07 * (6.0 * azimuth).sin() * (2.0 * u[0]).cos();
    if rho > inner {
        return 1;
    }
    let ventricle = ((u[0] / 0.35).powi(2) + (u[1] / 0.22).powi(2) + (u[2] / 0.3).powi(2)).sqrt();
    let sectors = num_labels.saturating_sub(2);
    if ventricle < 1.0 || sectors == 0 {
        return num_labels;
    }
    let twisted = (azimuth + 1.2 * u[0]) / (2.0 * PI);
    2 + ((twisted.rem_euclid(1.0) * sectors as f64) as u16).min(sectors - 1)
}

fn normalized(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Undeformed phantom with the given per-label intensities.
fn render(dims: [usize; 3], num_labels: u16, levels: &[f64]) -> (Tensor5<f64>, LabelVolume) {
    let [nl, nw, nh] = dims;
    let mut labels = Vec::with_capacity(nl * nw * nh);
    let mut values = Vec::with_capacity(nl * nw * nh);
    for i in 0..nl {
        for j in 0..nw {
            for k in 0..nh {
                let u = [normalized(i, nl), normalized(j, nw), normalized(k, nh)];
                let l = base_label(u, num_labels);
                let texture = if l == 0 {
                    0.0
                } else {
                    0.04 * (2.0 * PI * (0.75 * u[0] + 0.5 * u[1])).sin() * (1.2 * PI * u[2]).cos()
                };
                labels.push(l);
                values.push((levels[l as usize] + texture).clamp(0.0, 1.0));
            }
        }
    }
    let shape = Shape5::new(1, 1, nl, nw, nh);
    (
        Tensor5::from_vec(shape, values).expect("finite phantom"),
        LabelVolume::new(dims, labels).expect("matching dims"),
    )
}

/// Phantom without deformation or jitter.
pub fn base_phantom(dims: [usize; 3], num_labels: u16) -> (Tensor5<f64>, LabelVolume) {
    let levels: Vec<f64> = (0..=num_labels)
        .map(|l| region_intensity(l, num_labels))
        .collect();
    render(dims, num_labels, &levels)
}

/// Box width whose three-fold repetition has standard deviation `sigma`.
fn box_radius(sigma: f64) -> usize {
    let width = (4.0 * sigma * sigma + 1.0).sqrt();
    ((width - 1.0) / 2.0).round().max(1.0) as usize
}

/// Per-channel white noise, blurred by three passes of a grid-clipped box
/// mean and rescaled so the largest component magnitude equals `amplitude`.
pub fn random_smooth_dvf(
    seed: u64,
    dims: [usize; 3],
    amplitude: f64,
    smooth_sigma: f64,
) -> Result<Tensor5<f64>> {
    if !(amplitude >= 0.0) || !(smooth_sigma > 0.0) {
        return Err(Error::Config(format!(
            "need amplitude >= 0 and smooth_sigma > 0, got {amplitude}, {smooth_sigma}"
        )));
    }
    let shape = Shape5::new(1, 3, dims[0], dims[1], dims[2]);
    if amplitude == 0.0 {
        return Ok(Tensor5::zeros(shape));
    }
    let mut rng = substream(seed, "phantom/dvf", 0);
    let r = box_radius(smooth_sigma);
    let counts = window_counts::<f64>(dims, r);
    let mut out = Tensor5::zeros(shape);
    for c in 0..3 {
        let mut field: Vec<f64> = (0..shape.voxels())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for _ in 0..3 {
            field = box_sum(&field, dims, r)
                .iter()
                .zip(&counts)
                .map(|(s, n)| s / n)
                .collect();
        }
        out.plane_mut(0, c).copy_from_slice(&field);
    }
    let peak = out.max_abs();
    if peak > 0.0 {
        let scale = amplitude / peak;
        out.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// One individualized phantom: region intensities jittered, then intensity
/// and labels resampled through a random smooth field (trilinear and
/// nearest respectively).
pub fn gen_phantom(seed: u64, cfg: &PhantomCfg) -> Result<VolumeSample> {
    cfg.validate()?;
    let mut rng = substream(seed, "phantom/jitter", 0);
    let levels: Vec<f64> = (0..=cfg.num_labels)
        .map(|l| {
            let base = region_intensity(l, cfg.num_labels);
            if l == 0 || cfg.jitter == 0.0 {
                base
            } else {
                (base + rng.random_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0)
            }
        })
        .collect();
    let (intensity, labels) = render(cfg.dims, cfg.num_labels, &levels);
    let dvf = random_smooth_dvf(seed, cfg.dims, cfg.amplitude, cfg.smooth_sigma)?;
    let warped = warp_trilinear_forward(&intensity, &dvf)?;
    let labels = warp_nearest(&labels, &dvf)?;
    Ok(VolumeSample {
        id: format!("phantom-{seed:016x}"),
        intensity: warped.map(|v| v.clamp(0.0, 1.0)).cast(),
        labels,
    })
}

/// `count` phantoms with per-sample seeds drawn from the `phantom` stream.
pub fn gen_dataset(seed: u64, count: usize, cfg: &PhantomCfg) -> Result<Vec<VolumeSample>> {
    (0..count)
        .map(|i| {
            let s = substream(seed, "phantom", i as u64).next_u64();
            let mut sample = gen_phantom(s, cfg)?;
            sample.id = format!("phantom-{i:03}");
            Ok(sample)
        })
        .collect()
}
