//! Evaluation metrics: Dice over label maps, global NCC, PSNR and 3D SSIM.
//! Everything is accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::engine::{Real, Tensor5};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::losses::{box_sum, window_counts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// `(label, score)`; `None` when the label is absent from both volumes.
    pub per_label: Vec<(u16, Option<f64>)>,
    /// Mean over labels present in at least one volume.
    pub mean: Option<f64>,
}

/// Dice per label. With `labels = None` every non-zero label found in
/// either volume is scored.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: Option<&[u16]>) -> Result<DiceReport> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "dice",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let n = a.max_label().max(b.max_label()) as usize + 1;
    let mut count_a = vec![0usize; n];
    let mut count_b = vec![0usize; n];
    let mut both = vec![0usize; n];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        count_a[x as usize] += 1;
        count_b[y as usize] += 1;
        if x == y {
            both[x as usize] += 1;
        }
    }
    let set: Vec<u16> = match labels {
        Some(l) => l.to_vec(),
        None => (1..n as u16)
            .filter(|&l| count_a[l as usize] + count_b[l as usize] > 0)
            .collect(),
    };
    let per_label: Vec<(u16, Option<f64>)> = set
        .iter()
        .map(|&l| {
            let i = l as usize;
            let (ca, cb, cab) = if i < n {
                (count_a[i], count_b[i], both[i])
            } else {
                (0, 0, 0)
            };
            let score = (ca + cb > 0).then(|| 2.0 * cab as f64 / (ca + cb) as f64);
            (l, score)
        })
        .collect();
    let scored: Vec<f64> = per_label.iter().filter_map(|&(_, s)| s).collect();
    let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(DiceReport { per_label, mean })
}

fn check_same<T: Real>(op: &'static str, a: &Tensor5<T>, b: &Tensor5<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Whole-volume normalized cross-correlation with population statistics.
/// `None` when either volume is constant.
pub fn ncc_global<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Option<f64>> {
    check_same("ncc_global", a, b)?;
    let constant = |t: &Tensor5<T>| t.data().iter().all(|&v| v == t.data()[0]);
    if constant(a) || constant(b) {
        return Ok(None);
    }
    let n = a.len() as f64;
    let ma = a.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    let mb = b.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.f64() - ma, y.f64() - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    Db(f64),
    /// Zero mean squared error.
    Identical,
}

impl Psnr {
    /// Decibels, with `Identical` mapped to +∞.
    pub fn value(self) -> f64 {
        match self {
            Psnr::Db(v) => v,
            Psnr::Identical => f64::INFINITY,
        }
    }
}

pub fn mse<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<f64> {
    check_same("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn psnr<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(psnr_from_mse(m, peak))
    })
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimCfg {
    /// Cube side, odd.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimCfg {
    fn default() -> Self {
        Self {
            window: 3,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

/// Mean SSIM over voxel-centred cubic windows clipped to the grid, averaged
/// over every (batch, channel) plane.
pub fn ssim3d<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>, cfg: &SsimCfg) -> Result<f64> {
    check_same("ssim3d", a, b)?;
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(Error::Config(format!(
            "SSIM window must be odd, got {}",
            cfg.window
        )));
    }
    let s = a.shape();
    let dims = s.spatial();
    let r = cfg.window / 2;
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let n = window_counts::<f64>(dims, r);
    let mut total = 0.0;
    for bi in 0..s.batch() {
        for ci in 0..s.channels() {
            let x: Vec<f64> = a.plane(bi, ci).iter().map(|v| v.f64()).collect();
            let y: Vec<f64> = b.plane(bi, ci).iter().map(|v| v.f64()).collect();
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let (sx, sy) = (box_sum(&x, dims, r), box_sum(&y, dims, r));
            let (sxx, syy, sxy) = (
                box_sum(&xx, dims, r),
                box_sum(&yy, dims, r),
                box_sum(&xy, dims, r),
            );
            for p in 0..x.len() {
                let (mx, my) = (sx[p] / n[p], sy[p] / n[p]);
                let vx = (sxx[p] / n[p] - mx * mx).max(0.0);
                let vy = (syy[p] / n[p] - my * my).max(0.0);
                let cxy = sxy[p] / n[p] - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
            }
        }
    }
    Ok(total / a.len() as f64)
}

/// One line of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReportRow {
    pub method: String,
    pub scale: u32,
    pub dice: f64,
    pub ncc: f64,
    pub psnr: f64,
    pub ssim: f64,
}
