//! Synthetic data, degradation, dataset splits and persistence.

pub mod checkpoint;
pub mod phantom;
pub mod rvol;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use phantom::{
    base_phantom, gen_dataset, gen_phantom, random_smooth_dvf, PhantomCfg, VolumeSample,
};
pub use rvol::{read_intensity, read_labels, read_volume, write_volume, Volume};

use crate::engine::{Real, Tensor5};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::resample::trilinear_resize_forward;

/// Low-resolution volume and its trilinear re-upsampling to the input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Degraded<T> {
    pub lr: Tensor5<T>,
    pub lr_up: Tensor5<T>,
}

/// Trilinear down-scaling by `factor` followed by trilinear up-scaling back.
pub fn degrade<T: Real>(vol: &Tensor5<T>, factor: usize) -> Result<Degraded<T>> {
    if factor < 2 {
        return Err(Error::Config(format!(
            "degradation factor must be >= 2, got {factor}"
        )));
    }
    let dims = vol.shape().spatial();
    if dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::shape(
            "degrade",
            format!("dims {dims:?} not divisible by {factor}"),
        ));
    }
    let lr = trilinear_resize_forward(vol, 1.0 / factor as f64)?;
    let lr_up = trilinear_resize_forward(&lr, factor as f64)?;
    debug_assert_eq!(lr_up.shape(), vol.shape());
    Ok(Degraded { lr, lr_up })
}

/// Label map on the grid of [`degrade`]'s low-resolution output: each
/// output voxel takes the most frequent label of its `factor³` block, ties
/// going to the smaller label.
pub fn downsample_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    let dims = labels.dims();
    if factor == 0 || dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::shape(
            "downsample_labels",
            format!("dims {dims:?} not divisible by {factor}"),
        ));
    }
    let out_dims = dims.map(|d| d / factor);
    let n = labels.max_label() as usize + 1;
    let mut counts = vec![0usize; n];
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                counts.iter_mut().for_each(|c| *c = 0);
                for a in 0..factor {
                    for b in 0..factor {
                        for c in 0..factor {
                            counts[labels.at(i * factor + a, j * factor + b, k * factor + c)
                                as usize] += 1;
                        }
                    }
                }
                let mut best = 0;
                for (l, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = l;
                    }
                }
                data.push(best as u16);
            }
        }
    }
    LabelVolume::new(out_dims, data)
}

/// Disjoint train / validation / test lists of sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Consecutive blocks of the given sizes.
    pub fn from_counts(train: usize, val: usize, test: usize) -> Result<Self> {
        if train == 0 || test == 0 {
            return Err(Error::Config(format!(
                "split needs non-empty train and test sets, got {train}/{val}/{test}"
            )));
        }
        Ok(Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..train + val + test).collect(),
        })
    }

    /// `n` samples divided 30 : 4 : 6 by largest remainder, each part at
    /// least one sample.
    pub fn proportional(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Config(format!(
                "need at least 3 samples to split, got {n}"
            )));
        }
        let ratios = [30usize, 4, 6];
        let mut counts: Vec<usize> = ratios.iter().map(|r| n * r / 40).collect();
        let mut rema: Vec<(usize, usize)> = ratios
            .iter()
            .enumerate()
            .map(|(i, r)| (n * r % 40, i))
            .collect();
        rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut left = n - counts.iter().sum::<usize>();
        for &(_, i) in rema.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        for i in 1..3 {
            if counts[i] == 0 {
                counts[i] = 1;
                counts[0] -= 1;
            }
        }
        Self::from_counts(counts[0], counts[1], counts[2])
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generated samples together with their split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<VolumeSample>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn new(samples: Vec<VolumeSample>, split: DatasetSplit) -> Result<Self> {
        let mut seen = vec![false; samples.len()];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Config(format!("sample {i} appears in two splits"))),
                None => {
                    return Err(Error::Config(format!(
                        "split index {i} out of range for {} samples",
                        samples.len()
                    )))
                }
            }
        }
        if let Some(s) = samples
            .iter()
            .find(|s| s.labels.dims() != samples[0].labels.dims())
        {
            return Err(Error::shape(
                "dataset",
                format!("sample {} has different dims", s.id),
            ));
        }
        Ok(Self { samples, split })
    }

    /// `count` phantoms split proportionally.
    pub fn synth(seed: u64, count: usize, cfg: &PhantomCfg) -> Result<Self> {
        Self::new(
            gen_dataset(seed, count, cfg)?,
            DatasetSplit::proportional(count)?,
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.samples.first().map_or([0; 3], |s| s.labels.dims())
    }

    /// Degraded copies of every sample at `factor`, in sample order.
    pub fn degraded(&self, factor: usize) -> Result<Vec<Degraded<f32>>> {
        self.samples
            .iter()
            .map(|s| degrade(&s.intensity, factor))
            .collect()
    }
}

/// Contents of `manifest.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub phantom: PhantomCfg,
    pub ids: Vec<String>,
    pub split: DatasetSplit,
}

pub const MANIFEST: &str = "manifest.json";

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.image.rvol"))
}

pub fn labels_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.labels.rvol"))
}

/// Writes every sample as two RVOL files plus the manifest.
pub fn save_dataset(
    dir: impl AsRef<Path>,
    ds: &Dataset,
    seed: u64,
    phantom: &PhantomCfg,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ds.samples {
        write_volume(image_path(dir, &s.id), &Volume::F32(s.intensity.clone()))?;
        write_volume(labels_path(dir, &s.id), &Volume::Labels(s.labels.clone()))?;
    }
    let manifest = Manifest {
        seed,
        phantom: *phantom,
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        split: ds.split.clone(),
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest encoding: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, Manifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let samples = manifest
        .ids
        .iter()
        .map(|id| {
            Ok(VolumeSample {
                id: id.clone(),
                intensity: read_intensity(image_path(dir, id))?,
                labels: read_labels(labels_path(dir, id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(samples, manifest.split.clone())?, manifest))
}
