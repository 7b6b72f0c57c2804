use crate::error::{Error, Result};

/// Integer label map over an `(L, W, H)` grid, H fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u16>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "labels",
                format!("{} values for dims {dims:?}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], label: u16) -> Self {
        Self {
            dims,
            data: vec![label; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u16 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Voxel count per label value, indexed by label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.max_label() as usize + 1];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }
}
