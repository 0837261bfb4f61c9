//! Dense multi-channel fields on periodic grids.
//!
//! Values are stored row-major over the spatial axes with channels fastest,
//! so cell `i` occupies `data[i * channels..(i + 1) * channels]`. The same
//! layout backs order-parameter fields, latent fields and the on-disk
//! trajectory containers.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

/// Continuous order parameter on the coarse grid, one channel.
pub type OrderField = Field;
/// Space-to-depth compressed field with an expanded channel axis.
pub type LatentField = Field;

impl Field {
    pub fn zeros(dims: &[usize], channels: usize) -> Self {
        let cells: usize = dims.iter().product();
        Field {
            dims: dims.to_vec(),
            channels,
            data: vec![0.0; cells * channels],
        }
    }

    pub fn filled(dims: &[usize], channels: usize, value: f64) -> Self {
        let mut f = Self::zeros(dims, channels);
        f.data.fill(value);
        f
    }

    pub fn from_vec(dims: &[usize], channels: usize, data: Vec<f64>) -> Result<Self> {
        let cells: usize = dims.iter().product();
        if dims.is_empty() || channels == 0 || data.len() != cells * channels {
            return Err(Error::shape(format!(
                "{} values cannot fill dims {:?} with {} channels",
                data.len(),
                dims,
                channels
            )));
        }
        Ok(Field {
            dims: dims.to_vec(),
            channels,
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Row-major strides for `dims` (last axis fastest).
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub fn unravel(mut index: usize, dims: &[usize], out: &mut [usize]) {
    for axis in (0..dims.len()).rev() {
        out[axis] = index % dims[axis];
        index /= dims[axis];
    }
}

pub fn ravel(coords: &[usize], dims: &[usize]) -> usize {
    coords
        .iter()
        .zip(dims)
        .fold(0, |acc, (&c, &n)| acc * n + c)
}

/// Index of the cell at `coords + offset` with periodic wrap.
pub fn wrapped_neighbor(coords: &[usize], offset: &[isize], dims: &[usize]) -> usize {
    let mut idx = 0;
    for axis in 0..dims.len() {
        let n = dims[axis] as isize;
        let c = (coords[axis] as isize + offset[axis]).rem_euclid(n) as usize;
        idx = idx * dims[axis] + c;
    }
    idx
}

/// A time-ordered sequence of equally shaped fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<Field>,
}

impl Trajectory {
    pub fn new(frames: Vec<Field>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().position(|f| !f.same_shape(first)) {
                return Err(Error::shape(format!(
                    "frame {bad} has shape {:?}x{} but frame 0 has {:?}x{}",
                    frames[bad].dims(),
                    frames[bad].channels(),
                    first.dims(),
                    first.channels()
                )));
            }
        }
        Ok(Trajectory { frames })
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Field> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &Field {
        &self.frames[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ravel_unravel_round_trip() {
        let dims = [3, 4, 5];
        let mut c = [0; 3];
        for i in 0..60 {
            unravel(i, &dims, &mut c);
            assert_eq!(ravel(&c, &dims), i);
        }
        assert_eq!(strides(&dims), vec![20, 5, 1]);
    }

    #[test]
    fn neighbor_wraps() {
        let dims = [4, 4];
        assert_eq!(wrapped_neighbor(&[0, 0], &[-1, 0], &dims), 12);
        assert_eq!(wrapped_neighbor(&[3, 3], &[1, 1], &dims), 0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Field::from_vec(&[2, 2], 1, vec![0.0; 3]).is_err());
        assert!(Field::from_vec(&[2, 2], 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn trajectory_rejects_mixed_shapes() {
        let t = Trajectory::new(vec![Field::zeros(&[2, 2], 1), Field::zeros(&[4, 4], 1)]);
        assert!(t.is_err());
    }
}
