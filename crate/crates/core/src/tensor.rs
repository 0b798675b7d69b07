//! Dense row-major `f32` tensor of rank 1 to 4.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Size of the last axis; for an `(H, W, C)` map this is the channel count.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// `(H, W, C)` extents of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(Error::shape(format!("expected rank-3 (H, W, C), got {s:?}"))),
        }
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, r: usize, c: usize, ch: usize) -> f32 {
        let (w, k) = (self.shape[1], self.shape[2]);
        self.data[(r * w + c) * k + ch]
    }

    /// Copies one channel of an `(H, W, C)` tensor into a flat `H * W` vector.
    pub fn channel(&self, ch: usize) -> Vec<f32> {
        let k = self.last_dim();
        self.data.iter().skip(ch).step_by(k).copied().collect()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let k = self.last_dim();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let k = self.last_dim();
        &mut self.data[i * k..(i + 1) * k]
    }

    pub fn ensure_shape(&self, expected: &[usize], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(format!(
                "{what}: expected {expected:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(TensorF32::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(TensorF32::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(TensorF32::new(&[0, 2], vec![]).is_err());
        assert!(TensorF32::new(&[], vec![]).is_err());
    }

    #[test]
    fn channel_extraction() {
        let t = TensorF32::from_fn(&[2, 2, 3], |i| i as f32);
        assert_eq!(t.channel(1), vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(t.at3(1, 0, 2), 8.0);
    }
}
