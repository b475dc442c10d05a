//! Two-level Laplacian pyramid.
//!
//! The coarse band is the 2×2 max-pool of the image and the residual is what
//! the repeat-upsampled coarse band misses. Max-pooling makes `decompose`
//! nonlinear, but `reconstruct` is exact because the residual stores the
//! difference verbatim.

use crate::error::{Error, Result};
use crate::gradcore::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecomposition {
    /// `[C, H/2, W/2]`
    pub coarse: Tensor,
    /// `[C, H, W]`
    pub residual: Tensor,
}

/// Shape of the images this pyramid accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub side: usize,
}

impl ImageShape {
    pub const CIFAR: ImageShape = ImageShape {
        channels: 3,
        side: 32,
    };

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.side, self.side]
    }

    pub fn coarse_dims(&self) -> [usize; 3] {
        [self.channels, self.side / 2, self.side / 2]
    }

    pub fn len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coarse_len(&self) -> usize {
        self.len() / 4
    }
}

/// `[C, h, w] -> [C, 2h, 2w]` by pixel repetition.
pub fn upsample(t: &Tensor) -> Result<Tensor> {
    let (data, shape) = kernels::upsample2(t.data(), t.shape())?;
    Tensor::new(shape, data)
}

/// `[C, H, W] -> [C, H/2, W/2]` by 2×2 max-pooling.
pub fn downsample(t: &Tensor) -> Result<Tensor> {
    let (data, _, shape) = kernels::maxpool2(t.data(), t.shape())?;
    Tensor::new(shape, data)
}

pub fn decompose(image: &Tensor, shape: ImageShape) -> Result<PyramidDecomposition> {
    if image.shape() != shape.dims() || !shape.side.is_multiple_of(2) {
        return Err(Error::Shape {
            op: "pyramid decompose",
            left: image.shape().to_vec(),
            right: shape.dims().to_vec(),
        });
    }
    let coarse = downsample(image)?;
    let up = upsample(&coarse)?;
    let residual = image
        .data()
        .iter()
        .zip(up.data())
        .map(|(x, u)| x - u)
        .collect();
    Ok(PyramidDecomposition {
        coarse,
        residual: Tensor::new(image.shape().to_vec(), residual)?,
    })
}

pub fn reconstruct(d: &PyramidDecomposition) -> Result<Tensor> {
    let up = upsample(&d.coarse)?;
    if up.shape() != d.residual.shape() {
        return Err(Error::Shape {
            op: "pyramid reconstruct",
            left: d.coarse.shape().to_vec(),
            right: d.residual.shape().to_vec(),
        });
    }
    let data = up
        .data()
        .iter()
        .zip(d.residual.data())
        .map(|(u, r)| u + r)
        .collect();
    Tensor::new(up.shape().to_vec(), data)
}
