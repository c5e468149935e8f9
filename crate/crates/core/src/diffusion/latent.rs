use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Single-channel square image, flattened row-major into a `side² × 1` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub side: usize,
    pub matrix: Matrix,
}

impl LatentImage {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::arg(format!(
                "{} pixels do not form a {side}x{side} image",
                pixels.len()
            )));
        }
        Ok(Self {
            side,
            matrix: Matrix::from_vec(side * side, 1, pixels)?,
        })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            matrix: Matrix::zeros(side * side, 1),
        }
    }

    pub fn pixels(&self) -> &[f64] {
        self.matrix.data()
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        self.matrix.data_mut()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.matrix.data()[y * self.side + x]
    }

    pub fn same_shape(&self, other: &LatentImage) -> bool {
        self.side == other.side && self.matrix.shape() == other.matrix.shape()
    }

    /// Splits into non-overlapping `patch × patch` tiles, one per row.
    pub fn to_patches(&self, patch: usize) -> Result<Matrix> {
        patchify(self.pixels(), self.side, patch)
    }

    pub fn from_patches(patches: &Matrix, side: usize, patch: usize) -> Result<Self> {
        let per_side = side / patch;
        if patches.rows() != per_side * per_side || patches.cols() != patch * patch {
            return Err(Error::arg("patch matrix does not match image geometry"));
        }
        let mut pixels = vec![0.0; side * side];
        for py in 0..per_side {
            for px in 0..per_side {
                let row = patches.row(py * per_side + px);
                for dy in 0..patch {
                    for dx in 0..patch {
                        pixels[(py * patch + dy) * side + px * patch + dx] = row[dy * patch + dx];
                    }
                }
            }
        }
        Self::new(side, pixels)
    }
}

pub(crate) fn patchify(pixels: &[f64], side: usize, patch: usize) -> Result<Matrix> {
    if patch == 0 || side % patch != 0 || pixels.len() != side * side {
        return Err(Error::arg(format!(
            "cannot cut a {side}x{side} image into {patch}x{patch} patches"
        )));
    }
    let per_side = side / patch;
    let mut out = Matrix::zeros(per_side * per_side, patch * patch);
    for py in 0..per_side {
        for px in 0..per_side {
            let row = out.row_mut(py * per_side + px);
            for dy in 0..patch {
                for dx in 0..patch {
                    row[dy * patch + dx] = pixels[(py * patch + dy) * side + px * patch + dx];
                }
            }
        }
    }
    Ok(out)
}
