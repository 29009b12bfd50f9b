//! Rotary position embedding with half-split pairing: element `i` of a head
//! rotates together with element `i + d/(2H)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BASE: f64 = 10000.0;

/// Rotation frequencies for one block of `2·half` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    thetas: Vec<f64>,
}

impl RopeTable {
    /// Full table for a head of width `head_dim`: `θ_i = 10000^(−2i/head_dim)`.
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid("rope", format!("head dimension {head_dim} must be even")));
        }
        let half = head_dim / 2;
        let thetas = (0..half)
            .map(|i| BASE.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RopeTable { thetas })
    }

    /// Table restricted to the surviving pair indices of a pruned head.
    pub fn subset(&self, pairs: &[usize]) -> Self {
        RopeTable {
            thetas: pairs.iter().map(|&i| self.thetas[i]).collect(),
        }
    }

    pub fn half(&self) -> usize {
        self.thetas.len()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Rotates every block of `2·half` columns in a row-major buffer whose
    /// row index is the position. `inverse` applies the transpose rotation.
    pub fn rotate(&self, data: &mut [f32], cols: usize, inverse: bool) {
        let half = self.half();
        let block = 2 * half;
        let rows = data.len() / cols;
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut cs = vec![(0.0f32, 0.0f32); half];
        for r in 0..rows {
            for (i, c) in cs.iter_mut().enumerate() {
                let ang = r as f64 * self.thetas[i];
                *c = (ang.cos() as f32, (sign * ang.sin()) as f32);
            }
            let row = &mut data[r * cols..(r + 1) * cols];
            for b in row.chunks_mut(block) {
                for (i, &(c, s)) in cs.iter().enumerate() {
                    let (x0, x1) = (b[i], b[i + half]);
                    b[i] = x0 * c - x1 * s;
                    b[i + half] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Applies rotary embedding to a `[T × head_dim]` query or key block.
pub fn rope_apply(x: &Tensor, head_dim: usize) -> Result<Tensor> {
    if x.cols() != head_dim {
        return Err(Error::shape("rope", x.shape(), &[head_dim]));
    }
    let table = RopeTable::new(head_dim)?;
    let mut data = x.data().to_vec();
    table.rotate(&mut data, head_dim, false);
    Tensor::new(x.shape().to_vec(), data)
}
