//! Tape-free kernels with the same arithmetic as the autograd forward ops.

use crate::autograd::{gelu, mean_inv_std, rms_inv, silu, softmax_rows};
use crate::controllers::{ProjD, LN_EPS};
use crate::error::{Error, Result};
use crate::model::decoder::NORM_EPS;
use crate::tensor::{gemm, Tensor};

pub(crate) fn rms_norm(x: &Tensor, w: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let inv = rms_inv(row, NORM_EPS);
        out.extend(row.iter().zip(w.data()).map(|(&v, &g)| v * inv * g));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let (mu, inv) = mean_inv_std(row, LN_EPS);
        out.extend(
            row.iter()
                .zip(gamma.data().iter().zip(beta.data()))
                .map(|(&v, (&g, &b))| (v - mu) * inv * g + b),
        );
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// `a + b` where `b` is a row vector broadcast over the rows of `a`, or a
/// tensor of the same shape.
pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let n = b.numel();
    debug_assert!(n > 0 && a.numel() % n == 0);
    let data = a
        .data()
        .iter()
        .zip(b.data().iter().cycle())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Elementwise product with the same broadcast rule as [`add`].
pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter().cycle())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn embed(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(Error::invalid("embedding", format!("token {id} out of range {v}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// `a · bᵀ`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(k, b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), &mut out, false);
    Tensor::new(vec![m, n], out).expect("shape")
}

pub(crate) fn causal_softmax(s: &Tensor) -> Tensor {
    softmax_rows(s, true)
}

pub(crate) fn silu_t(x: &Tensor) -> Tensor {
    x.map(silu)
}

/// `LayerNorm → GELU → Linear(+bias)`.
pub(crate) fn proj_d(p: &ProjD<Tensor>, x: &Tensor) -> Result<Tensor> {
    let y = layer_norm(x, &p.gamma, &p.beta).map(gelu);
    Ok(add(&y.matmul(&p.w)?, &p.b))
}

pub(crate) fn scale(x: &Tensor, s: f32) -> Tensor {
    x.map(|v| v * s)
}

/// Columns `start..start + width` of every row.
pub(crate) fn slice_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let idx: Vec<usize> = (start..start + width).collect();
    x.select_cols(&idx)
}

pub(crate) fn concat_cols(parts: &[Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn t(r: usize, c: usize, seed: u32) -> Tensor {
        let data = (0..r * c)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 250.0 - 2.0)
            .collect();
        Tensor::matrix(r, c, data).unwrap()
    }

    #[test]
    fn kernels_match_tape_ops_bitwise() {
        let x = t(5, 6, 1);
        let w = t(1, 6, 2).reshape(vec![6]).unwrap();
        let m = t(6, 3, 3);
        let p = ProjD {
            gamma: t(1, 6, 4).reshape(vec![6]).unwrap(),
            beta: t(1, 6, 5).reshape(vec![6]).unwrap(),
            w: m.clone(),
            b: t(1, 3, 6).reshape(vec![3]).unwrap(),
        };
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let r = g.rms_norm(xv, wv, NORM_EPS).unwrap();
        assert_eq!(g.value(r), &rms_norm(&x, &w));

        let pv = ProjD {
            gamma: g.constant(p.gamma.clone()),
            beta: g.constant(p.beta.clone()),
            w: g.constant(p.w.clone()),
            b: g.constant(p.b.clone()),
        };
        let y = crate::controllers::proj_d_forward(&mut g, &pv, xv).unwrap();
        assert_eq!(g.value(y), &proj_d(&p, &x).unwrap());

        let s = g.matmul_nt(xv, xv).unwrap();
        assert_eq!(g.value(s), &matmul_nt(&x, &x));
        let a = g.causal_softmax(s).unwrap();
        assert_eq!(g.value(a), &causal_softmax(&matmul_nt(&x, &x)));
        let z = g.silu(xv);
        assert_eq!(g.value(z), &silu_t(&x));
    }

    #[test]
    fn slice_and_concat_invert() {
        let x = t(3, 5, 9);
        let parts = [slice_cols(&x, 0, 2), slice_cols(&x, 2, 3)];
        assert_eq!(concat_cols(&parts), x);
    }
}
