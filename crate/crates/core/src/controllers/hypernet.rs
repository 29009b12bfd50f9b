use super::{ControllerVars, Gru};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Runs one GRU direction over the rows of `x`, returning the hidden state
/// after each row in input order.
pub(crate) fn gru_scan(g: &mut Graph, p: &Gru<Var>, x: Var, reverse: bool) -> Result<Vec<Var>> {
    let steps = g.shape(x)[0];
    let h3 = g.shape(p.w_hh)[1];
    let hidden = h3 / 3;
    let gi = g.matmul(x, p.w_ih)?;
    let gi = g.add(gi, p.b_ih)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let xi = g.slice_rows(gi, t, 1)?;
        let gh = g.matmul(h, p.w_hh)?;
        let gh = g.add(gh, p.b_hh)?;
        let (xr, xz, xn) = (
            g.slice_cols(xi, 0, hidden)?,
            g.slice_cols(xi, hidden, hidden)?,
            g.slice_cols(xi, 2 * hidden, hidden)?,
        );
        let (hr, hz, hn) = (
            g.slice_cols(gh, 0, hidden)?,
            g.slice_cols(gh, hidden, hidden)?,
            g.slice_cols(gh, 2 * hidden, hidden)?,
        );
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        h = g.add(n, zd)?;
        out[t] = h;
    }
    Ok(out)
}

/// Expert embeddings for every layer slot, each `[N × d_e]`.
///
/// A bidirectional GRU scans the `N` rows of `z`; a per-slot linear head
/// reads the concatenated states. Every slot shares the recurrent weights.
pub fn hypernet_forward(g: &mut Graph, c: &ControllerVars) -> Result<Vec<Var>> {
    let hyper = &c.set.hyper;
    let fwd = gru_scan(g, &hyper.fwd, c.z, false)?;
    let bwd = gru_scan(g, &hyper.bwd, c.z, true)?;
    let fwd = g.concat_rows(&fwd)?;
    let bwd = g.concat_rows(&bwd)?;
    let states = g.concat_cols(&[fwd, bwd])?;
    hyper
        .heads
        .iter()
        .map(|head| {
            let e = g.matmul(states, head.w)?;
            g.add(e, head.b)
        })
        .collect()
}
