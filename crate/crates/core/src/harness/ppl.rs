//! Perplexity over non-overlapping windows.

use std::thread;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Summed negative log-likelihood of `tokens[1..]` under next-token logits
/// `[T × V]` computed from `tokens[..T]`.
pub fn window_nll(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let v = logits.cols();
    if logits.rows() != targets.len() {
        return Err(Error::shape("nll", logits.shape(), &[targets.len()]));
    }
    let mut total = 0.0f64;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        let y = y as usize;
        if y >= v {
            return Err(Error::invalid("nll", format!("target {y} out of range {v}")));
        }
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[y] as f64;
    }
    Ok(total)
}

/// `exp(mean NLL)` over consecutive windows of `window + 1` tokens, each
/// predicting its last `window` tokens. Windows are evaluated on up to
/// `threads` workers; the reduction order is fixed.
pub fn eval_ppl(
    logits: impl Fn(&[u32]) -> Result<Tensor> + Sync,
    tokens: &[u32],
    window: usize,
    threads: usize,
) -> Result<f64> {
    if window == 0 {
        return Err(Error::invalid("eval_ppl", "window must be positive"));
    }
    let chunks: Vec<&[u32]> = tokens.chunks_exact(window + 1).collect();
    if chunks.is_empty() {
        return Err(Error::invalid(
            "eval_ppl",
            format!("corpus of {} tokens is shorter than one window of {}", tokens.len(), window + 1),
        ));
    }
    let threads = threads.clamp(1, chunks.len());
    let per = chunks.len().div_ceil(threads);
    let sums: Vec<Result<Vec<f64>>> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|group| {
                let f = &logits;
                s.spawn(move || {
                    group
                        .iter()
                        .map(|w| window_nll(&f(&w[..window])?, &w[1..]))
                        .collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = 0.0;
    for group in sums {
        for nll in group? {
            total += nll;
        }
    }
    let n = (chunks.len() * window) as f64;
    Ok((total / n).exp())
}
