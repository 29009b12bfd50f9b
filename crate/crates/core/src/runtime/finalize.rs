//! Turning controller scores into fixed inference masks.

use crate::controllers::round_half_up;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noiseless gate probability `sigmoid((score + b)/τ)`, evaluated exactly
/// as the straight-through operator does.
pub fn gate_prob(score: f32, bias: f32, tau: f32) -> f32 {
    let x = (score + bias) * (1.0 / tau);
    1.0 / (1.0 + (-x).exp())
}

/// Noiseless binary masks from pre-sigmoid scores.
pub fn binarize(scores: &Tensor, bias: f32, tau: f32) -> Tensor {
    scores.map(|s| round_half_up(gate_prob(s, bias, tau)))
}

/// Indices of the `k` largest entries, ascending; ties prefer lower indices.
pub fn top_k_indices(row: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut keep = order[..k.min(row.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Row-wise top-`k` binary mask.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Tensor {
    let c = scores.cols();
    let mut out = vec![0.0; scores.numel()];
    for r in 0..scores.rows() {
        for j in top_k_indices(scores.row(r), k) {
            out[r * c + j] = 1.0;
        }
    }
    Tensor::new(scores.shape().to_vec(), out).expect("same shape")
}

/// Binary expert masks `[N × w]` padded to a common width: each expert
/// narrower than the widest gains its highest-scoring dropped positions.
pub fn equalize_experts(scores: &Tensor, bias: f32, tau: f32) -> Result<Tensor> {
    let mut masks = binarize(scores, bias, tau);
    let w = scores.cols();
    let widths: Vec<usize> = (0..scores.rows())
        .map(|r| masks.row(r).iter().filter(|&&v| v == 1.0).count())
        .collect();
    if let Some(e) = widths.iter().position(|&n| n == 0) {
        return Err(Error::Degenerate(format!("expert {e} keeps no channels")));
    }
    let target = widths.iter().copied().max().unwrap_or(0);
    for (r, &have) in widths.iter().enumerate() {
        if have == target {
            continue;
        }
        let row = scores.row(r);
        let mut dropped: Vec<usize> = (0..w).filter(|&j| masks.at(r, j) == 0.0).collect();
        dropped.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &dropped[..target - have] {
            masks.data_mut()[r * w + j] = 1.0;
        }
    }
    Ok(masks)
}

/// `round(mean row sum)` with halves rounding up.
pub fn compute_k(row_sums: &[f32]) -> Result<usize> {
    if row_sums.is_empty() {
        return Err(Error::invalid("compute_k", "no sample tokens"));
    }
    let mean = row_sums.iter().map(|&v| v as f64).sum::<f64>() / row_sums.len() as f64;
    let k = (mean + 0.5).floor() as usize;
    if k == 0 {
        return Err(Error::Degenerate("attention keeps no value channels".into()));
    }
    Ok(k)
}

/// Kept positions of a binary row.
pub fn kept(row: &[f32]) -> Vec<usize> {
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn k_examples() {
        assert_eq!(compute_k(&[3.0, 4.0, 2.0, 3.0]).unwrap(), 3);
        assert_eq!(compute_k(&[4.0; 5]).unwrap(), 4);
        assert_eq!(compute_k(&[2.0, 3.0]).unwrap(), 3);
        assert!(compute_k(&[0.0, 0.0]).is_err());
        assert!(compute_k(&[]).is_err());
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn degenerate_expert_is_an_error() {
        let scores = Tensor::matrix(2, 2, vec![5.0, 5.0, -9.0, -9.0]).unwrap();
        assert!(equalize_experts(&scores, 3.0, 0.4).is_err());
    }

    #[test]
    fn padding_takes_best_dropped_positions() {
        // expert 0 keeps {0,1,2}; expert 1 keeps {3} and gains 1 then 0
        let scores = Tensor::matrix(
            2,
            4,
            vec![1.0, 1.0, 1.0, -9.0, -5.0, -4.0, -8.0, 0.0],
        )
        .unwrap();
        let m = equalize_experts(&scores, 3.0, 0.4).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn equalized_widths_match_and_are_supersets(
            data in prop::collection::vec(-8.0f32..4.0, 4 * 12),
        ) {
            let mut data = data;
            for r in 0..4 {
                data[r * 12] = 10.0;
            }
            let scores = Tensor::matrix(4, 12, data).unwrap();
            let raw = binarize(&scores, 3.0, 0.4);
            let eq = equalize_experts(&scores, 3.0, 0.4).unwrap();
            let widths: Vec<usize> = (0..4).map(|r| kept(eq.row(r)).len()).collect();
            let target = (0..4).map(|r| kept(raw.row(r)).len()).max().unwrap();
            prop_assert!(widths.iter().all(|&w| w == target));
            for (a, b) in raw.data().iter().zip(eq.data()) {
                prop_assert!(*a <= *b);
            }
            prop_assert_eq!(&eq, &equalize_experts(&scores, 3.0, 0.4).unwrap());
        }
    }
}
