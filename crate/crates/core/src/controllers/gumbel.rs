//! Straight-through Gumbel discretisation.

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Noisy,
    /// Every draw is zero; used for evaluation and export.
    Noiseless,
}

/// How a straight-through operator evaluates its forward value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relax {
    /// Discrete forward, smooth backward.
    Straight,
    /// The smooth surrogate in both directions (finite-difference checks).
    Smooth,
}

/// Seeded source of Gumbel(0, 1) noise.
#[derive(Clone, Debug)]
pub struct GumbelRng {
    rng: ChaCha8Rng,
    mode: NoiseMode,
}

impl GumbelRng {
    pub fn new(seed: u64, mode: NoiseMode) -> Self {
        GumbelRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
        }
    }

    pub fn noiseless() -> Self {
        Self::new(0, NoiseMode::Noiseless)
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    /// A noise tensor of the given shape, or `None` in noiseless mode.
    pub fn sample(&mut self, shape: &[usize]) -> Option<Tensor> {
        if self.mode == NoiseMode::Noiseless {
            return None;
        }
        // open interval keeps every draw finite
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u: f32 = Open01.sample(&mut self.rng);
                -(-u.ln()).ln()
            })
            .collect();
        Some(Tensor::new(shape.to_vec(), data).expect("shape"))
    }
}

fn add_noise(g: &mut Graph, x: Var, noise: Option<Tensor>) -> Result<Var> {
    match noise {
        Some(n) => {
            let n = g.constant(n);
            g.add(x, n)
        }
        None => Ok(x),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rounds a sigmoid output to `{0, 1}`; exactly one half rounds up.
pub fn round_half_up(p: f32) -> f32 {
    if p >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// One-hot at the row-wise argmax of `(logits + g)/τ`; gradients are those
/// of `softmax((logits + g)/τ)`.
pub fn st_gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    noise: Option<Tensor>,
    tau: f32,
    relax: Relax,
) -> Result<Var> {
    let x = add_noise(g, logits, noise)?;
    let x = g.scale(x, 1.0 / tau);
    let soft = g.softmax(x);
    if relax == Relax::Smooth {
        return Ok(soft);
    }
    let v = g.value(x);
    let n = v.cols();
    let mut hard = vec![0.0; v.numel()];
    for (r, row) in v.data().chunks(n).enumerate() {
        hard[r * n + argmax(row)] = 1.0;
    }
    let hard = Tensor::new(v.shape().to_vec(), hard)?;
    g.straight_through(soft, hard)
}

/// `round(sigmoid((logits + g + b)/τ))` with straight-through gradients.
pub fn st_gumbel_sigmoid(
    g: &mut Graph,
    logits: Var,
    noise: Option<Tensor>,
    bias: f32,
    tau: f32,
    relax: Relax,
) -> Result<Var> {
    let x = add_noise(g, logits, noise)?;
    let x = g.add_scalar(x, bias);
    let x = g.scale(x, 1.0 / tau);
    let soft = g.sigmoid(x);
    if relax == Relax::Smooth {
        return Ok(soft);
    }
    let hard = g.value(soft).map(round_half_up);
    g.straight_through(soft, hard)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(logits: Vec<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let n = logits.len();
        let x = g.param(Tensor::matrix(1, n, logits).unwrap());
        let y = st_gumbel_softmax(&mut g, x, None, 0.4, Relax::Straight).unwrap();
        g.value(y).data().to_vec()
    }

    fn binary(logit: f32) -> f32 {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![logit]));
        let y = st_gumbel_sigmoid(&mut g, x, None, 3.0, 0.4, Relax::Straight).unwrap();
        g.value(y).item()
    }

    #[test]
    fn softmax_argmax_and_ties() {
        assert_eq!(one_hot(vec![2.0, 1.0, 0.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(vec![1.0, 1.0, 0.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(vec![0.0, 1.0, 3.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_rounding_examples() {
        // sigmoid(7.5) ≈ 0.99945, sigmoid(−2.5) ≈ 0.0759
        assert_eq!(binary(0.0), 1.0);
        assert_eq!(binary(-4.0), 0.0);
        assert_eq!(binary(-3.0), 1.0);
        assert_eq!(binary(1e30), 1.0);
    }

    #[test]
    fn saturated_logit_ignores_noise() {
        let mut rng = GumbelRng::new(9, NoiseMode::Noisy);
        for _ in 0..100 {
            let mut g = Graph::new();
            let x = g.param(Tensor::vector(vec![1e30]));
            let noise = rng.sample(&[1]);
            let y = st_gumbel_sigmoid(&mut g, x, noise, 3.0, 0.4, Relax::Straight).unwrap();
            assert_eq!(g.value(y).item(), 1.0);
        }
    }

    #[test]
    fn softmax_gradient_is_the_softmax_jacobian() {
        let logits = vec![0.3f32, -0.2, 0.9, 0.1];
        let noise = vec![0.5f32, 1.2, -0.3, 0.0];
        let cot = vec![0.7f32, -1.1, 0.4, 2.0];
        let tau = 0.4;
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let y = st_gumbel_softmax(
            &mut g,
            x,
            Some(Tensor::matrix(1, 4, noise.clone()).unwrap()),
            tau,
            Relax::Straight,
        )
        .unwrap();
        let c = g.constant(Tensor::matrix(1, 4, cot.clone()).unwrap());
        let prod = g.mul(y, c).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        let got = grads.get(x).unwrap().data().to_vec();

        // J = (diag(p) − p pᵀ)/τ
        let z: Vec<f64> = logits
            .iter()
            .zip(&noise)
            .map(|(&a, &b)| (a as f64 + b as f64) / tau as f64)
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let pc: f64 = p.iter().zip(&cot).map(|(a, &b)| a * b as f64).sum();
        for i in 0..4 {
            let want = p[i] * (cot[i] as f64 - pc) / tau as f64;
            assert!((got[i] as f64 - want).abs() < 1e-5, "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn sigmoid_gradient_is_the_smooth_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-2.9]));
        let y = st_gumbel_sigmoid(&mut g, x, None, 3.0, 0.4, Relax::Straight).unwrap();
        assert_eq!(g.value(y).item(), 1.0);
        let grads = g.backward(y).unwrap();
        let s = 1.0 / (1.0 + (-0.25f64).exp());
        let want = s * (1.0 - s) / 0.4;
        assert!((grads.get(x).unwrap().item() as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn noiseless_rng_draws_nothing() {
        let mut rng = GumbelRng::noiseless();
        assert!(rng.sample(&[3, 3]).is_none());
        let mut a = GumbelRng::new(4, NoiseMode::Noisy);
        let mut b = GumbelRng::new(4, NoiseMode::Noisy);
        assert_eq!(a.sample(&[5]), b.sample(&[5]));
    }

    #[test]
    fn noise_is_finite_with_gumbel_moments() {
        let mut rng = GumbelRng::new(11, NoiseMode::Noisy);
        let t = rng.sample(&[400_000]).unwrap();
        assert!(t.data().iter().all(|v| v.is_finite()));
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        // Euler–Mascheroni constant and π²/6
        assert!((mean - 0.577_215_66).abs() < 0.01, "{mean}");
        assert!((var - std::f64::consts::PI.powi(2) / 6.0).abs() < 0.03, "{var}");
    }
}
