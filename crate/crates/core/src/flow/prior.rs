//! Isotropic Gaussian base distribution.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy)]
pub struct GaussianPrior {
    pub dim: usize,
}

impl GaussianPrior {
    pub fn new(dim: usize) -> Self {
        GaussianPrior { dim }
    }

    /// Per-row log density of a [batch, dim] latent:
    /// -(|u|^2 + dim * ln 2pi) / 2.
    pub fn log_prob(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let sq = tape.square(u)?;
        let ssq = tape.sum_rows(sq)?;
        let scaled = tape.mul_scalar(ssq, -0.5)?;
        tape.add_scalar(scaled, -0.5 * self.dim as f64 * LN_2PI)
    }

    /// Scalar log density evaluated without a tape.
    pub fn log_prob_value(&self, u: &[f64]) -> f64 {
        let ssq: f64 = u.iter().map(|v| v * v).sum();
        -0.5 * (ssq + self.dim as f64 * LN_2PI)
    }

    /// [n, dim] standard-normal draw.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Tensor {
        let mut data = vec![0.0; n * self.dim];
        rng.fill_normal(&mut data);
        Tensor::new(vec![n, self.dim], data).expect("sized by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_prob_at_origin_is_minus_half_d_ln_2pi() {
        let prior = GaussianPrior::new(2);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let lp = prior.log_prob(&mut tape, u).unwrap();
        assert!((tape.value(lp)[0] - (-LN_2PI)).abs() < 1e-12);
        assert!((prior.log_prob_value(&[0.0, 0.0]) - (-LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let prior = GaussianPrior::new(3);
        let mut rng = SeededRng::new(4);
        let sample = prior.sample(5, &mut rng);
        let mut tape = Tape::new();
        let u = tape.constant(&sample);
        let lp = prior.log_prob(&mut tape, u).unwrap();
        for i in 0..5 {
            let direct = prior.log_prob_value(sample.row(i));
            assert!((tape.value(lp)[i] - direct).abs() < 1e-12);
        }
    }
}
