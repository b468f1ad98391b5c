//! Invertible batch normalization on the input of each coupling layer.
//!
//! Normalizing direction: (u - mu) / sqrt(sigma^2 + eps), contributing
//! -1/2 * sum_i log(sigma_i^2 + eps) to the log-determinant. Training uses
//! the statistics of the current mini-batch (differentiably) and folds them
//! into running estimates, mu <- m*mu + (1-m)*mu_b, initialized from the
//! first batch; evaluation and the sampling direction use the running
//! estimates only.

use super::{Direction, Mode};
use crate::error::{Error, Result};
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BatchNormState {
    /// Running mean, a [d] buffer in the store.
    pub mean: ParamId,
    /// Running standard deviation, a [d] buffer in the store.
    pub std: ParamId,
    pub initialized: bool,
    pub momentum: f64,
    pub epsilon: f64,
    dim: usize,
}

impl BatchNormState {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        momentum: f64,
        epsilon: f64,
    ) -> Self {
        let mean = store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![dim]));
        let std = store.add_buffer(
            format!("{prefix}.running_std"),
            Tensor::from_vec(vec![1.0; dim]),
        );
        BatchNormState {
            mean,
            std,
            initialized: false,
            momentum,
            epsilon,
            dim,
        }
    }

    /// Apply the layer, returning the output and its scalar log-det term.
    pub fn apply(
        &mut self,
        tape: &mut Tape,
        store: &mut ParamStore,
        u: Var,
        direction: Direction,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(u);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dimension(format!(
                "batch norm over {} features got input {:?}",
                self.dim, shape
            )));
        }
        let batch = shape[0];
        match (direction, mode) {
            (Direction::Inverse, Mode::Train) => self.normalize_train(tape, store, u, batch),
            (Direction::Inverse, Mode::Eval) => self.normalize_eval(tape, store, u),
            (Direction::Forward, Mode::Eval) => self.denormalize(tape, store, u),
            (Direction::Forward, Mode::Train) => Err(Error::contract(
                "batch norm has no train-mode sampling direction".to_string(),
            )),
        }
    }

    fn normalize_train(
        &mut self,
        tape: &mut Tape,
        store: &mut ParamStore,
        u: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        if batch < 2 {
            return Err(Error::contract(format!(
                "train-mode batch norm needs batch >= 2, got {batch}"
            )));
        }
        let mu_b = tape.mean_cols(u)?;
        let centered = tape.sub(u, mu_b)?;
        let sq = tape.square(centered)?;
        let var_b = tape.mean_cols(sq)?;
        let var_eps = tape.add_scalar(var_b, self.epsilon)?;
        let denom = tape.sqrt(var_eps)?;
        let out = tape.div(centered, denom)?;
        let log_var = tape.log(var_eps)?;
        let sum_log = tape.sum(log_var)?;
        let log_det = tape.mul_scalar(sum_log, -0.5)?;

        // fold batch statistics into the running estimates (values only)
        let mu_vals = tape.value(mu_b).to_vec();
        let sigma_vals: Vec<f64> = tape.value(var_b).iter().map(|v| v.sqrt()).collect();
        let m = self.momentum;
        if self.initialized {
            let mean = store.get_mut(self.mean);
            for (r, &b) in mean.data_mut().iter_mut().zip(&mu_vals) {
                *r = m * *r + (1.0 - m) * b;
            }
            let std = store.get_mut(self.std);
            for (r, &b) in std.data_mut().iter_mut().zip(&sigma_vals) {
                *r = m * *r + (1.0 - m) * b;
            }
        } else {
            store.get_mut(self.mean).data_mut().copy_from_slice(&mu_vals);
            store.get_mut(self.std).data_mut().copy_from_slice(&sigma_vals);
            self.initialized = true;
        }
        Ok((out, log_det))
    }

    fn running_stats(&self, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        if !self.initialized {
            return Err(Error::contract(
                "batch norm used in eval before any training batch".to_string(),
            ));
        }
        let mean = store.get(self.mean).data().to_vec();
        let std = store.get(self.std).data();
        let denom: Vec<f64> = std.iter().map(|s| (s * s + self.epsilon).sqrt()).collect();
        let log_det: f64 = std
            .iter()
            .map(|s| (s * s + self.epsilon).ln())
            .sum::<f64>()
            * -0.5;
        Ok((mean, denom, log_det))
    }

    fn normalize_eval(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
    ) -> Result<(Var, Var)> {
        let (mean, denom, log_det) = self.running_stats(store)?;
        let mean_c = tape.constant_values(vec![self.dim], mean)?;
        let denom_c = tape.constant_values(vec![self.dim], denom)?;
        let centered = tape.sub(u, mean_c)?;
        let out = tape.div(centered, denom_c)?;
        let ld = tape.constant_values(vec![1], vec![log_det])?;
        Ok((out, ld))
    }

    fn denormalize(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let (mean, denom, log_det) = self.running_stats(store)?;
        let mean_c = tape.constant_values(vec![self.dim], mean)?;
        let denom_c = tape.constant_values(vec![self.dim], denom)?;
        let scaled = tape.mul(z, denom_c)?;
        let out = tape.add(scaled, mean_c)?;
        let ld = tape.constant_values(vec![1], vec![-log_det])?;
        Ok((out, ld))
    }

    /// Overwrite the running statistics, marking the state initialized.
    pub fn set_running_stats(&mut self, store: &mut ParamStore, mean: &[f64], std: &[f64]) {
        store.get_mut(self.mean).data_mut().copy_from_slice(mean);
        store.get_mut(self.std).data_mut().copy_from_slice(std);
        self.initialized = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(dim: usize, epsilon: f64) -> (ParamStore, BatchNormState) {
        let mut store = ParamStore::new();
        let bn = BatchNormState::new(&mut store, "bn", dim, 0.9, epsilon);
        (store, bn)
    }

    #[test]
    fn unit_running_stats_are_identity_with_zero_log_det() {
        let (mut store, mut bn) = fresh(3, 0.0);
        bn.set_running_stats(&mut store, &[0.0; 3], &[1.0; 3]);
        let mut tape = Tape::new();
        let u = tape
            .constant_values(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0])
            .unwrap();
        let (out, ld) = bn
            .apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(out), tape.value(u));
        assert_eq!(tape.value(ld), &[0.0]);
    }

    #[test]
    fn log_det_formula_hand_value() {
        // d = 1, sigma = 2, eps = 0: log det = -1/2 * log 4
        let (mut store, mut bn) = fresh(1, 0.0);
        bn.set_running_stats(&mut store, &[0.0], &[2.0]);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 1], vec![1.0]).unwrap();
        let (_, ld) = bn
            .apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Eval)
            .unwrap();
        let expected = -0.5 * 4.0f64.ln();
        assert!((tape.value(ld)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn eval_roundtrip_is_identity() {
        let (mut store, mut bn) = fresh(4, 1e-5);
        bn.set_running_stats(&mut store, &[0.3, -1.0, 2.0, 0.0], &[0.7, 1.3, 2.5, 0.1]);
        let mut tape = Tape::new();
        let data = vec![0.2, -0.4, 1.9, 3.3, -2.0, 0.0, 0.5, -1.1];
        let u = tape.constant_values(vec![2, 4], data.clone()).unwrap();
        let (norm, ld_n) = bn
            .apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Eval)
            .unwrap();
        let (back, ld_d) = bn
            .apply(&mut tape, &mut store, norm, Direction::Forward, Mode::Eval)
            .unwrap();
        for (a, b) in tape.value(back).iter().zip(&data) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((tape.value(ld_n)[0] + tape.value(ld_d)[0]).abs() < 1e-12);
    }

    #[test]
    fn first_batch_initializes_then_momentum_updates() {
        let (mut store, mut bn) = fresh(1, 0.0);
        let mut tape = Tape::new();
        // batch values 1, 3: mean 2, population std 1
        let u = tape.constant_values(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (out, ld) = bn
            .apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Train)
            .unwrap();
        assert!(bn.initialized);
        assert_eq!(store.get(bn.mean).data(), &[2.0]);
        assert_eq!(store.get(bn.std).data(), &[1.0]);
        assert_eq!(tape.value(out), &[-1.0, 1.0]);
        // sigma_b = 1 so the batch log det is 0
        assert!(tape.value(ld)[0].abs() < 1e-12);

        // second batch: mean 6, std 2 -> running mean 0.9*2 + 0.1*6 = 2.4
        let u2 = tape.constant_values(vec![2, 1], vec![4.0, 8.0]).unwrap();
        bn.apply(&mut tape, &mut store, u2, Direction::Inverse, Mode::Train)
            .unwrap();
        assert!((store.get(bn.mean).data()[0] - 2.4).abs() < 1e-12);
        assert!((store.get(bn.std).data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_before_training_fails() {
        let (mut store, mut bn) = fresh(2, 1e-5);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            bn.apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Eval),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let (mut store, mut bn) = fresh(2, 1e-5);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(bn
            .apply(&mut tape, &mut store, u, Direction::Inverse, Mode::Train)
            .is_err());
    }
}
