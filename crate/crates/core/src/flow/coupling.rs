//! Affine coupling layers.
//!
//! One half of the input passes through unchanged and parameterizes an
//! affine map of the other half: (log s, t) = f(a), c_b = s~ * b + t. The
//! conditioner f never needs to be inverted, so it is a plain 3-layer ReLU
//! network; when the layer is conditioned, a one-hot class vector is
//! concatenated onto its input. The log-determinant is sum_i log s~_i.
//!
//! Consecutive layers swap which half is transformed (`swap`), so every
//! coordinate is updated even under an unlucky permutation.

use super::Direction;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};

/// How the raw conditioner output becomes a strictly positive scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// s~ = exp(raw). A zero conditioner output gives the identity map.
    RawExp,
    /// s~ = sigmoid(raw + 2), keeping the initial scale near one.
    SigmoidShift,
}

#[derive(Debug, Clone)]
pub struct CouplingParams {
    /// (weights, bias) of the three conditioner layers.
    layers: [(ParamId, ParamId); 3],
    dim: usize,
    /// Size of the pass-through part a.
    input_part: usize,
    /// Size of the transformed part b.
    transformed_part: usize,
    /// Whether a is the trailing rather than leading columns.
    swap: bool,
    pub scale_mode: ScaleMode,
    /// One-hot width consumed by the conditioner; 0 when unconditioned.
    pub cond_width: usize,
}

impl CouplingParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        swap: bool,
        scale_mode: ScaleMode,
        cond_width: usize,
        hidden_width: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::dimension(format!(
                "coupling needs at least 2 dimensions, got {dim}"
            )));
        }
        let lead = dim.div_ceil(2);
        let (input_part, transformed_part) = if swap { (dim - lead, lead) } else { (lead, dim - lead) };
        let l0 = store.add_linear(&format!("{prefix}.f0"), input_part + cond_width, hidden_width, rng);
        let l1 = store.add_linear(&format!("{prefix}.f1"), hidden_width, hidden_width, rng);
        let l2 = store.add_linear(&format!("{prefix}.f2"), hidden_width, 2 * transformed_part, rng);
        Ok(CouplingParams {
            layers: [l0, l1, l2],
            dim,
            input_part,
            transformed_part,
            swap,
            scale_mode,
            cond_width,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Split the input into (pass-through a, transformed b).
    fn split(&self, tape: &mut Tape, u: Var) -> Result<(Var, Var)> {
        let lead = self.dim.div_ceil(2);
        let head = tape.slice_cols(u, 0, lead)?;
        let tail = tape.slice_cols(u, lead, self.dim - lead)?;
        Ok(if self.swap { (tail, head) } else { (head, tail) })
    }

    /// Put the two halves back in their original column positions.
    fn join(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        if self.swap {
            tape.concat_cols(&[b, a])
        } else {
            tape.concat_cols(&[a, b])
        }
    }

    /// Run the conditioner: (log-scale raw output, translation).
    fn conditioner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: Var,
        cond: Option<Var>,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let input = match (self.cond_width, cond) {
            (0, None) => a,
            (0, Some(_)) => {
                return Err(Error::contract(
                    "condition passed to an unconditioned coupling layer".to_string(),
                ))
            }
            (w, Some(c)) => {
                let cshape = tape.shape(c);
                if cshape.len() != 2 || cshape[1] != w {
                    return Err(Error::dimension(format!(
                        "condition shape {cshape:?} does not match one-hot width {w}"
                    )));
                }
                tape.concat_cols(&[a, c])?
            }
            (w, None) => {
                return Err(Error::contract(format!(
                    "coupling layer expects a width-{w} condition"
                )))
            }
        };
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = if trainable { tape.param(store, w) } else { tape.param_detached(store, w) };
            let bv = if trainable { tape.param(store, b) } else { tape.param_detached(store, b) };
            let lin = tape.matmul(h, wv)?;
            h = tape.add(lin, bv)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        let log_s = tape.slice_cols(h, 0, self.transformed_part)?;
        let t = tape.slice_cols(h, self.transformed_part, self.transformed_part)?;
        Ok((log_s, t))
    }

    /// Positive scale and its elementwise log.
    fn scale(&self, tape: &mut Tape, raw: Var) -> Result<(Var, Var)> {
        match self.scale_mode {
            ScaleMode::RawExp => {
                let s = tape.exp(raw)?;
                Ok((s, raw))
            }
            ScaleMode::SigmoidShift => {
                let shifted = tape.add_scalar(raw, 2.0)?;
                let s = tape.sigmoid(shifted)?;
                let log_s = tape.log(s)?;
                Ok((s, log_s))
            }
        }
    }

    /// Apply the coupling map. In the normalizing direction the transformed
    /// half becomes s~ * b + t with log-det sum log s~; the sampling
    /// direction inverts it with the log-det negated. Returns the output and
    /// the per-row log-det [batch].
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        cond: Option<Var>,
        direction: Direction,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(u);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dimension(format!(
                "coupling over {} dims got input shape {shape:?}",
                self.dim
            )));
        }
        let (a, b) = self.split(tape, u)?;
        let (raw, t) = self.conditioner(tape, store, a, cond, trainable)?;
        let (s, log_s) = self.scale(tape, raw)?;
        let (out_b, log_det) = match direction {
            Direction::Inverse => {
                let scaled = tape.mul(s, b)?;
                let c_b = tape.add(scaled, t)?;
                (c_b, tape.sum_rows(log_s)?)
            }
            Direction::Forward => {
                let shifted = tape.sub(b, t)?;
                let orig = tape.div(shifted, s)?;
                let ld = tape.sum_rows(log_s)?;
                (orig, tape.neg(ld)?)
            }
        };
        let out = self.join(tape, a, out_b)?;
        Ok((out, log_det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn zeroed_coupling(
        dim: usize,
        scale_mode: ScaleMode,
        swap: bool,
    ) -> (ParamStore, CouplingParams) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(5);
        let cp = CouplingParams::new(&mut store, "cp", dim, swap, scale_mode, 0, dim, &mut rng).unwrap();
        for id in cp.param_ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        (store, cp)
    }

    #[test]
    fn zero_conditioner_with_raw_exp_is_identity() {
        let (store, cp) = zeroed_coupling(4, ScaleMode::RawExp, false);
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5, 0.0, 2.0, -1.0, 4.0];
        let u = tape.constant_values(vec![2, 4], data.clone()).unwrap();
        let (out, ld) = cp
            .apply(&mut tape, &store, u, None, Direction::Inverse, false)
            .unwrap();
        assert_eq!(tape.value(out), &data[..]);
        assert_eq!(tape.value(ld), &[0.0, 0.0]);
    }

    #[test]
    fn hand_example_scale_three_shift_half() {
        // d=2, a=[1], b=[2], log s=[ln 3], t=[0.5] -> c_b = 6.5, log det = ln 3
        let (mut store, cp) = zeroed_coupling(2, ScaleMode::RawExp, false);
        // conditioner output is the last layer's bias when everything else is 0
        let bias = store.find("cp.f2.b").unwrap();
        store
            .get_mut(bias)
            .data_mut()
            .copy_from_slice(&[3.0f64.ln(), 0.5]);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (out, ld) = cp
            .apply(&mut tape, &store, u, None, Direction::Inverse, false)
            .unwrap();
        assert_eq!(tape.value(out)[0], 1.0);
        assert!((tape.value(out)[1] - 6.5).abs() < 1e-12);
        assert!((tape.value(ld)[0] - 3.0f64.ln()).abs() < 1e-12);

        let (back, ld_back) = cp
            .apply(&mut tape, &store, out, None, Direction::Forward, false)
            .unwrap();
        assert!((tape.value(back)[1] - 2.0).abs() < 1e-12);
        assert!((tape.value(ld_back)[0] + 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_parameters_roundtrip_both_orientations() {
        let mut rng = SeededRng::new(97);
        for (dim, swap) in [(2, false), (5, false), (5, true), (8, true)] {
            let mut store = ParamStore::new();
            let cp = CouplingParams::new(
                &mut store,
                "cp",
                dim,
                swap,
                ScaleMode::SigmoidShift,
                0,
                dim,
                &mut rng,
            )
            .unwrap();
            let data: Vec<f64> = (0..3 * dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            let t = Tensor::new(vec![3, dim], data.clone()).unwrap();
            let mut tape = Tape::new();
            let u = tape.constant(&t);
            let (fwd, ld_f) = cp
                .apply(&mut tape, &store, u, None, Direction::Inverse, false)
                .unwrap();
            let (back, ld_b) = cp
                .apply(&mut tape, &store, fwd, None, Direction::Forward, false)
                .unwrap();
            for (a, b) in tape.value(back).iter().zip(&data) {
                assert!((a - b).abs() < 1e-10, "dim {dim} swap {swap}");
            }
            for (f, b) in tape.value(ld_f).iter().zip(tape.value(ld_b)) {
                assert!((f + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn condition_contract_is_enforced() {
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        let uncond =
            CouplingParams::new(&mut store, "u", 4, false, ScaleMode::RawExp, 0, 4, &mut rng).unwrap();
        let cond =
            CouplingParams::new(&mut store, "c", 4, false, ScaleMode::RawExp, 3, 4, &mut rng).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 4], vec![0.0; 4]).unwrap();
        let onehot = tape.constant_values(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            uncond.apply(&mut tape, &store, u, Some(onehot), Direction::Inverse, false),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cond.apply(&mut tape, &store, u, None, Direction::Inverse, false),
            Err(Error::Contract(_))
        ));
        assert!(cond
            .apply(&mut tape, &store, u, Some(onehot), Direction::Inverse, false)
            .is_ok());
    }

    #[test]
    fn conditioning_changes_the_output() {
        let mut rng = SeededRng::new(8);
        let mut store = ParamStore::new();
        let cp =
            CouplingParams::new(&mut store, "c", 4, false, ScaleMode::SigmoidShift, 2, 4, &mut rng)
                .unwrap();
        let mut tape = Tape::new();
        let u = tape
            .constant_values(vec![1, 4], vec![0.5, -0.5, 1.0, -1.0])
            .unwrap();
        let c0 = tape.constant_values(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let c1 = tape.constant_values(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let (o0, _) = cp
            .apply(&mut tape, &store, u, Some(c0), Direction::Inverse, false)
            .unwrap();
        let (o1, _) = cp
            .apply(&mut tape, &store, u, Some(c1), Direction::Inverse, false)
            .unwrap();
        assert_ne!(tape.value(o0), tape.value(o1));
    }
}
