//! Fixed random permutation layers.
//!
//! A permutation reorders coordinates between coupling blocks so that every
//! dimension eventually lands in the transformed half. It is drawn once at
//! construction, never trained, and contributes exactly zero to the
//! log-determinant, so `apply` emits no log-det term.

use super::Direction;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct PermutationSpec {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutationSpec {
    pub fn random(dim: usize, rng: &mut SeededRng) -> Self {
        Self::from_perm(rng.permutation(dim)).expect("a shuffled range is a bijection")
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_perm((0..dim).collect()).expect("identity is a bijection")
    }

    pub fn from_perm(perm: Vec<usize>) -> Result<Self> {
        let dim = perm.len();
        let mut inverse = vec![usize::MAX; dim];
        for (i, &p) in perm.iter().enumerate() {
            if p >= dim || inverse[p] != usize::MAX {
                return Err(Error::contract(format!(
                    "{perm:?} is not a permutation of 0..{dim}"
                )));
            }
            inverse[p] = i;
        }
        Ok(PermutationSpec { perm, inverse })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Reorder columns; the two directions are exact inverses of each other.
    pub fn apply(&self, tape: &mut Tape, u: Var, direction: Direction) -> Result<Var> {
        let table = match direction {
            Direction::Inverse => &self.perm,
            Direction::Forward => &self.inverse,
        };
        tape.permute_cols(u, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_permutation_is_a_noop() {
        let spec = PermutationSpec::identity(3);
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = spec.apply(&mut tape, u, Direction::Inverse).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_example_and_roundtrip() {
        // pi = (2, 0, 1) maps [a, b, c] to [c, a, b]
        let spec = PermutationSpec::from_perm(vec![2, 0, 1]).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant_values(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let fwd = spec.apply(&mut tape, u, Direction::Inverse).unwrap();
        assert_eq!(tape.value(fwd), &[30.0, 10.0, 20.0]);
        let back = spec.apply(&mut tape, fwd, Direction::Forward).unwrap();
        assert_eq!(tape.value(back), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn random_permutations_roundtrip() {
        let mut rng = SeededRng::new(6);
        for dim in [2usize, 5, 17] {
            let spec = PermutationSpec::random(dim, &mut rng);
            let data: Vec<f64> = (0..dim * 2).map(|i| i as f64).collect();
            let t = Tensor::new(vec![2, dim], data.clone()).unwrap();
            let mut tape = Tape::new();
            let u = tape.constant(&t);
            let fwd = spec.apply(&mut tape, u, Direction::Inverse).unwrap();
            let back = spec.apply(&mut tape, fwd, Direction::Forward).unwrap();
            assert_eq!(tape.value(back), &data[..]);
        }
    }

    #[test]
    fn malformed_permutations_are_rejected() {
        assert!(PermutationSpec::from_perm(vec![0, 0, 1]).is_err());
        assert!(PermutationSpec::from_perm(vec![0, 3, 1]).is_err());
    }
}
