//! Named parameter storage.
//!
//! All persistent float state of an experiment — trainable weights and
//! non-trainable buffers such as running statistics — lives in one
//! [`ParamStore`]. Models hold [`ParamId`]s into it. Cloning the store is how
//! snapshots are taken.

use super::{bits_checksum, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Handle to one entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a trainable parameter. Names must be unique; they key the
    /// checkpoint format.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        tensor.requires_grad = true;
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    /// Register a non-trainable buffer (running statistics and the like).
    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        tensor.requires_grad = false;
        tensor.grad = None;
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    /// Linear layer weights [fan_in, fan_out] initialized uniform in
    /// ±1/sqrt(fan_in), plus a bias row initialized the same way.
    pub fn add_linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        let w_id = self.add(
            format!("{prefix}.w"),
            Tensor::new(vec![fan_in, fan_out], w).expect("sized by construction"),
        );
        let b_id = self.add(
            format!("{prefix}.b"),
            Tensor::new(vec![fan_out], b).expect("sized by construction"),
        );
        (w_id, b_id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids of entries whose name starts with `prefix`, in registration order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Trainable ids under a prefix — the set an optimizer should step on.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix) && p.tensor.requires_grad)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.params[id.0].tensor.grad = None;
        }
    }

    /// Total number of stored floats under a prefix (weights and buffers).
    pub fn float_count(&self, prefix: &str) -> u64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len() as u64)
            .sum()
    }

    /// Order-independent checksum over the value bits of the given entries.
    pub fn checksum(&self, ids: &[ParamId]) -> u64 {
        let mut acc = 0u64;
        for &id in ids {
            acc ^= bits_checksum(self.params[id.0].tensor.data())
                .wrapping_mul(0x9e3779b97f4a7c15 ^ id.0 as u64 | 1);
        }
        acc
    }

    /// Copy values from another store entry-by-entry, matched by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            let id = self.find(&p.name).ok_or_else(|| {
                Error::contract(format!("no parameter named {:?} to load into", p.name))
            })?;
            let dst = self.get_mut(id);
            if dst.shape() != p.tensor.shape() {
                return Err(Error::dimension(format!(
                    "shape mismatch loading {:?}: {:?} vs {:?}",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                )));
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_queries_and_checksums() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        store.add_linear("enc.l0", 4, 3, &mut rng);
        store.add_linear("dec.l0", 3, 4, &mut rng);
        store.add_buffer("enc.stats", Tensor::zeros(vec![3]));

        assert_eq!(store.ids_with_prefix("enc.").len(), 3);
        assert_eq!(store.trainable_with_prefix("enc.").len(), 2);
        assert_eq!(store.float_count("enc."), 12 + 3 + 3);

        let enc = store.ids_with_prefix("enc.");
        let before = store.checksum(&enc);
        let dec = store.ids_with_prefix("dec.");
        let w = dec[0];
        store.get_mut(w).data_mut()[0] += 1.0;
        assert_eq!(store.checksum(&enc), before, "enc untouched");
        let after_dec = store.checksum(&dec);
        store.get_mut(w).data_mut()[0] -= 1.0;
        assert_ne!(store.checksum(&dec), after_dec);
    }

    #[test]
    fn same_seed_same_init() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.add_linear("l", 10, 10, &mut SeededRng::new(42));
        b.add_linear("l", 10, 10, &mut SeededRng::new(42));
        let ia = a.find("l.w").unwrap();
        let ib = b.find("l.w").unwrap();
        assert_eq!(a.get(ia).data(), b.get(ib).data());
    }
}
