//! Conditional multi-scale normalizing flow over embedding space.
//!
//! Density estimation runs a sample through the normalizing (inverse)
//! direction — batch norm, coupling, permutation per block — accumulating
//! every block's log-determinant, and scores the resulting latent under an
//! isotropic Gaussian. Sampling draws from the Gaussian and runs the stack
//! the other way. After each non-final level the leading half of the
//! coordinates is factored out into the latent, so deeper levels process
//! progressively fewer dimensions.
//!
//! Class conditioning enters as a one-hot vector (width = the maximum number
//! of classes the experiment will ever see) concatenated onto the
//! conditioner input of the first coupling layer of each level.

pub mod batchnorm;
pub mod coupling;
pub mod permutation;
pub mod prior;

pub use batchnorm::BatchNormState;
pub use coupling::{CouplingParams, ScaleMode};
pub use permutation::PermutationSpec;
pub use prior::GaussianPrior;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which way data moves through the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Latent to data: sampling.
    Forward,
    /// Data to latent: normalization / density estimation.
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, trainable parameters.
    Train,
    /// Running statistics, parameters treated as constants.
    Eval,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    /// Data dimension d.
    pub dim: usize,
    /// Multi-scale levels; clamped so every level keeps at least 2 dims.
    pub levels: usize,
    pub blocks_per_level: usize,
    /// One-hot width reserved for class conditioning; 0 = unconditional.
    pub cond_classes: usize,
    /// Condition the first coupling layer of every level, not just level 0.
    pub condition_each_level: bool,
    pub scale_mode: ScaleMode,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Conditioner hidden width; defaults to the level dimension. Low-d
    /// runs need this: a 2-wide ReLU trunk is usually dead on arrival.
    pub hidden_width: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 2,
            levels: 2,
            blocks_per_level: 10,
            cond_classes: 0,
            condition_each_level: true,
            scale_mode: ScaleMode::SigmoidShift,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            hidden_width: None,
        }
    }
}

#[derive(Debug, Clone)]
struct FlowBlock {
    bn: BatchNormState,
    coupling: CouplingParams,
    perm: PermutationSpec,
}

#[derive(Debug, Clone)]
struct FlowLevel {
    /// Dimension this level operates on.
    dim: usize,
    /// Leading dims factored out to the latent after this level
    /// (== dim for the final level).
    factored: usize,
    blocks: Vec<FlowBlock>,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    levels: Vec<FlowLevel>,
    prior: GaussianPrior,
    prefix: String,
}

impl FlowModel {
    /// Construct a fresh flow, registering its parameters under `prefix`.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        config: FlowConfig,
        rng: &mut SeededRng,
    ) -> Result<FlowModel> {
        if config.dim < 2 {
            return Err(Error::dimension(format!(
                "flow dimension must be >= 2, got {}",
                config.dim
            )));
        }
        if config.levels == 0 || config.blocks_per_level == 0 {
            return Err(Error::config(
                "flow needs at least one level and one block per level".to_string(),
            ));
        }
        let mut levels = Vec::new();
        let mut dim = config.dim;
        for li in 0..config.levels {
            let is_final = li + 1 == config.levels || dim / 2 < 2;
            let mut blocks = Vec::with_capacity(config.blocks_per_level);
            for bi in 0..config.blocks_per_level {
                let p = format!("{prefix}.l{li}.b{bi}");
                let conditioned = config.cond_classes > 0
                    && bi == 0
                    && (config.condition_each_level || li == 0);
                let cond_width = if conditioned { config.cond_classes } else { 0 };
                let bn = BatchNormState::new(
                    store,
                    &format!("{p}.bn"),
                    dim,
                    config.bn_momentum,
                    config.bn_epsilon,
                );
                let coupling = CouplingParams::new(
                    store,
                    &format!("{p}.cp"),
                    dim,
                    bi % 2 == 1,
                    config.scale_mode,
                    cond_width,
                    config.hidden_width.unwrap_or(dim),
                    rng,
                )?;
                let perm = PermutationSpec::random(dim, rng);
                blocks.push(FlowBlock { bn, coupling, perm });
            }
            let factored = if is_final { dim } else { dim.div_ceil(2) };
            levels.push(FlowLevel { dim, factored, blocks });
            if is_final {
                break;
            }
            dim -= factored;
        }
        Ok(FlowModel {
            prior: GaussianPrior::new(config.dim),
            config,
            levels,
            prefix: prefix.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// All trainable coupling parameters.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels
            .iter()
            .flat_map(|l| l.blocks.iter().flat_map(|b| b.coupling.param_ids()))
            .collect()
    }

    /// True once every batch-norm layer has seen a training batch.
    pub fn is_initialized(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.blocks.iter().all(|b| b.bn.initialized))
    }

    fn one_hot(&self, tape: &mut Tape, cond: &[usize], batch: usize) -> Result<Option<Var>> {
        if self.config.cond_classes == 0 {
            return Ok(None);
        }
        if cond.len() != batch {
            return Err(Error::dimension(format!(
                "{} condition ids for a batch of {batch}",
                cond.len()
            )));
        }
        let width = self.config.cond_classes;
        if let Some(&bad) = cond.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "condition id {bad} out of range for {width} classes"
            )));
        }
        let mut data = vec![0.0; batch * width];
        for (i, &c) in cond.iter().enumerate() {
            data[i * width + c] = 1.0;
        }
        Ok(Some(tape.constant_values(vec![batch, width], data)?))
    }

    fn check_cond(&self, cond: Option<&[usize]>, batch: usize, tape: &mut Tape) -> Result<Option<Var>> {
        match (self.config.cond_classes, cond) {
            (0, None) => Ok(None),
            (0, Some(_)) => Err(Error::contract(
                "condition ids passed to an unconditional flow".to_string(),
            )),
            (_, None) => Err(Error::contract(
                "a conditional flow needs condition ids".to_string(),
            )),
            (_, Some(ids)) => self.one_hot(tape, ids, batch),
        }
    }

    /// Normalizing pass: data -> latent with the total log-determinant of
    /// the inverse map, both per row.
    pub fn normalize(
        &mut self,
        tape: &mut Tape,
        store: &mut ParamStore,
        z: Var,
        cond: Option<&[usize]>,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.config.dim {
            return Err(Error::dimension(format!(
                "flow over {} dims got input {shape:?}",
                self.config.dim
            )));
        }
        let batch = shape[0];
        let onehot = self.check_cond(cond, batch, tape)?;
        let trainable = mode == Mode::Train;

        let mut h = z;
        let mut factored: Vec<Var> = Vec::with_capacity(self.levels.len());
        let zero = tape.constant_values(vec![batch], vec![0.0; batch])?;
        let mut log_det = zero;
        let level_count = self.levels.len();
        for (li, level) in self.levels.iter_mut().enumerate() {
            for block in level.blocks.iter_mut() {
                let (normed, ld_bn) = block.bn.apply(tape, store, h, Direction::Inverse, mode)?;
                let cond_var = if block.coupling.cond_width > 0 { onehot } else { None };
                let (coupled, ld_cp) =
                    block
                        .coupling
                        .apply(tape, store, normed, cond_var, Direction::Inverse, trainable)?;
                h = block.perm.apply(tape, coupled, Direction::Inverse)?;
                log_det = tape.add(log_det, ld_bn)?;
                log_det = tape.add(log_det, ld_cp)?;
            }
            if li + 1 == level_count {
                factored.push(h);
            } else {
                factored.push(tape.slice_cols(h, 0, level.factored)?);
                h = tape.slice_cols(h, level.factored, level.dim - level.factored)?;
            }
        }
        let u = if factored.len() == 1 {
            factored[0]
        } else {
            tape.concat_cols(&factored)?
        };
        Ok((u, log_det))
    }

    /// Sampling pass: latent -> data. Batch norm must be initialized; runs
    /// in eval mode with parameters treated as constants.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        u: Var,
        cond: Option<&[usize]>,
    ) -> Result<Var> {
        let shape = tape.shape(u);
        if shape.len() != 2 || shape[1] != self.config.dim {
            return Err(Error::dimension(format!(
                "flow over {} dims got latent {shape:?}",
                self.config.dim
            )));
        }
        if !self.is_initialized() {
            return Err(Error::contract(
                "sampling before batch norm saw any training batch".to_string(),
            ));
        }
        let batch = shape[0];
        let onehot = self.check_cond(cond, batch, tape)?;

        // slice the latent into the per-level factored chunks
        let mut chunks = Vec::with_capacity(self.levels.len());
        let mut offset = 0;
        for level in &self.levels {
            chunks.push(tape.slice_cols(u, offset, level.factored)?);
            offset += level.factored;
        }

        let mut h: Option<Var> = None;
        for (li, level) in self.levels.iter().enumerate().rev() {
            let mut x = match h {
                None => chunks[li],
                Some(rest) => tape.concat_cols(&[chunks[li], rest])?,
            };
            // bn state is never updated in eval mode; the clone keeps the
            // signature of apply() uniform across directions
            for block in level.blocks.iter().rev() {
                x = block.perm.apply(tape, x, Direction::Forward)?;
                let cond_var = if block.coupling.cond_width > 0 { onehot } else { None };
                let (back, _) =
                    block
                        .coupling
                        .apply(tape, store, x, cond_var, Direction::Forward, false)?;
                let (denormed, _) =
                    block
                        .bn
                        .clone()
                        .apply(tape, store, back, Direction::Forward, Mode::Eval)?;
                x = denormed;
            }
            h = Some(x);
        }
        Ok(h.expect("at least one level"))
    }

    /// Per-row log density under the change-of-variables formula.
    pub fn log_prob(
        &mut self,
        tape: &mut Tape,
        store: &mut ParamStore,
        z: Var,
        cond: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Var> {
        let (u, log_det) = self.normalize(tape, store, z, cond, mode)?;
        let prior_lp = self.prior.log_prob(tape, u)?;
        tape.add(prior_lp, log_det)
    }

    /// Mean negative log-likelihood of a batch; differentiable w.r.t. all
    /// coupling parameters in train mode.
    pub fn nll_loss(
        &mut self,
        tape: &mut Tape,
        store: &mut ParamStore,
        z: Var,
        cond: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Var> {
        let lp = self.log_prob(tape, store, z, cond, mode)?;
        let neg = tape.neg(lp)?;
        tape.mean(neg)
    }

    /// Draw `n` embeddings for one class. Deterministic given the rng state.
    pub fn sample(
        &self,
        store: &mut ParamStore,
        class: usize,
        n: usize,
        rng: &mut SeededRng,
    ) -> Result<Tensor> {
        self.sample_batch(store, &vec![class; n], rng)
    }

    /// Draw one embedding per condition id.
    pub fn sample_batch(
        &self,
        store: &mut ParamStore,
        cond: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Tensor> {
        let n = cond.len();
        if n == 0 {
            return Tensor::new(vec![0], vec![]).map_err(Into::into);
        }
        let latent = self.prior.sample(n, rng);
        let mut tape = Tape::new();
        let u = tape.constant(&latent);
        let cond_arg = if self.config.cond_classes > 0 { Some(cond) } else { None };
        let z = self.generate(&mut tape, store, u, cond_arg)?;
        Ok(tape.extract(z))
    }

    /// Fixed permutations and batch-norm flags for the checkpoint manifest.
    pub fn int_arrays(&self) -> BTreeMap<String, Vec<i64>> {
        let mut map = BTreeMap::new();
        let mut flags = Vec::new();
        for (li, level) in self.levels.iter().enumerate() {
            for (bi, block) in level.blocks.iter().enumerate() {
                map.insert(
                    format!("{}.l{li}.b{bi}.perm", self.prefix),
                    block.perm.perm().iter().map(|&p| p as i64).collect(),
                );
                flags.push(block.bn.initialized as i64);
            }
        }
        map.insert(format!("{}.bn_initialized", self.prefix), flags);
        map
    }

    /// Restore permutations and batch-norm flags saved by [`int_arrays`].
    pub fn restore_structure(&mut self, arrays: &BTreeMap<String, Vec<i64>>) -> Result<()> {
        let flags = arrays
            .get(&format!("{}.bn_initialized", self.prefix))
            .ok_or_else(|| Error::contract("checkpoint lacks batch-norm flags".to_string()))?
            .clone();
        let mut flag_iter = flags.iter();
        for (li, level) in self.levels.iter_mut().enumerate() {
            for (bi, block) in level.blocks.iter_mut().enumerate() {
                let key = format!("{}.l{li}.b{bi}.perm", self.prefix);
                let perm = arrays
                    .get(&key)
                    .ok_or_else(|| Error::contract(format!("checkpoint lacks {key}")))?;
                block.perm =
                    PermutationSpec::from_perm(perm.iter().map(|&p| p as usize).collect())?;
                block.bn.initialized = *flag_iter
                    .next()
                    .ok_or_else(|| Error::contract("too few batch-norm flags".to_string()))?
                    != 0;
            }
        }
        Ok(())
    }
}
