//! Decoder D, approximately inverting the encoder.
//!
//! The MLP decoder mirrors the MLP encoder's widths in reverse. The conv
//! decoder seeds a 1x1 map from the embedding and alternates nearest
//! neighbor upsampling with stride-1 3x3 convolutions through the encoder's
//! spatial sizes in reverse. Both end in a sigmoid, matching inputs scaled
//! to [0, 1].

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::conv::ConvGeom;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::encoder::{EncoderArch, EncoderConfig};

#[derive(Debug, Clone)]
enum DecoderLayers {
    Mlp {
        layers: Vec<(ParamId, ParamId)>,
    },
    Conv {
        seed: (ParamId, ParamId),
        seed_ch: usize,
        /// (weights, bias, target spatial size, in_ch, out_ch) per stage.
        stages: Vec<(ParamId, ParamId, usize, usize, usize)>,
    },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding_dim: usize,
    pub output_dim: usize,
    layers: DecoderLayers,
}

impl Decoder {
    /// Mirror the given encoder configuration.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        enc: &EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Decoder> {
        let layers = match &enc.arch {
            EncoderArch::Mlp { hidden } => {
                let mut widths: Vec<usize> = vec![enc.embedding_dim];
                widths.extend(hidden.iter().rev());
                widths.push(enc.input_dim);
                let mut layers = Vec::new();
                for (i, pair) in widths.windows(2).enumerate() {
                    layers.push(store.add_linear(&format!("{prefix}.l{i}"), pair[0], pair[1], rng));
                }
                DecoderLayers::Mlp { layers }
            }
            EncoderArch::Conv3 { width_factor } => {
                let (h, w) = enc.image_size.ok_or_else(|| {
                    Error::config("conv decoder needs an image size".to_string())
                })?;
                if h != w {
                    return Err(Error::config(
                        "conv decoder assumes square images".to_string(),
                    ));
                }
                let wf = *width_factor;
                // encoder spatial chain in reverse, skipping its smallest size
                let s1 = h.div_ceil(2);
                let s2 = s1.div_ceil(2);
                let filters = [48 * wf, 24 * wf, 12 * wf];
                let seed = store.add_linear(&format!("{prefix}.seed"), enc.embedding_dim, filters[0], rng);
                let plan = [(s2, filters[0], filters[1]), (s1, filters[1], filters[2]), (h, filters[2], 1)];
                let mut stages = Vec::new();
                for (i, &(target, in_ch, out_ch)) in plan.iter().enumerate() {
                    let fan_in = in_ch * 9;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let w_id = store.add(
                        format!("{prefix}.c{i}.w"),
                        Tensor::new(
                            vec![fan_in, out_ch],
                            (0..fan_in * out_ch).map(|_| rng.uniform_range(-bound, bound)).collect(),
                        )?,
                    );
                    let b_id = store.add(
                        format!("{prefix}.c{i}.b"),
                        Tensor::from_vec((0..out_ch).map(|_| rng.uniform_range(-bound, bound)).collect()),
                    );
                    stages.push((w_id, b_id, target, in_ch, out_ch));
                }
                DecoderLayers::Conv { seed, seed_ch: filters[0], stages }
            }
        };
        Ok(Decoder {
            embedding_dim: enc.embedding_dim,
            output_dim: enc.input_dim,
            layers,
        })
    }

    /// Reconstruct [batch, output_dim] from embeddings on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.embedding_dim {
            return Err(Error::dimension(format!(
                "decoder expects [batch, {}], got {shape:?}",
                self.embedding_dim
            )));
        }
        let batch = shape[0];
        let fetch = |tape: &mut Tape, id: ParamId| {
            if trainable {
                tape.param(store, id)
            } else {
                tape.param_detached(store, id)
            }
        };
        match &self.layers {
            DecoderLayers::Mlp { layers } => {
                let mut h = z;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    let wv = fetch(tape, w);
                    let bv = fetch(tape, b);
                    let lin = tape.matmul(h, wv)?;
                    h = tape.add(lin, bv)?;
                    h = if i + 1 < layers.len() {
                        tape.relu(h)?
                    } else {
                        tape.sigmoid(h)?
                    };
                }
                Ok(h)
            }
            DecoderLayers::Conv { seed, seed_ch, stages } => {
                let (w, b) = *seed;
                let wv = fetch(tape, w);
                let bv = fetch(tape, b);
                let lin = tape.matmul(z, wv)?;
                let mut h = tape.add(lin, bv)?;
                h = tape.relu(h)?;
                let mut cur = 1usize;
                let mut ch = *seed_ch;
                for (i, &(w, b, target, in_ch, out_ch)) in stages.iter().enumerate() {
                    debug_assert_eq!(ch, in_ch);
                    h = tape.upsample_nearest(h, ch, cur, cur, target, target)?;
                    let geom = ConvGeom {
                        batch,
                        in_ch,
                        h: target,
                        w: target,
                        kh: 3,
                        kw: 3,
                        stride: 1,
                        pad: 1,
                    };
                    let cols = tape.im2col(h, geom)?;
                    let wv = fetch(tape, w);
                    let bv = fetch(tape, b);
                    let lin = tape.matmul(cols, wv)?;
                    let biased = tape.add(lin, bv)?;
                    let maps = tape.cols_to_nchw(biased, batch, out_ch, target, target)?;
                    h = if i + 1 < stages.len() {
                        tape.relu(maps)?
                    } else {
                        tape.sigmoid(maps)?
                    };
                    cur = target;
                    ch = out_ch;
                }
                Ok(h)
            }
        }
    }

    /// Eval-mode reconstruction of embeddings held as plain tensors.
    pub fn decode(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = self.forward(&mut tape, store, zv, false)?;
        Ok(tape.extract(out))
    }
}
