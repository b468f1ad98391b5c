//! Shared encoder E.
//!
//! Two architectures: a plain ReLU MLP over flattened inputs (the fast
//! desk-scale default) and a three-layer strided convolution stack (12, 24,
//! 48 filters scaled by a width factor, 4x4 kernels, stride 2) followed by
//! one fully connected layer onto the embedding. Convolution padding is
//! chosen per layer so each stage halves the spatial size rounding up
//! (28 -> 14 -> 7 -> 4), which pins the flattened width the stack feeds the
//! embedding layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::conv::ConvGeom;
use crate::tensor::params::{ParamId, ParamStore};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderArch {
    Mlp { hidden: Vec<usize> },
    Conv3 { width_factor: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    /// Flattened input width; for conv3 this must equal height * width.
    pub input_dim: usize,
    /// Spatial size (height, width) of one image; unused by the MLP path.
    pub image_size: Option<(usize, usize)>,
    pub embedding_dim: usize,
}

/// Pad so a 4x4 stride-2 convolution maps h to ceil(h/2).
fn halving_pad(h: usize) -> usize {
    if h % 2 == 0 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone)]
enum EncoderLayers {
    Mlp {
        layers: Vec<(ParamId, ParamId)>,
    },
    Conv3 {
        convs: Vec<(ParamId, ParamId, ConvGeom)>,
        embed: (ParamId, ParamId),
    },
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: EncoderLayers,
}

impl Encoder {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut SeededRng,
    ) -> Result<Encoder> {
        let layers = match &config.arch {
            EncoderArch::Mlp { hidden } => {
                let mut layers = Vec::new();
                let mut width = config.input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(store.add_linear(&format!("{prefix}.l{i}"), width, h, rng));
                    width = h;
                }
                layers.push(store.add_linear(
                    &format!("{prefix}.l{}", hidden.len()),
                    width,
                    config.embedding_dim,
                    rng,
                ));
                EncoderLayers::Mlp { layers }
            }
            EncoderArch::Conv3 { width_factor } => {
                let (h, w) = config.image_size.ok_or_else(|| {
                    Error::config("conv3 encoder needs an image size".to_string())
                })?;
                if h * w != config.input_dim {
                    return Err(Error::config(format!(
                        "input_dim {} does not match image size {h}x{w}",
                        config.input_dim
                    )));
                }
                let wf = *width_factor;
                let filters = [12 * wf, 24 * wf, 48 * wf];
                let mut convs = Vec::new();
                let (mut ch, mut ch_in) = (filters[0], 1usize);
                let (mut cur_h, mut cur_w) = (h, w);
                for (i, &f) in filters.iter().enumerate() {
                    ch = f;
                    let geom = ConvGeom {
                        batch: 0,
                        in_ch: ch_in,
                        h: cur_h,
                        w: cur_w,
                        kh: 4,
                        kw: 4,
                        stride: 2,
                        pad: halving_pad(cur_h),
                    };
                    let w_id = store.add(
                        format!("{prefix}.c{i}.w"),
                        init_conv_weight(ch_in, ch, 4, 4, rng),
                    );
                    let b_id = store.add(
                        format!("{prefix}.c{i}.b"),
                        init_conv_bias(ch_in, ch, 4, 4, rng),
                    );
                    convs.push((w_id, b_id, geom));
                    cur_h = geom.out_h();
                    cur_w = geom.out_w();
                    ch_in = ch;
                }
                let flat = ch * cur_h * cur_w;
                let embed = store.add_linear(
                    &format!("{prefix}.embed"),
                    flat,
                    config.embedding_dim,
                    rng,
                );
                EncoderLayers::Conv3 { convs, embed }
            }
        };
        Ok(Encoder { config, layers })
    }

    /// Embed a [batch, input_dim] tensor already on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::dimension(format!(
                "encoder expects [batch, {}], got {shape:?}",
                self.config.input_dim
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
            EncoderLayers::Mlp { layers } => {
                let mut h = x;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    let wv = fetch(tape, w);
                    let bv = fetch(tape, b);
                    let lin = tape.matmul(h, wv)?;
                    h = tape.add(lin, bv)?;
                    if i + 1 < layers.len() {
                        h = tape.relu(h)?;
                    }
                }
                Ok(h)
            }
            EncoderLayers::Conv3 { convs, embed } => {
                let mut h = x;
                for &(w, b, geom) in convs {
                    let geom = ConvGeom { batch, ..geom };
                    let cols = tape.im2col(h, geom)?;
                    let wv = fetch(tape, w);
                    let bv = fetch(tape, b);
                    let lin = tape.matmul(cols, wv)?;
                    let biased = tape.add(lin, bv)?;
                    let oc = tape.shape(biased)[1];
                    let maps = tape.cols_to_nchw(biased, batch, oc, geom.out_h(), geom.out_w())?;
                    h = tape.relu(maps)?;
                }
                let (w, b) = *embed;
                let wv = fetch(tape, w);
                let bv = fetch(tape, b);
                let lin = tape.matmul(h, wv)?;
                tape.add(lin, bv)
            }
        }
    }

    /// Eval-mode embedding of a batch held as plain tensors.
    pub fn embed(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, store, xv, false)?;
        Ok(tape.extract(out))
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }
}

fn init_conv_weight(in_ch: usize, out_ch: usize, kh: usize, kw: usize, rng: &mut SeededRng) -> Tensor {
    let fan_in = in_ch * kh * kw;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * out_ch)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Tensor::new(vec![fan_in, out_ch], data).expect("sized by construction")
}

fn init_conv_bias(in_ch: usize, out_ch: usize, kh: usize, kw: usize, rng: &mut SeededRng) -> Tensor {
    let bound = 1.0 / ((in_ch * kh * kw) as f64).sqrt();
    let data: Vec<f64> = (0..out_ch).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::from_vec(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_encoder(input: usize, d: usize) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(11);
        let config = EncoderConfig {
            arch: EncoderArch::Mlp { hidden: vec![16] },
            input_dim: input,
            image_size: None,
            embedding_dim: d,
        };
        let enc = Encoder::build(&mut store, "enc", config, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn mlp_output_shape_is_batch_by_embedding() {
        let (store, enc) = mlp_encoder(12, 5);
        let x = Tensor::new(vec![7, 12], vec![0.3; 84]).unwrap();
        let e = enc.embed(&store, &x).unwrap();
        assert_eq!(e.shape(), &[7, 5]);
    }

    #[test]
    fn embedding_is_deterministic() {
        let (store, enc) = mlp_encoder(6, 3);
        let x = Tensor::new(vec![2, 6], vec![0.1, 0.9, 0.4, 0.0, 1.0, 0.2, 0.5, 0.5, 0.5, 0.3, 0.7, 0.8]).unwrap();
        let a = enc.embed(&store, &x).unwrap();
        let b = enc.embed(&store, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn conv3_shape_follows_the_halving_chain() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(12);
        let config = EncoderConfig {
            arch: EncoderArch::Conv3 { width_factor: 1 },
            input_dim: 28 * 28,
            image_size: Some((28, 28)),
            embedding_dim: 50,
        };
        let enc = Encoder::build(&mut store, "enc", config, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 784], vec![0.5; 2 * 784]).unwrap();
        let e = enc.embed(&store, &x).unwrap();
        assert_eq!(e.shape(), &[2, 50]);
        // embedding layer consumes 48 channels x 4 x 4 = 768 features
        let embed_w = store.find("enc.embed.w").unwrap();
        assert_eq!(store.get(embed_w).shape(), &[768, 50]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::grad_check_params;
        let (store, enc) = mlp_encoder(4, 3);
        let mut rng = SeededRng::new(13);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let ids = store.trainable_with_prefix("enc.");
        let err = grad_check_params(&store, &ids, |store, tape| {
            let xv = tape.constant(&x);
            let e = enc.forward(tape, store, xv, true)?;
            let sq = tape.square(e)?;
            tape.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "encoder gradient error {err}");
    }
}
