use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::math::Matrix;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
    /// Whether decoupled weight decay applies to this tensor.
    pub decay: bool,
}

/// Indices of one transformer layer's tensors in [`EncoderWeights::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

/// Indices of one off-ramp's weight (`d × C`) and bias (`1 × C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RampIds {
    pub weight: usize,
    pub bias: usize,
}

/// All learned weights of the encoder: embeddings, `L` layers and `L`
/// independent off-ramps.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
    token_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    ramps: Vec<RampIds>,
}

struct Layout {
    specs: Vec<(String, usize, usize, bool)>,
    token_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    ramps: Vec<RampIds>,
}

fn layout(config: &ModelConfig) -> Layout {
    let d = config.hidden_dim;
    let mut specs = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, decay: bool| {
        specs.push((name, rows, cols, decay));
        specs.len() - 1
    };
    let token_emb = push("embeddings.token".into(), config.vocab_size, d, false);
    let pos_emb = push("embeddings.position".into(), config.max_len, d, false);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerIds {
            ln1_gain: push(p("ln1.gain"), 1, d, false),
            ln1_bias: push(p("ln1.bias"), 1, d, false),
            w_q: push(p("attn.query"), d, d, true),
            w_k: push(p("attn.key"), d, d, true),
            w_v: push(p("attn.value"), d, d, true),
            w_o: push(p("attn.output"), d, d, true),
            ln2_gain: push(p("ln2.gain"), 1, d, false),
            ln2_bias: push(p("ln2.bias"), 1, d, false),
            ffn_w1: push(p("ffn.w1"), d, config.ffn_dim, true),
            ffn_b1: push(p("ffn.b1"), 1, config.ffn_dim, false),
            ffn_w2: push(p("ffn.w2"), config.ffn_dim, d, true),
            ffn_b2: push(p("ffn.b2"), 1, d, false),
        });
    }
    let mut ramps = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        ramps.push(RampIds {
            weight: push(format!("ramps.{l}.weight"), d, config.num_labels, true),
            bias: push(format!("ramps.{l}.bias"), 1, config.num_labels, false),
        });
    }
    Layout {
        specs,
        token_emb,
        pos_emb,
        layers,
        ramps,
    }
}

impl EncoderWeights {
    /// Random initialization: projections `N(0, 1/fan_in)`, embeddings
    /// `N(0, 0.5²)`, layer-norm gains one, biases zero.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, |name, rows, cols| {
            if name.ends_with("gain") {
                Matrix::filled(rows, cols, 1.0)
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Matrix::zeros(rows, cols)
            } else {
                let std = if name.starts_with("embeddings") {
                    0.5
                } else {
                    1.0 / (rows as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
            }
        })
    }

    /// Builds weights from a per-tensor constructor `(name, rows, cols)`.
    pub fn build(
        config: &ModelConfig,
        mut make: impl FnMut(&str, usize, usize) -> Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let lay = layout(config);
        let tensors = lay
            .specs
            .iter()
            .map(|(name, rows, cols, decay)| NamedTensor {
                name: name.clone(),
                value: make(name, *rows, *cols),
                decay: *decay,
            })
            .collect();
        let w = EncoderWeights {
            config: config.clone(),
            tensors,
            token_emb: lay.token_emb,
            pos_emb: lay.pos_emb,
            layers: lay.layers,
            ramps: lay.ramps,
        };
        w.check_shapes()?;
        Ok(w)
    }

    /// Reassembles weights from named tensors, verifying names and shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let lay = layout(config);
        if tensors.len() != lay.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                lay.specs.len(),
                tensors.len()
            )));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, value), (want, rows, cols, decay)) in tensors.into_iter().zip(&lay.specs) {
            if &name != want {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
            }
            if value.shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    (rows, cols)
                )));
            }
            out.push(NamedTensor {
                name,
                value,
                decay: *decay,
            });
        }
        Ok(EncoderWeights {
            config: config.clone(),
            tensors: out,
            token_emb: lay.token_emb,
            pos_emb: lay.pos_emb,
            layers: lay.layers,
            ramps: lay.ramps,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let lay = layout(&self.config);
        for (t, (name, rows, cols, _)) in self.tensors.iter().zip(&lay.specs) {
            if t.value.shape() != (*rows, *cols) {
                return Err(Error::shape(
                    "EncoderWeights",
                    format!("{name}: {:?} vs {:?}", t.value.shape(), (rows, cols)),
                ));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: usize) -> &Matrix {
        &self.tensors[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn token_embedding_id(&self) -> usize {
        self.token_emb
    }

    pub fn position_embedding_id(&self) -> usize {
        self.pos_emb
    }

    /// Tensor ids of layer `l` (0-based).
    pub fn layer(&self, l: usize) -> LayerIds {
        self.layers[l]
    }

    /// Tensor ids of the off-ramp after layer `l` (0-based).
    pub fn ramp(&self, l: usize) -> RampIds {
        self.ramps[l]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_ramp_per_layer() {
        let cfg = ModelConfig::toy(20, 5);
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ramps = w.tensors().iter().filter(|t| t.name.starts_with("ramps.")).count();
        assert_eq!(ramps, 2 * cfg.num_layers);
        assert_eq!(w.tensor(w.ramp(5).weight).shape(), (64, 5));
        assert_eq!(w.tensor(w.layer(2).ffn_w1).shape(), (64, 256));
    }

    #[test]
    fn from_tensors_rejects_wrong_names() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_dim: 4,
            num_heads: 2,
            ffn_dim: 8,
            num_labels: 3,
            vocab_size: 5,
            max_len: 6,
        };
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut named: Vec<_> = w
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect();
        assert_eq!(EncoderWeights::from_tensors(&cfg, named.clone()).unwrap(), w);
        named[3].0 = "bogus".into();
        assert!(EncoderWeights::from_tensors(&cfg, named).is_err());
    }
}
