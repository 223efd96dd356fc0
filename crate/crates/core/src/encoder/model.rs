//! Pre-norm transformer layers with per-layer linear off-ramps.
//!
//! Every forward path in the crate (full, early-exit inference and
//! training) goes through [`layer_step`] and [`ramp_logits`], so the
//! arithmetic of a layer does not depend on which engine runs it.

use serde::{Deserialize, Serialize};

use super::config::LAYER_NORM_EPS;
use super::weights::EncoderWeights;
use crate::error::{Error, Result};
use crate::math::{Matrix, Tape, Var};

/// Per-layer record of one forward pass. Layer `l` (1-based) lives at
/// index `l - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrace {
    /// `H^(0)`: token plus position embeddings.
    pub embeddings: Matrix,
    /// `H^(l)`, `N × d`. Rows of exited tokens are copies of their exit-layer state.
    pub hidden: Vec<Matrix>,
    /// `P^(l)`, `N × C`. Rows of exited tokens hold their exit-layer distribution.
    pub probs: Vec<Matrix>,
    /// `u^(l)` per token, frozen after exit.
    pub uncertainty: Vec<Vec<f64>>,
    /// Whether each token was computed at layer `l`.
    pub active: Vec<Vec<bool>>,
    /// 1-based exit layer of each token.
    pub exit_layer: Vec<usize>,
}

impl EncoderTrace {
    pub fn len(&self) -> usize {
        self.exit_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exit_layer.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    /// Predicted label of each token, read from the off-ramp at its exit layer.
    pub fn labels(&self) -> Vec<usize> {
        self.exit_layer
            .iter()
            .enumerate()
            .map(|(t, &l)| crate::math::argmax(self.probs[l - 1].row(t)))
            .collect()
    }

    pub fn mean_exit_layer(&self) -> f64 {
        self.exit_layer.iter().sum::<usize>() as f64 / self.len().max(1) as f64
    }
}

pub(crate) fn check_tokens(weights: &EncoderWeights, token_ids: &[usize]) -> Result<()> {
    let cfg = weights.config();
    if token_ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if token_ids.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_len {}",
            token_ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn param(tape: &mut Tape, w: &EncoderWeights, id: usize) -> Var {
    tape.param(id, w.tensor(id))
}

/// Token plus learned absolute position embeddings, `N × d`.
pub(crate) fn embed(tape: &mut Tape, w: &EncoderWeights, token_ids: &[usize]) -> Result<Var> {
    check_tokens(w, token_ids)?;
    let tok = param(tape, w, w.token_embedding_id());
    let pos = param(tape, w, w.position_embedding_id());
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let t = tape.gather_rows(tok, token_ids)?;
    let p = tape.gather_rows(pos, &positions)?;
    tape.add(t, p)
}

/// One transformer layer (0-based `layer`) over the rows in `active`.
///
/// Queries, the attention output, the FFN and both residual updates are
/// computed for the active rows only; keys and values are projected from
/// every row of `h`. Rows outside `active` are returned unchanged.
pub(crate) fn layer_step(
    tape: &mut Tape,
    w: &EncoderWeights,
    layer: usize,
    h: Var,
    active: &[usize],
) -> Result<Var> {
    let cfg = w.config();
    let ids = w.layer(layer);
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();

    let ln1_g = param(tape, w, ids.ln1_gain);
    let ln1_b = param(tape, w, ids.ln1_bias);
    let x = tape.layer_norm(h, ln1_g, ln1_b, LAYER_NORM_EPS)?;
    let x_active = tape.gather_rows(x, active)?;

    let w_q = param(tape, w, ids.w_q);
    let w_k = param(tape, w, ids.w_k);
    let w_v = param(tape, w, ids.w_v);
    let q = tape.matmul(x_active, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_out = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_out.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&head_out)?;
    let w_o = param(tape, w, ids.w_o);
    let attn_out = tape.matmul(concat, w_o)?;

    let h_active = tape.gather_rows(h, active)?;
    let h_mid = tape.add(h_active, attn_out)?;

    let ln2_g = param(tape, w, ids.ln2_gain);
    let ln2_b = param(tape, w, ids.ln2_bias);
    let y = tape.layer_norm(h_mid, ln2_g, ln2_b, LAYER_NORM_EPS)?;
    let w1 = param(tape, w, ids.ffn_w1);
    let b1 = param(tape, w, ids.ffn_b1);
    let w2 = param(tape, w, ids.ffn_w2);
    let b2 = param(tape, w, ids.ffn_b2);
    let f = tape.matmul(y, w1)?;
    let f = tape.add_row(f, b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul(f, w2)?;
    let f = tape.add_row(f, b2)?;
    let h_new = tape.add(h_mid, f)?;

    tape.scatter_rows(h, active, h_new)
}

/// Off-ramp logits `H[rows] · W + b` of layer `layer` (0-based).
pub(crate) fn ramp_logits(
    tape: &mut Tape,
    w: &EncoderWeights,
    layer: usize,
    h: Var,
    rows: &[usize],
) -> Result<Var> {
    let ids = w.ramp(layer);
    let weight = param(tape, w, ids.weight);
    let bias = param(tape, w, ids.bias);
    let x = tape.gather_rows(h, rows)?;
    let z = tape.matmul(x, weight)?;
    tape.add_row(z, bias)
}

/// Label distribution `softmax(H · W + b)` of a linear off-ramp.
pub fn off_ramp_predict(hidden: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    Ok(hidden.matmul(weight)?.add_row_vector(bias)?.softmax_rows())
}

/// Normalized entropy `−Σ p log p / log C` of a label distribution, in `[0, 1]`.
pub fn token_uncertainty(p: &[f64], num_labels: usize) -> Result<f64> {
    if num_labels < 2 {
        return Err(Error::Config(format!(
            "uncertainty needs at least 2 labels, got {num_labels}"
        )));
    }
    let entropy: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    Ok((entropy / (num_labels as f64).ln()).clamp(0.0, 1.0))
}

/// Uncertainty of every row of a probability matrix.
pub fn row_uncertainties(probs: &Matrix) -> Result<Vec<f64>> {
    (0..probs.rows())
        .map(|r| token_uncertainty(probs.row(r), probs.cols()))
        .collect()
}

/// Runs all `L` layers on every token and evaluates every off-ramp.
pub fn forward_full(weights: &EncoderWeights, token_ids: &[usize]) -> Result<EncoderTrace> {
    let mut tape = Tape::new();
    let n = token_ids.len();
    let all: Vec<usize> = (0..n).collect();
    let num_layers = weights.config().num_layers;
    let emb = embed(&mut tape, weights, token_ids)?;

    let mut trace = EncoderTrace {
        embeddings: tape.value(emb).clone(),
        hidden: Vec::with_capacity(num_layers),
        probs: Vec::with_capacity(num_layers),
        uncertainty: Vec::with_capacity(num_layers),
        active: vec![vec![true; n]; num_layers],
        exit_layer: vec![num_layers; n],
    };
    let mut h = emb;
    for l in 0..num_layers {
        h = layer_step(&mut tape, weights, l, h, &all)?;
        let logits = ramp_logits(&mut tape, weights, l, h, &all)?;
        let probs = tape.value(logits).softmax_rows();
        trace.uncertainty.push(row_uncertainties(&probs)?);
        trace.probs.push(probs);
        trace.hidden.push(tape.value(h).clone());
    }
    Ok(trace)
}
