//! Analytic cost model in multiply-accumulates.
//!
//! One multiply-add pair counts as one FLOP unit (MAC). Under this
//! convention a BERT-base layer at 256 tokens costs 704.6M MACs for
//! self-attention and 1207.9M for the feed-forward block, and a
//! 768→50 linear classifier costs 9.8M.
//!
//! Per layer, with `N` tokens of which `M` are active, hidden size `d`,
//! FFN width `f` and `C` labels:
//!
//! | item          | MACs        |
//! |---------------|-------------|
//! | `q_proj`      | `M·d²`      |
//! | `kv_proj`     | `2·N·d²`    |
//! | `o_proj`      | `M·d²`      |
//! | `attn_scores` | `M·N·d`     |
//! | `attn_apply`  | `M·N·d`     |
//! | `ffn`         | `2·M·d·f`   |
//! | `off_ramp`    | `M·d·C`     |
//! | `uncertainty` | `2·M·C`     |
//!
//! A layer with no active token is skipped and costs nothing. Embedding
//! lookups and layer norms are not counted.
//!
//! Speedup is measured on the backbone: full-model layer cost divided by
//! the layer cost actually spent. Off-ramp and uncertainty overhead is
//! itemized in the ledger and reported separately.

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

/// Itemized MACs of one layer (plus its off-ramp).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Sequence length `N`.
    pub tokens: u64,
    /// Active tokens `M`.
    pub active: u64,
    pub q_proj: u64,
    pub kv_proj: u64,
    pub o_proj: u64,
    pub attn_scores: u64,
    pub attn_apply: u64,
    pub ffn: u64,
    pub off_ramp: u64,
    pub uncertainty: u64,
}

impl LayerCost {
    pub fn self_attention(&self) -> u64 {
        self.q_proj + self.kv_proj + self.o_proj + self.attn_scores + self.attn_apply
    }

    /// Transformer layer cost without the off-ramp.
    pub fn backbone(&self) -> u64 {
        self.self_attention() + self.ffn
    }

    pub fn overhead(&self) -> u64 {
        self.off_ramp + self.uncertainty
    }

    pub fn total(&self) -> u64 {
        self.backbone() + self.overhead()
    }
}

/// Backbone cost of one layer with `active` of `tokens` rows computed.
/// The off-ramp items are left at zero; see [`ramp_flops`].
pub fn layer_flops(tokens: usize, active: usize, config: &ModelConfig) -> Result<LayerCost> {
    if active > tokens {
        return Err(Error::Usage(format!(
            "{active} active tokens out of {tokens}"
        )));
    }
    if active == 0 {
        return Ok(LayerCost {
            tokens: tokens as u64,
            ..LayerCost::default()
        });
    }
    let (n, m) = (tokens as u64, active as u64);
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    Ok(LayerCost {
        tokens: n,
        active: m,
        q_proj: m * d * d,
        kv_proj: 2 * n * d * d,
        o_proj: m * d * d,
        attn_scores: m * n * d,
        attn_apply: m * n * d,
        ffn: 2 * m * d * f,
        off_ramp: 0,
        uncertainty: 0,
    })
}

/// `(off_ramp, uncertainty)` MACs for evaluating a ramp on `rows` tokens.
pub fn ramp_flops(rows: usize, config: &ModelConfig) -> (u64, u64) {
    let (r, d, c) = (
        rows as u64,
        config.hidden_dim as u64,
        config.num_labels as u64,
    );
    (r * d * c, 2 * r * c)
}

/// Cost record of one early-exit forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub layers: Vec<LayerCost>,
    /// Backbone cost of the full model on the same input.
    pub baseline_backbone: u64,
    /// Full model including its single final classifier.
    pub baseline_total: u64,
}

impl FlopsLedger {
    /// Empty ledger with the full-forward baseline for `tokens` tokens.
    pub fn new(tokens: usize, config: &ModelConfig) -> Result<Self> {
        let layer = layer_flops(tokens, tokens, config)?;
        let backbone = layer.backbone() * config.num_layers as u64;
        Ok(FlopsLedger {
            layers: Vec::with_capacity(config.num_layers),
            baseline_backbone: backbone,
            baseline_total: backbone + ramp_flops(tokens, config).0,
        })
    }

    /// Records one executed layer whose ramp ran on `ramp_rows` tokens.
    pub fn record(
        &mut self,
        tokens: usize,
        active: usize,
        ramp_rows: usize,
        config: &ModelConfig,
    ) -> Result<()> {
        let mut cost = layer_flops(tokens, active, config)?;
        let (ramp, unc) = ramp_flops(ramp_rows, config);
        cost.off_ramp = ramp;
        cost.uncertainty = unc;
        self.layers.push(cost);
        Ok(())
    }

    pub fn backbone_total(&self) -> u64 {
        self.layers.iter().map(LayerCost::backbone).sum()
    }

    pub fn overhead_total(&self) -> u64 {
        self.layers.iter().map(LayerCost::overhead).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(LayerCost::total).sum()
    }

    /// Everything computed by dense products, i.e. all items except
    /// the entropy term.
    pub fn matmul_total(&self) -> u64 {
        self.layers
            .iter()
            .map(|c| c.backbone() + c.off_ramp)
            .sum()
    }

    /// Backbone speedup over the full model.
    pub fn speedup(&self) -> f64 {
        self.baseline_backbone as f64 / self.backbone_total() as f64
    }

    /// Speedup counting off-ramp and uncertainty overhead against a full
    /// model that evaluates only its final classifier.
    pub fn speedup_with_overhead(&self) -> f64 {
        self.baseline_total as f64 / self.total() as f64
    }
}

/// Dataset speedup: summed baselines over summed spent costs.
pub fn average_speedup<'a>(ledgers: impl IntoIterator<Item = &'a FlopsLedger>) -> Result<f64> {
    let (mut base, mut spent, mut count) = (0u64, 0u64, 0usize);
    for l in ledgers {
        base += l.baseline_backbone;
        spent += l.backbone_total();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("average speedup over zero ledgers".into()));
    }
    Ok(base as f64 / spent as f64)
}

/// Ledger of a whole sentence exiting after `exit_layer` layers.
pub fn sentence_exit_ledger(tokens: usize, exit_layer: usize, config: &ModelConfig) -> Result<FlopsLedger> {
    if exit_layer == 0 || exit_layer > config.num_layers {
        return Err(Error::Usage(format!(
            "exit layer {exit_layer} outside 1..={}",
            config.num_layers
        )));
    }
    let mut ledger = FlopsLedger::new(tokens, config)?;
    for _ in 0..exit_layer {
        ledger.record(tokens, tokens, tokens, config)?;
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert() -> ModelConfig {
        ModelConfig::bert_base(50, 512)
    }

    #[test]
    fn bert_base_table() {
        let c = layer_flops(256, 256, &bert()).unwrap();
        assert_eq!(c.ffn, 1_207_959_552);
        assert_eq!(c.self_attention(), 4 * 256 * 768 * 768 + 2 * 256 * 256 * 768);
        assert!((c.self_attention() as f64 - 703.6e6).abs() / 703.6e6 < 0.015);
        assert_eq!(ramp_flops(256, &bert()).0, 9_830_400);
        let share = ramp_flops(256, &bert()).0 as f64 / 1911.5e6;
        assert!(share <= 0.0052);
    }

    #[test]
    fn active_subset_formulas() {
        let cfg = ModelConfig::toy(10, 5);
        let (n, m, d, f) = (10u64, 3u64, 64u64, 256u64);
        let c = layer_flops(10, 3, &cfg).unwrap();
        assert_eq!(c.self_attention(), (2 * n + 2 * m) * d * d + 2 * m * n * d);
        assert_eq!(c.ffn, 2 * m * d * f);
        assert_eq!(layer_flops(10, 0, &cfg).unwrap().total(), 0);
        assert!(layer_flops(3, 4, &cfg).is_err());
    }

    #[test]
    fn speedup_examples() {
        let cfg = bert();
        let full = sentence_exit_ledger(128, 12, &cfg).unwrap();
        assert_eq!(full.speedup(), 1.0);
        let half = sentence_exit_ledger(128, 6, &cfg).unwrap();
        assert_eq!(half.speedup(), 2.0);
        assert!((half.speedup_with_overhead() - 2.0).abs() < 0.05);
        assert!(half.total() == half.matmul_total() + half.layers.iter().map(|c| c.uncertainty).sum::<u64>());
    }

    #[test]
    fn average_is_ratio_of_sums() {
        let cfg = ModelConfig::toy(10, 5);
        let a = sentence_exit_ledger(8, 6, &cfg).unwrap();
        let b = sentence_exit_ledger(8, 2, &cfg).unwrap();
        assert_eq!(average_speedup([&a, &a]).unwrap(), a.speedup());
        assert!((average_speedup([&a, &b]).unwrap() - 1.5).abs() < 1e-12);
        assert!(average_speedup(std::iter::empty()).is_err());

        // mixed lengths against raw totals
        let ls = [
            sentence_exit_ledger(5, 3, &cfg).unwrap(),
            sentence_exit_ledger(17, 1, &cfg).unwrap(),
            sentence_exit_ledger(9, 6, &cfg).unwrap(),
        ];
        let raw_base: u64 = [5u64, 17, 9]
            .iter()
            .map(|&n| 6 * layer_flops(n as usize, n as usize, &cfg).unwrap().backbone())
            .sum();
        let raw_spent: u64 = [(5u64, 3u64), (17, 1), (9, 6)]
            .iter()
            .map(|&(n, e)| e * layer_flops(n as usize, n as usize, &cfg).unwrap().backbone())
            .sum();
        assert_eq!(average_speedup(&ls).unwrap(), raw_base as f64 / raw_spent as f64);
    }
}
