//! Prints the analytic per-layer cost of BERT-base and of the toy encoder,
//! and how token-level exit shrinks a layer as tokens leave.

use seqexit::encoder::ModelConfig;
use seqexit::flops::{layer_flops, ramp_flops, sentence_exit_ledger};

fn millions(x: u64) -> String {
    format!("{:>9.1}M", x as f64 / 1e6)
}

fn main() -> seqexit::Result<()> {
    let bert = ModelConfig::bert_base(50, 256);
    let layer = layer_flops(256, 256, &bert)?;
    let (ramp, _) = ramp_flops(256, &bert);
    println!("BERT-base layer at N=256, C=50");
    println!("  self-attention {}", millions(layer.self_attention()));
    println!("  feed-forward   {}", millions(layer.ffn));
    println!("  layer total    {}", millions(layer.backbone()));
    println!("  classifier     {}", millions(ramp));

    println!("\nsentence-level exit on BERT-base");
    for exit in [1, 3, 6, 9, 12] {
        let l = sentence_exit_ledger(256, exit, &bert)?;
        println!(
            "  exit at layer {exit:>2}: speedup {:>6.3}, with ramp overhead {:>6.3}",
            l.speedup(),
            l.speedup_with_overhead()
        );
    }

    let toy = ModelConfig::toy(100, 9);
    println!("\ntoy layer (d=64, ffn=256) at N=20 as tokens exit");
    for active in [20, 15, 10, 5, 1, 0] {
        let c = layer_flops(20, active, &toy)?;
        println!(
            "  M={active:>2}: q {:>7} kv {:>7} o {:>7} scores {:>6} apply {:>6} ffn {:>7} total {:>7}",
            c.q_proj, c.kv_proj, c.o_proj, c.attn_scores, c.attn_apply, c.ffn, c.backbone()
        );
    }
    Ok(())
}
