//! Parameter and multiply-add counts for the built-in networks with each
//! attention kind.

use lct::accounting::cost_report;
use lct::attention::AttentionKind;
use lct::backbone::NetworkSpec;

fn main() -> lct::Result<()> {
    for name in ["resnet50", "resnet101"] {
        for kind in AttentionKind::ALL {
            let spec = NetworkSpec::preset(name)
                .expect("built-in preset")
                .with_attention(kind);
            let r = cost_report(&spec)?;
            println!(
                "{name:<10} {:<5} params {:>11}  (+{:>9})  GMACs {:.4}  (+{:.5})",
                kind.as_str(),
                r.total_params,
                r.attention_delta.0,
                r.total_macs as f64 / 1e9,
                r.attention_delta.1 as f64 / 1e9
            );
        }
    }
    Ok(())
}
