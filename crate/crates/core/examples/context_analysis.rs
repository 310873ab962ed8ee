//! Trains briefly, then exports per-block context and attention statistics
//! and prints the rank correlation between |context| and attention.

use lct::analysis::{collect, export_stats, summary, BlockSelector};
use lct::attention::AttentionKind;
use lct::backbone::{Network, NetworkSpec};
use lct::data::{synth_dataset, synth_split};
use lct::rng::Rng;
use lct::train::{train, TrainConfig};

fn main() -> lct::Result<()> {
    let data = synth_dataset(3, 400, 10)?;
    let val = synth_split(4, 100, &data)?;
    let spec = NetworkSpec::resnet_mini().with_attention(AttentionKind::Lct);
    let net = Network::<f32>::build(&spec, &mut Rng::new(3))?;
    let (mut net, _) = train(net, &data, None, TrainConfig::desk(2))?;

    let stats = collect(&mut net, &val, &BlockSelector::All, 50)?;
    let dir = std::env::temp_dir().join("lct-context-analysis");
    std::fs::create_dir_all(&dir).map_err(|e| lct::Error::io(&dir, e))?;
    let files = export_stats(&stats, &dir)?;
    print!("{}", summary(&stats));
    println!("{} files in {}", files.len(), dir.display());
    Ok(())
}
