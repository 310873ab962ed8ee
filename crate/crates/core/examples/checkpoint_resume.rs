//! Splits a training run in two across a checkpoint file and confirms the
//! result matches an uninterrupted run bit for bit.

use lct::attention::AttentionKind;
use lct::backbone::{Network, NetworkSpec};
use lct::checkpoint::{load_checkpoint, save_checkpoint};
use lct::data::synth_dataset;
use lct::rng::Rng;
use lct::train::{model_tensors, TrainConfig, Trainer};

fn trainer(seed: u64) -> lct::Result<Trainer> {
    let spec = NetworkSpec::resnet_mini().with_attention(AttentionKind::SePlus);
    Trainer::new(
        Network::build(&spec, &mut Rng::new(seed))?,
        TrainConfig::desk(4),
    )
}

fn main() -> lct::Result<()> {
    let data = synth_dataset(5, 128, 10)?;
    let path = std::env::temp_dir().join("lct-resume-demo.ckpt");

    let mut whole = trainer(1)?;
    whole.run(&data, None)?;

    let mut part = trainer(1)?;
    part.run_until(&data, None, 2)?;
    save_checkpoint(&path, &part.checkpoint())?;
    let spec = part.net.spec.clone();
    let mut resumed = Trainer::restore(
        Network::build(&spec, &mut Rng::new(0))?,
        TrainConfig::desk(4),
        &load_checkpoint(&path)?,
    )?;
    resumed.run(&data, None)?;

    let same = model_tensors(&whole.net)
        .iter()
        .zip(&model_tensors(&resumed.net))
        .all(|(a, b)| a.bit_eq(b));
    println!(
        "checkpoint {} bytes; resumed run identical: {same}",
        std::fs::metadata(&path).map_or(0, |m| m.len())
    );
    Ok(())
}
