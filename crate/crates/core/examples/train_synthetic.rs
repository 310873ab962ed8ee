//! Trains the small residual network with LCT attention on synthetic images
//! and reports held-out accuracy after every epoch.

use lct::attention::AttentionKind;
use lct::backbone::{Network, NetworkSpec};
use lct::data::{synth_dataset, synth_split};
use lct::rng::Rng;
use lct::train::{evaluate, TrainConfig, Trainer};

fn main() -> lct::Result<()> {
    let kind: AttentionKind = std::env::args()
        .nth(1)
        .map_or(Ok(AttentionKind::Lct), |s| s.parse())
        .map_err(|e| lct::Error::config("kind", e))?;
    let train = synth_dataset(1, 600, 10)?;
    let val = synth_split(2, 200, &train)?;
    let spec = NetworkSpec::resnet_mini().with_attention(kind);
    let net = Network::<f32>::build(&spec, &mut Rng::new(1))?;
    let mut trainer = Trainer::new(net, TrainConfig::desk(4))?;
    while !trainer.finished() {
        let r = trainer.run_epoch(&train, Some(&val))?;
        println!(
            "epoch {} lr {:.4} loss {:.4} train {:.3} val {:.3}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_top1,
            r.val_top1.unwrap_or(f64::NAN)
        );
    }
    let final_eval = evaluate(&mut trainer.net, &val, 100)?;
    println!(
        "{kind}: top1 {:.3} top5 {:.3}",
        final_eval.top1, final_eval.top5
    );
    Ok(())
}
