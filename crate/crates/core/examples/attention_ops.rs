//! The LCT pipeline step by step on one feature map, next to the SE and SE+
//! blocks applied to the same input.

use lct::attention::{
    aggregate, fuse, normalize, transform, AttentionBlock, AttentionConfig, AttentionKind,
};
use lct::nn::{Layer, Mode};
use lct::rng::Rng;
use lct::Tensor;

fn main() -> lct::Result<()> {
    let mut rng = Rng::new(7);
    let (c, groups) = (8, 2);
    let x: Tensor<f64> = rng.normal(&[1, c, 4, 4], 0.5, 1.0);

    let z = aggregate(&x)?;
    let zhat = normalize(&z, groups, 1e-5)?.zhat;
    let w = Tensor::full(&[c], 0.5);
    let b = Tensor::full(&[c], 1.0);
    let a = transform(&zhat, &w, &b)?;
    let y = fuse(&x, &a)?;
    println!("context z     {:?}", round(z.data()));
    println!("normalised    {:?}", round(zhat.data()));
    println!("scores a      {:?}", round(a.data()));
    println!(
        "output mean   {:.4} (input {:.4})",
        y.sum() / y.len() as f64,
        x.sum() / x.len() as f64
    );

    for kind in [AttentionKind::Se, AttentionKind::Lct, AttentionKind::SePlus] {
        let mut cfg = AttentionConfig::new(kind, c);
        cfg.groups = groups;
        cfg.reduction = 4;
        let mut block = AttentionBlock::<f64>::new("demo", &cfg, &mut rng)?;
        block.probe_enabled = true;
        block.forward(&x, Mode::Eval)?;
        let gate = block.take_probe().expect("probe enabled").attention;
        println!("{:<4} gates    {:?}", kind.as_str(), round(gate.data()));
    }
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
