use lct::accounting::{cost_report, count_params};
use lct::attention::AttentionKind;
use lct::backbone::{Network, NetworkSpec};
use lct::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lct::data::{load_cifar10_binary, parse_cifar10, synth_dataset, CIFAR_RECORD};
use lct::error::Error;
use lct::rng::Rng;
use lct::train::{evaluate, model_tensors, step_schedule, TrainConfig, Trainer};

#[test]
fn cost_model_agrees_with_built_networks() {
    for name in NetworkSpec::PRESETS {
        for kind in AttentionKind::ALL {
            let spec = NetworkSpec::preset(name).unwrap().with_attention(kind);
            let net = Network::<f32>::build(&spec, &mut Rng::new(0)).unwrap();
            let report = cost_report(&spec).unwrap();
            assert_eq!(
                net.param_count() as u64,
                count_params(&spec).unwrap(),
                "{name} {kind}"
            );
            assert_eq!(
                report.total_params,
                report.layers.iter().map(|l| l.params).sum::<u64>()
            );
            assert_eq!(
                report.total_macs,
                report.layers.iter().map(|l| l.macs).sum::<u64>()
            );
        }
    }
}

#[test]
fn cost_report_attention_rows_sum_to_delta() {
    for kind in [AttentionKind::Se, AttentionKind::Lct, AttentionKind::SePlus] {
        let report = cost_report(&NetworkSpec::resnet50().with_attention(kind)).unwrap();
        let params: u64 = report.attention_layers().map(|l| l.params).sum();
        let macs: u64 = report.attention_layers().map(|l| l.macs).sum();
        assert_eq!((params, macs), report.attention_delta, "{kind}");
        assert!(report.to_text().contains("mac-v1"));
    }
}

fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..CIFAR_RECORD - 1).map(fill));
    r
}

#[test]
fn cifar_loader_matches_byte_level_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let recs = [
        record(3, |i| (i % 251) as u8),
        record(0, |i| (i * 7 % 256) as u8),
        record(9, |i| 255 - (i % 13) as u8),
    ];
    std::fs::write(&path, recs.concat()).unwrap();
    let ds = load_cifar10_binary(&[path]).unwrap();
    assert_eq!(ds.labels(), &[3, 0, 9]);
    assert_eq!(ds.geometry(), [3, 32, 32]);
    let plane = 1024;
    for c in 0..3 {
        let vals: Vec<f64> = recs
            .iter()
            .flat_map(|r| {
                r[1 + c * plane..1 + (c + 1) * plane]
                    .iter()
                    .map(|&b| b as f64 / 255.0)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        for (i, r) in recs.iter().enumerate() {
            for p in [0, 17, 1023] {
                let want = ((r[1 + c * plane + p] as f64 / 255.0 - mean) / std) as f32;
                let got = ds.image(i)[c * plane + p];
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "sample {i} channel {c} pixel {p}"
                );
            }
        }
    }
}

#[test]
fn cifar_errors_carry_offsets() {
    let mut bytes = record(1, |_| 0);
    bytes.extend(record(10, |_| 0));
    match parse_cifar10(&bytes, "x.bin".as_ref()) {
        Err(Error::LabelOutOfRange { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("{other:?}"),
    }
    let bytes = [record(1, |_| 0), vec![2; 100]].concat();
    match parse_cifar10(&bytes, "x.bin".as_ref()) {
        Err(Error::TruncatedRecord { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("{other:?}"),
    }
}

#[test]
fn synthetic_classes_are_separable_by_class_means() {
    let train = synth_dataset(1, 500, 10).unwrap();
    let test = synth_dataset(2, 200, 10).unwrap();
    let dim = train.image(0).len();
    let mut means = vec![vec![0.0f64; dim]; 10];
    let mut counts = [0usize; 10];
    for i in 0..train.len() {
        let l = train.labels()[i];
        counts[l] += 1;
        for (m, &v) in means[l].iter_mut().zip(train.image(i)) {
            *m += v as f64;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            let best = (0..10)
                .min_by(|&a, &b| {
                    let d = |k: usize| {
                        means[k]
                            .iter()
                            .zip(x)
                            .map(|(m, &v)| (m - v as f64).powi(2))
                            .sum::<f64>()
                    };
                    d(a).partial_cmp(&d(b)).unwrap()
                })
                .unwrap();
            best == test.labels()[i]
        })
        .count();
    // chance is 10%
    assert!(
        correct as f64 / test.len() as f64 > 0.2,
        "nearest-mean accuracy {correct}/200"
    );
}

fn tiny_trainer(kind: AttentionKind, epochs: usize) -> Trainer {
    let spec = NetworkSpec::resnet_mini().with_attention(kind);
    let net = Network::<f32>::build(&spec, &mut Rng::new(3)).unwrap();
    let mut cfg = TrainConfig::desk(epochs);
    cfg.batch_size = 16;
    Trainer::new(net, cfg).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = synth_dataset(4, 40, 10).unwrap();
    let mut t = tiny_trainer(AttentionKind::Lct, 1);
    t.cfg.lr0 = 0.0;
    let before = model_tensors(&t.net);
    t.run(&data, None).unwrap();
    let params = t.net.params().len();
    let after = model_tensors(&t.net);
    for (a, b) in before.iter().zip(&after).take(params) {
        assert!(a.bit_eq(b), "{} moved", a.name);
    }
    // running statistics still update in training mode
    assert!(before[params..]
        .iter()
        .zip(&after[params..])
        .any(|(a, b)| !a.bit_eq(b)));
}

#[test]
fn schedule_follows_floor_milestones() {
    assert_eq!(
        step_schedule(10, &[0.6, 0.9], 0.1)
            .iter()
            .map(|m| m.0)
            .collect::<Vec<_>>(),
        vec![6, 9]
    );
    let cfg = TrainConfig::desk(4);
    let lrs: Vec<f64> = (0..4).map(|e| cfg.lr_at(e)).collect();
    assert_eq!(lrs[..2], [0.1, 0.1]);
    assert!((lrs[2] - 0.01).abs() < 1e-15 && (lrs[3] - 0.001).abs() < 1e-15);
}

#[test]
fn evaluation_is_pure() {
    let data = synth_dataset(5, 30, 10).unwrap();
    let mut t = tiny_trainer(AttentionKind::Se, 1);
    let before = model_tensors(&t.net);
    let a = evaluate(&mut t.net, &data, 7).unwrap();
    let b = evaluate(&mut t.net, &data, 30).unwrap();
    assert_eq!(a.top1, b.top1);
    assert!((a.loss - b.loss).abs() < 1e-6);
    assert!(before
        .iter()
        .zip(model_tensors(&t.net))
        .all(|(x, y)| x.bit_eq(&y)));
}

/// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
fn crc32_reference(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

#[test]
fn checkpoint_trailer_is_crc32_of_body() {
    assert_eq!(crc32_reference(b"123456789"), 0xCBF4_3926);
    let t = tiny_trainer(AttentionKind::Lct, 1);
    let bytes = t.checkpoint().to_bytes();
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    assert_eq!(
        u32::from_le_bytes(trailer.try_into().unwrap()),
        crc32_reference(body)
    );
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let data = synth_dataset(6, 32, 10).unwrap();
    let mut t = tiny_trainer(AttentionKind::SePlus, 2);
    t.run_until(&data, None, 1).unwrap();
    let ckpt = t.checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    assert!(load_checkpoint(&path).unwrap().bit_eq(&ckpt));

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::ChecksumMismatch { .. })
    ));

    // a checkpoint from another architecture is refused by name
    let other = Network::<f32>::build(
        &NetworkSpec::resnet_mini().with_attention(AttentionKind::Lct),
        &mut Rng::new(0),
    )
    .unwrap();
    match Trainer::restore(other, TrainConfig::desk(2), &ckpt) {
        Err(Error::CheckpointMismatch(name)) => assert!(name.contains("attn")),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("mismatched checkpoint accepted"),
    }
}
