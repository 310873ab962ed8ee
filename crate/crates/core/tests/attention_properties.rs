mod common;

use common::*;
use lct::attention::{AttentionBlock, AttentionConfig, AttentionKind};
use lct::nn::{Layer, Mode};
use lct::rng::Rng;
use lct::Tensor;

fn block(kind: AttentionKind, channels: usize, groups: usize, seed: u64) -> AttentionBlock<f64> {
    let mut cfg = AttentionConfig::new(kind, channels);
    cfg.groups = groups;
    cfg.reduction = 2;
    let mut rng = Rng::new(seed);
    let mut b = AttentionBlock::new("attn", &cfg, &mut rng).unwrap();
    if let Some((w, bias)) = b.affine_mut() {
        *w = rng.normal(&[channels], 0.0, 1.0);
        *bias = rng.normal(&[channels], 0.0, 1.0);
    }
    if let Some(e) = b.excitation_mut() {
        let s = e.fc1.bias.value.shape().to_vec();
        e.fc1.bias.value = rng.normal(&s, 0.0, 0.5);
        let s = e.fc2.bias.value.shape().to_vec();
        e.fc2.bias.value = rng.normal(&s, 0.0, 0.5);
    }
    b.probe_enabled = true;
    b
}

/// Gate values `σ(a)` as an `N×C` row-major vector.
fn attention(b: &mut AttentionBlock<f64>, x: &Tensor<f64>) -> Vec<f64> {
    b.forward(x, Mode::Eval).unwrap();
    b.take_probe().unwrap().attention.into_data()
}

fn random_input(rng: &mut Rng, shape: [usize; 4], spread: f64) -> Tensor<f64> {
    tensor(
        &shape,
        uniform_vec(rng, shape.iter().product(), -spread, spread),
    )
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

#[test]
fn lct_ignores_groupwise_positive_affine_maps() {
    let mut rng = Rng::new(21);
    for case in 0..50 {
        let (n, c, g) = (2, 16, [1, 2, 4, 8][case % 4]);
        let m = c / g;
        let mut b = block(AttentionKind::Lct, c, g, case as u64);
        // channel offsets keep every group's variance far above ε, so the
        // stabiliser cannot move the result by more than the tolerance
        let x = random_input(&mut rng, [n, c, 3, 3], 1.0);
        let x = tensor(
            x.shape(),
            x.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + 50.0 * ((i / 9) % c) as f64)
                .collect(),
        );
        let base = attention(&mut b, &x);
        let scale: Vec<f64> = (0..n * g).map(|_| 0.5 + 3.0 * rng.next_f64()).collect();
        let shift: Vec<f64> = (0..n * g).map(|_| -5.0 + 10.0 * rng.next_f64()).collect();
        let (scale, shift) = (&scale, &shift);
        let moved: Vec<f64> = x
            .data()
            .chunks(9)
            .enumerate()
            .flat_map(|(plane, vals)| {
                let (s, ch) = (plane / c, plane % c);
                let k = s * g + ch / m;
                vals.iter()
                    .map(move |v| v * scale[k] + shift[k])
                    .collect::<Vec<_>>()
            })
            .collect();
        let after = attention(&mut b, &tensor(x.shape(), moved));
        assert!(
            max_rel(&after, &base) < 1e-6,
            "case {case}: {}",
            max_rel(&after, &base)
        );
    }
}

#[test]
fn lct_is_equivariant_to_group_permutations() {
    let mut rng = Rng::new(22);
    let (c, g) = (12, 3);
    let m = c / g;
    let mut b = block(AttentionKind::Lct, c, g, 5);
    let (w, bias) = {
        let (w, bias) = b.affine().unwrap();
        (w.data().to_vec(), bias.data().to_vec())
    };
    let x = random_input(&mut rng, [1, c, 4, 4], 1.0);
    let base = attention(&mut b, &x);
    let order = [2, 0, 1];
    let perm: Vec<usize> = order
        .iter()
        .flat_map(|&gi| (0..m).map(move |i| gi * m + i))
        .collect();
    let xp: Vec<f64> = perm
        .iter()
        .flat_map(|&ch| x.data()[ch * 16..(ch + 1) * 16].to_vec())
        .collect();
    {
        let (wt, bt) = b.affine_mut().unwrap();
        *wt = tensor(&[c], perm.iter().map(|&ch| w[ch]).collect());
        *bt = tensor(&[c], perm.iter().map(|&ch| bias[ch]).collect());
    }
    let permuted = attention(&mut b, &tensor(&[1, c, 4, 4], xp));
    let expected: Vec<f64> = perm.iter().map(|&ch| base[ch]).collect();
    assert!(max_abs_diff(&permuted, &expected) < 1e-14);
}

#[test]
fn lct_groups_do_not_interact() {
    let mut rng = Rng::new(23);
    let (c, g) = (16, 4);
    let m = c / g;
    let mut b = block(AttentionKind::Lct, c, g, 6);
    let x = random_input(&mut rng, [1, c, 2, 2], 1.0);
    let base = attention(&mut b, &x);
    let mut changed = x.data().to_vec();
    // perturb only the channels of group 1
    for v in &mut changed[m * 4..2 * m * 4] {
        *v += rng.standard_normal();
    }
    let after = attention(&mut b, &tensor(x.shape(), changed));
    for ch in 0..c {
        if ch / m != 1 {
            assert_eq!(after[ch].to_bits(), base[ch].to_bits(), "channel {ch}");
        }
    }
    assert!((m..2 * m).any(|ch| after[ch] != base[ch]));
}

#[test]
fn lct_single_group_matches_all_channel_normalisation() {
    let mut rng = Rng::new(24);
    for case in 0..30 {
        let (n, c) = (3, 8 + case % 5);
        let mut b = block(AttentionKind::Lct, c, 1, case as u64);
        let (w, bias) = {
            let (w, bias) = b.affine().unwrap();
            (w.data().to_vec(), bias.data().to_vec())
        };
        let x = random_input(&mut rng, [n, c, 3, 2], 1.0);
        let got = attention(&mut b, &x);
        let mut expected = Vec::new();
        for s in 0..n {
            let z: Vec<f64> = (0..c)
                .map(|ch| {
                    x.data()[(s * c + ch) * 6..(s * c + ch + 1) * 6]
                        .iter()
                        .sum::<f64>()
                        / 6.0
                })
                .collect();
            let mean = z.iter().sum::<f64>() / c as f64;
            let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                let zhat = (z[ch] - mean) / (var + 1e-5).sqrt();
                expected.push(sigmoid(w[ch] * zhat + bias[ch]));
            }
        }
        assert!(max_abs_diff(&got, &expected) < 1e-12);
    }
}

#[test]
fn lct_with_one_channel_per_group_emits_bias() {
    let mut rng = Rng::new(25);
    let c = 10;
    let mut b = block(AttentionKind::Lct, c, c, 9);
    let bias = b.affine().unwrap().1.data().to_vec();
    let x = random_input(&mut rng, [4, c, 3, 3], 5.0);
    let got = attention(&mut b, &x);
    for (i, &s) in got.iter().enumerate() {
        // bitwise: the score entering the gate is exactly b
        assert_eq!(
            s.to_bits(),
            lct::tensor::sigmoid(bias[i % c]).to_bits(),
            "index {i}"
        );
    }
}

#[test]
fn se_is_equivariant_to_channel_permutations() {
    let mut rng = Rng::new(26);
    let c = 8;
    let mut b = block(AttentionKind::Se, c, 1, 3);
    let x = random_input(&mut rng, [2, c, 3, 3], 1.0);
    let base = attention(&mut b, &x);
    let perm = rng.permutation(c);
    let e = b.excitation_mut().unwrap();
    let hidden = e.fc1.weight.value.shape()[0];
    let w1 = &e.fc1.weight.value.data().to_vec();
    let w2 = e.fc2.weight.value.data().to_vec();
    let b2 = e.fc2.bias.value.data().to_vec();
    // permute fc1 input columns, fc2 output rows and the fc2 bias alike
    e.fc1.weight.value = tensor(
        &[hidden, c],
        (0..hidden)
            .flat_map(|h| perm.iter().map(move |&p| w1[h * c + p]).collect::<Vec<_>>())
            .collect(),
    );
    e.fc2.weight.value = tensor(
        &[c, hidden],
        perm.iter()
            .flat_map(|&p| w2[p * hidden..(p + 1) * hidden].to_vec())
            .collect(),
    );
    e.fc2.bias.value = tensor(&[c], perm.iter().map(|&p| b2[p]).collect());
    let xp: Vec<f64> = (0..2)
        .flat_map(|s| {
            perm.iter()
                .flat_map(move |&p| ((s * c + p) * 9..(s * c + p + 1) * 9).collect::<Vec<_>>())
        })
        .map(|i| x.data()[i])
        .collect();
    let got = attention(&mut b, &tensor(x.shape(), xp));
    let expected: Vec<f64> = (0..2)
        .flat_map(|s| perm.iter().map(|&p| base[s * c + p]).collect::<Vec<_>>())
        .collect();
    assert!(max_abs_diff(&got, &expected) < 1e-14);
}

#[test]
fn se_plus_matches_reference_pipeline() {
    let mut rng = Rng::new(27);
    for case in 0..30 {
        let (n, c, g) = (2, 8, [1, 2, 4, 8][case % 4]);
        let mut b = block(AttentionKind::SePlus, c, g, 100 + case as u64);
        let x = random_input(&mut rng, [n, c, 2, 3], 1.0);
        let got_y = b.forward(&x, Mode::Eval).unwrap();
        let e = b.excitation_mut().unwrap();
        let hidden = e.fc1.weight.value.shape()[0];
        let (w1, b1) = (
            e.fc1.weight.value.data().to_vec(),
            e.fc1.bias.value.data().to_vec(),
        );
        let (w2, b2) = (
            e.fc2.weight.value.data().to_vec(),
            e.fc2.bias.value.data().to_vec(),
        );
        let z: Vec<f64> = x
            .data()
            .chunks(6)
            .map(|p| p.iter().sum::<f64>() / 6.0)
            .collect();
        let zhat = normalize_oracle(&z, n, c, g, 1e-5);
        let mut y = Vec::new();
        for s in 0..n {
            let h: Vec<f64> = matvec_oracle(&w1, hidden, c, &zhat[s * c..(s + 1) * c], &b1)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let a = matvec_oracle(&w2, c, hidden, &h, &b2);
            for (ch, &av) in a.iter().enumerate() {
                let gate = sigmoid(av);
                y.extend(
                    x.data()[(s * c + ch) * 6..(s * c + ch + 1) * 6]
                        .iter()
                        .map(|v| v * gate),
                );
            }
        }
        assert!(max_abs_diff(got_y.data(), &y) < 1e-12, "case {case}");
    }
}

#[test]
fn samples_in_a_batch_are_independent() {
    let mut rng = Rng::new(28);
    for kind in [AttentionKind::Se, AttentionKind::Lct, AttentionKind::SePlus] {
        let c = 8;
        let mut b = block(kind, c, 4, 7);
        let x = random_input(&mut rng, [5, c, 3, 3], 1.0);
        let batched = b.forward(&x, Mode::Eval).unwrap();
        let per = c * 9;
        for s in 0..5 {
            let one = tensor(&[1, c, 3, 3], x.data()[s * per..(s + 1) * per].to_vec());
            let alone = b.forward(&one, Mode::Eval).unwrap();
            assert!(
                alone
                    .data()
                    .iter()
                    .zip(&batched.data()[s * per..(s + 1) * per])
                    .all(|(p, q)| p.to_bits() == q.to_bits()),
                "{kind} sample {s}"
            );
        }
    }
}

#[test]
fn skip_flags_reduce_lct_to_its_parts() {
    let mut rng = Rng::new(29);
    let c = 8;
    let x = random_input(&mut rng, [2, c, 2, 2], 1.0);
    let z: Vec<f64> = x
        .data()
        .chunks(4)
        .map(|p| p.iter().sum::<f64>() / 4.0)
        .collect();

    let mut cfg = AttentionConfig::new(AttentionKind::Lct, c);
    cfg.groups = 2;
    cfg.skip_transform = true;
    let mut b = AttentionBlock::<f64>::new("attn", &cfg, &mut Rng::new(0)).unwrap();
    b.probe_enabled = true;
    let got = attention(&mut b, &x);
    let expected: Vec<f64> = normalize_oracle(&z, 2, c, 2, 1e-5)
        .into_iter()
        .map(sigmoid)
        .collect();
    assert!(max_abs_diff(&got, &expected) < 1e-12);

    cfg.skip_transform = false;
    cfg.skip_normalize = true;
    let mut b = AttentionBlock::<f64>::new("attn", &cfg, &mut Rng::new(0)).unwrap();
    b.probe_enabled = true;
    let (w, bias) = b.affine_mut().unwrap();
    *w = tensor(&[c], vec![2.0; c]);
    *bias = tensor(&[c], vec![-0.5; c]);
    let got = attention(&mut b, &x);
    let expected: Vec<f64> = z.iter().map(|v| sigmoid(2.0 * v - 0.5)).collect();
    assert!(max_abs_diff(&got, &expected) < 1e-12);
}
