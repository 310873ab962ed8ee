//! Naive reference implementations, written without reusing any library code
//! path, plus small helpers shared by the integration tests.

#![allow(dead_code)]

use lct::rng::Rng;
use lct::Tensor;

/// Straight six-loop cross-correlation with zero padding `k/2`.
pub fn conv2d_oracle(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, w] = xs;
    let [cout, kcin, kh, kw] = ks;
    assert_eq!(cin, kcin);
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = (h + 2 * ph - kh) / stride + 1;
    let wo = (w + 2 * pw - kw) / stride + 1;
    let mut y = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - ph as isize;
                                let s = (j * stride + v) as isize - pw as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + r as usize) * w + s as usize];
                                acc += xv * k[((o * cin + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    y[((b * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (y, [n, cout, ho, wo])
}

pub fn matvec_oracle(w: &[f64], m: usize, n: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..m)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[i * n + j] * x[j];
            }
            acc + bias[i]
        })
        .collect()
}

/// Kahan-compensated mean over `axes`, visiting every output cell separately.
pub fn reduce_mean_oracle(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let out_len: usize = out_shape.iter().product::<usize>().max(1);
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let mut out = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let mut oi = vec![0; kept.len()];
        let mut rem = o;
        for d in (0..kept.len()).rev() {
            oi[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for r in 0..count {
            let mut idx = vec![0; shape.len()];
            for (d, &a) in kept.iter().enumerate() {
                idx[a] = oi[d];
            }
            let mut rem = r;
            for &a in axes.iter().rev() {
                idx[a] = rem % shape[a];
                rem /= shape[a];
            }
            let mut flat = 0;
            for (d, &i) in idx.iter().enumerate() {
                flat = flat * shape[d] + i;
            }
            let y = x[flat] - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        out.push(sum / count as f64);
    }
    let out_shape = if out_shape.is_empty() {
        vec![1]
    } else {
        out_shape
    };
    (out, out_shape)
}

/// Per-sample, per-group standardisation with the biased variance.
pub fn normalize_oracle(z: &[f64], n: usize, c: usize, groups: usize, eps: f64) -> Vec<f64> {
    let m = c / groups;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for g in 0..groups {
            let vals: Vec<f64> = (0..m).map(|i| z[b * c + g * m + i]).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            for i in 0..m {
                out[b * c + g * m + i] = (vals[i] - mean) / (var + eps).sqrt();
            }
        }
    }
    out
}

/// Average ranks by counting, then the Pearson coefficient of the ranks.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest `|a − b| / max(1, |b|)`.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn uniform_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).expect("shape matches data")
}
