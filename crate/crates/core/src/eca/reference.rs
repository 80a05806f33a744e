//! Independent element-by-element reference implementations of the
//! attention stages, used as oracles.

use crate::tensor::{AttentionParams, LinearParams};

pub fn linear(l: &LinearParams, x: &[f64]) -> Vec<f64> {
    let (o_dim, i_dim) = (l.out_dim(), l.in_dim());
    let mut y = vec![0.0; o_dim];
    for o in 0..o_dim {
        let mut acc = l.bias.data()[o];
        for i in 0..i_dim {
            acc += l.weight.data()[o * i_dim + i] * x[i];
        }
        y[o] = acc;
    }
    y
}

/// One query against a key list; `None` keys are masked.
pub fn attend(p: &AttentionParams, query: &[f64], keys: &[Option<&[f64]>]) -> Vec<f64> {
    let q = linear(&p.q, query);
    let d = q.len() as f64;
    let mut logits = Vec::new();
    let mut values = Vec::new();
    for key in keys.iter().flatten() {
        let kv = linear(&p.k, key);
        let mut dot = 0.0;
        for i in 0..q.len() {
            dot += q[i] * kv[i];
        }
        logits.push(dot / d.sqrt());
        values.push(linear(&p.v, key));
    }
    let mixed = if logits.is_empty() {
        linear(&p.v, query)
    } else {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut m = vec![0.0; q.len()];
        for (e, v) in exps.iter().zip(&values) {
            for i in 0..m.len() {
                m[i] += e / total * v[i];
            }
        }
        m
    };
    linear(&p.out, &mixed)
}

/// `volume[k][p][s]` are C-vectors.
pub fn cross(p: &AttentionParams, volume: &[Vec<Vec<Vec<f64>>>], valid: &[Vec<Vec<bool>>]) -> Vec<Vec<Vec<f64>>> {
    let k = volume.len();
    let mut out = volume[0].clone();
    for px in 0..volume[0].len() {
        let s_count = volume[0][px].len();
        for s in 0..s_count {
            if k == 1 {
                continue;
            }
            let mut keys = Vec::new();
            for kk in 1..k {
                for s2 in 0..s_count {
                    keys.push(valid[kk][px][s2].then_some(volume[kk][px][s2].as_slice()));
                }
            }
            let a = attend(p, &volume[0][px][s], &keys);
            for i in 0..a.len() {
                out[px][s][i] += a[i];
            }
        }
    }
    out
}

pub fn ray(p: &AttentionParams, x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let mut out = x.to_vec();
    for px in 0..x.len() {
        let keys: Vec<Option<&[f64]>> = x[px].iter().map(|v| Some(v.as_slice())).collect();
        for s in 0..x[px].len() {
            let a = attend(p, &x[px][s], &keys);
            for i in 0..a.len() {
                out[px][s][i] += a[i];
            }
        }
    }
    out
}

pub fn fuse(head: &LinearParams, x: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|samples| {
            let logits: Vec<f64> = samples.iter().map(|v| linear(head, v)[0]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut o = vec![0.0; samples[0].len()];
            for (e, v) in exps.iter().zip(samples) {
                for i in 0..o.len() {
                    o[i] += e / total * v[i];
                }
            }
            o
        })
        .collect()
}

pub fn nest3(data: &[f64], a: usize, b: usize, c: usize) -> Vec<Vec<Vec<f64>>> {
    (0..a)
        .map(|i| (0..b).map(|j| data[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect())
        .collect()
}

pub fn flat3(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}
