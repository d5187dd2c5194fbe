//! Naive dense reference for one attention layer.
//!
//! Written with plain nested loops over `Vec<Vec<f64>>`, sharing no kernels
//! with the crate: every head scores all token pairs, disallowed pairs get
//! `-inf` added before the softmax, and a row with no allowed key yields a
//! zero head output.

#![allow(dead_code)]

use locomt_core::attention::LayerParams;
use locomt_core::numerics::Tensor;
use locomt_core::viewconfig::{AttentionView, KeyScope};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Modality index of every token for the given lengths.
pub fn owners(lengths: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(k, &l)| std::iter::repeat_n(k, l))
        .collect()
}

/// Whether a query of modality `q` may see a key of modality `k`.
pub fn scope_allows(scope: KeyScope, q: usize, k: usize) -> bool {
    match scope {
        KeyScope::Own => q == k,
        KeyScope::Pair(i, j) => (q == i && k == j) || (q == j && k == i),
        KeyScope::Others => q != k,
        KeyScope::All => true,
    }
}

pub fn view_allows(view: AttentionView, q: usize, k: usize) -> bool {
    match view {
        AttentionView::SelfView => q == k,
        AttentionView::Cross(i, j) => (q == i && k == j) || (q == j && k == i),
    }
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / s * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One head with an additive `-inf` mask; `allowed(query_token, key_token)`.
pub fn masked_head(h: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let (q, k, v) = (mm(h, wq), mm(h, wk), mm(h, wv));
    let n = h.len();
    let dh = wq[0].len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0; dh]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                let dot: f64 = (0..dh).map(|t| q[i][t] * k[j][t]).sum();
                dot * scale + if allowed(i, j) { 0.0 } else { f64::NEG_INFINITY }
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            let w = exps[j] / z;
            for t in 0..dh {
                out[i][t] += w * v[j][t];
            }
        }
    }
    out
}

/// Full pre-norm layer; `allowed(head, query_token, key_token)`.
pub fn layer(x: &Mat, p: &LayerParams, allowed: &dyn Fn(usize, usize, usize) -> bool) -> Mat {
    let h = layer_norm(x, p.ln1_gain.data(), p.ln1_bias.data());
    let mut cat: Mat = vec![Vec::new(); x.len()];
    for (hi, head) in p.heads.iter().enumerate() {
        let o = masked_head(&h, &to_mat(&head.wq), &to_mat(&head.wk), &to_mat(&head.wv), &|i, j| {
            allowed(hi, i, j)
        });
        for (row, part) in cat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    let attn = mm(&cat, &to_mat(&p.wo));
    let x1: Mat = x
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let h = layer_norm(&x1, p.ln2_gain.data(), p.ln2_bias.data());
    let mut f = mm(&h, &to_mat(&p.w1));
    for row in &mut f {
        for (v, b) in row.iter_mut().zip(p.b1.data()) {
            *v = gelu(*v + b);
        }
    }
    let f = mm(&f, &to_mat(&p.w2));
    x1.iter()
        .zip(&f)
        .map(|(a, b)| a.iter().zip(b).zip(p.b2.data()).map(|((u, v), c)| u + v + c).collect())
        .collect()
}

/// Layer whose heads use the given key scopes over tokens owned per `lengths`.
pub fn scoped_layer(x: &Mat, p: &LayerParams, scopes: &[KeyScope], lengths: &[usize]) -> Mat {
    let own = owners(lengths);
    layer(x, p, &|h, i, j| scope_allows(scopes[h], own[i], own[j]))
}

/// Bottleneck fusion: each modality runs the layer over itself plus the
/// bottleneck tokens without masking; the bottleneck copies are averaged.
pub fn bottleneck_layer(streams: &[Mat], b: &Mat, p: &LayerParams) -> (Vec<Mat>, Mat) {
    let mut outs = Vec::new();
    let mut avg = vec![vec![0.0; b[0].len()]; b.len()];
    for s in streams {
        let mut seq = s.clone();
        seq.extend(b.iter().cloned());
        let o = layer(&seq, p, &|_, _, _| true);
        for (r, row) in o[s.len()..].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                avg[r][c] += v / streams.len() as f64;
            }
        }
        outs.push(o[..s.len()].to_vec());
    }
    (outs, avg)
}

/// Largest `|a - b| / max(|b|, 1)` over all entries.
pub fn max_rel_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    worst
}
