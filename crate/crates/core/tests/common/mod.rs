//! Direct-formula reference implementations over plain nested vectors.
#![allow(dead_code)]

use lspt_core::backbone::BlockWeights;
use lspt_core::prompts::{CellKind, RecurrentCell, StrategyKind};
use lspt_core::{BackboneWeights, PromptBank, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let cols = *t.shape().last().unwrap();
    if cols == 0 {
        return vec![Vec::new(); t.shape()[0]];
    }
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn vector(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (k, &x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let n = a.first().map_or(0, |r| r.len());
    (0..n).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn affine(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    add_row(&matmul(x, &mat(w)), b.data())
}

pub fn layernorm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Pre-norm transformer layer; returns the output tokens and one `[T×T]`
/// attention matrix per head.
pub fn layer(x: &Mat, w: &BlockWeights<f64>, heads: usize) -> (Mat, Vec<Mat>) {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let n1 = layernorm(x, w.ln1_gamma.data(), w.ln1_beta.data());
    let qkv = affine(&n1, &w.qkv_w, &w.qkv_b);
    let mut merged = vec![vec![0.0; d]; t];
    let mut maps = Vec::new();
    for h in 0..heads {
        let mut a = vec![vec![0.0; t]; t];
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qkv[i][h * dh + c] * qkv[j][d + h * dh + c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            a[i] = softmax(&scores);
        }
        for i in 0..t {
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..t {
                    s += a[i][j] * qkv[j][2 * d + h * dh + c];
                }
                merged[i][h * dh + c] = s;
            }
        }
        maps.push(a);
    }
    let h1 = add(x, &affine(&merged, &w.proj_w, &w.proj_b));
    let n2 = layernorm(&h1, w.ln2_gamma.data(), w.ln2_beta.data());
    let f: Mat = affine(&n2, &w.fc1_w, &w.fc1_b)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    (add(&h1, &affine(&f, &w.fc2_w, &w.fc2_b)), maps)
}

/// `x·W_x + h·W_h + b` for gate `k` of `cell`, row by row.
fn gate(cell: &RecurrentCell<f64>, k: usize, x: &Mat, h: &Mat) -> Mat {
    let g = &cell.gates[k];
    add_row(&add(&matmul(x, &mat(&g.w_x)), &matmul(h, &mat(&g.w_h))), g.b.data())
}

pub fn lstm(cell: &RecurrentCell<f64>, x: &Mat, h: &Mat, c: &Mat) -> (Mat, Mat) {
    assert_eq!(cell.kind, CellKind::Lstm);
    let (i, f, g, o) = (gate(cell, 0, x, h), gate(cell, 1, x, h), gate(cell, 2, x, h), gate(cell, 3, x, h));
    let mut h_new = h.clone();
    let mut c_new = c.clone();
    for r in 0..x.len() {
        for j in 0..x[0].len() {
            let cn = sigmoid(f[r][j]) * c[r][j] + sigmoid(i[r][j]) * g[r][j].tanh();
            c_new[r][j] = cn;
            h_new[r][j] = sigmoid(o[r][j]) * cn.tanh();
        }
    }
    (h_new, c_new)
}

pub fn gru(cell: &RecurrentCell<f64>, x: &Mat, h: &Mat) -> Mat {
    assert_eq!(cell.kind, CellKind::Gru);
    let z = gate(cell, 0, x, h);
    let r = gate(cell, 1, x, h);
    let rh: Mat = h
        .iter()
        .zip(&r)
        .map(|(hr, rr)| hr.iter().zip(rr).map(|(a, b)| a * sigmoid(*b)).collect())
        .collect();
    let cand = gate(cell, 2, x, &rh);
    let mut out = h.clone();
    for i in 0..x.len() {
        for j in 0..x[0].len() {
            let zz = sigmoid(z[i][j]);
            out[i][j] = (1.0 - zz) * h[i][j] + zz * cand[i][j].tanh();
        }
    }
    out
}

/// Patch embedding straight from pixel coordinates.
pub fn embed(image: &Tensor<f64>, bb: &BackboneWeights<f64>) -> Mat {
    let c = bb.config;
    let (p, w) = (c.patch, c.image_w);
    let gw = w / p;
    let px = image.data();
    let pw = mat(&bb.patch_w);
    (0..c.num_patches())
        .map(|n| {
            let (pr, pc) = (n / gw, n % gw);
            let mut feats = Vec::new();
            for ch in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        feats.push(px[ch * c.image_h * w + (pr * p + i) * w + pc * p + j]);
                    }
                }
            }
            (0..c.dim)
                .map(|d| {
                    let mut s = bb.patch_b.data()[d] + bb.pos_embed.data()[n * c.dim + d];
                    for (k, f) in feats.iter().enumerate() {
                        s += f * pw[k][d];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Per-block record of the oracle forward.
pub struct OracleBlock {
    pub prompts_out: Mat,
    pub patches_out: Mat,
    pub attention: Vec<Mat>,
    pub next_prompts: Option<Mat>,
}

/// Hand-unrolled prompted forward for every strategy except k-means coding.
pub fn prompted_forward(
    image: &Tensor<f64>,
    bb: &BackboneWeights<f64>,
    bank: &PromptBank<f64>,
    strategy: StrategyKind,
) -> (Vec<f64>, Vec<OracleBlock>) {
    use StrategyKind as S;
    let c = bb.config;
    let blocks = bb.blocks.len();
    let n = c.num_patches();
    let np = if strategy == S::LinearProbe { 0 } else { bank.num_prompts };
    let mut cls = mat(&bb.class_token);
    let mut prompts: Mat = if np == 0 { Vec::new() } else { mat(&bank.prompts[0]) };
    let mut patches = embed(image, bb);
    let mut cell_state = vec![vec![0.0; c.dim]; np];
    let mut record = Vec::new();
    for l in 1..=blocks {
        let mut seq = cls.clone();
        seq.extend(prompts.iter().cloned());
        seq.extend(patches.iter().cloned());
        let (out, attention) = layer(&seq, &bb.blocks[l - 1], c.heads);
        cls = vec![out[0].clone()];
        let p_out: Mat = out[1..1 + np].to_vec();
        patches = out[1 + np..1 + np + n].to_vec();
        let next = if l < blocks && np > 0 {
            let fresh = || mat(&bank.prompts[l]);
            let mean: Vec<f64> = (0..c.dim)
                .map(|j| patches.iter().map(|r| r[j]).sum::<f64>() / n as f64)
                .collect();
            let spatial = add_row(&p_out, &mean);
            let cell = || &bank.cells[if bank.cells.len() > 1 { l - 1 } else { 0 }];
            Some(match strategy {
                S::LinearProbe | S::LsptKMeans => unreachable!("not covered by the oracle"),
                S::VptShallow => p_out.clone(),
                S::VptDeep => fresh(),
                S::LsptGspcOnly => add(&spatial, &fresh()),
                S::Lspt => {
                    let (h, cn) = lstm(cell(), &fresh(), &spatial, &cell_state);
                    cell_state = cn;
                    h
                }
                S::LsptLpcOnly => {
                    let (h, cn) = lstm(cell(), &fresh(), &p_out, &cell_state);
                    cell_state = cn;
                    h
                }
                S::LsptGru => gru(cell(), &fresh(), &spatial),
                S::LsptTransformer => {
                    let mut seq = spatial.clone();
                    seq.extend(fresh());
                    let (o, _) = layer(&seq, bank.aggregator.as_ref().unwrap(), c.heads);
                    o[np..].to_vec()
                }
            })
        } else {
            None
        };
        if let Some(p) = &next {
            prompts = p.clone();
        } else {
            prompts = p_out.clone();
        }
        record.push(OracleBlock {
            prompts_out: p_out,
            patches_out: patches.clone(),
            attention,
            next_prompts: next,
        });
    }
    let feat = layernorm(&cls, bb.norm_gamma.data(), bb.norm_beta.data());
    let logits = affine(&feat, &bank.head_w, &bank.head_b).remove(0);
    (logits, record)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
