//! Plain nested-`Vec` reference implementations used as oracles. Nothing here
//! touches the tape.
#![allow(dead_code)]

use dmfuse::attention::{AttentionConfig, CmaParams, FfnParams, MhaParams};
use dmfuse::numcore::{ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    assert_eq!(s.len(), 2, "to_mat on {s:?}");
    (0..s[0]).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let cols = m[0].len();
    Tensor::new(&[m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn sdpa_ref(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let logits: Mat = matmul(q, &transpose(k))
        .into_iter()
        .map(|r| r.into_iter().map(|x| x * scale).collect())
        .collect();
    matmul(&softmax_rows(&logits), v)
}

pub fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| gamma[i] * (v - mu) / (var + eps).sqrt() + beta[i])
                .collect()
        })
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

pub fn permute_rows(a: &Mat, perm: &[usize]) -> Mat {
    perm.iter().map(|&p| a[p].clone()).collect()
}

pub fn permute_tensor_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    to_tensor(&permute_rows(&to_mat(t), perm))
}

/// Fisher–Yates permutation of `0..n`.
pub fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

/// Overlap of two `(x, y, w, h)` boxes from corner coordinates.
pub fn iou_ref(a: [f64; 4], b: [f64; 4]) -> f64 {
    if a[2] <= 0.0 || a[3] <= 0.0 || b[2] <= 0.0 || b[3] <= 0.0 {
        return 0.0;
    }
    let (ax1, ay1, bx1, by1) = (a[0] + a[2], a[1] + a[3], b[0] + b[2], b[1] + b[3]);
    let left = if a[0] > b[0] { a[0] } else { b[0] };
    let top = if a[1] > b[1] { a[1] } else { b[1] };
    let right = if ax1 < bx1 { ax1 } else { bx1 };
    let bottom = if ay1 < by1 { ay1 } else { by1 };
    if right <= left || bottom <= top {
        return 0.0;
    }
    let inter = (right - left) * (bottom - top);
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// One frame of a long-term evaluation: prediction box and confidence (or
/// none) against the ground truth (or none when the target is absent).
pub type Frame = (Option<([f64; 4], f64)>, Option<[f64; 4]>);

/// Direct double loop over thresholds `k / 100` and frames.
/// Returns `(pr, re, f)` per threshold.
pub fn pr_re_f_ref(frames: &[Frame]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for k in 0..=100 {
        let tau = k as f64 / 100.0;
        let mut np = 0usize;
        let mut ng = 0usize;
        let mut sp = 0.0;
        let mut sg = 0.0;
        for (pred, gt) in frames {
            if gt.is_some() {
                ng += 1;
            }
            if let Some((b, c)) = pred {
                if *c >= tau {
                    np += 1;
                    let o = match gt {
                        Some(g) => iou_ref(*b, *g),
                        None => 0.0,
                    };
                    sp += o;
                    sg += o;
                }
            }
        }
        let pr = if np == 0 { 0.0 } else { sp / np as f64 };
        let re = if ng == 0 { 0.0 } else { sg / ng as f64 };
        let f = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
        out.push((pr, re, f));
    }
    out
}

/// Fraction of overlaps above each threshold `k / 100`, and their mean.
pub fn success_ref(overlaps: &[f64]) -> (Vec<f64>, f64) {
    let mut curve = Vec::new();
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        let mut above = 0usize;
        for &s in overlaps {
            if s > t {
                above += 1;
            }
        }
        curve.push(above as f64 / overlaps.len() as f64);
    }
    let mut sum = 0.0;
    for v in &curve {
        sum += v;
    }
    let auc = sum / curve.len() as f64;
    (curve, auc)
}

/// A random 10-frame instance mixing hits, misses, absences and false alarms.
pub fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<Frame> {
    let rb = |rng: &mut ChaCha8Rng| -> [f64; 4] {
        [
            rng.gen_range(0.0..40.0),
            rng.gen_range(0.0..40.0),
            rng.gen_range(1.0..20.0),
            rng.gen_range(1.0..20.0),
        ]
    };
    (0..n)
        .map(|_| {
            let gt = if rng.gen_bool(0.8) { Some(rb(rng)) } else { None };
            let pred = if rng.gen_bool(0.85) {
                let b = match gt {
                    Some(g) if rng.gen_bool(0.7) => [
                        g[0] + rng.gen_range(-4.0..4.0),
                        g[1] + rng.gen_range(-4.0..4.0),
                        g[2] * rng.gen_range(0.7..1.3),
                        g[3] * rng.gen_range(0.7..1.3),
                    ],
                    _ => rb(rng),
                };
                // Confidences on the sweep grid exercise the `>=` boundary.
                let c = if rng.gen_bool(0.3) {
                    rng.gen_range(0..=100) as f64 / 100.0
                } else {
                    rng.gen_range(0.0..=1.0)
                };
                Some((b, c))
            } else {
                None
            };
            (pred, gt)
        })
        .collect()
}

pub fn store_mat(store: &ParamStore, id: ParamId) -> Mat {
    to_mat(store.value(id))
}

pub fn mha_oracle(store: &ParamStore, p: &MhaParams, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let heads: Vec<Mat> = (0..p.w_q.len())
        .map(|i| {
            sdpa_ref(
                &matmul(q, &store_mat(store, p.w_q[i])),
                &matmul(k, &store_mat(store, p.w_k[i])),
                &matmul(v, &store_mat(store, p.w_v[i])),
            )
        })
        .collect();
    let cat: Mat = (0..q.len())
        .map(|r| heads.iter().flat_map(|h| h[r].clone()).collect())
        .collect();
    matmul(&cat, &store_mat(store, p.w_o))
}

pub fn ffn_oracle(store: &ParamStore, p: &FfnParams, x: &Mat) -> Mat {
    let h = relu(&add_row(&matmul(x, &store_mat(store, p.w1)), store.value(p.b1).data()));
    add_row(&matmul(&h, &store_mat(store, p.w2)), store.value(p.b2).data())
}

pub fn cma_oracle(store: &ParamStore, p: &CmaParams, cfg: &AttentionConfig, d: &Mat, i: &Mat, pe_d: &Mat, pe_i: &Mat) -> Mat {
    let v = |id| store.value(id).data().to_vec();
    let attn = mha_oracle(store, &p.mha, &add(d, pe_d), &add(i, pe_i), i);
    let f = layer_norm(&add(d, &attn), &v(p.norm1_gamma), &v(p.norm1_beta), cfg.layer_norm_epsilon);
    let ff = ffn_oracle(store, &p.ffn, &f);
    layer_norm(&add(&f, &ff), &v(p.norm2_gamma), &v(p.norm2_beta), cfg.layer_norm_epsilon)
}
