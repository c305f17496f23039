//! Shared helpers for the integration suites: central finite differences,
//! parameter flattening, and a straight-line reference forward pass kept
//! independent of the graph implementation.

#![allow(dead_code)]

use storylab_core::model::{Model, ModelSpec};

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between two gradients, with an absolute
/// floor so near-zero entries do not explode the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs()).max(1e-6);
            (a - n).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// All model parameters as one flat vector, canonical order.
pub fn flatten_params(model: &Model) -> Vec<f64> {
    let mut flat = Vec::new();
    model.for_each_param(|_, t| flat.extend_from_slice(t.values()));
    flat
}

/// Overwrite model parameters from a flat vector.
pub fn unflatten_params(model: &mut Model, flat: &[f64]) {
    let mut offset = 0;
    model.for_each_param_mut(|_, t| {
        let n = t.numel();
        t.values_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.len());
}

/// Gradients of all parameters flattened in canonical order, given a graph
/// whose staged parameter node ids are supplied.
pub fn flatten_grads(
    graph: &storylab_core::Graph,
    ids: &[storylab_core::NodeId],
) -> Vec<f64> {
    let mut flat = Vec::new();
    for &id in ids {
        match graph.grad(id) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.resize(flat.len() + graph.tensor(id).numel(), 0.0),
        }
    }
    flat
}

pub fn gradcheck_spec() -> ModelSpec {
    ModelSpec {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 8,
        tie_embeddings: true,
        dropout: 0.0,
    }
}

// ---------------------------------------------------------------------
// Independent straight-line forward pass (no graph machinery). Used as an
// oracle for the model's logits. Mirrors the architecture definition:
// learned token+position embeddings, pre-norm blocks, causal multi-head
// attention, tanh-approximation gelu MLP, final norm, tied output head.
// ---------------------------------------------------------------------

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn ref_layer_norm(x: &mut [f64], gain: &[f64], bias: &[f64], n: usize, eps: f64) {
    for row in x.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Reference logits `[T, V]` for a tied-embedding model.
pub fn reference_forward(model: &Model, ids: &[u32]) -> Vec<f64> {
    let spec = &model.spec;
    let (d, t_len) = (spec.d_model, ids.len());
    let n_heads = spec.n_heads;
    let d_head = d / n_heads;
    let tok = model.tok_emb.values();
    let pos = model.pos_emb.values();

    let mut x = vec![0.0; t_len * d];
    for (t, &id) in ids.iter().enumerate() {
        for j in 0..d {
            x[t * d + j] = tok[id as usize * d + j] + pos[t * d + j];
        }
    }

    for layer in &model.layers {
        // attention
        let mut normed = x.clone();
        ref_layer_norm(
            &mut normed,
            layer.ln1_gain.values(),
            layer.ln1_bias.values(),
            d,
            1e-5,
        );
        let mut qkv = ref_matmul(&normed, layer.w_qkv.values(), t_len, d, 3 * d);
        for row in qkv.chunks_mut(3 * d) {
            for (v, b) in row.iter_mut().zip(layer.b_qkv.values()) {
                *v += b;
            }
        }
        let mut merged = vec![0.0; t_len * d];
        for h in 0..n_heads {
            for tq in 0..t_len {
                // attention weights over prefix positions
                let mut scores = vec![f64::NEG_INFINITY; t_len];
                for tk in 0..=tq {
                    let mut dot = 0.0;
                    for j in 0..d_head {
                        let q = qkv[tq * 3 * d + h * d_head + j];
                        let k = qkv[tk * 3 * d + d + h * d_head + j];
                        dot += q * k;
                    }
                    scores[tk] = dot / (d_head as f64).sqrt();
                }
                let max = scores[..=tq].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights = vec![0.0; t_len];
                let mut total = 0.0;
                for tk in 0..=tq {
                    weights[tk] = (scores[tk] - max).exp();
                    total += weights[tk];
                }
                for w in weights.iter_mut() {
                    *w /= total;
                }
                for j in 0..d_head {
                    let mut acc = 0.0;
                    for tk in 0..=tq {
                        acc += weights[tk] * qkv[tk * 3 * d + 2 * d + h * d_head + j];
                    }
                    merged[tq * d + h * d_head + j] = acc;
                }
            }
        }
        let mut attn_out = ref_matmul(&merged, layer.w_out.values(), t_len, d, d);
        for row in attn_out.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(layer.b_out.values()) {
                *v += b;
            }
        }
        for (xv, av) in x.iter_mut().zip(&attn_out) {
            *xv += av;
        }

        // feed-forward
        let mut normed2 = x.clone();
        ref_layer_norm(
            &mut normed2,
            layer.ln2_gain.values(),
            layer.ln2_bias.values(),
            d,
            1e-5,
        );
        let mut h1 = ref_matmul(&normed2, layer.w_ff1.values(), t_len, d, spec.d_ff);
        for row in h1.chunks_mut(spec.d_ff) {
            for (v, b) in row.iter_mut().zip(layer.b_ff1.values()) {
                *v = ref_gelu(*v + b);
            }
        }
        let mut h2 = ref_matmul(&h1, layer.w_ff2.values(), t_len, spec.d_ff, d);
        for row in h2.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(layer.b_ff2.values()) {
                *v += b;
            }
        }
        for (xv, hv) in x.iter_mut().zip(&h2) {
            *xv += hv;
        }
    }

    ref_layer_norm(
        &mut x,
        model.ln_f_gain.values(),
        model.ln_f_bias.values(),
        d,
        1e-5,
    );
    // tied head: logits = x @ tok_emb^T
    let v = spec.vocab_size;
    let mut logits = vec![0.0; t_len * v];
    for t in 0..t_len {
        for w in 0..v {
            let mut acc = 0.0;
            for j in 0..d {
                acc += x[t * d + j] * tok[w * d + j];
            }
            logits[t * v + w] = acc;
        }
    }
    logits
}
