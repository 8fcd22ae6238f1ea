//! Shared test support: an independent f64 reference implementation of the
//! forward pipeline, central finite differences on top of it, and random
//! hierarchy generators.
//!
//! The reference path is written as plain loops over f64 slices, separate
//! from the f32 tape engine it checks. Gradient checks compare the engine's
//! analytic gradients against central differences of this reference.

#![allow(dead_code)]

use pemi_core::encoder::{EncoderModel, PromptPositional};
use pemi_core::hlr::{HierarchySpec, LabelHierarchy};
use pemi_core::model::PemiModel;
use pemi_core::template::ModifiedInput;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

pub const FD_STEP: f64 = 1e-3;

/// Asserts elementwise closeness with a relative tolerance; coordinates
/// where both values sit below `abs_floor` are treated as zero.
pub fn assert_close(analytic: &[f32], numeric: &[f64], rel_tol: f64, abs_floor: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        let denom = a.abs().max(n.abs());
        if denom <= abs_floor {
            continue;
        }
        let rel = (a - n).abs() / denom;
        assert!(
            rel < rel_tol,
            "{what}[{i}]: analytic {a} vs numeric {n} (rel err {rel:.3e} >= {rel_tol:.0e})"
        );
    }
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = f(&probe);
        probe[i] = orig - FD_STEP;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    grad
}

// ---------------------------------------------------------------------------
// f64 reference primitives
// ---------------------------------------------------------------------------

pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn ref_row_softmax(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (row[j] - max).exp() / sum;
        }
    }
    out
}

pub fn ref_layer_norm(x: &[f64], gain: &[f64], bias: &[f64], m: usize, n: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sigma = (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) / sigma * gain[j] + bias[j];
        }
    }
    out
}

pub fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn ref_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    (max + sum.ln()) - logits[target]
}

// ---------------------------------------------------------------------------
// f64 reference model
// ---------------------------------------------------------------------------

/// Frozen encoder parameters and dimensions, lifted to f64.
pub struct RefEncoder {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub arrays: HashMap<String, Vec<f64>>,
    pub d_ff: usize,
}

impl RefEncoder {
    pub fn from_model(model: &EncoderModel) -> Self {
        let cfg = model.config();
        let arrays = model
            .named_arrays()
            .into_iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>(),
                )
            })
            .collect();
        RefEncoder {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            max_seq_len: cfg.max_seq_len,
            d_ff: cfg.d_ff,
            arrays,
        }
    }

    /// Reference h' at the mask position (prompts kept at real positions).
    pub fn h_prime(&self, input: &ModifiedInput, prompt: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        let n = input.ids.len();
        let tok = &self.arrays["token_embedding"];
        let pos = &self.arrays["position_embedding"];
        let mut x = vec![0.0f64; n * d];
        for (i, &id) in input.ids.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(&tok[id * d..(id + 1) * d]);
        }
        for (slot_row, &p) in input.prompt_slots.iter().enumerate() {
            x[p * d..(p + 1) * d].copy_from_slice(&prompt[slot_row * d..(slot_row + 1) * d]);
        }
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += pos[i * d + j];
            }
        }

        let heads = self.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let eps = 1e-5f64;
        for layer in 0..self.n_layers {
            let a = |name: &str| &self.arrays[&format!("layer{layer}.{name}")];
            let q = add_bias(&ref_matmul(&x, a("attn.wq"), n, d, d), a("attn.bq"), n, d);
            let k = add_bias(&ref_matmul(&x, a("attn.wk"), n, d, d), a("attn.bk"), n, d);
            let v = add_bias(&ref_matmul(&x, a("attn.wv"), n, d, d), a("attn.bv"), n, d);
            let mut ctx = vec![0.0f64; n * d];
            for h in 0..heads {
                let qh = slice_cols(&q, n, d, h * dh, (h + 1) * dh);
                let kh = slice_cols(&k, n, d, h * dh, (h + 1) * dh);
                let vh = slice_cols(&v, n, d, h * dh, (h + 1) * dh);
                let kt = transpose(&kh, n, dh);
                let mut scores = ref_matmul(&qh, &kt, n, dh, n);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                let probs = ref_row_softmax(&scores, n, n);
                let ctx_h = ref_matmul(&probs, &vh, n, n, dh);
                for i in 0..n {
                    for j in 0..dh {
                        ctx[i * d + h * dh + j] = ctx_h[i * dh + j];
                    }
                }
            }
            let attn = add_bias(&ref_matmul(&ctx, a("attn.wo"), n, d, d), a("attn.bo"), n, d);
            let res: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            x = ref_layer_norm(&res, a("ln1.gain"), a("ln1.bias"), n, d, eps);

            let f1 = add_bias(
                &ref_matmul(&x, a("ffn.w1"), n, d, self.d_ff),
                a("ffn.b1"),
                n,
                self.d_ff,
            );
            let f1: Vec<f64> = f1.iter().map(|&v| ref_gelu(v)).collect();
            let f2 = add_bias(
                &ref_matmul(&f1, a("ffn.w2"), n, self.d_ff, d),
                a("ffn.b2"),
                n,
                d,
            );
            let res: Vec<f64> = x.iter().zip(&f2).map(|(a, b)| a + b).collect();
            x = ref_layer_norm(&res, a("ln2.gain"), a("ln2.bias"), n, d, eps);
        }

        let h_mask = x[input.mask_position * d..(input.mask_position + 1) * d].to_vec();
        let t = add_bias(
            &ref_matmul(&h_mask, &self.arrays["head.w"], 1, d, d),
            &self.arrays["head.b"],
            1,
            d,
        );
        let t: Vec<f64> = t.iter().map(|&v| ref_gelu(v)).collect();
        ref_layer_norm(
            &t,
            &self.arrays["head.ln.gain"],
            &self.arrays["head.ln.bias"],
            1,
            d,
            eps,
        )
    }
}

fn add_bias(x: &[f64], bias: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += bias[j];
        }
    }
    out
}

fn slice_cols(x: &[f64], m: usize, n: usize, start: usize, end: usize) -> Vec<f64> {
    let w = end - start;
    let mut out = Vec::with_capacity(m * w);
    for i in 0..m {
        out.extend_from_slice(&x[i * n + start..i * n + end]);
    }
    out
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Hierarchy structure lifted for the reference refine path.
pub struct RefHierarchy {
    pub level_sizes: Vec<usize>,
    /// edges[z-1] between 1-based level z and z+1
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl RefHierarchy {
    pub fn from_hierarchy(h: &LabelHierarchy) -> Self {
        let level_sizes = (1..=h.num_levels()).map(|z| h.level_size(z)).collect();
        let edges = (1..h.num_levels())
            .map(|z| h.edges_at(z).to_vec())
            .collect();
        RefHierarchy { level_sizes, edges }
    }

    /// Reference refine: per-parent softmax over the support set, weighted
    /// sums computed as explicit loops over edges.
    pub fn refine(&self, bottom: &[f64], d: usize, units: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let z_levels = self.level_sizes.len();
        let mut out = vec![Vec::new(); z_levels];
        out[z_levels - 1] = bottom.to_vec();
        for z in (1..z_levels).rev() {
            let rows = self.level_sizes[z - 1];
            let mut m = vec![0.0f64; rows * d];
            for parent in 0..rows {
                let edge_ids: Vec<usize> = self.edges[z - 1]
                    .iter()
                    .enumerate()
                    .filter(|(_, (p, _))| *p == parent)
                    .map(|(i, _)| i)
                    .collect();
                let vals: Vec<f64> = edge_ids.iter().map(|&i| units[z - 1][i]).collect();
                let zsum: f64 = vals.iter().map(|v| v.exp()).sum();
                for (&eid, &val) in edge_ids.iter().zip(&vals) {
                    let w = val.exp() / zsum;
                    let child = self.edges[z - 1][eid].1;
                    for col in 0..d {
                        m[parent * d + col] += w * out[z][child * d + col];
                    }
                }
            }
            out[z - 1] = m;
        }
        out
    }
}

/// Perturbable copy of the delta set in f64, flattened per group.
pub struct RefDelta {
    pub prompt: Vec<f64>,
    pub bottom: Vec<f64>,
    pub units: Vec<Vec<f64>>,
}

impl RefDelta {
    pub fn of(model: &PemiModel) -> Self {
        RefDelta {
            prompt: model.prompt.data().iter().map(|&v| v as f64).collect(),
            bottom: model
                .verbalizer
                .bottom
                .data()
                .iter()
                .map(|&v| v as f64)
                .collect(),
            units: (1..model.num_levels())
                .map(|z| {
                    model
                        .verbalizer
                        .units
                        .level(z)
                        .data()
                        .iter()
                        .map(|&v| v as f64)
                        .collect()
                })
                .collect(),
        }
    }
}

/// Reference joint loss for one instance given a perturbed delta set.
pub fn ref_joint_loss(
    enc: &RefEncoder,
    hier: &RefHierarchy,
    input: &ModifiedInput,
    delta: &RefDelta,
    labels: &[usize],
    lambda: &[f64],
) -> f64 {
    let d = enc.d_model;
    let h_prime = enc.h_prime(input, &delta.prompt);
    let matrices = hier.refine(&delta.bottom, d, &delta.units);
    let mut joint = 0.0f64;
    for (z, (&label, &weight)) in labels.iter().zip(lambda).enumerate() {
        if weight == 0.0 {
            continue;
        }
        let rows = hier.level_sizes[z];
        let mut logits = vec![0.0f64; rows];
        for r in 0..rows {
            logits[r] = (0..d).map(|c| matrices[z][r * d + c] * h_prime[c]).sum();
        }
        joint += weight * ref_cross_entropy(&logits, label);
    }
    joint
}

/// Sanity guard for the reference path: the engine uses prompts at kept
/// positions; the reference assumes the same.
pub fn assert_kept(model: &PemiModel) {
    assert_eq!(model.prompt_positional, PromptPositional::Kept);
}

// ---------------------------------------------------------------------------
// random hierarchies
// ---------------------------------------------------------------------------

/// A random valid hierarchy: 2..=4 levels, at most 30 nodes, many-to-many
/// edges allowed.
pub fn random_hierarchy(rng: &mut ChaCha20Rng) -> LabelHierarchy {
    loop {
        let z_levels = rng.gen_range(2..=4usize);
        let mut sizes = Vec::with_capacity(z_levels);
        let mut remaining = 30usize - z_levels;
        for level in 0..z_levels {
            let max_here = (remaining / (z_levels - level)).max(1).min(9);
            let s = rng.gen_range(1..=max_here);
            sizes.push(s);
            remaining -= s.min(remaining);
        }
        let levels: Vec<Vec<String>> = sizes
            .iter()
            .enumerate()
            .map(|(z, &s)| (0..s).map(|i| format!("n{z}_{i}")).collect())
            .collect();
        let mut edges = Vec::new();
        for z in 1..z_levels {
            let parents = sizes[z - 1];
            let children = sizes[z];
            let mut parent_used = vec![false; parents];
            for c in 0..children {
                let k = rng.gen_range(1..=parents.min(3));
                let mut picked: Vec<usize> = (0..parents).collect();
                for _ in 0..(parents - k) {
                    let drop = rng.gen_range(0..picked.len());
                    picked.remove(drop);
                }
                for p in picked {
                    parent_used[p] = true;
                    edges.push((z, format!("n{}_{p}", z - 1), format!("n{z}_{c}")));
                }
            }
            for (p, used) in parent_used.iter().enumerate() {
                if !used {
                    let c = rng.gen_range(0..children);
                    edges.push((z, format!("n{}_{p}", z - 1), format!("n{z}_{c}")));
                }
            }
        }
        // the fixup edge can duplicate an existing one; retry in that case
        let spec = HierarchySpec { levels, edges };
        if let Ok(h) = LabelHierarchy::from_spec(&spec) {
            return h;
        }
    }
}
