//! Compact frozen transformer MLM encoder and head transform.
//!
//! Post-layer-norm blocks with learned positional embeddings, dropout fixed
//! at zero. Soft prompts are injected at the embedding layer only: rows of
//! the prompt matrix replace the embedding lookup at the recorded prompt
//! slots, bypassing the vocabulary table. The head transform is the
//! pre-projection part of an MLM head (dense, GELU, layer norm); its output
//! h' feeds the verbalizer. Every parameter here is frozen: gradients flow
//! through the stack into the prompts but never update the encoder.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::template::ModifiedInput;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f32 = 1e-5;

/// Whether positional embeddings are added at prompt slots or zeroed there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptPositional {
    #[default]
    Kept,
    Zeroed,
}

impl std::str::FromStr for PromptPositional {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kept" => Ok(PromptPositional::Kept),
            "zeroed" => Ok(PromptPositional::Zeroed),
            other => Err(Error::Config(format!(
                "unknown prompt positional mode {other:?} (expected kept or zeroed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small default that trains in minutes on a CPU.
    pub fn toy_default(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Shapes of every parameter array, in canonical order.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut shapes = vec![
            ("token_embedding".to_string(), vec![self.vocab_size, d]),
            ("position_embedding".to_string(), vec![self.max_seq_len, d]),
        ];
        for i in 0..self.n_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("layer{i}.attn.{name}"), vec![d, d]));
                shapes.push((format!("layer{i}.attn.{}", name.replace('w', "b")), vec![d]));
            }
            shapes.push((format!("layer{i}.ln1.gain"), vec![d]));
            shapes.push((format!("layer{i}.ln1.bias"), vec![d]));
            shapes.push((format!("layer{i}.ffn.w1"), vec![d, self.d_ff]));
            shapes.push((format!("layer{i}.ffn.b1"), vec![self.d_ff]));
            shapes.push((format!("layer{i}.ffn.w2"), vec![self.d_ff, d]));
            shapes.push((format!("layer{i}.ffn.b2"), vec![d]));
            shapes.push((format!("layer{i}.ln2.gain"), vec![d]));
            shapes.push((format!("layer{i}.ln2.bias"), vec![d]));
        }
        shapes.push(("head.w".to_string(), vec![d, d]));
        shapes.push(("head.b".to_string(), vec![d]));
        shapes.push(("head.ln.gain".to_string(), vec![d]));
        shapes.push(("head.ln.bias".to_string(), vec![d]));
        shapes
    }

    /// Width-scaled initialization std for weights and embeddings. The
    /// reference encoder family uses 0.02 at d=768; a frozen random encoder
    /// needs the scale tied to its width or projections attenuate the
    /// signal reaching the mask position.
    pub fn init_std(&self) -> f32 {
        1.0 / (self.d_model as f32).sqrt()
    }

    /// Closed-form total parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 4 * d      // attention weights and biases
            + 2 * d                            // ln1
            + 2 * d * self.d_ff + self.d_ff + d // ffn
            + 2 * d; // ln2
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d * d + 3 * d
    }
}

/// Hidden state at the mask position before and after the head transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h_mask: Tensor,
    pub h_prime: Tensor,
}

/// The frozen encoder. Immutable during training; concurrent read-only
/// forwards are safe.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    arrays: HashMap<String, Tensor>,
    order: Vec<String>,
}

/// Tape node ids of the frozen encoder leaves, inserted once per tape.
pub struct EncoderNodes {
    ids: HashMap<String, NodeId>,
}

impl EncoderModel {
    /// Initializes embeddings, attention, FFN, and head weights (and their
    /// biases) from Normal(0, 0.02) using the config seed, drawing arrays in
    /// canonical order. Layer-norm parameters start at unit gain and zero
    /// bias; a tiny random gain would shrink the residual stream ~50x per
    /// block and starve the mask position of input signal. All parameters
    /// are frozen.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let std = config.init_std();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut arrays = HashMap::new();
        let mut order = Vec::new();
        for (name, shape) in config.expected_shapes() {
            let t = if name.contains("ln") && name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if name.contains("ln") && name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, std, &mut rng)
            };
            arrays.insert(name.clone(), t);
            order.push(name);
        }
        Ok(EncoderModel {
            config: config.clone(),
            arrays,
            order,
        })
    }

    /// Rebuilds a model from named arrays, validating names and shapes.
    pub fn from_arrays(config: &EncoderConfig, mut arrays: HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut order = Vec::new();
        let mut checked = HashMap::new();
        for (name, shape) in config.expected_shapes() {
            let t = arrays.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing array {name:?}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            checked.insert(name.clone(), t);
            order.push(name);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra:?}")));
        }
        Ok(EncoderModel {
            config: config.clone(),
            arrays: checked,
            order,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Parameter arrays in canonical order. Every parameter appears exactly
    /// once; all are frozen.
    pub fn named_arrays(&self) -> Vec<(&str, &Tensor)> {
        self.order
            .iter()
            .map(|n| (n.as_str(), &self.arrays[n]))
            .collect()
    }

    pub fn array(&self, name: &str) -> &Tensor {
        &self.arrays[name]
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.arrays["token_embedding"]
    }

    pub fn param_count(&self) -> usize {
        self.order.iter().map(|n| self.arrays[n].numel()).sum()
    }

    /// Registers every encoder array as a frozen leaf on the tape.
    pub fn insert_leaves(&self, tape: &mut Tape) -> Result<EncoderNodes> {
        let mut ids = HashMap::new();
        for name in &self.order {
            let id = tape.leaf(&self.arrays[name])?;
            ids.insert(name.clone(), id);
        }
        Ok(EncoderNodes { ids })
    }

    /// Full forward pass on a tape. Prompt rows replace the embedding lookup
    /// at the recorded prompt slots; gradients reach the prompt node through
    /// the frozen stack. Returns node ids of h_mask and h'.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &EncoderNodes,
        input: &ModifiedInput,
        prompt: NodeId,
        positional: PromptPositional,
    ) -> Result<(NodeId, NodeId)> {
        let n = input.ids.len();
        if n > self.config.max_seq_len {
            return Err(Error::Length(format!(
                "input length {n} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mask_count = input
            .ids
            .iter()
            .filter(|&&id| id == crate::template::Vocab::MASK_ID)
            .count();
        if mask_count != 1 || input.ids.get(input.mask_position) != Some(&crate::template::Vocab::MASK_ID) {
            return Err(Error::data(format!(
                "input must contain exactly one mask at the recorded position, found {mask_count}"
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::data(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let k = tape.value(prompt).rows();
        if k != input.prompt_slots.len() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![k, tape.value(prompt).cols()],
                rhs: vec![input.prompt_slots.len()],
            });
        }

        let d = self.config.d_model;
        let id = |name: &str| nodes.ids[name];

        let mut x = tape.gather_rows(id("token_embedding"), &input.ids)?;
        if k > 0 {
            x = tape.overwrite_rows(x, prompt, &input.prompt_slots)?;
        }
        let positions: Vec<usize> = (0..n).collect();
        let mut pos = tape.gather_rows(id("position_embedding"), &positions)?;
        if positional == PromptPositional::Zeroed && k > 0 {
            let zeros = tape.constant(Tensor::zeros(vec![k, d]))?;
            pos = tape.overwrite_rows(pos, zeros, &input.prompt_slots)?;
        }
        x = tape.add(x, pos)?;

        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for i in 0..self.config.n_layers {
            let p = |name: &str| nodes.ids[&format!("layer{i}.{name}")];
            let q = tape.matmul(x, p("attn.wq"))?;
            let q = tape.add_bias(q, p("attn.bq"))?;
            let kx = tape.matmul(x, p("attn.wk"))?;
            let kx = tape.add_bias(kx, p("attn.bk"))?;
            let v = tape.matmul(x, p("attn.wv"))?;
            let v = tape.add_bias(v, p("attn.bv"))?;

            let mut ctx_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(kx, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let probs = tape.row_softmax(scores, None)?;
                ctx_heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&ctx_heads)?;
            let attn = tape.matmul(ctx, p("attn.wo"))?;
            let attn = tape.add_bias(attn, p("attn.bo"))?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(res, p("ln1.gain"), p("ln1.bias"), LN_EPS)?;

            let f1 = tape.matmul(x, p("ffn.w1"))?;
            let f1 = tape.add_bias(f1, p("ffn.b1"))?;
            let f1 = tape.gelu(f1)?;
            let f2 = tape.matmul(f1, p("ffn.w2"))?;
            let f2 = tape.add_bias(f2, p("ffn.b2"))?;
            let res = tape.add(x, f2)?;
            x = tape.layer_norm(res, p("ln2.gain"), p("ln2.bias"), LN_EPS)?;
        }

        let h_mask = tape.gather_rows(x, &[input.mask_position])?;
        let h_prime = self.head_on_tape(tape, nodes, h_mask)?;
        Ok((h_mask, h_prime))
    }

    fn head_on_tape(&self, tape: &mut Tape, nodes: &EncoderNodes, h: NodeId) -> Result<NodeId> {
        let t = tape.matmul(h, nodes.ids["head.w"])?;
        let t = tape.add_bias(t, nodes.ids["head.b"])?;
        let t = tape.gelu(t)?;
        tape.layer_norm(t, nodes.ids["head.ln.gain"], nodes.ids["head.ln.bias"], LN_EPS)
    }

    /// Value-level forward pass; builds a throwaway tape internally.
    pub fn forward(
        &self,
        input: &ModifiedInput,
        prompt: &Tensor,
        positional: PromptPositional,
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let nodes = self.insert_leaves(&mut tape)?;
        let prompt_id = tape.constant(prompt.clone())?;
        let (hm, hp) = self.forward_on_tape(&mut tape, &nodes, input, prompt_id, positional)?;
        Ok(ForwardTrace {
            h_mask: flatten_row(tape.value(hm)),
            h_prime: flatten_row(tape.value(hp)),
        })
    }

    /// The frozen head transform alone: dense, GELU, layer norm.
    pub fn head_transform(&self, h_mask: &Tensor) -> Result<Tensor> {
        if h_mask.numel() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "head_transform",
                lhs: h_mask.shape().to_vec(),
                rhs: vec![self.config.d_model],
            });
        }
        let mut tape = Tape::new();
        let nodes = self.insert_leaves(&mut tape)?;
        let h = tape.constant(Tensor::from_vec(
            vec![1, self.config.d_model],
            h_mask.data().to_vec(),
        )?)?;
        let out = self.head_on_tape(&mut tape, &nodes, h)?;
        Ok(flatten_row(tape.value(out)))
    }
}

/// [1 x d] tape output to a plain length-d vector.
fn flatten_row(t: &Tensor) -> Tensor {
    Tensor::from_vec(vec![t.numel()], t.data().to_vec()).expect("row is finite")
}
