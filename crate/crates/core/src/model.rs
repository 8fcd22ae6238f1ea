//! The assembled pipeline: template -> frozen encoder -> refined verbalizer
//! -> per-level predictions.
//!
//! Exactly three parameter groups train (the delta set): the soft prompt
//! matrix, the bottom-level label embeddings, and the per-edge weight units.
//! Everything else is frozen. Each instance runs on its own tape, so batches
//! and evaluation sets can fan out across threads.

use crate::data::Instance;
use crate::encoder::{EncoderModel, PromptPositional};
use crate::error::{Error, Result};
use crate::hlr::{LabelHierarchy, Normalization, VerbalizerState};
use crate::tape::Tape;
use crate::template::{apply_template, ModifiedInput, PromptTemplate, Vocab};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

/// A trainable parameter group of the delta set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Prompt,
    Bottom,
    /// Units between 1-based level z and z+1.
    Units(usize),
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamKey::Prompt => write!(f, "prompt"),
            ParamKey::Bottom => write!(f, "bottom_embeddings"),
            ParamKey::Units(z) => write!(f, "units.{z}"),
        }
    }
}

/// Gradients for the delta set, keyed deterministically.
pub type DeltaGrads = BTreeMap<ParamKey, Tensor>;

/// Trainable/frozen split over every registered parameter.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    pub trainable: Vec<(String, usize)>,
    pub frozen: Vec<(String, usize)>,
}

impl ParameterPartition {
    pub fn trainable_total(&self) -> usize {
        self.trainable.iter().map(|(_, n)| n).sum()
    }

    pub fn frozen_total(&self) -> usize {
        self.frozen.iter().map(|(_, n)| n).sum()
    }
}

/// Trainable-parameter breakdown: K*d prompts, |L^Z|*d bottom embeddings,
/// one unit per edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub prompt: usize,
    pub bottom: usize,
    pub units: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.prompt + self.bottom + self.units
    }
}

/// Closed-form trainable count from the shape parameters alone.
pub fn count_trainable(prompt_count: usize, d_model: usize, bottom_labels: usize, edges: usize) -> ParamBreakdown {
    ParamBreakdown {
        prompt: prompt_count * d_model,
        bottom: bottom_labels * d_model,
        units: edges,
    }
}

/// Per-instance training outputs: loss values, delta gradients, argmaxes.
#[derive(Debug, Clone)]
pub struct InstanceEval {
    pub per_level_losses: Vec<f32>,
    pub joint_loss: f32,
    pub grads: DeltaGrads,
}

/// The complete model. The encoder is immutable during training; the three
/// delta groups are updated by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PemiModel {
    pub encoder: EncoderModel,
    pub prompt: Tensor,
    pub verbalizer: VerbalizerState,
    pub template: PromptTemplate,
    pub vocab: Vocab,
    pub hierarchy: LabelHierarchy,
    pub prompt_positional: PromptPositional,
}

impl PemiModel {
    /// Builds a fresh model. The prompt matrix draws Normal(0, 0.02) rows
    /// from `seed`; the verbalizer warm-starts bottom rows from the token
    /// embedding of each label's first in-vocabulary token when
    /// `warm_start` is set, falling back to Normal(0, 0.02).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        encoder: EncoderModel,
        template: PromptTemplate,
        vocab: Vocab,
        hierarchy: LabelHierarchy,
        seed: u64,
        normalization: Normalization,
        prompt_positional: PromptPositional,
        warm_start: bool,
    ) -> Result<Self> {
        let d = encoder.d_model();
        let k = template.prompt_count();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let prompt = Tensor::randn(vec![k, d], 0.02, &mut rng).with_grad();
        let warm = warm_start.then(|| (encoder.token_embedding(), &vocab));
        let verbalizer = VerbalizerState::init(&hierarchy, d, seed.wrapping_add(1), normalization, warm);
        Ok(PemiModel {
            encoder,
            prompt,
            verbalizer,
            template,
            vocab,
            hierarchy,
            prompt_positional,
        })
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model()
    }

    pub fn num_levels(&self) -> usize {
        self.hierarchy.num_levels()
    }

    /// Templates an instance and resolves its gold label indices.
    pub fn encode_instance(&self, instance: &Instance, line: usize) -> Result<(ModifiedInput, Vec<usize>)> {
        let input = apply_template(
            &self.template,
            &instance.arg1,
            &instance.arg2,
            &self.vocab,
            self.encoder.config().max_seq_len,
        )?;
        let indices = crate::data::validate_instance(instance, &self.hierarchy, line)?;
        Ok((input, indices))
    }

    /// The exhaustive, disjoint trainable/frozen partition over every
    /// registered parameter.
    pub fn partition(&self) -> ParameterPartition {
        let mut trainable = vec![
            ("prompt".to_string(), self.prompt.numel()),
            ("bottom_embeddings".to_string(), self.verbalizer.bottom.numel()),
        ];
        for z in 1..self.hierarchy.num_levels() {
            trainable.push((format!("units.{z}"), self.verbalizer.units.level(z).numel()));
        }
        let frozen = self
            .encoder
            .named_arrays()
            .iter()
            .map(|(n, t)| (format!("encoder.{n}"), t.numel()))
            .collect();
        ParameterPartition { trainable, frozen }
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        count_trainable(
            self.template.prompt_count(),
            self.d_model(),
            self.hierarchy.bottom_size(),
            self.hierarchy.edge_count(),
        )
    }

    /// Forward + backward for one instance on a fresh tape. The joint loss
    /// sums lambda-weighted per-level losses (zero-weight levels contribute
    /// neither value nor gradient); per-level loss values are reported for
    /// every level regardless.
    pub fn instance_grads(
        &self,
        input: &ModifiedInput,
        label_indices: &[usize],
        lambda: &[f32],
    ) -> Result<InstanceEval> {
        let z_levels = self.num_levels();
        if label_indices.len() != z_levels || lambda.len() != z_levels {
            return Err(Error::data(format!(
                "expected {z_levels} labels and lambda weights, got {} and {}",
                label_indices.len(),
                lambda.len()
            )));
        }
        let mut tape = Tape::new();
        let enc_nodes = self.encoder.insert_leaves(&mut tape)?;
        let prompt_id = tape.leaf(&self.prompt)?;
        let verb_nodes = self.verbalizer.insert_leaves(&mut tape)?;

        let (_, h_prime) =
            self.encoder
                .forward_on_tape(&mut tape, &enc_nodes, input, prompt_id, self.prompt_positional)?;
        let matrices = self
            .verbalizer
            .refine_on_tape(&mut tape, &self.hierarchy, &verb_nodes)?;

        let mut per_level_losses = Vec::with_capacity(z_levels);
        let mut joint = None;
        for z in 1..=z_levels {
            let mt = tape.transpose(matrices[z - 1])?;
            let logits = tape.matmul(h_prime, mt)?;
            let loss = tape.cross_entropy_logits(logits, label_indices[z - 1])?;
            per_level_losses.push(tape.value(loss).data()[0]);
            let weight = lambda[z - 1];
            if weight != 0.0 {
                let weighted = tape.scale(loss, weight)?;
                joint = Some(match joint {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted)?,
                });
            }
        }
        let joint = joint.ok_or_else(|| {
            Error::Config("joint loss needs at least one nonzero lambda".into())
        })?;
        let joint_loss = tape.value(joint).data()[0];

        let table = tape.backward(joint)?;
        let mut grads = DeltaGrads::new();
        let missing = |key: ParamKey| Error::Tape(format!("missing gradient for {key}"));
        grads.insert(
            ParamKey::Prompt,
            table.get(prompt_id).cloned().ok_or_else(|| missing(ParamKey::Prompt))?,
        );
        grads.insert(
            ParamKey::Bottom,
            table
                .get(verb_nodes.bottom)
                .cloned()
                .ok_or_else(|| missing(ParamKey::Bottom))?,
        );
        for z in 1..z_levels {
            grads.insert(
                ParamKey::Units(z),
                table
                    .get(verb_nodes.units[z - 1])
                    .cloned()
                    .ok_or_else(|| missing(ParamKey::Units(z)))?,
            );
        }
        Ok(InstanceEval {
            per_level_losses,
            joint_loss,
            grads,
        })
    }

    /// Per-level class probabilities for one templated input (no backward).
    pub fn instance_probs(&self, input: &ModifiedInput) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let enc_nodes = self.encoder.insert_leaves(&mut tape)?;
        let prompt_id = tape.leaf(&self.prompt)?;
        let verb_nodes = self.verbalizer.insert_leaves(&mut tape)?;
        let (_, h_prime) =
            self.encoder
                .forward_on_tape(&mut tape, &enc_nodes, input, prompt_id, self.prompt_positional)?;
        let matrices = self
            .verbalizer
            .refine_on_tape(&mut tape, &self.hierarchy, &verb_nodes)?;
        let mut out = Vec::with_capacity(self.num_levels());
        for m in matrices {
            let mt = tape.transpose(m)?;
            let logits = tape.matmul(h_prime, mt)?;
            let probs = tape.row_softmax(logits, None)?;
            out.push(tape.value(probs).data().to_vec());
        }
        Ok(out)
    }

    /// Argmax predictions per level for one templated input.
    pub fn instance_predict(&self, input: &ModifiedInput) -> Result<Vec<usize>> {
        Ok(self
            .instance_probs(input)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }

    /// Probabilities for a raw argument pair (templates it first).
    pub fn predict(&self, arg1: &str, arg2: &str) -> Result<Vec<Vec<f32>>> {
        let input = apply_template(
            &self.template,
            arg1,
            arg2,
            &self.vocab,
            self.encoder.config().max_seq_len,
        )?;
        self.instance_probs(&input)
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
