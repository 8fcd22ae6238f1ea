//! Label hierarchy and hierarchical label refining.
//!
//! Upper-level label embeddings are never parameters. Each step they are
//! recomputed bottom-up as convex combinations of their children's rows:
//! `M^z = f(W^z) . M^{z+1}`, where `W^z` holds one learnable unit per
//! parent-child edge and `f` normalizes each parent's row over its support
//! set only (structural zeros stay exactly zero). Only the bottom embedding
//! matrix and the edge units are trainable.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::template::{tokenize, Vocab};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Serialized hierarchy format:
/// `{"levels": [["..."], ...], "edges": [[z, "parent", "child"], ...]}`
/// with `z` the parent's 1-based level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub levels: Vec<Vec<String>>,
    pub edges: Vec<(usize, String, String)>,
}

/// A validated leveled hierarchy of relation labels.
///
/// Edges connect adjacent levels only and may be many-to-many. Every
/// non-bottom node has at least one child and every non-top node at least
/// one parent.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelHierarchy {
    levels: Vec<Vec<String>>,
    /// edges_by_level[z-1] is sorted (parent, child) index pairs between
    /// level z and z+1.
    edges_by_level: Vec<Vec<(usize, usize)>>,
    /// children_by_level[z-1][parent] lists child indices at level z+1.
    children_by_level: Vec<Vec<Vec<usize>>>,
}

impl LabelHierarchy {
    pub fn from_spec(spec: &HierarchySpec) -> Result<Self> {
        if spec.levels.is_empty() {
            return Err(Error::Hierarchy("no levels defined".into()));
        }
        let mut index: Vec<BTreeMap<&str, usize>> = Vec::new();
        for (li, names) in spec.levels.iter().enumerate() {
            if names.is_empty() {
                return Err(Error::Hierarchy(format!("level {} is empty", li + 1)));
            }
            let mut map = BTreeMap::new();
            for (i, name) in names.iter().enumerate() {
                if map.insert(name.as_str(), i).is_some() {
                    return Err(Error::Hierarchy(format!(
                        "duplicate name {name:?} at level {}",
                        li + 1
                    )));
                }
            }
            index.push(map);
        }
        let z_levels = spec.levels.len();
        let mut edges_by_level: Vec<Vec<(usize, usize)>> = vec![Vec::new(); z_levels.saturating_sub(1)];
        for (z, parent, child) in &spec.edges {
            if *z == 0 || *z >= z_levels {
                return Err(Error::Hierarchy(format!(
                    "edge ({z}, {parent:?}, {child:?}) does not connect adjacent levels of a {z_levels}-level hierarchy"
                )));
            }
            let pi = *index[*z - 1].get(parent.as_str()).ok_or_else(|| {
                Error::Hierarchy(format!("edge parent {parent:?} not found at level {z}"))
            })?;
            let ci = *index[*z].get(child.as_str()).ok_or_else(|| {
                Error::Hierarchy(format!(
                    "edge child {child:?} not found at level {}",
                    z + 1
                ))
            })?;
            edges_by_level[*z - 1].push((pi, ci));
        }
        for (zi, edges) in edges_by_level.iter_mut().enumerate() {
            edges.sort_unstable();
            if edges.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Hierarchy(format!(
                    "duplicate edge between levels {} and {}",
                    zi + 1,
                    zi + 2
                )));
            }
        }

        let mut children_by_level = Vec::with_capacity(z_levels.saturating_sub(1));
        for (zi, edges) in edges_by_level.iter().enumerate() {
            let mut children = vec![Vec::new(); spec.levels[zi].len()];
            let mut has_parent = vec![false; spec.levels[zi + 1].len()];
            for &(p, c) in edges {
                children[p].push(c);
                has_parent[c] = true;
            }
            for (p, ch) in children.iter().enumerate() {
                if ch.is_empty() {
                    return Err(Error::Hierarchy(format!(
                        "node {:?} at level {} has no children",
                        spec.levels[zi][p],
                        zi + 1
                    )));
                }
            }
            for (c, seen) in has_parent.iter().enumerate() {
                if !seen {
                    return Err(Error::Hierarchy(format!(
                        "node {:?} at level {} has no parent",
                        spec.levels[zi + 1][c],
                        zi + 2
                    )));
                }
            }
            children_by_level.push(children);
        }

        Ok(LabelHierarchy {
            levels: spec.levels.clone(),
            edges_by_level,
            children_by_level,
        })
    }

    pub fn to_spec(&self) -> HierarchySpec {
        let mut edges = Vec::new();
        for (zi, level_edges) in self.edges_by_level.iter().enumerate() {
            for &(p, c) in level_edges {
                edges.push((
                    zi + 1,
                    self.levels[zi][p].clone(),
                    self.levels[zi + 1][c].clone(),
                ));
            }
        }
        HierarchySpec {
            levels: self.levels.clone(),
            edges,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: HierarchySpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_spec())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Number of levels Z.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Label names at a 1-based level.
    pub fn level_labels(&self, z: usize) -> &[String] {
        &self.levels[z - 1]
    }

    pub fn level_size(&self, z: usize) -> usize {
        self.levels[z - 1].len()
    }

    pub fn bottom_size(&self) -> usize {
        self.levels[self.levels.len() - 1].len()
    }

    pub fn label_index(&self, z: usize, name: &str) -> Option<usize> {
        self.levels[z - 1].iter().position(|n| n == name)
    }

    /// Child indices (level z+1) of parent j at 1-based level z.
    pub fn children(&self, z: usize, j: usize) -> Result<&[usize]> {
        if z >= self.num_levels() {
            return Err(Error::Hierarchy(format!(
                "children: level {z} has no level below it"
            )));
        }
        self.children_by_level[z - 1]
            .get(j)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Hierarchy(format!("children: no node {j} at level {z}")))
    }

    /// Sorted (parent, child) pairs between 1-based level z and z+1.
    pub fn edges_at(&self, z: usize) -> &[(usize, usize)] {
        &self.edges_by_level[z - 1]
    }

    pub fn edge_count(&self) -> usize {
        self.edges_by_level.iter().map(Vec::len).sum()
    }

    /// Whether (parent, child) is an edge between levels z and z+1.
    pub fn is_edge(&self, z: usize, parent: usize, child: usize) -> bool {
        self.edges_by_level[z - 1]
            .binary_search(&(parent, child))
            .is_ok()
    }

    /// Boolean support mask of shape |L^z| x |L^{z+1}| in row-major order.
    pub fn support_mask(&self, z: usize) -> Vec<bool> {
        let rows = self.level_size(z);
        let cols = self.level_size(z + 1);
        let mut mask = vec![false; rows * cols];
        for &(p, c) in self.edges_at(z) {
            mask[p * cols + c] = true;
        }
        mask
    }

    /// A 4 / 11 / 102 three-level tree shaped like the PDTB 2.0 hierarchy
    /// with connectives as the bottom level (113 edges).
    pub fn pdtb2_shaped() -> Self {
        let spec = pdtb2_spec();
        Self::from_spec(&spec).expect("built-in fixture must validate")
    }

    /// A small two-level tree (3 top, 6 bottom) used by the synthetic task.
    pub fn toy_planted() -> Self {
        let spec = HierarchySpec {
            levels: vec![
                vec!["alpha".into(), "beta".into(), "gamma".into()],
                vec![
                    "delta".into(),
                    "epsilon".into(),
                    "zeta".into(),
                    "eta".into(),
                    "theta".into(),
                    "iota".into(),
                ],
            ],
            edges: vec![
                (1, "alpha".into(), "delta".into()),
                (1, "alpha".into(), "epsilon".into()),
                (1, "beta".into(), "zeta".into()),
                (1, "beta".into(), "eta".into()),
                (1, "gamma".into(), "theta".into()),
                (1, "gamma".into(), "iota".into()),
            ],
        };
        Self::from_spec(&spec).expect("built-in fixture must validate")
    }
}

fn pdtb2_spec() -> HierarchySpec {
    let second: [(&str, &str); 11] = [
        ("Comparison", "Contrast"),
        ("Comparison", "Concession"),
        ("Contingency", "Cause"),
        ("Contingency", "Pragmatic cause"),
        ("Expansion", "Alternative"),
        ("Expansion", "Conjunction"),
        ("Expansion", "Instantiation"),
        ("Expansion", "List"),
        ("Expansion", "Restatement"),
        ("Temporal", "Asynchronous"),
        ("Temporal", "Synchrony"),
    ];
    let connectives: [(&str, &[&str]); 11] = [
        (
            "Contrast",
            &[
                "in contrast",
                "by contrast",
                "on the other hand",
                "conversely",
                "whereas",
                "rather",
                "instead",
                "on the contrary",
                "though",
                "even so",
                "regardless",
            ],
        ),
        (
            "Concession",
            &[
                "while",
                "however",
                "but",
                "even though",
                "nevertheless",
                "still",
                "nonetheless",
                "yet",
                "in fact",
                "although",
                "by comparison",
            ],
        ),
        (
            "Cause",
            &[
                "therefore",
                "consequently",
                "as a result",
                "hence",
                "accordingly",
                "thereby",
                "in turn",
                "after all",
                "in the end",
                "now that",
                "insofar as",
                "in response",
            ],
        ),
        (
            "Pragmatic cause",
            &[
                "because",
                "as",
                "since",
                "inasmuch as",
                "so",
                "for example",
                "thus",
                "for instance",
                "indeed",
            ],
        ),
        (
            "Alternative",
            &[
                "or",
                "alternatively",
                "otherwise",
                "unless",
                "either",
                "else",
                "if not",
            ],
        ),
        (
            "Conjunction",
            &[
                "additionally",
                "moreover",
                "besides",
                "further",
                "likewise",
                "similarly",
                "as well",
                "plus",
                "what is more",
                "too",
                "along with",
            ],
        ),
        (
            "Instantiation",
            &[
                "specifically",
                "for one thing",
                "for one",
                "in particular",
                "on one hand",
            ],
        ),
        (
            "List",
            &[
                "and",
                "first",
                "second",
                "finally",
                "in addition",
                "also",
                "meanwhile",
                "third",
                "furthermore",
            ],
        ),
        (
            "Restatement",
            &[
                "in other words",
                "in short",
                "in sum",
                "overall",
                "ultimately",
                "that is",
                "in essence",
                "to wit",
                "namely",
            ],
        ),
        (
            "Asynchronous",
            &[
                "before",
                "after",
                "afterward",
                "later",
                "earlier",
                "subsequently",
                "thereafter",
                "previously",
                "until",
                "once",
                "next",
            ],
        ),
        (
            "Synchrony",
            &[
                "at the time",
                "when",
                "at that time",
                "then",
                "simultaneously",
                "in the meantime",
                "at the same time",
            ],
        ),
    ];

    let top: Vec<String> = ["Comparison", "Contingency", "Expansion", "Temporal"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mid: Vec<String> = second.iter().map(|(_, c)| c.to_string()).collect();
    let mut bottom = Vec::new();
    let mut edges: Vec<(usize, String, String)> = second
        .iter()
        .map(|(p, c)| (1, p.to_string(), c.to_string()))
        .collect();
    for (parent, conns) in connectives {
        for c in conns {
            bottom.push(c.to_string());
            edges.push((2, parent.to_string(), c.to_string()));
        }
    }
    HierarchySpec {
        levels: vec![top, mid, bottom],
        edges,
    }
}

/// How a parent's row over its support set is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Softmax,
    L1,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalization::Softmax),
            "l1" => Ok(Normalization::L1),
            other => Err(Error::Config(format!(
                "unknown normalization {other:?} (expected softmax or l1)"
            ))),
        }
    }
}

/// One trainable scalar per parent-child edge, stored per level in the
/// canonical sorted edge order of [`LabelHierarchy::edges_at`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightUnits {
    per_level: Vec<Tensor>,
}

impl WeightUnits {
    /// Uniform-start units: 0 under softmax normalization, 1 under L1 (both
    /// normalize to equal weights over each support set). The seed is part
    /// of the interface for alternative initializations; the constant start
    /// does not consume it.
    pub fn init(hierarchy: &LabelHierarchy, _seed: u64, normalization: Normalization) -> Self {
        let base = match normalization {
            Normalization::Softmax => 0.0,
            Normalization::L1 => 1.0,
        };
        let per_level = (1..hierarchy.num_levels())
            .map(|z| {
                Tensor::filled(vec![hierarchy.edges_at(z).len()], base).with_grad()
            })
            .collect();
        WeightUnits { per_level }
    }

    /// Units for the edges between 1-based level z and z+1.
    pub fn level(&self, z: usize) -> &Tensor {
        &self.per_level[z - 1]
    }

    pub fn level_mut(&mut self, z: usize) -> &mut Tensor {
        &mut self.per_level[z - 1]
    }

    pub fn num_levels_with_units(&self) -> usize {
        self.per_level.len()
    }

    pub fn total_count(&self) -> usize {
        self.per_level.iter().map(Tensor::numel).sum()
    }
}

impl Tensor {
    fn with_grad_flag(mut self, flag: bool) -> Tensor {
        self.set_requires_grad(flag);
        self
    }
}

/// Trainable verbalizer state: bottom-level label embeddings plus edge
/// weight units. Upper-level matrices are derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct VerbalizerState {
    pub bottom: Tensor,
    pub units: WeightUnits,
    pub normalization: Normalization,
}

/// Tape node ids of the trainable verbalizer leaves.
pub struct VerbalizerNodes {
    pub bottom: NodeId,
    pub units: Vec<NodeId>,
}

impl VerbalizerState {
    /// Initializes the bottom matrix. When `warm` supplies the encoder token
    /// table and the vocabulary, each bottom row starts from the embedding
    /// of the label's first in-vocabulary token; rows without one fall back
    /// to Normal(0, 0.02) draws from `seed`.
    pub fn init(
        hierarchy: &LabelHierarchy,
        d_model: usize,
        seed: u64,
        normalization: Normalization,
        warm: Option<(&Tensor, &Vocab)>,
    ) -> Self {
        let bottom_labels = hierarchy.level_labels(hierarchy.num_levels());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(bottom_labels.len() * d_model);
        for name in bottom_labels {
            let warm_row = warm.and_then(|(table, vocab)| {
                let first = tokenize(name).into_iter().find_map(|t| vocab.lookup(&t))?;
                let row = &table.data()[first * d_model..(first + 1) * d_model];
                Some(row.to_vec())
            });
            match warm_row {
                Some(row) => data.extend_from_slice(&row),
                None => {
                    let t = Tensor::randn(vec![d_model], 0.02, &mut rng);
                    data.extend_from_slice(t.data());
                }
            }
        }
        let bottom = Tensor::from_vec(vec![bottom_labels.len(), d_model], data)
            .expect("bottom matrix shape is consistent")
            .with_grad_flag(true);
        VerbalizerState {
            bottom,
            units: WeightUnits::init(hierarchy, seed, normalization),
            normalization,
        }
    }

    pub fn d_model(&self) -> usize {
        self.bottom.cols()
    }

    /// Trainable-parameter count of this module: |L^Z| * d + #edges.
    pub fn trainable_count(&self) -> usize {
        self.bottom.numel() + self.units.total_count()
    }

    pub fn insert_leaves(&self, tape: &mut Tape) -> Result<VerbalizerNodes> {
        let bottom = tape.leaf(&self.bottom)?;
        let units = (0..self.units.num_levels_with_units())
            .map(|i| tape.leaf(&self.units.per_level[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(VerbalizerNodes { bottom, units })
    }

    /// Bottom-up refinement on a tape: returns node ids of M^1..M^Z
    /// (index z-1). Runs inside every training iteration so gradients flow
    /// into both the units and the bottom matrix.
    pub fn refine_on_tape(
        &self,
        tape: &mut Tape,
        hierarchy: &LabelHierarchy,
        nodes: &VerbalizerNodes,
    ) -> Result<Vec<NodeId>> {
        let z_levels = hierarchy.num_levels();
        let mut matrices = vec![nodes.bottom; z_levels];
        for z in (1..z_levels).rev() {
            let rows = hierarchy.level_size(z);
            let cols = hierarchy.level_size(z + 1);
            let w = tape.scatter_to_matrix(nodes.units[z - 1], rows, cols, hierarchy.edges_at(z))?;
            let mask = hierarchy.support_mask(z);
            let fw = match self.normalization {
                Normalization::Softmax => tape.row_softmax(w, Some(&mask))?,
                Normalization::L1 => tape.row_l1_normalize(w, Some(&mask))?,
            };
            matrices[z - 1] = tape.matmul(fw, matrices[z])?;
        }
        Ok(matrices)
    }

    /// Value-level refinement: M^1..M^Z as plain tensors.
    pub fn refine(&self, hierarchy: &LabelHierarchy) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let nodes = self.insert_leaves(&mut tape)?;
        let ids = self.refine_on_tape(&mut tape, hierarchy, &nodes)?;
        Ok(ids.into_iter().map(|id| tape.value(id).clone()).collect())
    }

    /// The row-stochastic matrix f(W^z) between 1-based level z and z+1.
    /// Off-support entries are exactly zero.
    pub fn normalize_weights(&self, hierarchy: &LabelHierarchy, z: usize) -> Result<Tensor> {
        if z >= hierarchy.num_levels() {
            return Err(Error::Hierarchy(format!(
                "normalize_weights: no weight matrix below level {z}"
            )));
        }
        let mut tape = Tape::new();
        let units = tape.leaf(self.units.level(z))?;
        let rows = hierarchy.level_size(z);
        let cols = hierarchy.level_size(z + 1);
        let w = tape.scatter_to_matrix(units, rows, cols, hierarchy.edges_at(z))?;
        let mask = hierarchy.support_mask(z);
        let fw = match self.normalization {
            Normalization::Softmax => tape.row_softmax(w, Some(&mask))?,
            Normalization::L1 => tape.row_l1_normalize(w, Some(&mask))?,
        };
        Ok(tape.value(fw).clone())
    }
}

/// Class probabilities softmax(M^z h') for one level.
pub fn predict_level(h_prime: &Tensor, m_z: &Tensor) -> Result<Vec<f32>> {
    if h_prime.numel() != m_z.cols() {
        return Err(Error::ShapeMismatch {
            op: "predict_level",
            lhs: h_prime.shape().to_vec(),
            rhs: m_z.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_vec(vec![1, h_prime.numel()], h_prime.data().to_vec())?)?;
    let m = tape.constant(m_z.clone())?;
    let mt = tape.transpose(m)?;
    let logits = tape.matmul(h, mt)?;
    let probs = tape.row_softmax(logits, None)?;
    Ok(tape.value(probs).data().to_vec())
}

/// Rounds percentages to 2 decimals so they still sum to 100.00, by
/// distributing leftover hundredths to the largest remainders.
fn round_percentages(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    let target = (total * 100.0).round() as i64; // in hundredths of a percent
    let mut floors: Vec<i64> = values.iter().map(|v| (v * 100.0).floor() as i64).collect();
    let assigned: i64 = floors.iter().sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = values[a] * 100.0 - floors[a] as f64;
        let rb = values[b] * 100.0 - floors[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..((target - assigned).max(0) as usize).min(values.len()) {
        floors[order[i]] += 1;
    }
    floors.into_iter().map(|f| f as f64 / 100.0).collect()
}

/// Renders the per-parent normalized weight table, one line per parent:
/// `Parent: child (pp.pp), child (pp.pp)` with percentages of f(W).
/// Percentages are apportioned so every printed row sums to 100.00.
pub fn render_weight_table(state: &VerbalizerState, hierarchy: &LabelHierarchy) -> Result<String> {
    let mut out = String::new();
    for z in 1..hierarchy.num_levels() {
        let _ = writeln!(out, "# Level {} -> {}", z, z + 1);
        let fw = state.normalize_weights(hierarchy, z)?;
        let child_names = hierarchy.level_labels(z + 1);
        for (j, parent) in hierarchy.level_labels(z).iter().enumerate() {
            let kids = hierarchy.children(z, j)?;
            let raw: Vec<f64> = kids.iter().map(|&c| fw.at(j, c) as f64 * 100.0).collect();
            let pct = round_percentages(&raw);
            let entries: Vec<String> = kids
                .iter()
                .zip(&pct)
                .map(|(&c, p)| format!("{} ({:.2})", child_names[c], p))
                .collect();
            let _ = writeln!(out, "{parent}: {}", entries.join(", "));
        }
        if z + 1 < hierarchy.num_levels() {
            let _ = writeln!(out);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> LabelHierarchy {
        LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![vec!["A".into()], vec!["a".into()]],
            edges: vec![(1, "A".into(), "a".into())],
        })
        .unwrap()
    }

    #[test]
    fn two_level_chain() {
        let h = chain();
        assert_eq!(h.num_levels(), 2);
        assert_eq!(h.edge_count(), 1);
        assert_eq!(h.children(1, 0).unwrap(), &[0]);
    }

    #[test]
    fn orphan_child_is_rejected() {
        let err = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![
                vec!["A".into()],
                vec!["a".into()],
                vec!["x".into(), "y".into()],
            ],
            edges: vec![
                (1, "A".into(), "a".into()),
                (2, "a".into(), "x".into()),
            ],
        })
        .unwrap_err();
        assert!(err.to_string().contains("\"y\""), "{err}");
    }

    #[test]
    fn childless_parent_is_rejected() {
        let err = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![vec!["A".into(), "B".into()], vec!["a".into()]],
            edges: vec![(1, "A".into(), "a".into())],
        })
        .unwrap_err();
        assert!(err.to_string().contains("\"B\""), "{err}");
    }

    #[test]
    fn cross_level_edge_is_rejected() {
        let err = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![vec!["A".into()], vec!["a".into()]],
            edges: vec![(2, "a".into(), "A".into())],
        })
        .unwrap_err();
        assert!(matches!(err, Error::Hierarchy(_)));
    }

    #[test]
    fn duplicate_name_is_rejected() {
        let err = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![vec!["A".into(), "A".into()], vec!["a".into()]],
            edges: vec![
                (1, "A".into(), "a".into()),
            ],
        })
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn many_to_many_shared_child() {
        let h = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![vec!["A".into(), "B".into()], vec!["b".into()]],
            edges: vec![(1, "A".into(), "b".into()), (1, "B".into(), "b".into())],
        })
        .unwrap();
        assert_eq!(h.children(1, 0).unwrap(), &[0]);
        assert_eq!(h.children(1, 1).unwrap(), &[0]);
    }

    #[test]
    fn pdtb2_fixture_shape() {
        let h = LabelHierarchy::pdtb2_shaped();
        assert_eq!(h.num_levels(), 3);
        assert_eq!(h.level_size(1), 4);
        assert_eq!(h.level_size(2), 11);
        assert_eq!(h.level_size(3), 102);
        assert_eq!(h.edge_count(), 113);

        let comp = h.label_index(1, "Comparison").unwrap();
        let names: Vec<&str> = h
            .children(1, comp)
            .unwrap()
            .iter()
            .map(|&c| h.level_labels(2)[c].as_str())
            .collect();
        assert_eq!(names, vec!["Contrast", "Concession"]);
    }

    #[test]
    fn children_at_bottom_level_errors() {
        let h = chain();
        assert!(h.children(2, 0).is_err());
    }

    #[test]
    fn hierarchy_spec_round_trip() {
        let h = LabelHierarchy::pdtb2_shaped();
        let again = LabelHierarchy::from_spec(&h.to_spec()).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn unit_init_counts_and_uniform_rows() {
        let h = LabelHierarchy::pdtb2_shaped();
        let units = WeightUnits::init(&h, 0, Normalization::Softmax);
        assert_eq!(units.total_count(), 113);
        let state = VerbalizerState::init(&h, 8, 0, Normalization::Softmax, None);
        let fw = state.normalize_weights(&h, 1).unwrap();
        let comp = h.label_index(1, "Comparison").unwrap();
        for &c in h.children(1, comp).unwrap() {
            assert!((fw.at(comp, c) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_weights_closed_form_and_structural_zeros() {
        let h = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![
                vec!["A".into(), "B".into()],
                vec!["x".into(), "y".into(), "z".into()],
            ],
            edges: vec![
                (1, "A".into(), "x".into()),
                (1, "A".into(), "y".into()),
                (1, "B".into(), "z".into()),
            ],
        })
        .unwrap();
        let mut state = VerbalizerState::init(&h, 4, 0, Normalization::Softmax, None);
        // edges sorted: (0,x), (0,y), (1,z)
        state.units.level_mut(1).data_mut()[0] = 2.0f32.ln();
        state.units.level_mut(1).data_mut()[1] = 0.0;
        let fw = state.normalize_weights(&h, 1).unwrap();
        assert!((fw.at(0, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((fw.at(0, 1) - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(fw.at(0, 2), 0.0);
        assert_eq!(fw.at(1, 0), 0.0);
        assert_eq!(fw.at(1, 1), 0.0);
        assert!((fw.at(1, 2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn learned_split_fixture_reproduces_percentages() {
        // units log(0.5183), log(0.4817) normalize to exactly that split
        let h = LabelHierarchy::from_spec(&HierarchySpec {
            levels: vec![
                vec!["Comparison".into()],
                vec!["Contrast".into(), "Concession".into()],
            ],
            edges: vec![
                (1, "Comparison".into(), "Contrast".into()),
                (1, "Comparison".into(), "Concession".into()),
            ],
        })
        .unwrap();
        let mut state = VerbalizerState::init(&h, 4, 0, Normalization::Softmax, None);
        // edges sorted by child index: Contrast = 0, Concession = 1
        state.units.level_mut(1).data_mut()[0] = (0.5183f32).ln();
        state.units.level_mut(1).data_mut()[1] = (0.4817f32).ln();
        let fw = state.normalize_weights(&h, 1).unwrap();
        assert!((fw.at(0, 0) - 0.5183).abs() < 1e-4);
        assert!((fw.at(0, 1) - 0.4817).abs() < 1e-4);
    }

    #[test]
    fn refine_singleton_parent_equals_child() {
        let h = chain();
        let state = VerbalizerState::init(&h, 6, 3, Normalization::Softmax, None);
        let ms = state.refine(&h).unwrap();
        assert_eq!(ms[0].data(), ms[1].data());
    }

    #[test]
    fn refine_uniform_weights_give_mean_of_children() {
        let h = LabelHierarchy::toy_planted();
        let state = VerbalizerState::init(&h, 5, 9, Normalization::Softmax, None);
        let ms = state.refine(&h).unwrap();
        let d = 5;
        for (p, _) in h.level_labels(1).iter().enumerate() {
            let kids = h.children(1, p).unwrap();
            for col in 0..d {
                let mean: f32 = kids
                    .iter()
                    .map(|&c| ms[1].at(c, col))
                    .sum::<f32>()
                    / kids.len() as f32;
                assert!((ms[0].at(p, col) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn refine_is_idempotent_bitwise() {
        let h = LabelHierarchy::pdtb2_shaped();
        let state = VerbalizerState::init(&h, 16, 42, Normalization::Softmax, None);
        let a = state.refine(&h).unwrap();
        let b = state.refine(&h).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn l1_normalization_variant() {
        let h = LabelHierarchy::toy_planted();
        let mut state = VerbalizerState::init(&h, 4, 0, Normalization::L1, None);
        // uniform start under L1 is all-ones units
        let fw = state.normalize_weights(&h, 1).unwrap();
        assert!((fw.at(0, 0) - 0.5).abs() < 1e-6);
        // a zero row is degenerate in L1 mode
        for v in state.units.level_mut(1).data_mut().iter_mut() {
            *v = 0.0;
        }
        assert!(matches!(
            state.normalize_weights(&h, 1),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn predict_level_fixtures() {
        let m1 = Tensor::from_vec(vec![1, 3], vec![0.3, -0.1, 2.0]).unwrap();
        let h = Tensor::from_vec(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(predict_level(&h, &m1).unwrap(), vec![1.0]);

        let m2 = Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let p = predict_level(&h, &m2).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6);

        // three rows: softmax of the three dot products
        let m3 = Tensor::from_vec(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let p = predict_level(&h, &m3).unwrap();
        let dots = [1.0f64, 0.0, -1.0];
        let z: f64 = dots.iter().map(|d| d.exp()).sum();
        for (got, want) in p.iter().zip(dots.iter().map(|d| d.exp() / z)) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        let sum: f32 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn positive_rescaling_of_h_prime_preserves_argmax() {
        let m = Tensor::from_vec(
            vec![3, 4],
            vec![0.2, -0.5, 1.0, 0.3, -0.2, 0.8, 0.1, -0.9, 0.5, 0.5, -0.3, 0.4],
        )
        .unwrap();
        let h = Tensor::from_vec(vec![4], vec![0.7, -0.4, 0.9, 0.1]).unwrap();
        let argmax = |p: &[f32]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = predict_level(&h, &m).unwrap();
        for scale in [0.5f32, 2.0, 10.0] {
            let scaled =
                Tensor::from_vec(vec![4], h.data().iter().map(|v| v * scale).collect()).unwrap();
            let p = predict_level(&scaled, &m).unwrap();
            assert_eq!(argmax(&p), argmax(&base), "scale {scale} changed the argmax");
        }
    }

    #[test]
    fn weight_table_rows_sum_to_hundred() {
        let h = LabelHierarchy::pdtb2_shaped();
        let state = VerbalizerState::init(&h, 8, 0, Normalization::Softmax, None);
        let table = render_weight_table(&state, &h).unwrap();
        assert!(table.contains("Comparison: "));
        for line in table.lines().filter(|l| l.contains(": ")) {
            let total: f64 = line
                .split(['(', ')'])
                .skip(1)
                .step_by(2)
                .map(|v| v.parse::<f64>().unwrap())
                .sum();
            assert!((total - 100.0).abs() < 0.01, "row {line:?} sums to {total}");
        }
    }
}
