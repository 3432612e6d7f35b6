//! Turning layer signals back into symbolic trees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stratify::{
    binary_groups, chunk_groups, clamp_chunks, clamp_orientations, label_kind, LabelKind,
    StratifiedSample, POS_PREFIX, SUB_PREFIX,
};
use crate::treebank::SyntaxTree;

#[derive(Debug, Error, PartialEq)]
pub enum RecoverError {
    #[error("empty sentence")]
    Empty,
    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },
}

/// One composed constituent: its label, the categories of the children it
/// took, and the attention weights over them when the model supplied them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub layer: usize,
    pub label: String,
    pub children: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Edge signals forced inward (orientations) or endpoints forced on (chunks).
    pub clamped_edges: usize,
    /// Parsing stopped before a single root was reached.
    pub stalled: bool,
    /// Relay-labeled nodes that could not be spliced cleanly.
    pub label_repairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validity {
    Valid,
    ClampedEdges,
    Forest,
}

/// A recovered parse: one tree when valid, several for a forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub trees: Vec<SyntaxTree>,
    /// The per-layer prediction the trees were built from.
    pub layers: StratifiedSample,
    pub merges: Vec<Merge>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub validity: Validity,
    pub trees: usize,
    pub clamped_edges: usize,
    pub label_repairs: usize,
}

impl ParseOutcome {
    pub fn is_forest(&self) -> bool {
        self.trees.len() != 1
    }

    /// The single tree of a valid parse.
    pub fn tree(&self) -> Option<&SyntaxTree> {
        match self.trees.as_slice() {
            [t] => Some(t),
            _ => None,
        }
    }

    pub fn words(&self) -> Vec<&str> {
        self.trees.iter().flat_map(|t| t.words()).collect()
    }

    /// Bracketed output; forests are preceded by a `%% forest` marker line
    /// and emitted one tree per line.
    pub fn to_brackets(&self) -> String {
        match self.tree() {
            Some(t) => t.to_string(),
            None => {
                let mut out = format!("%% forest {}", self.trees.len());
                for t in &self.trees {
                    out.push('\n');
                    out.push_str(&t.to_string());
                }
                out
            }
        }
    }
}

/// Classifies an outcome.
pub fn validate(outcome: &ParseOutcome) -> ValidityReport {
    let validity = if outcome.is_forest() {
        Validity::Forest
    } else if outcome.diagnostics.clamped_edges > 0 {
        Validity::ClampedEdges
    } else {
        Validity::Valid
    };
    ValidityReport {
        validity,
        trees: outcome.trees.len(),
        clamped_edges: outcome.diagnostics.clamped_edges,
        label_repairs: outcome.diagnostics.label_repairs,
    }
}

struct Work {
    tree: SyntaxTree,
    label: String,
    category: String,
}

fn category(label: &str) -> String {
    let base = label.trim_start_matches([SUB_PREFIX, POS_PREFIX]);
    base.split('+').next().unwrap_or(base).to_string()
}

/// Rebuilds the tree (or forest) encoded by `layers`.
pub fn recover_tree(layers: &StratifiedSample) -> Result<ParseOutcome, RecoverError> {
    recover_with_attention(layers, &[])
}

/// As [`recover_tree`], attaching `attention[i]` to the i-th multi-member
/// merge in layer-major, left-to-right order.
pub fn recover_with_attention(
    layers: &StratifiedSample,
    attention: &[Vec<f64>],
) -> Result<ParseOutcome, RecoverError> {
    let n = layers.words.len();
    if n == 0 {
        return Err(RecoverError::Empty);
    }
    let shape = |layer: usize, message: String| RecoverError::Shape { layer, message };
    if layers.tags.len() != n || layers.labels.first().map(Vec::len) != Some(n) {
        return Err(shape(0, "words, tags and labels differ in length".into()));
    }
    let signal_layers = layers.signals.layers();
    if layers.labels.len() != signal_layers.len() + 1 {
        return Err(shape(
            signal_layers.len(),
            format!(
                "{} label layers for {} signal layers",
                layers.labels.len(),
                signal_layers.len()
            ),
        ));
    }

    let mut diagnostics = Diagnostics::default();
    let mut work: Vec<Work> = (0..n)
        .map(|i| {
            let label = layers.labels[0][i].clone();
            let leaf = SyntaxTree::leaf(layers.tags[i].clone(), layers.words[i].clone());
            let category = match label_kind(&label) {
                LabelKind::Original => category(&label),
                _ => layers.tags[i].clone(),
            };
            Work {
                tree: SyntaxTree::node(label.clone(), vec![leaf]),
                label,
                category,
            }
        })
        .collect();

    let mut merges = Vec::new();
    let mut attention = attention.iter();
    for (j, signal) in signal_layers.iter().enumerate() {
        let len = work.len();
        let mut signal = signal.clone();
        let groups: Vec<std::ops::Range<usize>> = if layers.signals.is_binary() {
            if signal.len() != len {
                return Err(shape(j, format!("{} orientations for {len} nodes", signal.len())));
            }
            diagnostics.clamped_edges += clamp_orientations(&mut signal);
            binary_groups(&signal).iter().map(|g| g.members()).collect()
        } else {
            if signal.len() != len + 1 {
                return Err(shape(j, format!("{} boundaries for {len} nodes", signal.len())));
            }
            diagnostics.clamped_edges += clamp_chunks(&mut signal);
            chunk_groups(&signal)
        };
        let next_labels = &layers.labels[j + 1];
        if groups.len() != next_labels.len() {
            return Err(shape(
                j + 1,
                format!("{} groups for {} labels", groups.len(), next_labels.len()),
            ));
        }
        let mut slots: Vec<Option<Work>> = work.into_iter().map(Some).collect();
        let mut next = Vec::with_capacity(groups.len());
        for (range, label) in groups.into_iter().zip(next_labels) {
            let members: Vec<Work> = slots[range]
                .iter_mut()
                .map(|s| s.take().expect("each node is emitted once"))
                .collect();
            if members.len() == 1 {
                let w = members.into_iter().next().expect("one member");
                if *label == w.label {
                    next.push(w);
                } else {
                    next.push(Work {
                        tree: SyntaxTree::node(label.clone(), vec![w.tree]),
                        label: label.clone(),
                        category: w.category,
                    });
                }
            } else {
                let children: Vec<String> = members.iter().map(|w| w.category.clone()).collect();
                merges.push(Merge {
                    layer: j,
                    label: category(label),
                    children,
                    weights: attention.next().cloned().unwrap_or_default(),
                });
                next.push(Work {
                    tree: SyntaxTree::node(
                        label.clone(),
                        members.into_iter().map(|w| w.tree).collect(),
                    ),
                    label: label.clone(),
                    category: category(label),
                });
            }
        }
        work = next;
    }

    diagnostics.stalled = work.len() > 1;
    let trees = work
        .into_iter()
        .map(|w| {
            let flat = flatten_root(w.tree, &mut diagnostics.label_repairs);
            expand_unary(&flat)
        })
        .collect();
    Ok(ParseOutcome {
        trees,
        layers: layers.clone(),
        merges,
        diagnostics,
    })
}

fn is_relay(t: &SyntaxTree) -> bool {
    !t.is_leaf() && label_kind(&t.label) != LabelKind::Original
}

/// Splices relay and intermediate nodes (`_X`, `#POS`) into their parents.
fn flatten(tree: SyntaxTree, repairs: &mut usize) -> SyntaxTree {
    if tree.is_leaf() {
        return tree;
    }
    let mut children = Vec::with_capacity(tree.children.len());
    for c in tree.children {
        let c = flatten(c, repairs);
        if is_relay(&c) {
            if label_kind(&c.label) == LabelKind::PosPlaceholder && c.children.len() != 1 {
                *repairs += 1;
            }
            children.extend(c.children);
        } else {
            children.push(c);
        }
    }
    SyntaxTree::node(tree.label, children)
}

fn flatten_root(tree: SyntaxTree, repairs: &mut usize) -> SyntaxTree {
    let mut t = flatten(tree, repairs);
    while is_relay(&t) {
        if t.children.len() == 1 {
            t = t.children.pop().expect("one child");
        } else {
            t.label = t.label.trim_start_matches([SUB_PREFIX, POS_PREFIX]).to_string();
            *repairs += 1;
        }
    }
    t
}

/// `A+B` over children → `(A (B children))`.
pub fn expand_unary(tree: &SyntaxTree) -> SyntaxTree {
    if tree.is_leaf() {
        return tree.clone();
    }
    let children: Vec<SyntaxTree> = tree.children.iter().map(expand_unary).collect();
    let mut parts = tree.label.split('+').filter(|p| !p.is_empty()).rev();
    let innermost = parts.next().unwrap_or("");
    let mut node = SyntaxTree::node(innermost, children);
    for p in parts {
        node = SyntaxTree::node(p, vec![node]);
    }
    node
}
