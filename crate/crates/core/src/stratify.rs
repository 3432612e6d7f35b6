//! Binarization, layer-wise stratification and corpus statistics.
//!
//! A stratified sample stores one label per node for every layer, plus the
//! signal that builds the next layer: an orientation per node in binary mode
//! (`true` = the node is a left child and points right) or a boundary flag
//! per gap in multi-branching mode (`true` = a chunk starts/ends there).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::SyntaxTree;

#[derive(Debug, Error, PartialEq)]
pub enum StratifyError {
    #[error("node `{0}` has {1} children; binary stratification needs 2")]
    NotBinary(String, usize),
    #[error("node `{0}` is a unary chain over a constituent; preprocess the tree first")]
    UnaryChain(String),
    #[error("invalid factor policy `{0}`")]
    Policy(String),
    #[error("compression ratio {0} outside (0, 1)")]
    Domain(f64),
    #[error("degenerate complexity fit: {0}")]
    Fit(String),
}

pub const SUB_PREFIX: char = '_';
pub const POS_PREFIX: char = '#';

/// Binarization convention for nodes with three or more children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryFactor {
    Left,
    Right,
    MidIn,
    MidOut,
}

impl BinaryFactor {
    pub const ALL: [BinaryFactor; 4] = [
        BinaryFactor::Left,
        BinaryFactor::Right,
        BinaryFactor::MidIn,
        BinaryFactor::MidOut,
    ];
}

impl fmt::Display for BinaryFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinaryFactor::Left => "left",
            BinaryFactor::Right => "right",
            BinaryFactor::MidIn => "midin",
            BinaryFactor::MidOut => "midout",
        })
    }
}

/// Which factor to binarize a sentence with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FactorPolicy {
    Fixed(BinaryFactor),
    /// Per-sentence draw between the two CNF factors.
    Mixed { p_left: f64 },
}

impl FactorPolicy {
    pub fn p_left(&self) -> Option<f64> {
        match *self {
            FactorPolicy::Mixed { p_left } => Some(p_left),
            FactorPolicy::Fixed(_) => None,
        }
    }

    /// Factors this policy can produce.
    pub fn support(&self) -> Vec<BinaryFactor> {
        match *self {
            FactorPolicy::Fixed(f) => vec![f],
            FactorPolicy::Mixed { p_left } if p_left >= 1.0 => vec![BinaryFactor::Left],
            FactorPolicy::Mixed { p_left } if p_left <= 0.0 => vec![BinaryFactor::Right],
            FactorPolicy::Mixed { .. } => vec![BinaryFactor::Left, BinaryFactor::Right],
        }
    }
}

impl FromStr for FactorPolicy {
    type Err = StratifyError;

    /// Accepts `left`, `right`, `midin`, `midout`, or `L<p>R<q>` with p + q = 100.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StratifyError::Policy(s.to_string());
        match s.to_ascii_lowercase().as_str() {
            "left" => return Ok(FactorPolicy::Fixed(BinaryFactor::Left)),
            "right" => return Ok(FactorPolicy::Fixed(BinaryFactor::Right)),
            "midin" => return Ok(FactorPolicy::Fixed(BinaryFactor::MidIn)),
            "midout" => return Ok(FactorPolicy::Fixed(BinaryFactor::MidOut)),
            _ => {}
        }
        let rest = s.strip_prefix(['L', 'l']).ok_or_else(bad)?;
        let r = rest.find(['R', 'r']).ok_or_else(bad)?;
        let p: u32 = rest[..r].parse().map_err(|_| bad())?;
        let q: u32 = rest[r + 1..].parse().map_err(|_| bad())?;
        if p + q != 100 {
            return Err(bad());
        }
        Ok(FactorPolicy::Mixed {
            p_left: f64::from(p) / 100.0,
        })
    }
}

impl fmt::Display for FactorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorPolicy::Fixed(b) => write!(f, "{b}"),
            FactorPolicy::Mixed { p_left } => {
                let p = (p_left * 100.0).round() as u32;
                write!(f, "L{p:02}R{:02}", 100 - p)
            }
        }
    }
}

/// Draws the factor for one sentence.
pub fn sample_factor<R: Rng + ?Sized>(policy: &FactorPolicy, rng: &mut R) -> BinaryFactor {
    match *policy {
        FactorPolicy::Fixed(f) => f,
        FactorPolicy::Mixed { p_left } => {
            if rng.gen::<f64>() < p_left {
                BinaryFactor::Left
            } else {
                BinaryFactor::Right
            }
        }
    }
}

/// The three label categories of a stratified treebank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Original,
    /// `_X`: binarization intermediate or relay under parent `X`.
    Sub,
    /// `#POS`: relay placeholder for a bare pre-terminal.
    PosPlaceholder,
}

pub fn label_kind(label: &str) -> LabelKind {
    if label.starts_with(SUB_PREFIX) {
        LabelKind::Sub
    } else if label.starts_with(POS_PREFIX) {
        LabelKind::PosPlaceholder
    } else {
        LabelKind::Original
    }
}

fn sub_label(parent: &str) -> String {
    format!("{SUB_PREFIX}{}", parent.trim_start_matches(SUB_PREFIX))
}

fn pos_label(tag: &str) -> String {
    format!("{POS_PREFIX}{tag}")
}

/// Binarizes every node with three or more children. Introduced nodes are
/// labeled `_` + the parent label.
pub fn binarize(tree: &SyntaxTree, factor: BinaryFactor) -> SyntaxTree {
    if tree.is_leaf() {
        return tree.clone();
    }
    let children: Vec<SyntaxTree> = tree.children.iter().map(|c| binarize(c, factor)).collect();
    if children.len() <= 2 {
        return SyntaxTree::node(tree.label.clone(), children);
    }
    let sub = sub_label(&tree.label);
    let (left, right) = fold(children, factor, &sub, true);
    SyntaxTree::node(tree.label.clone(), vec![left, right])
}

/// Splits `children` (len ≥ 2) into the two halves of a binary node; halves
/// with more than one child become `sub` nodes. `left_turn` drives mid-in's
/// alternation.
fn fold(
    mut children: Vec<SyntaxTree>,
    factor: BinaryFactor,
    sub: &str,
    left_turn: bool,
) -> (SyntaxTree, SyntaxTree) {
    let m = children.len();
    let split = match factor {
        BinaryFactor::Left => m - 1,
        BinaryFactor::Right => 1,
        BinaryFactor::MidOut => m.div_ceil(2),
        BinaryFactor::MidIn => {
            if left_turn {
                1
            } else {
                m - 1
            }
        }
    };
    let right: Vec<SyntaxTree> = children.split_off(split);
    let wrap = |part: Vec<SyntaxTree>| {
        if part.len() == 1 {
            part.into_iter().next().expect("one child")
        } else {
            let (l, r) = fold(part, factor, sub, !left_turn);
            SyntaxTree::node(sub.to_string(), vec![l, r])
        }
    };
    let l = wrap(children);
    let r = wrap(right);
    (l, r)
}

/// Splices every non-leaf `_`-labeled node into its parent.
pub fn debinarize(tree: &SyntaxTree) -> SyntaxTree {
    if tree.is_leaf() {
        return tree.clone();
    }
    let mut children = Vec::new();
    for c in &tree.children {
        let c = debinarize(c);
        if !c.is_leaf() && label_kind(&c.label) == LabelKind::Sub {
            children.extend(c.children);
        } else {
            children.push(c);
        }
    }
    SyntaxTree::node(tree.label.clone(), children)
}

/// Layer signals of a stratified sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSignals {
    /// Per layer, one orientation per node; `true` points right.
    Orientation(Vec<Vec<bool>>),
    /// Per layer, `len + 1` boundary flags with both ends set.
    Chunk(Vec<Vec<bool>>),
}

impl LayerSignals {
    pub fn layers(&self) -> &[Vec<bool>] {
        match self {
            LayerSignals::Orientation(v) | LayerSignals::Chunk(v) => v,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, LayerSignals::Orientation(_))
    }
}

/// One training instance: words, tags, per-layer labels and signals.
///
/// `labels` has one more layer than `signals`; the final layer holds the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedSample {
    pub words: Vec<String>,
    pub tags: Vec<String>,
    pub labels: Vec<Vec<String>>,
    pub signals: LayerSignals,
}

impl StratifiedSample {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Number of compose layers (k).
    pub fn depth(&self) -> usize {
        self.signals.layers().len()
    }

    pub fn layer_lengths(&self) -> Vec<usize> {
        self.labels.iter().map(Vec::len).collect()
    }

    /// Total nodes computed over all layers.
    pub fn node_count(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// How relayed constituents are labeled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelayLabels {
    /// `_` + parent label.
    #[default]
    Sub,
    /// The relayed node repeats its own label.
    Repeat,
}

/// A single emitted next-layer node, in left-to-right order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Nodes `i` and `i + 1` combine.
    Combine(usize),
    /// Node `i` passes through unchanged.
    Relay(usize),
}

impl Group {
    pub fn members(&self) -> std::ops::Range<usize> {
        match *self {
            Group::Combine(i) => i..i + 2,
            Group::Relay(i) => i..i + 1,
        }
    }
}

/// Forces the first orientation right and the last left; returns how many
/// were changed. Layers of length one are untouched.
pub fn clamp_orientations(ori: &mut [bool]) -> usize {
    let n = ori.len();
    if n < 2 {
        return 0;
    }
    let mut changed = 0;
    if !ori[0] {
        ori[0] = true;
        changed += 1;
    }
    if ori[n - 1] {
        ori[n - 1] = false;
        changed += 1;
    }
    changed
}

/// Pair-emission rule over adjacent orientations: a right-pointing node
/// followed by a left-pointing one combine; a right-right pair relays the
/// left node and a left-left pair relays the right node.
pub fn binary_groups(ori: &[bool]) -> Vec<Group> {
    let mut out = Vec::with_capacity(ori.len());
    for i in 1..ori.len() {
        match (ori[i - 1], ori[i]) {
            (true, false) => out.push(Group::Combine(i - 1)),
            (true, true) => out.push(Group::Relay(i - 1)),
            (false, false) => out.push(Group::Relay(i)),
            (false, true) => {}
        }
    }
    out
}

/// Sets both boundary endpoints; returns how many were changed.
pub fn clamp_chunks(chunks: &mut [bool]) -> usize {
    let n = chunks.len();
    let mut changed = 0;
    if n > 0 && !chunks[0] {
        chunks[0] = true;
        changed += 1;
    }
    if n > 1 && !chunks[n - 1] {
        chunks[n - 1] = true;
        changed += 1;
    }
    changed
}

/// Node ranges delimited by consecutive boundaries.
pub fn chunk_groups(chunks: &[bool]) -> Vec<std::ops::Range<usize>> {
    let bounds: Vec<usize> = chunks
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i))
        .collect();
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

struct ArenaNode {
    label: String,
    parent: Option<usize>,
    children: Vec<usize>,
    leaf: bool,
}

struct Arena {
    nodes: Vec<ArenaNode>,
    leaves: Vec<usize>,
    words: Vec<String>,
    tags: Vec<String>,
}

impl Arena {
    fn build(tree: &SyntaxTree) -> Self {
        let mut arena = Arena {
            nodes: Vec::new(),
            leaves: Vec::new(),
            words: Vec::new(),
            tags: Vec::new(),
        };
        arena.add(tree, None);
        arena
    }

    fn add(&mut self, tree: &SyntaxTree, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ArenaNode {
            label: tree.label.clone(),
            parent,
            children: Vec::new(),
            leaf: tree.is_leaf(),
        });
        if let Some(w) = &tree.word {
            self.leaves.push(id);
            self.words.push(w.clone());
            self.tags.push(tree.label.clone());
        }
        for c in &tree.children {
            let cid = self.add(c, Some(id));
            self.nodes[id].children.push(cid);
        }
        id
    }

    /// Layer-0 items: each pre-terminal, absorbed into its parent when that
    /// parent is a unary constituent over it.
    fn word_items(&self) -> Result<Vec<(usize, String)>, StratifyError> {
        for n in &self.nodes {
            if !n.leaf && n.children.len() == 1 && !self.nodes[n.children[0]].leaf {
                return Err(StratifyError::UnaryChain(n.label.clone()));
            }
        }
        Ok(self
            .leaves
            .iter()
            .map(|&l| match self.nodes[l].parent {
                Some(p) if self.nodes[p].children.len() == 1 => (p, self.nodes[p].label.clone()),
                _ => (l, pos_label(&self.nodes[l].label)),
            })
            .collect())
    }

    fn relay_label(&self, node: usize, current: &str, relay: RelayLabels) -> String {
        let n = &self.nodes[node];
        if n.leaf {
            return pos_label(&n.label);
        }
        match relay {
            RelayLabels::Repeat => current.to_string(),
            RelayLabels::Sub => {
                let p = n.parent.expect("relayed node has a parent");
                sub_label(&self.nodes[p].label)
            }
        }
    }

    fn is_left_child(&self, node: usize) -> bool {
        match self.nodes[node].parent {
            Some(p) => self.nodes[p].children[0] == node,
            None => false,
        }
    }
}

/// Stratifies a strictly binary tree into orientation layers.
pub fn stratify_binary(tree: &SyntaxTree) -> Result<StratifiedSample, StratifyError> {
    stratify_binary_with(tree, RelayLabels::Sub)
}

pub fn stratify_binary_with(
    tree: &SyntaxTree,
    relay: RelayLabels,
) -> Result<StratifiedSample, StratifyError> {
    let arena = Arena::build(tree);
    for n in &arena.nodes {
        if !n.leaf && n.children.len() > 2 {
            return Err(StratifyError::NotBinary(n.label.clone(), n.children.len()));
        }
    }
    let mut layer = arena.word_items()?;
    let mut labels = Vec::new();
    let mut signals = Vec::new();
    while layer.len() > 1 {
        signals.push(layer.iter().map(|&(id, _)| arena.is_left_child(id)).collect());
        labels.push(layer.iter().map(|(_, l)| l.clone()).collect());
        let mut next = Vec::with_capacity(layer.len());
        let mut i = 0;
        while i < layer.len() {
            let (a, _) = layer[i];
            let parent = arena.nodes[a].parent;
            if let (Some(p), Some(&(b, _))) = (parent, layer.get(i + 1)) {
                if arena.nodes[p].children == [a, b] {
                    next.push((p, arena.nodes[p].label.clone()));
                    i += 2;
                    continue;
                }
            }
            next.push((a, arena.relay_label(a, &layer[i].1, relay)));
            i += 1;
        }
        layer = next;
    }
    labels.push(layer.into_iter().map(|(_, l)| l).collect());
    Ok(StratifiedSample {
        words: arena.words,
        tags: arena.tags,
        labels,
        signals: LayerSignals::Orientation(signals),
    })
}

/// Stratifies an n-ary tree into chunk layers.
pub fn stratify_multi(tree: &SyntaxTree) -> Result<StratifiedSample, StratifyError> {
    stratify_multi_with(tree, RelayLabels::Sub)
}

pub fn stratify_multi_with(
    tree: &SyntaxTree,
    relay: RelayLabels,
) -> Result<StratifiedSample, StratifyError> {
    let arena = Arena::build(tree);
    let mut layer = arena.word_items()?;
    let mut labels = Vec::new();
    let mut signals = Vec::new();
    while layer.len() > 1 {
        let mut chunks = vec![false; layer.len() + 1];
        let mut next = Vec::with_capacity(layer.len());
        let mut i = 0;
        while i < layer.len() {
            chunks[i] = true;
            let (a, _) = layer[i];
            if let Some(p) = arena.nodes[a].parent {
                let kids = &arena.nodes[p].children;
                let m = kids.len();
                if m > 1
                    && i + m <= layer.len()
                    && layer[i..i + m].iter().map(|x| x.0).eq(kids.iter().copied())
                {
                    next.push((p, arena.nodes[p].label.clone()));
                    i += m;
                    continue;
                }
            }
            next.push((a, arena.relay_label(a, &layer[i].1, relay)));
            i += 1;
        }
        chunks[layer.len()] = true;
        signals.push(chunks);
        labels.push(layer.iter().map(|(_, l)| l.clone()).collect());
        layer = next;
    }
    labels.push(layer.into_iter().map(|(_, l)| l).collect());
    Ok(StratifiedSample {
        words: arena.words,
        tags: arena.tags,
        labels,
        signals: LayerSignals::Chunk(signals),
    })
}

/// Totals of left-pointing and right-pointing orientations over every layer.
pub fn orientation_stats<'a>(corpus: impl IntoIterator<Item = &'a StratifiedSample>) -> (u64, u64) {
    let (mut left, mut right) = (0u64, 0u64);
    for s in corpus {
        if let LayerSignals::Orientation(layers) = &s.signals {
            for o in layers.iter().flatten() {
                if *o {
                    right += 1;
                } else {
                    left += 1;
                }
            }
        }
    }
    (left, right)
}

/// Compression ratios grouped by the length of the lower layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionRow {
    pub layer_len: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionStats {
    pub rows: Vec<CompressionRow>,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per adjacent layer pair, `n_{j+1} / n_j`: the number of next-layer
/// nodes over the number of children they take.
pub fn compression_stats<'a>(
    corpus: impl IntoIterator<Item = &'a StratifiedSample>,
) -> CompressionStats {
    let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in corpus {
        for w in s.labels.windows(2) {
            let (lo, hi) = (w[0].len(), w[1].len());
            by_len.entry(lo).or_default().push(hi as f64 / lo as f64);
        }
    }
    let all: Vec<f64> = by_len.values().flatten().copied().collect();
    let (mean, std) = mean_std(&all);
    let rows = by_len
        .into_iter()
        .map(|(layer_len, xs)| {
            let (mean, std) = mean_std(&xs);
            CompressionRow {
                layer_len,
                mean,
                std,
                count: xs.len(),
            }
        })
        .collect();
    CompressionStats {
        rows,
        mean,
        std,
        count: all.len(),
    }
}

impl CompressionStats {
    /// Tab-separated `layer_len, c_mean, c_std, count` rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer_len\tc_mean\tc_std\tcount\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\n",
                r.layer_len, r.mean, r.std, r.count
            ));
        }
        out
    }
}

/// Closed-form bound `n / (1 - C)` on total nodes over all layers.
pub fn expected_node_bound(c: f64, n: usize) -> Result<f64, StratifyError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(StratifyError::Domain(c));
    }
    Ok(n as f64 / (1.0 - c))
}

/// `Σ_{k=0..=height} C^k · n`.
pub fn partial_node_sum(c: f64, n: usize, height: usize) -> Result<f64, StratifyError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(StratifyError::Domain(c));
    }
    Ok((0..=height).map(|k| c.powi(k as i32) * n as f64).sum())
}

/// Nodes of an O(n²) triangular chart.
pub fn triangular_node_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Least-squares `node_count ≈ a2·n² + a1·n` (no intercept).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexityFit {
    pub a2: f64,
    pub a1: f64,
}

pub fn complexity_fit<'a>(
    corpus: impl IntoIterator<Item = &'a StratifiedSample>,
) -> Result<ComplexityFit, StratifyError> {
    let points: Vec<(f64, f64)> = corpus
        .into_iter()
        .map(|s| (s.len() as f64, s.node_count() as f64))
        .collect();
    fit_quadratic(&points)
}

/// Normal equations of the two-term model over `(n, y)` points.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<ComplexityFit, StratifyError> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(StratifyError::Fit(format!(
            "{} distinct lengths, need at least 3",
            distinct.len()
        )));
    }
    let (mut s4, mut s3, mut s2, mut y2, mut y1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(n, y) in points {
        s4 += n.powi(4);
        s3 += n.powi(3);
        s2 += n * n;
        y2 += n * n * y;
        y1 += n * y;
    }
    let det = s4 * s2 - s3 * s3;
    if det.abs() <= 1e-12 * s4 * s2 {
        return Err(StratifyError::Fit("singular design matrix".into()));
    }
    Ok(ComplexityFit {
        a2: (y2 * s2 - s3 * y1) / det,
        a1: (s4 * y1 - s3 * y2) / det,
    })
}
