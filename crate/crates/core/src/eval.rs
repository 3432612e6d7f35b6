//! Labeled bracket scoring, throughput, headedness and stopping rules.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinator::{CombinatorError, Model};
use crate::recover::ParseOutcome;
use crate::stratify::triangular_node_count;
use crate::treebank::{parse_brackets, SyntaxTree};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sentence {index}: yields differ ({gold} gold words vs {pred} predicted)")]
    Yield {
        index: usize,
        gold: usize,
        pred: usize,
    },
    #[error("{gold} gold trees vs {pred} predictions")]
    Length { gold: usize, pred: usize },
    #[error("parse failed: {0}")]
    Parse(String),
}

impl From<CombinatorError> for EvalError {
    fn from(e: CombinatorError) -> Self {
        EvalError::Parse(e.to_string())
    }
}

/// Bracket conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// POS tags whose words are removed before spans are computed.
    pub delete_pos: Vec<String>,
    /// Constituent labels never scored.
    pub delete_labels: Vec<String>,
    /// Label pairs treated as the same category.
    pub equivalent: Vec<(String, String)>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            delete_pos: [",", ":", "``", "''", ".", "-NONE-"]
                .map(String::from)
                .to_vec(),
            delete_labels: vec!["TOP".into()],
            equivalent: vec![("ADVP".into(), "PRT".into())],
        }
    }
}

impl EvalParams {
    fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.equivalent
            .iter()
            .find(|(_, b)| b == label)
            .map_or(label, |(a, _)| a.as_str())
    }
}

/// A labeled span `[start, end)` over the kept words.
pub type Bracket = (String, usize, usize);

/// Sorted multiset of brackets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BracketSet(pub Vec<Bracket>);

impl BracketSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Multiset intersection size.
    pub fn matches(&self, other: &BracketSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Brackets of the trees of a forest placed side by side. `keep[i]` says
/// whether word `i` counts toward spans.
pub fn brackets_of(trees: &[SyntaxTree], keep: &[bool], params: &EvalParams) -> BracketSet {
    fn walk(
        t: &SyntaxTree,
        pos: &mut usize,
        kept: &mut usize,
        keep: &[bool],
        params: &EvalParams,
        out: &mut Vec<Bracket>,
    ) {
        if t.is_leaf() {
            if keep.get(*pos).copied().unwrap_or(true) {
                *kept += 1;
            }
            *pos += 1;
            return;
        }
        let start = *kept;
        for c in &t.children {
            walk(c, pos, kept, keep, params, out);
        }
        if *kept > start && !params.delete_labels.contains(&t.label) {
            let label = params.canonical(&t.label).to_string();
            out.push((label, start, *kept));
        }
    }
    let (mut pos, mut kept) = (0, 0);
    let mut out = Vec::new();
    for t in trees {
        walk(t, &mut pos, &mut kept, keep, params, &mut out);
    }
    out.sort();
    BracketSet(out)
}

/// Words kept for scoring, decided by the gold tags.
pub fn kept_words(gold: &SyntaxTree, params: &EvalParams) -> Vec<bool> {
    gold.tags()
        .iter()
        .map(|t| !params.delete_pos.iter().any(|d| d == t))
        .collect()
}

/// Counts from which precision, recall and tagging accuracy derive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub matched: usize,
    pub gold: usize,
    pub predicted: usize,
    pub tags_correct: usize,
    pub tags_total: usize,
    pub sentences: usize,
}

fn pct(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl Score {
    pub fn precision(&self) -> f64 {
        pct(self.matched, self.predicted, if self.gold == 0 { 100.0 } else { 0.0 })
    }

    pub fn recall(&self) -> f64 {
        pct(self.matched, self.gold, if self.predicted == 0 { 100.0 } else { 0.0 })
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn tag_accuracy(&self) -> f64 {
        pct(self.tags_correct, self.tags_total, 100.0)
    }

    /// `sentences  LP  LR  F1  tag-accuracy` summary line.
    pub fn summary(&self) -> String {
        format!(
            "sentences={} LP={:.2} LR={:.2} F1={:.2} tag_acc={:.2}",
            self.sentences,
            self.precision(),
            self.recall(),
            self.f1(),
            self.tag_accuracy()
        )
    }
}

impl std::ops::AddAssign for Score {
    fn add_assign(&mut self, o: Self) {
        self.matched += o.matched;
        self.gold += o.gold;
        self.predicted += o.predicted;
        self.tags_correct += o.tags_correct;
        self.tags_total += o.tags_total;
        self.sentences += o.sentences;
    }
}

/// Scores predicted trees (a forest is scored on the union of its trees'
/// brackets) against a gold tree with the same words.
pub fn score_trees(
    gold: &SyntaxTree,
    pred: &[SyntaxTree],
    params: &EvalParams,
) -> Result<Score, EvalError> {
    let gw = gold.words();
    let pw: Vec<&str> = pred.iter().flat_map(|t| t.words()).collect();
    if gw != pw {
        return Err(EvalError::Yield {
            index: 0,
            gold: gw.len(),
            pred: pw.len(),
        });
    }
    let keep = kept_words(gold, params);
    let g = brackets_of(std::slice::from_ref(gold), &keep, params);
    let p = brackets_of(pred, &keep, params);
    let gt = gold.tags();
    let pt: Vec<&str> = pred.iter().flat_map(|t| t.tags()).collect();
    let tags_total = keep.iter().filter(|&&k| k).count();
    let tags_correct = (0..gt.len()).filter(|&i| keep[i] && gt[i] == pt[i]).count();
    Ok(Score {
        matched: g.matches(&p),
        gold: g.len(),
        predicted: p.len(),
        tags_correct,
        tags_total,
        sentences: 1,
    })
}

pub fn score(gold: &SyntaxTree, pred: &ParseOutcome, params: &EvalParams) -> Result<Score, EvalError> {
    score_trees(gold, &pred.trees, params)
}

/// Micro-averaged score over aligned corpora.
pub fn corpus_score(
    golds: &[SyntaxTree],
    preds: &[Vec<SyntaxTree>],
    params: &EvalParams,
) -> Result<Score, EvalError> {
    if golds.len() != preds.len() {
        return Err(EvalError::Length {
            gold: golds.len(),
            pred: preds.len(),
        });
    }
    let scores: Vec<Score> = golds
        .par_iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (g, p))| {
            score_trees(g, p, params).map_err(|e| match e {
                EvalError::Yield { gold, pred, .. } => EvalError::Yield {
                    index: i,
                    gold,
                    pred,
                },
                e => e,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut total = Score::default();
    for s in scores {
        total += s;
    }
    Ok(total)
}

/// Reads parser output: one tree per bracketed expression, except that a
/// `%% forest N` line groups the next `N` trees into one prediction.
pub fn read_parses(text: &str) -> Result<Vec<Vec<SyntaxTree>>, EvalError> {
    let mut out = Vec::new();
    let mut pending = 0usize;
    let mut buffer = String::new();
    let mut flush = |buffer: &mut String, group: usize| -> Result<(), EvalError> {
        let trees = parse_brackets(buffer).map_err(|e| EvalError::Parse(e.to_string()))?;
        buffer.clear();
        if trees.len() < group {
            return Err(EvalError::Parse(format!(
                "forest of {group} trees has only {}",
                trees.len()
            )));
        }
        let mut rest = trees.into_iter();
        if group > 0 {
            out.push(rest.by_ref().take(group).collect());
        }
        out.extend(rest.map(|t| vec![t]));
        Ok(())
    };
    for line in text.lines() {
        if let Some(n) = line.trim().strip_prefix("%% forest") {
            flush(&mut buffer, pending)?;
            pending = n
                .trim()
                .parse()
                .map_err(|_| EvalError::Parse(format!("bad forest marker {line:?}")))?;
        } else {
            buffer.push_str(line);
            buffer.push('\n');
        }
    }
    flush(&mut buffer, pending)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median over repetitions.
    pub sentences_per_second: f64,
    pub seconds: Vec<f64>,
    pub sentences: usize,
    /// Nodes computed by the layer loop vs a triangular chart.
    pub stratified_nodes: usize,
    pub triangular_nodes: usize,
}

/// Times `reps` (≥ 3 enforced) sentence-parallel passes over `sentences`
/// after one warm-up pass, on the current rayon pool.
pub fn throughput(
    model: &Model,
    sentences: &[Vec<String>],
    reps: usize,
) -> Result<Throughput, EvalError> {
    let run = || -> Result<usize, EvalError> {
        let nodes = sentences
            .par_iter()
            .map(|s| model.parse(s).map(|o| o.layers.node_count()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(nodes.iter().sum())
    };
    let stratified_nodes = run()?;
    let mut seconds = Vec::new();
    for _ in 0..reps.max(3) {
        let t = Instant::now();
        run()?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(Throughput {
        sentences_per_second: sentences.len() as f64 / median.max(1e-12),
        seconds,
        sentences: sentences.len(),
        stratified_nodes,
        triangular_nodes: sentences.iter().map(|s| triangular_node_count(s.len())).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub parent: String,
    pub head: String,
    pub count: u64,
}

/// Index of the largest weight; ties go to the leftmost.
pub fn head_index(weights: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &w) in weights.iter().enumerate() {
        if best.is_none_or(|b| w > weights[b]) {
            best = Some(i);
        }
    }
    best
}

/// Tallies, for every composed constituent with attention weights, the
/// child category holding the most weight. Rows are grouped by parent
/// (alphabetical) and sorted by descending count.
pub fn headedness_report<'a>(outcomes: impl IntoIterator<Item = &'a ParseOutcome>) -> Vec<HeadRecord> {
    let mut table: BTreeMap<String, HashMap<String, u64>> = BTreeMap::new();
    for o in outcomes {
        for m in &o.merges {
            if m.weights.len() != m.children.len() {
                continue;
            }
            if let Some(h) = head_index(&m.weights) {
                *table
                    .entry(m.label.clone())
                    .or_default()
                    .entry(m.children[h].clone())
                    .or_default() += 1;
            }
        }
    }
    let mut out = Vec::new();
    for (parent, heads) in table {
        let mut rows: Vec<(String, u64)> = heads.into_iter().collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.extend(rows.into_iter().map(|(head, count)| HeadRecord {
            parent: parent.clone(),
            head,
            count,
        }));
    }
    out
}

pub fn heads_to_tsv(rows: &[HeadRecord]) -> String {
    let mut s = String::from("parent\thead\tcount\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.parent, r.head, r.count));
    }
    s
}

/// Evaluations since the last strict improvement. The first evaluation is
/// the baseline, so a history that never improves is stale for its whole
/// length.
pub fn stale_count(history: &[f64]) -> usize {
    let Some(&first) = history.first() else {
        return 0;
    };
    let mut best = first;
    let mut last = None;
    for (i, &h) in history.iter().enumerate().skip(1) {
        if h > best {
            best = h;
            last = Some(i);
        }
    }
    match last {
        Some(i) => history.len() - 1 - i,
        None => history.len(),
    }
}

/// Whether a run with this dev history should stop: true once `patience`
/// evaluations in a row brought no improvement.
pub fn early_stopping(history: &[f64], patience: usize) -> bool {
    stale_count(history) >= patience.max(1)
}

/// Index of the first maximum.
pub fn best_index(history: &[f64]) -> Option<usize> {
    head_index(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_brackets;

    fn tree(s: &str) -> SyntaxTree {
        parse_brackets(s).unwrap().remove(0)
    }

    fn p() -> EvalParams {
        EvalParams::default()
    }

    #[test]
    fn identical_trees_score_100() {
        let t = tree("(S (NP (DT the) (NN dog)) (VP (VBD saw) (NP (NNP john))) (. .))");
        let s = score_trees(&t, std::slice::from_ref(&t), &p()).unwrap();
        assert_eq!(s.f1(), 100.0);
        assert_eq!(s.tag_accuracy(), 100.0);
        // S, NP, VP, NP; the final period is not counted
        assert_eq!(s.gold, 4);
        assert_eq!(s.tags_total, 4);
    }

    #[test]
    fn one_missing_bracket_of_four() {
        let g = tree("(S (NP (DT the) (NN dog)) (VP (VBD saw) (NP (DT a) (NN cat))))");
        let pr = tree("(S (NP (DT the) (NN dog)) (VP (VBD saw) (DT a) (NN cat)))");
        let s = score_trees(&g, &[pr], &p()).unwrap();
        assert_eq!((s.gold, s.predicted, s.matched), (4, 3, 3));
        assert_eq!(s.precision(), 100.0);
        assert_eq!(s.recall(), 75.0);
        assert!((s.f1() - 85.714).abs() < 1e-3);
    }

    #[test]
    fn crossing_bracket_by_hand() {
        // gold: S[0,5] NP[0,2] VP[2,5] NP[3,5]
        // pred: S[0,5] X[0,3] NP[0,2]... listed below
        let g = tree("(S (NP (DT a) (NN b)) (VP (VB c) (NP (DT d) (NN e))))");
        let pr = tree("(S (X (NP (DT a) (NN b)) (VB c)) (NP (DT d) (NN e)))");
        // pred: S[0,5] X[0,3] NP[0,2] NP[3,5]; matches S, NP[0,2], NP[3,5]
        let s = score_trees(&g, &[pr], &p()).unwrap();
        assert_eq!((s.gold, s.predicted, s.matched), (4, 4, 3));
        assert_eq!(s.precision(), 75.0);
        assert_eq!(s.recall(), 75.0);
    }

    #[test]
    fn punctuation_is_removed_from_spans() {
        let g = tree("(S (NP (NN a)) (, ,) (VP (VB b)) (. .))");
        let keep = kept_words(&g, &p());
        assert_eq!(keep, vec![true, false, true, false]);
        let b = brackets_of(&[g], &keep, &p());
        assert_eq!(
            b.0,
            vec![
                ("NP".to_string(), 0, 1),
                ("S".to_string(), 0, 2),
                ("VP".to_string(), 1, 2)
            ]
        );
    }

    #[test]
    fn equivalent_and_deleted_labels() {
        let g = tree("(TOP (S (PRT (RP up)) (VP (VB go))))");
        let pr = tree("(TOP (S (ADVP (RP up)) (VP (VB go))))");
        let s = score_trees(&g, &[pr], &p()).unwrap();
        assert_eq!((s.gold, s.matched), (3, 3));
    }

    #[test]
    fn yield_mismatch_is_an_error() {
        let g = tree("(S (NN a) (NN b))");
        let pr = tree("(S (NN a) (NN c))");
        assert!(matches!(
            score_trees(&g, &[pr], &p()),
            Err(EvalError::Yield { .. })
        ));
        assert!(matches!(
            corpus_score(&[g], &[], &p()),
            Err(EvalError::Length { gold: 1, pred: 0 })
        ));
    }

    #[test]
    fn forest_brackets_are_offset() {
        let g = tree("(S (NP (DT a) (NN b)) (VP (VB c)))");
        let forest = vec![tree("(NP (DT a) (NN b))"), tree("(VP (VB c))")];
        let s = score_trees(&g, &forest, &p()).unwrap();
        assert_eq!((s.gold, s.predicted, s.matched), (3, 2, 2));
    }

    #[test]
    fn micro_average_differs_from_macro() {
        // sentence 1: 1 of 1 right; sentence 2: 0 of 3 right
        let g1 = tree("(S (NN a) (NN b))");
        let g2 = tree("(S (NP (NN a) (NN b)) (VP (VB c) (NN d)))");
        let p2 = tree("(X (Y (NN a) (NN b)) (Z (VB c) (NN d)))");
        let total =
            corpus_score(&[g1.clone(), g2], &[vec![g1], vec![p2]], &p()).unwrap();
        assert_eq!((total.matched, total.gold, total.predicted), (1, 4, 4));
        assert_eq!(total.f1(), 25.0);
        // macro mean of per-sentence F1 would be 50
    }

    #[test]
    fn heads_and_ties() {
        assert_eq!(head_index(&[0.6, 0.4]), Some(0));
        assert_eq!(head_index(&[1.0 / 3.0; 3]), Some(0));
        assert_eq!(head_index(&[0.2, 0.5, 0.3]), Some(1));
        assert_eq!(head_index(&[]), None);
    }

    #[test]
    fn stopping_rule() {
        let rising: Vec<f64> = (0..50).map(f64::from).collect();
        assert!(!early_stopping(&rising, 3));
        assert!(early_stopping(&[5.0, 5.0, 5.0], 3));
        assert!(!early_stopping(&[5.0, 5.0], 3));
        // best at index 2; three non-improving evaluations follow
        let noisy = [70.0, 72.0, 75.0, 74.9, 73.0, 75.0];
        assert!(early_stopping(&noisy, 3));
        assert!(!early_stopping(&noisy, 4));
    }

    #[test]
    fn reads_forests_and_single_trees() {
        let text = "(S (NN a))\n%% forest 2\n(NP (NN b))\n(VP (VB c))\n(S (NN d)\n  (NN e))\n";
        let p = read_parses(text).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(p[2][0].words(), vec!["d", "e"]);
        assert!(read_parses("%% forest 3\n(S (NN a))").is_err());
        assert!(read_parses("%% forest x\n").is_err());
    }
}
