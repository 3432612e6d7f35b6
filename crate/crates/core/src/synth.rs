//! Synthetic treebanks: a small probabilistic grammar plus deterministic
//! shapes (combs, complete binary trees) for statistics tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::treebank::SyntaxTree;

/// Branching direction of a generated corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branching {
    /// Heads precede complements (English-like).
    #[default]
    Right,
    /// Every constituent's children reversed (head-final).
    Left,
}

#[derive(Debug, Clone)]
struct Rule {
    rhs: Vec<&'static str>,
    weight: f64,
    recursive: bool,
}

/// A PCFG over preterminals with a word list per preterminal.
#[derive(Debug, Clone)]
pub struct Grammar {
    start: &'static str,
    rules: BTreeMap<&'static str, Vec<Rule>>,
    lexicon: BTreeMap<&'static str, Vec<&'static str>>,
}

impl Grammar {
    /// The bundled toy grammar. Prepositional phrases attach only inside
    /// noun phrases, so every sentence has exactly one analysis.
    pub fn toy() -> Self {
        let mut rules: BTreeMap<&'static str, Vec<Rule>> = BTreeMap::new();
        let mut add = |lhs, rhs: &[&'static str], weight, recursive| {
            rules.entry(lhs).or_default().push(Rule {
                rhs: rhs.to_vec(),
                weight,
                recursive,
            });
        };
        add("S", &["NP", "VP"], 0.6, false);
        add("S", &["NP", "VP", "."], 0.4, false);
        add("NP", &["DT", "NN"], 0.4, false);
        add("NP", &["DT", "JJ", "NN"], 0.2, false);
        add("NP", &["DT", "JJ", "JJ", "NN"], 0.05, false);
        add("NP", &["NNP"], 0.15, false);
        add("NP", &["NP", "PP"], 0.2, true);
        add("PP", &["IN", "NP"], 1.0, false);
        add("VP", &["VBD", "NP"], 0.45, false);
        add("VP", &["VBD"], 0.15, false);
        add("VP", &["VBD", "NP", "ADVP"], 0.1, false);
        add("VP", &["VBD", "SBAR"], 0.15, true);
        add("VP", &["MD", "VP"], 0.15, true);
        add("SBAR", &["COMP", "S"], 1.0, false);
        add("ADVP", &["RB"], 1.0, false);

        let lexicon = BTreeMap::from([
            ("DT", vec!["the", "a", "every", "this", "some"]),
            (
                "NN",
                vec![
                    "dog", "cat", "bird", "house", "garden", "book", "teacher", "river", "car",
                    "song",
                ],
            ),
            ("JJ", vec!["big", "small", "red", "old", "happy", "quiet"]),
            ("NNP", vec!["john", "mary", "paris", "alice", "bob"]),
            (
                "VBD",
                vec!["saw", "liked", "found", "heard", "knew", "said", "slept", "left"],
            ),
            ("IN", vec!["in", "on", "with", "near", "under"]),
            ("COMP", vec!["that"]),
            ("MD", vec!["will", "can", "might"]),
            ("RB", vec!["quickly", "often", "today"]),
            (".", vec!["."]),
        ]);
        Grammar {
            start: "S",
            rules,
            lexicon,
        }
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().copied()
    }

    pub fn preterminals(&self) -> impl Iterator<Item = &str> {
        self.lexicon.keys().copied()
    }

    /// Samples a tree. Beyond `max_depth` only non-recursive rules are used.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R, max_depth: usize) -> SyntaxTree {
        self.expand(self.start, rng, 0, max_depth)
    }

    fn expand<R: Rng + ?Sized>(
        &self,
        sym: &'static str,
        rng: &mut R,
        depth: usize,
        max_depth: usize,
    ) -> SyntaxTree {
        if let Some(words) = self.lexicon.get(sym) {
            // `COMP` is a grammar-internal name for the complementizer
            let tag = if sym == "COMP" { "IN" } else { sym };
            return SyntaxTree::leaf(tag, words[rng.gen_range(0..words.len())]);
        }
        let options: Vec<&Rule> = self.rules[sym]
            .iter()
            .filter(|r| depth < max_depth || !r.recursive)
            .collect();
        let total: f64 = options.iter().map(|r| r.weight).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut rule = options[options.len() - 1];
        for r in &options {
            if pick < r.weight {
                rule = r;
                break;
            }
            pick -= r.weight;
        }
        let children = rule
            .rhs
            .iter()
            .map(|c| self.expand(c, rng, depth + 1, max_depth))
            .collect();
        SyntaxTree::node(sym, children)
    }
}

/// Generation settings for [`generate_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub sentences: usize,
    pub seed: u64,
    pub branching: Branching,
    pub max_depth: usize,
    pub max_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            sentences: 500,
            seed: 1,
            branching: Branching::Right,
            max_depth: 6,
            max_len: 30,
        }
    }
}

/// Samples `spec.sentences` trees from the toy grammar, rejecting
/// sentences longer than `max_len`.
pub fn generate_corpus(spec: &CorpusSpec) -> Vec<SyntaxTree> {
    let grammar = Grammar::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.sentences);
    while out.len() < spec.sentences {
        let t = grammar.generate(&mut rng, spec.max_depth);
        if t.len() > spec.max_len {
            continue;
        }
        out.push(match spec.branching {
            Branching::Right => t,
            Branching::Left => mirror(&t),
        });
    }
    out
}

/// Reverses the children of every constituent.
pub fn mirror(tree: &SyntaxTree) -> SyntaxTree {
    if tree.is_leaf() {
        return tree.clone();
    }
    SyntaxTree::node(
        tree.label.clone(),
        tree.children.iter().rev().map(mirror).collect(),
    )
}

fn word(i: usize) -> SyntaxTree {
    SyntaxTree::leaf("W", format!("w{i}"))
}

/// A binary comb over `n ≥ 1` words: every constituent has one word child
/// and one constituent child, on the right (`right = true`) or left.
pub fn comb_tree(n: usize, right: bool) -> SyntaxTree {
    assert!(n >= 1, "comb needs at least one word");
    if n == 1 {
        return SyntaxTree::node("X", vec![word(0)]);
    }
    let mut t = SyntaxTree::node("X", vec![word(n - 2), word(n - 1)]);
    for i in (0..n - 2).rev() {
        t = SyntaxTree::node("X", vec![word(i), t]);
    }
    if right {
        t
    } else {
        let mut m = mirror(&t);
        renumber(&mut m, &mut 0);
        m
    }
}

fn renumber(t: &mut SyntaxTree, next: &mut usize) {
    if t.is_leaf() {
        t.word = Some(format!("w{next}"));
        *next += 1;
    } else {
        for c in &mut t.children {
            renumber(c, next);
        }
    }
}

/// A complete binary tree with `2^depth` words.
pub fn complete_tree(depth: u32) -> SyntaxTree {
    fn build(lo: usize, hi: usize) -> SyntaxTree {
        if hi - lo == 2 {
            return SyntaxTree::node("X", vec![word(lo), word(lo + 1)]);
        }
        let mid = (lo + hi) / 2;
        SyntaxTree::node("X", vec![build(lo, mid), build(mid, hi)])
    }
    assert!(depth >= 1, "complete tree needs depth ≥ 1");
    build(0, 1 << depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::render_brackets;

    #[test]
    fn corpus_is_seeded_and_bounded() {
        let spec = CorpusSpec {
            sentences: 50,
            ..CorpusSpec::default()
        };
        let a = generate_corpus(&spec);
        let b = generate_corpus(&spec);
        assert_eq!(a, b);
        assert!(a.iter().all(|t| t.len() <= spec.max_len && t.label == "S"));
        assert!(a.iter().all(|t| t.is_well_formed()));
    }

    #[test]
    fn mirror_reverses_yield() {
        let t = generate_corpus(&CorpusSpec::default()).remove(0);
        let m = mirror(&t);
        let mut w = t.words();
        w.reverse();
        assert_eq!(m.words(), w);
        assert_eq!(mirror(&m), t);
    }

    #[test]
    fn shapes() {
        assert_eq!(
            render_brackets(&comb_tree(3, true)),
            "(X (W w0) (X (W w1) (W w2)))"
        );
        assert_eq!(
            render_brackets(&comb_tree(3, false)),
            "(X (X (W w0) (W w1)) (W w2))"
        );
        let wide = generate_corpus(&CorpusSpec::default())
            .iter()
            .any(|t| t.children.iter().any(|c| c.children.len() == 4));
        assert!(wide, "four-child phrases occur");
        let c = complete_tree(3);
        assert_eq!(c.len(), 8);
        assert_eq!(c.height(), 4);
    }
}
