//! Bracketed (PTB-style) constituency trees: reading, normalization,
//! rendering and corpus splits.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreebankError {
    #[error("bracket parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("split configuration error: {0}")]
    Split(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// An n-ary labeled constituency tree.
///
/// Leaves are pre-terminals: they carry a POS label and a word and have no
/// children. Internal nodes carry a constituent label and at least one child.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntaxTree {
    pub label: String,
    pub children: Vec<SyntaxTree>,
    pub word: Option<String>,
}

impl SyntaxTree {
    pub fn leaf(tag: impl Into<String>, word: impl Into<String>) -> Self {
        SyntaxTree {
            label: tag.into(),
            children: Vec::new(),
            word: Some(word.into()),
        }
    }

    pub fn node(label: impl Into<String>, children: Vec<SyntaxTree>) -> Self {
        SyntaxTree {
            label: label.into(),
            children,
            word: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.word.is_some()
    }

    /// Left-to-right leaf words.
    pub fn words(&self) -> Vec<&str> {
        self.leaves().map(|l| l.word.as_deref().unwrap_or("")).collect()
    }

    /// Left-to-right POS tags.
    pub fn tags(&self) -> Vec<&str> {
        self.leaves().map(|l| l.label.as_str()).collect()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &SyntaxTree> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            while let Some(t) = stack.pop() {
                if t.is_leaf() {
                    return Some(t);
                }
                stack.extend(t.children.iter().rev());
            }
            None
        })
    }

    pub fn len(&self) -> usize {
        self.leaves().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes, leaves included.
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }

    pub fn height(&self) -> usize {
        1 + self.children.iter().map(|c| c.height()).max().unwrap_or(0)
    }

    /// Well-formedness: leaves have no children, internal nodes have at least one.
    pub fn is_well_formed(&self) -> bool {
        match &self.word {
            Some(_) => self.children.is_empty(),
            None => !self.children.is_empty() && self.children.iter().all(|c| c.is_well_formed()),
        }
    }
}

impl fmt::Display for SyntaxTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.word {
            Some(w) => write!(f, "({} {})", self.label, w),
            None => {
                write!(f, "({}", self.label)?;
                for c in &self.children {
                    write!(f, " {c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Renders a tree on a single line in bracketed format.
pub fn render_brackets(tree: &SyntaxTree) -> String {
    tree.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn tokenize(text: &str) -> Vec<(usize, Token<'_>)> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push((i, Token::Open));
                i += 1;
            }
            b')' => {
                out.push((i, Token::Close));
                i += 1;
            }
            b if b.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                out.push((start, Token::Atom(&text[start..i])));
            }
        }
    }
    out
}

struct Reader<'a> {
    tokens: Vec<(usize, Token<'a>)>,
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> TreebankError {
        let offset = self.tokens.get(self.pos).map(|t| t.0).unwrap_or(self.end);
        TreebankError::Parse {
            offset,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<Token<'a>> {
        self.tokens.get(self.pos).map(|t| t.1)
    }

    fn tree(&mut self) -> Result<SyntaxTree, TreebankError> {
        match self.peek() {
            Some(Token::Open) => self.pos += 1,
            Some(_) => return Err(self.err("expected '('")),
            None => return Err(self.err("unexpected end of input")),
        }
        let label = match self.peek() {
            Some(Token::Atom(a)) => {
                self.pos += 1;
                a.to_string()
            }
            _ => String::new(),
        };
        match self.peek() {
            Some(Token::Atom(word)) => {
                self.pos += 1;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(SyntaxTree::leaf(label, word))
                    }
                    None => Err(self.err("unexpected end of input")),
                    _ => Err(self.err("expected ')' after word")),
                }
            }
            Some(Token::Open) => {
                let mut children = Vec::new();
                while let Some(Token::Open) = self.peek() {
                    children.push(self.tree()?);
                }
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(SyntaxTree::node(label, children))
                    }
                    None => Err(self.err("unexpected end of input")),
                    _ => Err(self.err("word mixed with subtrees")),
                }
            }
            Some(Token::Close) => Err(self.err("empty bracket")),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

/// Parses every top-level bracketed tree in `text`.
///
/// A root with an empty label and a single child (the usual `( (S ...))`
/// wrapper) is replaced by its child.
pub fn parse_brackets(text: &str) -> Result<Vec<SyntaxTree>, TreebankError> {
    let mut reader = Reader {
        tokens: tokenize(text),
        pos: 0,
        end: text.len(),
    };
    let mut trees = Vec::new();
    while reader.peek().is_some() {
        let mut t = reader.tree()?;
        if t.label.is_empty() && t.word.is_none() && t.children.len() == 1 {
            t = t.children.pop().expect("one child");
        }
        trees.push(t);
    }
    Ok(trees)
}

/// Tree normalization applied before binarization or stratification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Strip `-FUNC` / `=index` annotations from constituent labels.
    pub strip_functions: bool,
    /// POS labels marking empty elements.
    pub trace_tags: Vec<String>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Preprocessor {
            strip_functions: true,
            trace_tags: vec!["-NONE-".to_string()],
        }
    }
}

impl Preprocessor {
    /// Removes traces, strips functional annotations and collapses unary
    /// chains into `+`-joined labels. Returns `None` when nothing survives
    /// trace removal.
    pub fn apply(&self, tree: &SyntaxTree) -> Option<SyntaxTree> {
        let pruned = self.prune(tree)?;
        Some(collapse_unary(self.strip(pruned)))
    }

    fn prune(&self, tree: &SyntaxTree) -> Option<SyntaxTree> {
        if tree.is_leaf() {
            if self.trace_tags.contains(&tree.label) {
                return None;
            }
            return Some(tree.clone());
        }
        let children: Vec<_> = tree.children.iter().filter_map(|c| self.prune(c)).collect();
        if children.is_empty() {
            None
        } else {
            Some(SyntaxTree::node(tree.label.clone(), children))
        }
    }

    fn strip(&self, mut tree: SyntaxTree) -> SyntaxTree {
        if tree.is_leaf() || !self.strip_functions {
            return tree;
        }
        tree.label = strip_function_tag(&tree.label).to_string();
        tree.children = tree.children.into_iter().map(|c| self.strip(c)).collect();
        tree
    }
}

/// `NP-SBJ-1` → `NP`, `NP=2` → `NP`; labels starting with `-` are kept.
pub fn strip_function_tag(label: &str) -> &str {
    match label.char_indices().find(|&(i, c)| i > 0 && (c == '-' || c == '=')) {
        Some((i, _)) => &label[..i],
        None => label,
    }
}

fn collapse_unary(mut tree: SyntaxTree) -> SyntaxTree {
    if tree.is_leaf() {
        return tree;
    }
    while tree.children.len() == 1 && !tree.children[0].is_leaf() {
        let child = tree.children.pop().expect("one child");
        tree.label = format!("{}+{}", tree.label, child.label);
        tree.children = child.children;
    }
    tree.children = tree.children.into_iter().map(collapse_unary).collect();
    tree
}

/// [`Preprocessor::apply`] with default settings.
pub fn preprocess(tree: &SyntaxTree) -> Option<SyntaxTree> {
    Preprocessor::default().apply(tree)
}

/// Where a tree came from; drives section/article split selectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSource {
    pub file: String,
    /// Position of the tree within its file.
    pub index: usize,
    pub section: Option<u32>,
    pub article: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcedTree {
    pub source: TreeSource,
    pub tree: SyntaxTree,
}

/// Section/article numbers from the last digit run of a file stem
/// (`wsj_2301.mrg` → section 23, article 2301).
pub fn source_numbers(path: &Path) -> (Option<u32>, Option<u32>) {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = {
        let rev: String = stem
            .chars()
            .rev()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect();
        rev.chars().rev().collect()
    };
    match digits.parse::<u32>() {
        Ok(n) if digits.len() >= 3 => (Some(n / 100), Some(n)),
        Ok(n) => (Some(n), None),
        Err(_) => (None, None),
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Reads a treebank file, or every file under a directory in sorted order.
pub fn read_treebank(path: &Path) -> Result<Vec<SourcedTree>, TreebankError> {
    let io_err = |p: &Path, source| TreebankError::Io {
        path: p.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    collect_files(path, &mut files).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
        let (section, article) = source_numbers(&file);
        let trees = parse_brackets(&text).map_err(|e| match e {
            TreebankError::Parse { offset, message } => TreebankError::Parse {
                offset,
                message: format!("{}: {message}", file.display()),
            },
            other => other,
        })?;
        for (index, tree) in trees.into_iter().enumerate() {
            out.push(SourcedTree {
                source: TreeSource {
                    file: file.display().to_string(),
                    index,
                    section,
                    article,
                },
                tree,
            });
        }
    }
    Ok(out)
}

/// Inclusive numeric range used by section and article selectors.
pub type Span = (u32, u32);

/// How a corpus is partitioned into train, dev and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "lowercase")]
pub enum CorpusSplit {
    Sections {
        train: Vec<Span>,
        dev: Vec<Span>,
        test: Vec<Span>,
    },
    Articles {
        train: Vec<Span>,
        dev: Vec<Span>,
        test: Vec<Span>,
    },
    /// Seeded shuffle; `dev` and `test` are counts, the rest is train.
    Random { dev: usize, test: usize, seed: u64 },
}

impl CorpusSplit {
    /// The standard PTB WSJ split: sections 2-21 / 22 / 23.
    pub fn ptb() -> Self {
        CorpusSplit::Sections {
            train: vec![(2, 21)],
            dev: vec![(22, 22)],
            test: vec![(23, 23)],
        }
    }
}

/// Indices into the input corpus, in corpus order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

fn overlapping(a: &[Span], b: &[Span]) -> bool {
    a.iter()
        .any(|&(a0, a1)| b.iter().any(|&(b0, b1)| a0 <= b1 && b0 <= a1))
}

fn in_spans(x: u32, spans: &[Span]) -> bool {
    spans.iter().any(|&(lo, hi)| lo <= x && x <= hi)
}

/// Partitions `sources` according to `split`. Trees matched by no selector
/// are left out.
pub fn split_corpus(
    sources: &[TreeSource],
    split: &CorpusSplit,
) -> Result<SplitIndices, TreebankError> {
    let mut out = SplitIndices::default();
    match split {
        CorpusSplit::Sections { train, dev, test } | CorpusSplit::Articles { train, dev, test } => {
            if overlapping(train, dev) || overlapping(train, test) || overlapping(dev, test) {
                return Err(TreebankError::Split("selectors overlap".into()));
            }
            let by_section = matches!(split, CorpusSplit::Sections { .. });
            for (i, s) in sources.iter().enumerate() {
                let key = if by_section { s.section } else { s.article };
                let Some(k) = key else { continue };
                if in_spans(k, train) {
                    out.train.push(i);
                } else if in_spans(k, dev) {
                    out.dev.push(i);
                } else if in_spans(k, test) {
                    out.test.push(i);
                }
            }
        }
        CorpusSplit::Random { dev, test, seed } => {
            if dev + test > sources.len() {
                return Err(TreebankError::Split(format!(
                    "dev {dev} + test {test} exceeds corpus size {}",
                    sources.len()
                )));
            }
            let mut order: Vec<usize> = (0..sources.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            out.dev = order[..*dev].to_vec();
            out.test = order[*dev..dev + test].to_vec();
            out.train = order[dev + test..].to_vec();
            out.dev.sort_unstable();
            out.test.sort_unstable();
            out.train.sort_unstable();
        }
    }
    Ok(out)
}

/// Tab-separated manifest: `split<TAB>file<TAB>index` per tree.
pub fn split_manifest(sources: &[TreeSource], split: &SplitIndices) -> String {
    let mut out = String::new();
    for (name, ids) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        for &i in ids {
            let s = &sources[i];
            out.push_str(&format!("{name}\t{}\t{}\n", s.file, s.index));
        }
    }
    out
}
