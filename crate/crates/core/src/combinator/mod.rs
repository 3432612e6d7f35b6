//! The combinatory parser: contextual encoder, tag/label heads, and the
//! bottom-up layer loop in binary (orientation) or multi-branching (chunk)
//! mode.
//!
//! A forward pass is built on a per-sentence [`Graph`], so sentences can be
//! encoded on separate threads against one shared [`Model`].

mod compose;
mod vocab;

pub use compose::ComposeVariant;
pub use vocab::{Vocab, UNK};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    read_checkpoint, write_checkpoint, AutodiffError, BiLstm, CheckpointError, Dense, Graph,
    ParamId, ParamStore, Tensor, Var,
};
use crate::recover::{recover_with_attention, ParseOutcome, RecoverError};
use crate::stratify::{
    binary_groups, chunk_groups, clamp_chunks, clamp_orientations, LayerSignals, StratifiedSample,
};
use compose::Composer;

#[derive(Debug, Error)]
pub enum CombinatorError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sample signals do not match the model's {0:?} mode")]
    Mode(Mode),
    #[error("empty sentence")]
    Empty,
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Recover(#[from] RecoverError),
    #[error("non-finite loss ({0})")]
    NonFinite(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    Incompatible(String),
    #[error("embedding dimension {found} does not match configured {expected}")]
    EmbeddingDim { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, CombinatorError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Binary,
    Multi,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(Mode::Binary),
            "multi" => Ok(Mode::Multi),
            _ => Err(format!("unknown mode `{s}` (binary|multi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalLoss {
    #[default]
    Hinge,
    Bce,
}

/// Encoder feeding the orientation classifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationEncoder {
    #[default]
    Bilstm,
    /// Position-wise feed-forward layer (no sequence context).
    Ffnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub model_size: usize,
    /// Word embedding width; `None` means `model_size`.
    pub embed_size: Option<usize>,
    pub label_hidden: usize,
    pub orientation_hidden: usize,
    pub chunk_hidden: usize,
    pub context_depth: usize,
    pub variant: ComposeVariant,
    pub orientation_encoder: OrientationEncoder,
    pub signal_loss: SignalLoss,
    /// Weights of the tag, label and signal losses.
    pub loss_weights: [f64; 3],
    pub recurrent_dropout: f64,
    pub feedforward_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Binary,
            model_size: 300,
            embed_size: None,
            label_hidden: 200,
            orientation_hidden: 64,
            chunk_hidden: 200,
            context_depth: 6,
            variant: ComposeVariant::Cv,
            orientation_encoder: OrientationEncoder::Bilstm,
            signal_loss: SignalLoss::Hinge,
            loss_weights: [0.2, 0.3, 0.5],
            recurrent_dropout: 0.2,
            feedforward_dropout: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.embed_size.unwrap_or(self.model_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CombinatorError::Config(m));
        let sizes = [
            ("model_size", self.model_size),
            ("embed_size", self.embed_dim()),
            ("label_hidden", self.label_hidden),
            ("orientation_hidden", self.orientation_hidden),
            ("chunk_hidden", self.chunk_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.context_depth > 0 && !self.model_size.is_multiple_of(2) {
            return bad("model_size must be even for a bidirectional encoder".into());
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        for (name, r) in [
            ("recurrent_dropout", self.recurrent_dropout),
            ("feedforward_dropout", self.feedforward_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

enum Context {
    Projection(Dense),
    Stack(Vec<BiLstm>),
}

enum OriNet {
    Lstm(BiLstm),
    Ffnn(Dense),
}

enum SignalNet {
    Binary {
        encoder: OriNet,
        out: Dense,
        composer: Composer,
    },
    Multi {
        encoder: BiLstm,
        out: Dense,
        attend: Dense,
    },
}

struct Parts {
    embed: ParamId,
    context: Context,
    shared: Dense,
    tag_head: Dense,
    label_head: Dense,
    signal: SignalNet,
}

/// Configuration, vocabularies and parameters of a parser.
pub struct Model {
    pub config: ModelConfig,
    pub words: Vocab,
    pub tags: Vocab,
    pub labels: Vocab,
    pub store: ParamStore,
    /// Optimizer steps taken so far.
    pub step: u64,
    parts: Parts,
}

/// A sample with every symbol replaced by its vocabulary index.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub words: Vec<usize>,
    pub tags: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
    pub signals: Vec<Vec<bool>>,
}

/// Per-sentence losses, each averaged over its decisions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tag: f64,
    pub label: f64,
    pub signal: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.tag += o.tag;
        self.label += o.label;
        self.signal += o.signal;
        self.total += o.total;
    }
}

/// Everything one forward pass produced.
pub struct Trace {
    pub tag_logits: Var,
    /// One `(n_j, |labels|)` block per layer.
    pub label_logits: Vec<Var>,
    /// One column of logits per compose layer (`n_j` or `n_j + 1` rows).
    pub signal_logits: Vec<Var>,
    /// Node vectors per layer.
    pub layers: Vec<Var>,
    /// Thresholded predictions before edge clamping.
    pub predicted: Vec<Vec<bool>>,
    /// Signals that actually drove composition.
    pub used: Vec<Vec<bool>>,
    /// Weights of every multi-member merge, layer-major.
    pub attention: Vec<Vec<f64>>,
    pub stalled: bool,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        words: Vocab,
        tags: Vocab,
        labels: Vocab,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if words.get(UNK) != Some(0) {
            return Err(CombinatorError::Config(format!(
                "word vocabulary must start with {UNK}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let parts = build(&config, &words, &tags, &labels, &mut store, &mut rng)?;
        Ok(Model {
            config,
            words,
            tags,
            labels,
            store,
            step: 0,
            parts,
        })
    }

    /// Builds vocabularies from training samples.
    pub fn from_samples<'a>(
        config: ModelConfig,
        samples: impl IntoIterator<Item = &'a StratifiedSample> + Clone,
        seed: u64,
    ) -> Result<Self> {
        let words = Vocab::with_unk(samples.clone().into_iter().flat_map(|s| s.words.iter()));
        let tags = Vocab::from_iter(samples.clone().into_iter().flat_map(|s| s.tags.iter()));
        let labels = Vocab::from_iter(samples.into_iter().flat_map(|s| s.labels.iter().flatten()));
        Model::new(config, words, tags, labels, seed)
    }

    /// Shared first layer of the tag and label heads.
    pub fn shared_layer(&self) -> Dense {
        self.parts.shared
    }

    pub fn tag_head(&self) -> Dense {
        self.parts.tag_head
    }

    pub fn label_head(&self) -> Dense {
        self.parts.label_head
    }

    pub fn embedding(&self) -> ParamId {
        self.parts.embed
    }

    /// Overwrites embedding rows of known words and optionally freezes the
    /// table. Returns how many rows were set.
    pub fn set_embeddings<'a>(
        &mut self,
        vectors: impl IntoIterator<Item = (&'a str, &'a [f64])>,
        frozen: bool,
    ) -> Result<usize> {
        let dim = self.config.embed_dim();
        let mut hits = 0;
        let p = self.store.get_mut(self.parts.embed);
        for (w, v) in vectors {
            if v.len() != dim {
                return Err(CombinatorError::EmbeddingDim {
                    expected: dim,
                    found: v.len(),
                });
            }
            if let Some(i) = self.words.get(w) {
                p.value.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(v);
                hits += 1;
            }
        }
        p.frozen = frozen;
        Ok(hits)
    }

    pub fn word_ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.words.get(w.as_ref()).unwrap_or(0))
            .collect()
    }

    pub fn encode(&self, s: &StratifiedSample) -> Result<Encoded> {
        if s.is_empty() {
            return Err(CombinatorError::Empty);
        }
        let binary = self.config.mode == Mode::Binary;
        if s.signals.is_binary() != binary {
            return Err(CombinatorError::Mode(self.config.mode));
        }
        let lookup = |v: &Vocab, kind: &'static str, x: &String| {
            v.get(x).ok_or_else(|| CombinatorError::Unknown {
                kind,
                value: x.clone(),
            })
        };
        Ok(Encoded {
            words: self.word_ids(&s.words),
            tags: s
                .tags
                .iter()
                .map(|t| lookup(&self.tags, "tag", t))
                .collect::<Result<_>>()?,
            labels: s
                .labels
                .iter()
                .map(|l| l.iter().map(|x| lookup(&self.labels, "label", x)).collect())
                .collect::<Result<_>>()?,
            signals: s.signals.layers().to_vec(),
        })
    }

    /// Word vectors through the contextual encoder: `(n, model_size)`.
    pub fn contextualize(
        &self,
        g: &mut Graph<'_>,
        words: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if words.is_empty() {
            return Err(CombinatorError::Empty);
        }
        let mut x = g.gather(self.parts.embed, words)?;
        match &self.parts.context {
            Context::Projection(d) => x = d.forward(g, x)?,
            Context::Stack(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    if i > 0 {
                        x = g.dropout(x, self.config.recurrent_dropout, rng.as_deref_mut());
                    }
                    x = l.forward(g, x)?;
                }
            }
        }
        Ok(x)
    }

    fn shared(&self, g: &mut Graph<'_>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.parts.shared.forward(g, x)?;
        let h = g.tanh(h);
        Ok(g.dropout(h, self.config.feedforward_dropout, rng))
    }

    pub fn predict_tags(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.shared(g, x, rng)?;
        Ok(self.parts.tag_head.forward(g, h)?)
    }

    pub fn predict_labels(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.shared(g, x, rng)?;
        Ok(self.parts.label_head.forward(g, h)?)
    }

    /// One binary layer: orientation logits `(n, 1)`, the signals used
    /// (gold when given, else thresholded and clamped), and the next layer.
    pub fn binary_compose(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        gold: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>, Vec<bool>, Var, Vec<Vec<f64>>)> {
        let SignalNet::Binary {
            encoder,
            out,
            composer,
        } = &self.parts.signal
        else {
            return Err(CombinatorError::Mode(self.config.mode));
        };
        let n = g.shape(x).rows;
        let h = match encoder {
            OriNet::Lstm(l) => l.forward(g, x)?,
            OriNet::Ffnn(d) => {
                let h = d.forward(g, x)?;
                g.tanh(h)
            }
        };
        let logits = out.forward(g, h)?;
        let predicted: Vec<bool> = g.value(logits).data().iter().map(|&z| z > 0.0).collect();
        let used = match gold {
            Some(o) => {
                check_len(o.len(), n, "orientations")?;
                o.to_vec()
            }
            None => {
                let mut o = predicted.clone();
                clamp_orientations(&mut o);
                o
            }
        };
        let groups = binary_groups(&used);
        let pairs: Vec<usize> = groups
            .iter()
            .filter_map(|gr| match gr {
                crate::stratify::Group::Combine(i) => Some(*i),
                _ => None,
            })
            .collect();
        let (combined, weights) = if pairs.is_empty() {
            (None, Vec::new())
        } else {
            let (v, w) = composer.combine(g, x, &pairs)?;
            (Some(v), w)
        };
        let mut rows = Vec::with_capacity(groups.len());
        let mut k = 0;
        for gr in &groups {
            match gr {
                crate::stratify::Group::Combine(_) => {
                    rows.push(g.row(combined.expect("pairs exist"), k)?);
                    k += 1;
                }
                crate::stratify::Group::Relay(i) => rows.push(g.row(x, *i)?),
            }
        }
        if rows.is_empty() {
            return Err(CombinatorError::Config("orientation layer emitted no nodes".into()));
        }
        let next = g.stack(&rows)?;
        Ok((logits, predicted, used, next, weights))
    }

    /// One multi-branching layer: boundary logits `(n + 1, 1)`, predicted
    /// and used boundaries, the next layer, and the softmax weights of each
    /// multi-member chunk.
    pub fn multi_compose(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        gold: Option<&[bool]>,
    ) -> Result<(Var, Vec<bool>, Vec<bool>, Var, Vec<Vec<f64>>)> {
        let SignalNet::Multi {
            encoder,
            out,
            attend,
        } = &self.parts.signal
        else {
            return Err(CombinatorError::Mode(self.config.mode));
        };
        let n = g.shape(x).rows;
        let hidden = encoder.hidden();
        let (fwd, bwd) = encoder.states(g, x)?;
        let zero = g.input(Tensor::zeros(1, hidden));
        // row i of fpad is →h_{i-1}; row i of bpad is ←h_i
        let fpad = g.stack(&[zero, fwd])?;
        let bpad = g.stack(&[bwd, zero])?;
        let boundary = g.concat(&[fpad, bpad])?;
        let logits = out.forward(g, boundary)?;
        let predicted: Vec<bool> = g.value(logits).data().iter().map(|&z| z > 0.0).collect();
        let used = match gold {
            Some(c) => {
                check_len(c.len(), n + 1, "boundaries")?;
                c.to_vec()
            }
            None => {
                let mut c = predicted.clone();
                clamp_chunks(&mut c);
                c
            }
        };
        let fprev = g.rows(fpad, 0, n)?;
        let bnext = g.rows(bpad, 1, n)?;
        let df = g.sub(fwd, fprev)?;
        let db = g.sub(bwd, bnext)?;
        let d = g.concat(&[df, db])?;
        let scores = attend.forward(g, d)?;
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for r in chunk_groups(&used) {
            if r.len() == 1 {
                rows.push(g.row(x, r.start)?);
                continue;
            }
            let s = g.rows(scores, r.start, r.len())?;
            let s = g.reshape(s, 1, r.len())?;
            let lambda = g.softmax(s);
            let members = g.rows(x, r.start, r.len())?;
            rows.push(g.matmul(lambda, members)?);
            weights.push(g.value(lambda).data().to_vec());
        }
        if rows.is_empty() {
            return Err(CombinatorError::Config("chunk layer emitted no nodes".into()));
        }
        let next = g.stack(&rows)?;
        Ok((logits, predicted, used, next, weights))
    }

    /// Runs the layer loop. With `gold` signals the structure follows them
    /// (teacher forcing); otherwise predictions drive it until one node
    /// remains or a layer fails to shrink.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        words: &[usize],
        gold: Option<&[Vec<bool>]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace> {
        let x0 = self.contextualize(g, words, rng.as_deref_mut())?;
        let tag_logits = self.predict_tags(g, x0, rng.as_deref_mut())?;
        let mut trace = Trace {
            tag_logits,
            label_logits: Vec::new(),
            signal_logits: Vec::new(),
            layers: vec![x0],
            predicted: Vec::new(),
            used: Vec::new(),
            attention: Vec::new(),
            stalled: false,
        };
        let mut x = x0;
        let mut j = 0;
        loop {
            let labels = self.predict_labels(g, x, rng.as_deref_mut())?;
            trace.label_logits.push(labels);
            let n = g.shape(x).rows;
            let layer_gold = match gold {
                Some(s) if j < s.len() => Some(s[j].as_slice()),
                Some(_) => break,
                None if n == 1 => break,
                None => None,
            };
            let (logits, predicted, used, next, weights) = match self.config.mode {
                Mode::Binary => self.binary_compose(g, x, layer_gold)?,
                Mode::Multi => self.multi_compose(g, x, layer_gold)?,
            };
            let next_len = g.shape(next).rows;
            if layer_gold.is_none() && next_len >= n {
                trace.stalled = true;
                break;
            }
            trace.signal_logits.push(logits);
            trace.predicted.push(predicted);
            trace.used.push(used);
            trace.attention.extend(weights);
            trace.layers.push(next);
            x = next;
            j += 1;
        }
        Ok(trace)
    }

    /// Teacher-forced weighted loss of one sample.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, LossBreakdown)> {
        let trace = self.forward(g, &enc.words, Some(&enc.signals), rng)?;
        if trace.label_logits.len() != enc.labels.len() {
            return Err(CombinatorError::Config(format!(
                "{} label layers for {} signal layers",
                enc.labels.len(),
                enc.signals.len()
            )));
        }
        let n = enc.words.len() as f64;
        let tag = g.cross_entropy(trace.tag_logits, &enc.tags)?;
        let tag = g.scale(tag, 1.0 / n);

        let mut label_terms = Vec::new();
        let mut nodes = 0;
        for (logits, gold) in trace.label_logits.iter().zip(&enc.labels) {
            label_terms.push(g.cross_entropy(*logits, gold)?);
            nodes += gold.len();
        }
        let label = sum_all(g, &label_terms)?;
        let label = g.scale(label, 1.0 / nodes as f64);

        let mut signal_terms = Vec::new();
        let mut decisions = 0;
        for (logits, gold) in trace.signal_logits.iter().zip(&enc.signals) {
            let term = match self.config.signal_loss {
                SignalLoss::Hinge => g.hinge(*logits, gold)?,
                SignalLoss::Bce => {
                    let p = g.sigmoid(*logits);
                    g.bce(p, gold)?
                }
            };
            signal_terms.push(term);
            decisions += gold.len();
        }
        let signal = if signal_terms.is_empty() {
            g.input(Tensor::scalar(0.0))
        } else {
            let s = sum_all(g, &signal_terms)?;
            g.scale(s, 1.0 / decisions as f64)
        };

        let [wt, wl, ws] = self.config.loss_weights;
        let a = g.scale(tag, wt);
        let b = g.scale(label, wl);
        let c = g.scale(signal, ws);
        let total = sum_all(g, &[a, b, c])?;
        let parts = LossBreakdown {
            tag: g.value(tag).item(),
            label: g.value(label).item(),
            signal: g.value(signal).item(),
            total: g.value(total).item(),
        };
        if !parts.total.is_finite() {
            return Err(CombinatorError::NonFinite(format!("{parts:?}")));
        }
        Ok((total, parts))
    }

    /// Greedy parse of a sentence.
    pub fn parse<S: AsRef<str>>(&self, words: &[S]) -> Result<ParseOutcome> {
        let ids = self.word_ids(words);
        let mut g = Graph::new(&self.store);
        let trace = self.forward(&mut g, &ids, None, None)?;
        let tags = argmax_rows(g.value(trace.tag_logits))
            .into_iter()
            .map(|i| self.tags.item(i).to_string())
            .collect();
        let labels = trace
            .label_logits
            .iter()
            .map(|&l| {
                argmax_rows(g.value(l))
                    .into_iter()
                    .map(|i| self.labels.item(i).to_string())
                    .collect()
            })
            .collect();
        let signals = match self.config.mode {
            Mode::Binary => LayerSignals::Orientation(trace.predicted),
            Mode::Multi => LayerSignals::Chunk(trace.predicted),
        };
        let sample = StratifiedSample {
            words: words.iter().map(|w| w.as_ref().to_string()).collect(),
            tags,
            labels,
            signals,
        };
        let mut outcome = recover_with_attention(&sample, &trace.attention)?;
        outcome.diagnostics.stalled |= trace.stalled;
        Ok(outcome)
    }

    /// Decodes with gold signals, tags and labels injected; the network
    /// still runs so attention weights are reported.
    pub fn parse_oracle(&self, gold: &StratifiedSample) -> Result<ParseOutcome> {
        if gold.signals.is_binary() != (self.config.mode == Mode::Binary) {
            return Err(CombinatorError::Mode(self.config.mode));
        }
        let ids = self.word_ids(&gold.words);
        let mut g = Graph::new(&self.store);
        let trace = self.forward(&mut g, &ids, Some(gold.signals.layers()), None)?;
        Ok(recover_with_attention(gold, &trace.attention)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            words: self.words.clone(),
            tags: self.tags.clone(),
            labels: self.labels.clone(),
            step: self.step,
        })
        .map_err(|e| CombinatorError::Incompatible(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path).map_err(CheckpointError::from)?);
        write_checkpoint(&mut w, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(CheckpointError::from)?);
        let (meta, params) = read_checkpoint(&mut r)?;
        let meta: Meta =
            serde_json::from_str(&meta).map_err(|e| CombinatorError::Incompatible(e.to_string()))?;
        let mut model = Model::new(meta.config, meta.words, meta.tags, meta.labels, 0)?;
        model.step = meta.step;
        if params.len() != model.store.len() {
            return Err(CombinatorError::Incompatible(format!(
                "{} stored parameters, model has {}",
                params.len(),
                model.store.len()
            )));
        }
        for p in params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| CombinatorError::Incompatible(format!("unknown `{}`", p.name)))?;
            let slot = model.store.get_mut(id);
            if slot.value.shape() != p.value.shape() {
                return Err(CombinatorError::Incompatible(format!(
                    "`{}` has shape {}, expected {}",
                    p.name,
                    p.value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = p.value;
            slot.frozen = p.frozen;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    words: Vocab,
    tags: Vocab,
    labels: Vocab,
    step: u64,
}

fn build(
    c: &ModelConfig,
    words: &Vocab,
    tags: &Vocab,
    labels: &Vocab,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Parts> {
    if tags.is_empty() || labels.is_empty() {
        return Err(CombinatorError::Config("empty tag or label vocabulary".into()));
    }
    let m = c.model_size;
    let e = c.embed_dim();
    let embed = store.add(
        "embed",
        Tensor::uniform(words.len(), e, 1.0 / (e as f64).sqrt(), rng),
    )?;
    let context = if c.context_depth == 0 {
        Context::Projection(Dense::new(store, "context.proj", e, m, rng)?)
    } else {
        let layers = (0..c.context_depth)
            .map(|i| {
                let input = if i == 0 { e } else { m };
                BiLstm::new(store, &format!("context.{i}"), input, m / 2, rng)
            })
            .collect::<std::result::Result<_, _>>()?;
        Context::Stack(layers)
    };
    let shared = Dense::new(store, "heads.shared", m, c.label_hidden, rng)?;
    let tag_head = Dense::new(store, "heads.tag", c.label_hidden, tags.len(), rng)?;
    let label_head = Dense::new(store, "heads.label", c.label_hidden, labels.len(), rng)?;
    let signal = match c.mode {
        Mode::Binary => {
            let h = c.orientation_hidden;
            let encoder = match c.orientation_encoder {
                OrientationEncoder::Bilstm => OriNet::Lstm(BiLstm::new(store, "ori", m, h, rng)?),
                OrientationEncoder::Ffnn => OriNet::Ffnn(Dense::new(store, "ori", m, 2 * h, rng)?),
            };
            SignalNet::Binary {
                encoder,
                out: Dense::new(store, "ori.out", 2 * h, 1, rng)?,
                composer: Composer::new(c.variant, store, m, rng)?,
            }
        }
        Mode::Multi => {
            let h = c.chunk_hidden;
            SignalNet::Multi {
                encoder: BiLstm::new(store, "chk", m, h, rng)?,
                out: Dense::new(store, "chk.out", 2 * h, 1, rng)?,
                attend: Dense::new(store, "multi", 2 * h, 1, rng)?,
            }
        }
    };
    Ok(Parts {
        embed,
        context,
        shared,
        tag_head,
        label_head,
        signal,
    })
}

fn check_len(found: usize, expected: usize, what: &str) -> Result<()> {
    if found != expected {
        return Err(CombinatorError::Config(format!(
            "{found} gold {what} for a layer needing {expected}"
        )));
    }
    Ok(())
}

fn sum_all(g: &mut Graph<'_>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
