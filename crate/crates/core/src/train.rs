//! Run configuration, data loading and the training loop.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, Gradients, Graph};
use crate::combinator::{CombinatorError, LossBreakdown, Mode, Model, ModelConfig, Vocab};
use crate::embeddings::{load_embeddings, EmbeddingError, EmbeddingTable};
use crate::eval::{corpus_score, stale_count, EvalError, EvalParams, Score};
use crate::recover::{expand_unary, ParseOutcome};
use crate::stratify::{
    binarize, debinarize, sample_factor, stratify_binary_with, stratify_multi_with, BinaryFactor,
    FactorPolicy, RelayLabels, StratifiedSample, StratifyError,
};
use crate::synth::{generate_corpus, CorpusSpec};
use crate::treebank::{read_treebank, split_corpus, CorpusSplit, Preprocessor, SyntaxTree, TreebankError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] CombinatorError),
    #[error(transparent)]
    Stratify(#[from] StratifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Treebank(#[from] TreebankError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

/// A synthetic corpus: `corpus.sentences` trees, the last `dev + test` of
/// which are held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub corpus: CorpusSpec,
    pub dev: usize,
    pub test: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            corpus: CorpusSpec::default(),
            dev: 50,
            test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Bracketed treebank file or directory.
    pub treebank: Option<PathBuf>,
    pub split: CorpusSplit,
    /// Used when no treebank is given.
    pub synthetic: SyntheticData,
    /// Text-format word vectors.
    pub embeddings: Option<PathBuf>,
    pub freeze_embeddings: bool,
    /// Relays repeat their own label by default: a relayed vector is copied
    /// unchanged, so a `_` label would contradict the layer below.
    pub relay_labels: RelayLabels,
    /// Training sentences longer than this are skipped.
    pub max_train_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            treebank: None,
            split: CorpusSplit::ptb(),
            synthetic: SyntheticData::default(),
            embeddings: None,
            freeze_embeddings: true,
            relay_labels: RelayLabels::Repeat,
            max_train_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `left`, `right`, `midin`, `midout` or `L<p>R<q>`.
    pub factor: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Epochs between dev evaluations.
    pub eval_every: usize,
    /// Stale evaluations before the learning rate starts to decay.
    pub decay_after: usize,
    /// Stale evaluations over which the rate falls linearly to `min_lr_ratio`.
    pub decay_span: usize,
    pub min_lr_ratio: f64,
    /// Probability of replacing a training singleton word by the unknown word.
    pub unk_replace: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Stop as soon as dev F1 reaches this value.
    pub target_f1: Option<f64>,
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            factor: "right".into(),
            batch_size: 80,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 100,
            eval_every: 1,
            decay_after: 15,
            decay_span: 100,
            min_lr_ratio: 0.05,
            unk_replace: 0.5,
            clip_norm: 5.0,
            target_f1: None,
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn policy(&self) -> Result<FactorPolicy> {
        self.factor
            .parse()
            .map_err(|e: StratifyError| TrainError::Config(e.to_string()))
    }

    /// Learning rate after `stale` evaluations without improvement.
    pub fn learning_rate_at(&self, stale: usize) -> f64 {
        if stale < self.decay_after {
            return self.learning_rate;
        }
        let progress = (stale - self.decay_after + 1) as f64 / self.decay_span.max(1) as f64;
        self.learning_rate * (1.0 - progress).max(self.min_lr_ratio)
    }
}

/// Everything a run needs; loaded from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.policy()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 || t.patience == 0 {
            return Err(TrainError::Config(
                "batch_size, eval_every and patience must be positive".into(),
            ));
        }
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.unk_replace) {
            return Err(TrainError::Config(
                "learning_rate must be positive and unk_replace in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Preprocessed train/dev/test trees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntaxTree>,
    pub dev: Vec<SyntaxTree>,
    pub test: Vec<SyntaxTree>,
}

impl Dataset {
    pub fn from_synthetic(s: &SyntheticData) -> Result<Self> {
        let held = s.dev + s.test;
        if held >= s.corpus.sentences {
            return Err(TrainError::Config(format!(
                "{held} held-out sentences from a corpus of {}",
                s.corpus.sentences
            )));
        }
        let pre = Preprocessor::default();
        let trees: Vec<SyntaxTree> = generate_corpus(&s.corpus)
            .iter()
            .filter_map(|t| pre.apply(t))
            .collect();
        let n = trees.len();
        Ok(Dataset {
            train: trees[..n - held].to_vec(),
            dev: trees[n - held..n - s.test].to_vec(),
            test: trees[n - s.test..].to_vec(),
        })
    }

    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let Some(path) = &cfg.treebank else {
            return Self::from_synthetic(&cfg.synthetic);
        };
        let corpus = read_treebank(path)?;
        let sources: Vec<_> = corpus.iter().map(|t| t.source.clone()).collect();
        let idx = split_corpus(&sources, &cfg.split)?;
        let pre = Preprocessor::default();
        // binarized input (`_X` intermediates) is accepted as well
        let take = |ids: &[usize]| -> Vec<SyntaxTree> {
            ids.iter()
                .filter_map(|&i| pre.apply(&debinarize(&corpus[i].tree)))
                .collect()
        };
        Ok(Dataset {
            train: take(&idx.train),
            dev: take(&idx.dev),
            test: take(&idx.test),
        })
    }
}

/// Stratifies a preprocessed tree for `mode`.
pub fn stratify_for(
    tree: &SyntaxTree,
    mode: Mode,
    factor: BinaryFactor,
    relay: RelayLabels,
) -> std::result::Result<StratifiedSample, StratifyError> {
    match mode {
        Mode::Binary => stratify_binary_with(&binarize(tree, factor), relay),
        Mode::Multi => stratify_multi_with(tree, relay),
    }
}

/// Builds a model whose vocabularies cover every training tree under every
/// factor the policy can draw. With embeddings, held-out words that have a
/// vector are added to the word vocabulary.
pub fn build_model(
    cfg: &RunConfig,
    data: &Dataset,
    embeddings: Option<&EmbeddingTable>,
) -> Result<Model> {
    let policy = cfg.train.policy()?;
    let mut tags = Vocab::default();
    let mut labels = Vocab::default();
    for t in &data.train {
        for f in policy.support() {
            let s = stratify_for(t, cfg.model.mode, f, cfg.data.relay_labels)?;
            s.tags.iter().for_each(|x| {
                tags.insert(x);
            });
            s.labels.iter().flatten().for_each(|x| {
                labels.insert(x);
            });
        }
    }
    let mut words = Vocab::with_unk(data.train.iter().flat_map(|t| t.words()));
    if let Some(e) = embeddings {
        e.check_dim(cfg.model.embed_dim())?;
        for w in data.dev.iter().chain(&data.test).flat_map(|t| t.words()) {
            if e.contains(w) {
                words.insert(w);
            }
        }
    }
    let mut model = Model::new(cfg.model.clone(), words, tags, labels, cfg.seed)?;
    if let Some(e) = embeddings {
        let hits = model.set_embeddings(
            e.iter().filter(|(w, _)| *w != crate::combinator::UNK),
            cfg.data.freeze_embeddings,
        )?;
        log::info!("embeddings: {hits} of {} words initialized", model.words.len());
    }
    Ok(model)
}

/// Loads the configured embedding file, keeping only corpus words.
pub fn load_corpus_embeddings(cfg: &RunConfig, data: &Dataset) -> Result<Option<EmbeddingTable>> {
    let Some(path) = &cfg.data.embeddings else {
        return Ok(None);
    };
    let vocab: HashSet<&str> = data
        .train
        .iter()
        .chain(&data.dev)
        .chain(&data.test)
        .flat_map(|t| t.words())
        .collect();
    let keep = |w: &str| vocab.contains(w);
    let mut table = load_embeddings(path, Some(&keep))?;
    table.frozen = cfg.data.freeze_embeddings;
    Ok(Some(table))
}

/// Parses trees' yields (or decodes their gold signals when `oracle`),
/// sentence-parallel on the current rayon pool.
pub fn parse_trees(
    model: &Model,
    trees: &[SyntaxTree],
    oracle: Option<(BinaryFactor, RelayLabels)>,
) -> Vec<std::result::Result<ParseOutcome, CombinatorError>> {
    trees
        .par_iter()
        .map(|t| match oracle {
            Some((factor, relay)) => {
                let s = stratify_for(t, model.config.mode, factor, relay)
                    .map_err(|e| CombinatorError::Config(e.to_string()))?;
                model.parse_oracle(&s)
            }
            None => model.parse(&t.words()),
        })
        .collect()
}

/// Parses and scores `golds` (preprocessed trees).
pub fn evaluate(model: &Model, golds: &[SyntaxTree], params: &EvalParams) -> Result<Score> {
    let preds = parse_trees(model, golds, None)
        .into_iter()
        .map(|r| r.map(|o| o.trees))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let gold: Vec<SyntaxTree> = golds.iter().map(expand_unary).collect();
    Ok(corpus_score(&gold, &preds, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f64,
    /// Mean per-sentence losses.
    pub loss: LossBreakdown,
    pub dev_f1: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str =
        "epoch\tsteps\tlr\tloss_tag\tloss_label\tloss_signal\tloss_total\tdev_f1\tseconds";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.3e}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{}\t{:.2}",
            self.epoch,
            self.steps,
            self.learning_rate,
            self.loss.tag,
            self.loss.label,
            self.loss.signal,
            self.loss.total,
            self.dev_f1.map_or("-".into(), |f| format!("{f:.2}")),
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
    TimeLimit,
}

pub struct TrainOutcome {
    /// Parameters of the best dev evaluation.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_dev_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

/// One sentence's gradients and losses.
fn sentence_step(
    model: &Model,
    tree: &SyntaxTree,
    policy: &FactorPolicy,
    relay: RelayLabels,
    singletons: &HashSet<usize>,
    unk_replace: f64,
    mut rng: ChaCha8Rng,
) -> Result<(Gradients, LossBreakdown)> {
    let factor = sample_factor(policy, &mut rng);
    let sample = stratify_for(tree, model.config.mode, factor, relay)?;
    let mut enc = model.encode(&sample)?;
    for w in &mut enc.words {
        if singletons.contains(w) && rng.gen::<f64>() < unk_replace {
            *w = 0;
        }
    }
    let mut g = Graph::new(&model.store);
    let (loss, parts) = model.loss(&mut g, &enc, Some(&mut rng))?;
    let grads = g.backward(loss).map_err(CombinatorError::from)?;
    Ok((grads, parts))
}

/// Per-sentence generator, independent of scheduling.
fn sentence_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32));
    r.set_stream(index as u64);
    r
}

/// One optimizer update over `batch` (indices into `trees`). Gradients are
/// summed in batch order, so the result does not depend on thread count.
pub fn train_step(
    model: &mut Model,
    trees: &[SyntaxTree],
    batch: &[usize],
    cfg: &TrainConfig,
    relay: RelayLabels,
    singletons: &HashSet<usize>,
    learning_rate: f64,
    seed: u64,
    epoch: usize,
) -> Result<LossBreakdown> {
    let policy = cfg.policy()?;
    model.store.zero_grad();
    let mut sum = LossBreakdown::default();
    let scale = 1.0 / batch.len() as f64;
    let width = rayon::current_num_threads().max(1);
    for chunk in batch.chunks(width) {
        let m: &Model = model;
        let results = chunk
            .par_iter()
            .map(|&i| {
                sentence_step(
                    m,
                    &trees[i],
                    &policy,
                    relay,
                    singletons,
                    cfg.unk_replace,
                    sentence_rng(seed, epoch, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for (g, parts) in results {
            model.store.accumulate(&g, scale);
            sum += parts;
        }
    }
    if cfg.clip_norm > 0.0 {
        let n = model.store.grad_norm();
        if n > cfg.clip_norm {
            model.store.scale_grads(cfg.clip_norm / n);
        }
    }
    model.step += 1;
    Adam {
        lr: learning_rate,
        ..Adam::default()
    }
    .step(&mut model.store, model.step);
    Ok(sum)
}

/// Trains from `model` on `data.train`, evaluating on `data.dev`.
pub fn train(
    cfg: &RunConfig,
    mut model: Model,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let relay = cfg.data.relay_labels;
    let trees: Vec<SyntaxTree> = data
        .train
        .iter()
        .filter(|x| cfg.data.max_train_len.is_none_or(|m| x.len() <= m))
        .cloned()
        .collect();
    if trees.is_empty() {
        return Err(TrainError::Config("no training sentences".into()));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for tr in &trees {
        for w in model.word_ids(&tr.words()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let singletons: HashSet<usize> = counts
        .into_iter()
        .filter(|&(w, c)| c == 1 && w != 0)
        .map(|(w, _)| w)
        .collect();

    let start = Instant::now();
    let mut order: Vec<usize> = (0..trees.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=t.max_epochs {
        let epoch_start = Instant::now();
        let lr = t.learning_rate_at(stale_count(&history));
        order.shuffle(&mut shuffle);
        let mut total = LossBreakdown::default();
        for batch in order.chunks(t.batch_size) {
            total += train_step(
                &mut model, &trees, batch, t, relay, &singletons, lr, cfg.seed, epoch,
            )?;
        }
        let n = trees.len() as f64;
        let loss = LossBreakdown {
            tag: total.tag / n,
            label: total.label / n,
            signal: total.signal / n,
            total: total.total / n,
        };
        let dev_f1 = if epoch % t.eval_every == 0 && !data.dev.is_empty() {
            let f1 = evaluate(&model, &data.dev, &cfg.eval)?.f1();
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.store.clone()));
            }
            history.push(f1);
            Some(f1)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            steps: model.step,
            learning_rate: lr,
            loss,
            dev_f1,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        if dev_f1.is_some() && t.target_f1.is_some_and(|target| dev_f1 >= Some(target)) {
            stop = StopReason::TargetReached;
            break;
        }
        if dev_f1.is_some() && crate::eval::early_stopping(&history, t.patience) {
            stop = StopReason::Patience;
            break;
        }
        if t
            .time_limit_secs
            .is_some_and(|lim| start.elapsed().as_secs_f64() >= lim)
        {
            stop = StopReason::TimeLimit;
            break;
        }
    }
    let (best_dev_f1, best_epoch) = match best {
        Some((f1, epoch, store)) => {
            model.store = store;
            (Some(f1), Some(epoch))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_dev_f1,
        best_epoch,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinator::ComposeVariant;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig {
            seed: 5,
            model: ModelConfig {
                mode,
                model_size: 16,
                label_hidden: 16,
                orientation_hidden: 8,
                chunk_hidden: 8,
                context_depth: 1,
                variant: ComposeVariant::Cv,
                ..ModelConfig::default()
            },
            data: DataConfig {
                synthetic: SyntheticData {
                    corpus: CorpusSpec {
                        sentences: 14,
                        seed: 3,
                        ..CorpusSpec::default()
                    },
                    dev: 2,
                    test: 2,
                },
                ..DataConfig::default()
            },
            train: TrainConfig {
                batch_size: 5,
                learning_rate: 0.01,
                max_epochs: 10,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = tiny(Mode::Multi);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml("[train]\nbatchsize = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nfactor = \"L80R10\"").is_err());
        let d = RunConfig::from_toml("").unwrap();
        assert_eq!(d.train.batch_size, 80);
        assert_eq!(d.model.model_size, 300);
        assert_eq!(d.train.policy().unwrap(), FactorPolicy::Fixed(BinaryFactor::Right));
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig {
            learning_rate: 1.0,
            decay_after: 2,
            decay_span: 4,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..8).map(|s| t.learning_rate_at(s)).collect();
        assert_eq!(lrs[..2], [1.0, 1.0]);
        assert_eq!(lrs[2], 0.75);
        assert_eq!(lrs[4], 0.25);
        assert_eq!(lrs[7], 0.1);
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        for mode in [Mode::Binary, Mode::Multi] {
            let mut cfg = tiny(mode);
            cfg.model.recurrent_dropout = 0.0;
            cfg.model.feedforward_dropout = 0.0;
            cfg.train.unk_replace = 0.0;
            let data = Dataset::from_synthetic(&cfg.data.synthetic).unwrap();
            assert_eq!(data.train.len(), 10);
            let mut model = build_model(&cfg, &data, None).unwrap();
            let all: Vec<usize> = (0..10).collect();
            let mut losses = Vec::new();
            for step in 0..50 {
                let l = train_step(
                    &mut model,
                    &data.train,
                    &all,
                    &cfg.train,
                    cfg.data.relay_labels,
                    &HashSet::new(),
                    0.01,
                    cfg.seed,
                    step,
                )
                .unwrap();
                losses.push(l.total / 10.0);
            }
            assert!(
                losses[49] < 0.5 * losses[0],
                "{mode:?}: {} -> {}",
                losses[0],
                losses[49]
            );
        }
    }

    #[test]
    fn seeded_runs_are_identical_across_thread_counts() {
        let cfg = tiny(Mode::Binary);
        let data = Dataset::from_synthetic(&cfg.data.synthetic).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let model = build_model(&cfg, &data, None).unwrap();
                let out = train(&cfg, model, &data, |_| {}).unwrap();
                out.log.iter().map(|e| e.loss.total).collect::<Vec<_>>()
            })
        };
        assert_eq!(run(1), run(1));
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn dev_history_drives_best_model() {
        let mut cfg = tiny(Mode::Binary);
        cfg.train.max_epochs = 4;
        let data = Dataset::from_synthetic(&cfg.data.synthetic).unwrap();
        let model = build_model(&cfg, &data, None).unwrap();
        let mut seen = 0;
        let out = train(&cfg, model, &data, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        let best = out.best_dev_f1.unwrap();
        let again = evaluate(&out.model, &data.dev, &cfg.eval).unwrap().f1();
        assert_eq!(best, again);
        assert!(out.log.iter().all(|e| e.dev_f1.unwrap() <= best));
        assert!(out.log[0].to_tsv().split('\t').count() == EpochLog::TSV_HEADER.split('\t').count());
    }
}
