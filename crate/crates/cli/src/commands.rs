use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use ncp_core::combinator::{Mode, Model};
use ncp_core::eval::{corpus_score, headedness_report, heads_to_tsv, read_parses, EvalParams};
use ncp_core::recover::{expand_unary, validate, ParseOutcome};
use ncp_core::stratify::{
    binarize as binarize_tree, complexity_fit, compression_stats, expected_node_bound,
    orientation_stats, sample_factor, stratify_binary, stratify_multi, triangular_node_count,
    BinaryFactor, FactorPolicy, StratifiedSample,
};
use ncp_core::synth::{generate_corpus, CorpusSpec};
use ncp_core::train::{
    build_model, load_corpus_embeddings, parse_trees, stratify_for, train as run_training,
    Dataset, EpochLog, RunConfig,
};
use ncp_core::treebank::{read_treebank, Preprocessor, SyntaxTree};

use crate::{
    BinarizeArgs, CorpusArgs, EvalArgs, GenerateArgs, HeadsArgs, ParseArgs, StatsArgs, TrainArgs,
};

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Reads and preprocesses a treebank; trees that are empty after trace
/// removal are dropped.
fn read_trees(path: &Path) -> Result<Vec<SyntaxTree>> {
    let pre = Preprocessor::default();
    let trees = read_treebank(path)?;
    Ok(trees.iter().filter_map(|t| pre.apply(&t.tree)).collect())
}

fn corpus(args: &CorpusArgs) -> Result<Vec<SyntaxTree>> {
    match (&args.input, args.synthetic) {
        (Some(p), _) => read_trees(p),
        (None, Some(n)) => {
            let spec = CorpusSpec {
                sentences: n,
                seed: args.seed,
                branching: args.branching.into(),
                ..CorpusSpec::default()
            };
            let pre = Preprocessor::default();
            Ok(generate_corpus(&spec).iter().filter_map(|t| pre.apply(t)).collect())
        }
        (None, None) => bail!("either --input or --synthetic is required"),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

/// The single factor oracle decoding uses; mixed policies pick right.
fn oracle_factor(policy: FactorPolicy) -> BinaryFactor {
    match policy {
        FactorPolicy::Fixed(f) => f,
        FactorPolicy::Mixed { .. } => BinaryFactor::Right,
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let spec = CorpusSpec {
        sentences: args.sentences,
        seed: args.seed,
        branching: args.branching.into(),
        ..CorpusSpec::default()
    };
    let mut out = output(args.output.as_deref())?;
    for t in generate_corpus(&spec) {
        writeln!(out, "{t}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn binarize(args: BinarizeArgs) -> Result<()> {
    let trees = corpus(&args.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.corpus.seed);
    let mut out = output(args.output.as_deref())?;
    let mut layers = args.layers.as_deref().map(create).transpose()?;
    for t in &trees {
        let f = sample_factor(&args.factor, &mut rng);
        let written = match args.mode {
            Mode::Binary => binarize_tree(t, f),
            Mode::Multi => t.clone(),
        };
        writeln!(out, "{written}")?;
        if let Some(w) = layers.as_mut() {
            let s = stratify_for(t, args.mode, f, args.relay.into())?;
            serde_json::to_writer(&mut *w, &s)?;
            writeln!(w)?;
        }
    }
    out.flush()?;
    if let Some(mut w) = layers {
        w.flush()?;
    }
    log::info!("{} trees written", trees.len());
    Ok(())
}

fn stats_row(name: &str, samples: &[StratifiedSample], out: &mut dyn Write, by_length: bool) -> Result<()> {
    let (left, right) = orientation_stats(samples);
    let c = compression_stats(samples);
    let words: usize = samples.iter().map(StratifiedSample::len).sum();
    let nodes: usize = samples.iter().map(StratifiedSample::node_count).sum();
    let triangular: usize = samples.iter().map(|s| triangular_node_count(s.len())).sum();
    let bound = expected_node_bound(c.mean, words)
        .map_or("-".to_string(), |b| format!("{b:.0}"));
    let fit = complexity_fit(samples)
        .map_or(("-".to_string(), "-".to_string()), |f| {
            (format!("{:.4}", f.a2), format!("{:.4}", f.a1))
        });
    let right_pct = if left + right == 0 {
        "-".to_string()
    } else {
        format!("{:.2}", 100.0 * right as f64 / (left + right) as f64)
    };
    writeln!(
        out,
        "{name}\t{left}\t{right}\t{right_pct}\t{:.4}\t{:.4}\t{words}\t{nodes}\t{bound}\t{triangular}\t{}\t{}",
        c.mean, c.std, fit.0, fit.1
    )?;
    if by_length {
        for line in c.to_tsv().lines() {
            writeln!(out, "# {name}\t{line}")?;
        }
    }
    Ok(())
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let trees = corpus(&args.corpus)?;
    let mut out = output(None)?;
    writeln!(
        out,
        "layout\tleft\tright\tright_pct\tc_mean\tc_std\twords\tnodes\tbound\ttriangular\ta2\ta1"
    )?;
    let factors: Vec<BinaryFactor> = match args.factor {
        Some(p) => p.support(),
        None => BinaryFactor::ALL.to_vec(),
    };
    for f in factors {
        let samples = trees
            .par_iter()
            .map(|t| stratify_binary(&binarize_tree(t, f)))
            .collect::<Result<Vec<_>, _>>()?;
        stats_row(&f.to_string(), &samples, &mut out, args.by_length)?;
    }
    if args.factor.is_none() {
        let samples = trees
            .par_iter()
            .map(stratify_multi)
            .collect::<Result<Vec<_>, _>>()?;
        stats_row("multi", &samples, &mut out, args.by_length)?;
    }
    out.flush()?;
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.model.mode = m;
    }
    if let Some(f) = args.factor {
        cfg.train.factor = f.to_string();
    }
    cfg.validate()?;
    let data = Dataset::load(&cfg.data)?;
    log::info!(
        "data: {} train / {} dev / {} test sentences",
        data.train.len(),
        data.dev.len(),
        data.test.len()
    );
    let embeddings = load_corpus_embeddings(&cfg, &data)?;
    let model = build_model(&cfg, &data, embeddings.as_ref())?;
    let mut log_file = args.log.as_deref().map(create).transpose()?;
    if let Some(w) = log_file.as_mut() {
        writeln!(w, "{}", EpochLog::TSV_HEADER)?;
    }
    let mut write_error = None;
    let outcome = run_training(&cfg, model, &data, |e| {
        log::info!("{}", e.to_tsv());
        if let Some(w) = log_file.as_mut() {
            if let Err(err) = writeln!(w, "{}", e.to_tsv()).and_then(|_| w.flush()) {
                write_error.get_or_insert(err);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).context("cannot write training log");
    }
    outcome
        .model
        .save(&args.output)
        .with_context(|| format!("cannot save model to {}", args.output.display()))?;
    let mut summary = json!({
        "stop": outcome.stop,
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_dev_f1": outcome.best_dev_f1,
        "model": args.output.display().to_string(),
    });
    if !data.test.is_empty() {
        let s = ncp_core::train::evaluate(&outcome.model, &data.test, &cfg.eval)?;
        summary["test"] = serde_json::to_value(s)?;
        summary["test_f1"] = json!(s.f1());
    }
    println!("{summary}");
    Ok(())
}

fn read_sentences(path: Option<&Path>) -> Result<Vec<Vec<String>>> {
    let mut text = String::new();
    match path {
        Some(p) => {
            File::open(p)
                .with_context(|| format!("cannot open {}", p.display()))?
                .read_to_string(&mut text)?;
        }
        None => {
            for line in BufReader::new(io::stdin().lock()).lines() {
                text.push_str(&line?);
                text.push('\n');
            }
        }
    }
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect())
}

pub fn parse(args: ParseArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let outcomes: Vec<ParseOutcome> = match &args.input {
        Some(p) => {
            let trees = read_trees(p)?;
            let oracle = args
                .oracle
                .then(|| (oracle_factor(args.factor), args.relay.into()));
            let outcomes = parse_trees(&model, &trees, oracle)
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            let gold: Vec<SyntaxTree> = trees.iter().map(expand_unary).collect();
            let preds: Vec<Vec<SyntaxTree>> = outcomes.iter().map(|o| o.trees.clone()).collect();
            let score = corpus_score(&gold, &preds, &EvalParams::default())?;
            log::info!("{}", score.summary());
            outcomes
        }
        None => {
            let sentences = read_sentences(args.text.as_deref())?;
            sentences
                .par_iter()
                .map(|s| model.parse(s))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let mut out = output(args.output.as_deref())?;
    for o in &outcomes {
        writeln!(out, "{}", o.to_brackets())?;
    }
    out.flush()?;
    if let Some(p) = &args.diagnostics {
        let mut w = create(p)?;
        for (i, o) in outcomes.iter().enumerate() {
            let v = validate(o);
            let record = json!({
                "sentence": i,
                "words": o.layers.len(),
                "validity": v.validity,
                "trees": v.trees,
                "clamped_edges": v.clamped_edges,
                "label_repairs": v.label_repairs,
                "stalled": o.diagnostics.stalled,
            });
            writeln!(w, "{record}")?;
        }
        w.flush()?;
    }
    let forests = outcomes.iter().filter(|o| o.is_forest()).count();
    log::info!("{} sentences parsed, {forests} forests", outcomes.len());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let params = match &args.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalParams::default(),
    };
    let gold: Vec<SyntaxTree> = read_trees(&args.gold)?.iter().map(expand_unary).collect();
    let text = std::fs::read_to_string(&args.pred)
        .with_context(|| format!("cannot read {}", args.pred.display()))?;
    let pre = Preprocessor::default();
    let preds: Vec<Vec<SyntaxTree>> = read_parses(&text)?
        .into_iter()
        .map(|group| {
            group
                .iter()
                .filter_map(|t| pre.apply(t))
                .map(|t| expand_unary(&t))
                .collect()
        })
        .collect();
    let score = corpus_score(&gold, &preds, &params)?;
    if args.json {
        let mut v = serde_json::to_value(score)?;
        v["precision"] = json!(score.precision());
        v["recall"] = json!(score.recall());
        v["f1"] = json!(score.f1());
        v["tag_accuracy"] = json!(score.tag_accuracy());
        println!("{v}");
    } else {
        println!("{}", score.summary());
    }
    Ok(())
}

pub fn heads(args: HeadsArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let trees = read_trees(&args.input)?;
    let oracle = args
        .oracle
        .then(|| (oracle_factor(args.factor), args.relay.into()));
    let outcomes = parse_trees(&model, &trees, oracle)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = output(args.output.as_deref())?;
    write!(out, "{}", heads_to_tsv(&headedness_report(&outcomes)))?;
    out.flush()?;
    Ok(())
}

pub fn print_config() -> Result<()> {
    print!("{}", RunConfig::default().to_toml());
    Ok(())
}
