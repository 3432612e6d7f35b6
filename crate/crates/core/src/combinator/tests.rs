use super::*;
use crate::recover::expand_unary;
use crate::stratify::{binarize, stratify_binary, stratify_multi, BinaryFactor};
use crate::synth::{generate_corpus, CorpusSpec};
use crate::treebank::{parse_brackets, preprocess, SyntaxTree};

fn small(mode: Mode, variant: ComposeVariant) -> ModelConfig {
    ModelConfig {
        mode,
        model_size: 8,
        label_hidden: 8,
        orientation_hidden: 4,
        chunk_hidden: 4,
        context_depth: 1,
        variant,
        recurrent_dropout: 0.0,
        feedforward_dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize) -> Vec<SyntaxTree> {
    generate_corpus(&CorpusSpec {
        sentences: n,
        seed: 7,
        ..CorpusSpec::default()
    })
    .iter()
    .filter_map(preprocess)
    .collect()
}

fn samples(trees: &[SyntaxTree], mode: Mode) -> Vec<StratifiedSample> {
    trees
        .iter()
        .map(|t| match mode {
            Mode::Binary => stratify_binary(&binarize(t, BinaryFactor::Right)).unwrap(),
            Mode::Multi => stratify_multi(t).unwrap(),
        })
        .collect()
}

fn model(mode: Mode, variant: ComposeVariant, s: &[StratifiedSample]) -> Model {
    Model::from_samples(small(mode, variant), s, 3).unwrap()
}

fn rows(g: &mut Graph<'_>, data: &[&[f64]]) -> Var {
    let cols = data[0].len();
    let flat = data.iter().flat_map(|r| r.iter().copied()).collect();
    g.input(Tensor::from_vec(data.len(), cols, flat).unwrap())
}

fn zero_params(m: &mut Model, prefix: &str) {
    for p in m.store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn contextual_shapes() {
    let s = samples(&corpus(5), Mode::Binary);
    for depth in [0, 2] {
        let cfg = ModelConfig {
            context_depth: depth,
            ..small(Mode::Binary, ComposeVariant::Cv)
        };
        let m = Model::from_samples(cfg, &s, 1).unwrap();
        let mut g = Graph::new(&m.store);
        let x = m.contextualize(&mut g, &[1, 2, 3], None).unwrap();
        assert_eq!(g.shape(x).rows, 3);
        assert_eq!(g.shape(x).cols, 8);
        let one = m.contextualize(&mut g, &[1], None).unwrap();
        assert_eq!(g.shape(one).rows, 1);
        let tags = m.predict_tags(&mut g, x, None).unwrap();
        assert_eq!(g.shape(tags).cols, m.tags.len());
    }
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    let mut g = Graph::new(&m.store);
    assert!(matches!(
        m.contextualize(&mut g, &[], None),
        Err(CombinatorError::Empty)
    ));
}

#[test]
fn default_output_width() {
    let s = samples(&corpus(3), Mode::Binary);
    let cfg = ModelConfig {
        context_depth: 1,
        ..ModelConfig::default()
    };
    let m = Model::from_samples(cfg, &s, 1).unwrap();
    let mut g = Graph::new(&m.store);
    let x = m.contextualize(&mut g, &[1, 2, 3, 4], None).unwrap();
    assert_eq!((g.shape(x).rows, g.shape(x).cols), (4, 300));
}

#[test]
fn heads_share_their_first_layer() {
    let s = samples(&corpus(5), Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    let shared = m.shared_layer();
    assert_eq!(m.tag_head().input, shared.output);
    assert_eq!(m.label_head().input, shared.output);
    let names: Vec<&str> = m
        .store
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| n.starts_with("heads."))
        .collect();
    assert_eq!(names.iter().filter(|n| n.contains("shared")).count(), 2);
}

#[test]
fn orientation_layers() {
    let s = samples(&corpus(5), Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    let mut g = Graph::new(&m.store);
    let x = rows(&mut g, &[&[1.0; 8], &[2.0; 8], &[3.0; 8], &[4.0; 8]]);
    let (_, _, _, next, _) = m
        .binary_compose(&mut g, x, Some(&[true, false, true, false]))
        .unwrap();
    assert_eq!(g.shape(next).rows, 2);
    let pair = g.rows(x, 0, 2).unwrap();
    let (_, _, _, next, w) = m.binary_compose(&mut g, pair, Some(&[true, false])).unwrap();
    assert_eq!(g.shape(next).rows, 1);
    assert_eq!(w.len(), 1);
    // relay: right-right keeps the left node as is
    let (_, _, _, next, _) = m
        .binary_compose(&mut g, x, Some(&[true, true, false, false]))
        .unwrap();
    assert_eq!(g.shape(next).rows, 3);
    assert_eq!(g.value(next).row(0), &[1.0; 8]);
    assert_eq!(g.value(next).row(2), &[4.0; 8]);
}

#[test]
fn add_doubles_equal_inputs() {
    let s = samples(&corpus(5), Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Add, &s);
    let mut g = Graph::new(&m.store);
    let v = [0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.25];
    let x = rows(&mut g, &[&v, &v]);
    let (_, _, _, next, _) = m.binary_compose(&mut g, x, Some(&[true, false])).unwrap();
    let want: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
    assert_eq!(g.value(next).data(), want.as_slice());
}

#[test]
fn half_weight_gives_midpoint() {
    let s = samples(&corpus(5), Mode::Binary);
    let mut m = model(Mode::Binary, ComposeVariant::Cv, &s);
    zero_params(&mut m, "compose");
    let mut g = Graph::new(&m.store);
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let b = [-1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0];
    let x = rows(&mut g, &[&a, &b]);
    let (_, _, _, next, w) = m.binary_compose(&mut g, x, Some(&[true, false])).unwrap();
    for (i, &got) in g.value(next).data().iter().enumerate() {
        assert!((got - (a[i] + b[i]) / 2.0).abs() < 1e-12);
    }
    assert_eq!(w[0], vec![0.5, 0.5]);
}

#[test]
fn bias_only_weight_ignores_inputs() {
    let s = samples(&corpus(5), Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Ns, &s);
    let mut g = Graph::new(&m.store);
    let x = rows(
        &mut g,
        &[&[1.0; 8], &[-2.0; 8], &[0.3; 8], &[9.0; 8], &[4.0; 8], &[0.0; 8]],
    );
    let (_, _, _, _, w) = m
        .binary_compose(&mut g, x, Some(&[true, false, true, false, true, false]))
        .unwrap();
    assert_eq!(w.len(), 3);
    assert!(w.iter().all(|p| (p[0] - w[0][0]).abs() < 1e-15));
}

#[test]
fn chunk_attention() {
    let s = samples(&corpus(5), Mode::Multi);
    let m = model(Mode::Multi, ComposeVariant::Cv, &s);
    let mut g = Graph::new(&m.store);
    let x = rows(&mut g, &[&[1.0; 8], &[2.0; 8], &[3.0; 8]]);
    let (logits, _, _, next, w) = m
        .multi_compose(&mut g, x, Some(&[true, false, false, true]))
        .unwrap();
    assert_eq!(g.shape(logits).rows, 4);
    assert_eq!(g.shape(next).rows, 1);
    assert_eq!(w[0].len(), 3);
    assert!((w[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[0].iter().all(|&l| l >= 0.0));

    let (_, _, _, next, w) = m
        .multi_compose(&mut g, x, Some(&[true, true, false, true]))
        .unwrap();
    assert_eq!(g.shape(next).rows, 2);
    assert_eq!(g.value(next).row(0), &[1.0; 8]);
    assert_eq!(w.len(), 1);
}

#[test]
fn single_word_parse() {
    let trees: Vec<SyntaxTree> = parse_brackets("(S (NN hello))").unwrap();
    let s = samples(&trees, Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    let out = m.parse(&["hello"]).unwrap();
    assert_eq!(out.trees.len(), 1);
    let t = out.tree().unwrap();
    assert_eq!(t.label, "S");
    assert_eq!(t.children.len(), 1);
    assert_eq!(t.children[0].word.as_deref(), Some("hello"));
}

#[test]
fn oracle_decode_reproduces_gold() {
    let trees = corpus(40);
    for mode in [Mode::Binary, Mode::Multi] {
        let s = samples(&trees, mode);
        let m = model(mode, ComposeVariant::Cv, &s);
        for (t, sample) in trees.iter().zip(&s) {
            let out = m.parse_oracle(sample).unwrap();
            assert_eq!(out.trees.len(), 1);
            assert_eq!(out.tree().unwrap(), &expand_unary(t), "{mode:?}");
            if mode == Mode::Multi {
                let multi = out.merges.iter().filter(|mg| mg.children.len() > 1).count();
                assert!(out.merges.iter().all(|mg| mg.weights.len() == mg.children.len()));
                assert_eq!(multi, out.merges.len());
            }
        }
    }
}

#[test]
fn loss_weights_select_terms() {
    let trees = corpus(5);
    let s = samples(&trees, Mode::Binary);
    let mut cfg = small(Mode::Binary, ComposeVariant::Cv);
    cfg.loss_weights = [1.0, 0.0, 0.0];
    let m = Model::from_samples(cfg, &s, 2).unwrap();
    let enc = m.encode(&s[0]).unwrap();
    let mut g = Graph::new(&m.store);
    let (_, parts) = m.loss(&mut g, &enc, None).unwrap();
    assert_eq!(parts.total, parts.tag);
    assert!(parts.label > 0.0 && parts.signal > 0.0);
}

#[test]
fn teacher_forcing_follows_gold_shapes() {
    let trees = corpus(20);
    for mode in [Mode::Binary, Mode::Multi] {
        let s = samples(&trees, mode);
        let m = model(mode, ComposeVariant::Bv, &s);
        for sample in &s {
            let enc = m.encode(sample).unwrap();
            let mut g = Graph::new(&m.store);
            let trace = m.forward(&mut g, &enc.words, Some(&enc.signals), None).unwrap();
            let shapes: Vec<usize> = trace.layers.iter().map(|&v| g.shape(v).rows).collect();
            assert_eq!(shapes, sample.layer_lengths());
        }
    }
}

#[test]
fn random_models_always_finish_binary_parses() {
    let trees = corpus(30);
    let s = samples(&trees, Mode::Binary);
    for seed in 0..5 {
        let m = Model::from_samples(small(Mode::Binary, ComposeVariant::Cv), &s, seed).unwrap();
        for t in &trees {
            let out = m.parse(&t.words()).unwrap();
            assert!(!out.diagnostics.stalled);
            assert_eq!(out.trees.len(), 1);
            let lens = out.layers.layer_lengths();
            assert!(lens.windows(2).all(|w| w[1] < w[0]));
        }
    }
}

#[test]
fn unknown_words_map_to_unk() {
    let s = samples(&corpus(5), Mode::Binary);
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    assert_eq!(m.word_ids(&["zzz-unseen"]), vec![0]);
    let out = m.parse(&["zzz-unseen", "qqq"]).unwrap();
    assert_eq!(out.words(), vec!["zzz-unseen", "qqq"]);
}

#[test]
fn mode_mismatch_is_rejected() {
    let trees = corpus(3);
    let s = samples(&trees, Mode::Binary);
    let multi = samples(&trees, Mode::Multi);
    let m = model(Mode::Binary, ComposeVariant::Cv, &s);
    assert!(matches!(m.encode(&multi[0]), Err(CombinatorError::Mode(_))));
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.model_size = 7;
    assert!(c.validate().is_err());
    c.model_size = 8;
    c.loss_weights = [0.2, -0.1, 0.5];
    assert!(c.validate().is_err());
    let bad = toml::from_str::<ModelConfig>("model_size = 8\nbogus = 1");
    assert!(bad.is_err());
    let ok: ModelConfig = toml::from_str("variant = \"BV\"\nmode = \"multi\"").unwrap();
    assert_eq!((ok.variant, ok.mode), (ComposeVariant::Bv, Mode::Multi));
    assert_eq!("cs".parse::<ComposeVariant>(), Ok(ComposeVariant::Cs));
}

#[test]
fn checkpoint_round_trip() {
    let trees = corpus(10);
    let s = samples(&trees, Mode::Multi);
    let m = model(Mode::Multi, ComposeVariant::Cv, &s);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.labels, m.labels);
    // payloads are stored at single precision
    for (a, b) in m.store.iter().zip(back.store.iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
    let words = trees[0].words();
    assert_eq!(
        m.parse(&words).unwrap().layers.layer_lengths(),
        back.parse(&words).unwrap().layers.layer_lengths()
    );
}

#[test]
fn embeddings_overwrite_rows_and_freeze() {
    let s = samples(&corpus(5), Mode::Binary);
    let mut m = model(Mode::Binary, ComposeVariant::Cv, &s);
    let v = [0.5; 8];
    let n = m
        .set_embeddings([(m.words.item(1).to_string().as_str(), &v[..]), ("not-in-vocab", &v[..])], true)
        .unwrap();
    assert_eq!(n, 1);
    let id = m.embedding();
    assert!(m.store.get(id).frozen);
    let row = 1;
    assert_eq!(m.store.get(id).value.row(row), &v);
    let short = [1.0; 3];
    assert!(matches!(
        m.set_embeddings([("x", &short[..])], true),
        Err(CombinatorError::EmbeddingDim { expected: 8, found: 3 })
    ));
}
