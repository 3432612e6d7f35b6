use proptest::prelude::*;

use ncp_core::autodiff::{Graph, ParamStore, Tensor};
use ncp_core::eval::{score_trees, EvalParams};
use ncp_core::recover::{expand_unary, recover_tree};
use ncp_core::stratify::{
    binarize, binary_groups, chunk_groups, clamp_chunks, clamp_orientations, stratify_binary,
    stratify_multi, BinaryFactor,
};
use ncp_core::treebank::{parse_brackets, preprocess, render_brackets, SyntaxTree};

fn leaf() -> impl Strategy<Value = SyntaxTree> {
    (
        prop::sample::select(vec!["DT", "NN", "VBD", "RB", ",", "-NONE-"]),
        "[a-z]{1,6}",
    )
        .prop_map(|(t, w)| SyntaxTree::leaf(t, w))
}

fn tree() -> impl Strategy<Value = SyntaxTree> {
    let label = prop::sample::select(vec!["S", "NP", "VP", "PP", "ADVP", "NP-SBJ"]);
    leaf()
        .prop_recursive(5, 48, 4, move |inner| {
            (label.clone(), prop::collection::vec(inner, 1..5))
                .prop_map(|(l, c)| SyntaxTree::node(l, c))
        })
        .prop_map(|t| if t.is_leaf() { SyntaxTree::node("S", vec![t]) } else { t })
}

fn factor() -> impl Strategy<Value = BinaryFactor> {
    prop::sample::select(BinaryFactor::ALL.to_vec())
}

proptest! {
    #[test]
    fn brackets_round_trip(t in tree()) {
        let back = parse_brackets(&render_brackets(&t)).unwrap();
        prop_assert_eq!(back, vec![t]);
    }

    #[test]
    fn preprocessing_is_idempotent(t in tree()) {
        if let Some(p) = preprocess(&t) {
            prop_assert_eq!(preprocess(&p), Some(p.clone()));
            prop_assert!(p.is_well_formed());
        }
    }

    #[test]
    fn binary_layers_recover_the_tree(t in tree(), f in factor()) {
        let Some(p) = preprocess(&t) else { return Ok(()) };
        let s = stratify_binary(&binarize(&p, f)).unwrap();
        prop_assert!(s.layer_lengths().windows(2).all(|w| w[1] < w[0]));
        let out = recover_tree(&s).unwrap();
        prop_assert_eq!(out.trees[0].words(), p.words());
        prop_assert_eq!(out.trees, vec![expand_unary(&p)]);
    }

    #[test]
    fn multi_layers_recover_the_tree(t in tree()) {
        let Some(p) = preprocess(&t) else { return Ok(()) };
        let out = recover_tree(&stratify_multi(&p).unwrap()).unwrap();
        prop_assert_eq!(out.trees, vec![expand_unary(&p)]);
    }

    #[test]
    fn clamped_orientations_always_shrink(mut ori in prop::collection::vec(any::<bool>(), 2..40)) {
        clamp_orientations(&mut ori);
        let groups = binary_groups(&ori);
        prop_assert!(!groups.is_empty() && groups.len() < ori.len());
    }

    #[test]
    fn clamped_chunks_partition_the_layer(mut c in prop::collection::vec(any::<bool>(), 2..40)) {
        clamp_chunks(&mut c);
        let groups = chunk_groups(&c);
        let covered: Vec<usize> = groups.iter().flat_map(|r| r.clone()).collect();
        prop_assert_eq!(covered, (0..c.len() - 1).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(rows, cols, 20.0, &mut rng));
        let y = g.softmax(x);
        let v = g.value(y);
        for r in 0..rows {
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn swapping_gold_and_prediction_swaps_precision_and_recall(
        t in tree(),
        mask in prop::collection::vec(any::<bool>(), 1..16),
    ) {
        let Some(a) = preprocess(&t) else { return Ok(()) };
        let b = flatten(&a, &mask, &mut 0);
        let p = EvalParams::default();
        let ab = score_trees(&a, std::slice::from_ref(&b), &p).unwrap();
        let ba = score_trees(&b, std::slice::from_ref(&a), &p).unwrap();
        prop_assert_eq!(ab.matched, ba.matched);
        prop_assert_eq!((ab.gold, ab.predicted), (ba.predicted, ba.gold));
        prop_assert_eq!(score_trees(&a, std::slice::from_ref(&a), &p).unwrap().f1(), 100.0);
    }
}

/// Splices internal children into their parent wherever `mask` (cycled
/// over internal nodes in pre-order) is set.
fn flatten(t: &SyntaxTree, mask: &[bool], k: &mut usize) -> SyntaxTree {
    let mut children = Vec::new();
    for c in &t.children {
        if c.is_leaf() {
            children.push(c.clone());
            continue;
        }
        let drop = mask[*k % mask.len()];
        *k += 1;
        let c = flatten(c, mask, k);
        if drop {
            children.extend(c.children);
        } else {
            children.push(c);
        }
    }
    SyntaxTree::node(t.label.clone(), children)
}
