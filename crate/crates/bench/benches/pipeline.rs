use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;

use ncp_bench::{corpus, samples};
use ncp_core::combinator::Mode;
use ncp_core::eval::{corpus_score, EvalParams};
use ncp_core::recover::expand_unary;
use ncp_core::stratify::{binarize, stratify_binary, stratify_multi, BinaryFactor};
use ncp_core::{parse_brackets, recover_tree, render_brackets};

fn symbolic(c: &mut Criterion) {
    let trees = corpus(200);
    let text: String = trees.iter().map(|t| render_brackets(t) + "\n").collect();
    let binary = samples(&trees, Mode::Binary);
    let multi = samples(&trees, Mode::Multi);

    let mut g = c.benchmark_group("symbolic");
    g.throughput(Throughput::Elements(trees.len() as u64));
    g.bench_function("read_brackets", |b| b.iter(|| parse_brackets(black_box(&text)).unwrap()));
    for f in BinaryFactor::ALL {
        g.bench_function(format!("stratify_binary/{f}"), |b| {
            b.iter(|| {
                for t in &trees {
                    black_box(stratify_binary(&binarize(t, f)).unwrap());
                }
            })
        });
    }
    g.bench_function("stratify_multi", |b| {
        b.iter(|| {
            for t in &trees {
                black_box(stratify_multi(t).unwrap());
            }
        })
    });
    g.bench_function("recover/binary", |b| {
        b.iter(|| {
            for s in &binary {
                black_box(recover_tree(s).unwrap());
            }
        })
    });
    g.bench_function("recover/multi", |b| {
        b.iter(|| {
            for s in &multi {
                black_box(recover_tree(s).unwrap());
            }
        })
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let trees = corpus(500);
    let gold: Vec<_> = trees.iter().map(expand_unary).collect();
    let preds: Vec<Vec<_>> = gold.iter().map(|t| vec![t.clone()]).collect();
    let params = EvalParams::default();
    let mut g = c.benchmark_group("eval");
    g.throughput(Throughput::Elements(gold.len() as u64));
    g.bench_function("corpus_score", |b| {
        b.iter_batched(
            || preds.clone(),
            |p| corpus_score(&gold, &p, &params).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, symbolic, scoring);
criterion_main!(benches);
