use super::{Graph, ParamStore, Result, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Compares back-propagated gradients of `loss` with central differences of
/// step `step` for every entry of every trainable parameter (or the first
/// `limit` entries of each when given).
///
/// The error for one entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    step: f64,
    floor: f64,
    limit: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let ids: Vec<_> = (0..store.len())
        .map(super::ParamId)
        .filter(|&id| !store.get(id).frozen)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in ids {
        let analytic = grads.get(store, id);
        let n = limit.map_or(analytic.len(), |l| l.min(analytic.len()));
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]", store.get(id).name);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{BiLstm, Dense, ParamId, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-4;

    fn store_with(rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| s.add(format!("p{i}"), Tensor::uniform(r, c, 1.0, rng)).unwrap())
            .collect();
        (s, ids)
    }

    /// Reduces a tensor to a scalar through fixed random weights so every
    /// output coordinate gets a distinct upstream gradient.
    fn project(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
        let s = g.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(Tensor::uniform(s.rows, s.cols, 1.0, &mut rng));
        let m = g.mul(v, w)?;
        Ok(g.sum(m))
    }

    fn check(
        name: &str,
        shapes: &[(usize, usize)],
        f: impl Fn(&mut Graph<'_>, &[ParamId]) -> Result<Var>,
    ) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut store, ids) = store_with(&mut rng, shapes);
            let r = gradient_check(&mut store, STEP, 1e-2, None, |g| {
                let out = f(g, &ids)?;
                project(g, out, 1000 + seed)
            })
            .unwrap();
            assert!(
                r.max_rel_error < TOL,
                "{name} seed {seed}: {} at {}",
                r.max_rel_error,
                r.worst
            );
        }
    }

    #[test]
    fn elementwise_ops() {
        check("add", &[(2, 3), (2, 3)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.add(a, b)
        });
        check("sub", &[(2, 3), (2, 3)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.sub(a, b)
        });
        check("mul", &[(2, 3), (2, 3)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.mul(a, b)
        });
        check("scale", &[(2, 3)], |g, p| {
            let a = g.param(p[0]);
            Ok(g.scale(a, -1.7))
        });
        check("one_minus", &[(1, 4)], |g, p| {
            let a = g.param(p[0]);
            Ok(g.one_minus(a))
        });
        check("scalar_mul", &[(1, 1), (2, 3)], |g, p| {
            let (s, x) = (g.param(p[0]), g.param(p[1]));
            g.scalar_mul(s, x)
        });
        check("sigmoid", &[(3, 2)], |g, p| {
            let a = g.param(p[0]);
            Ok(g.sigmoid(a))
        });
        check("tanh", &[(3, 2)], |g, p| {
            let a = g.param(p[0]);
            Ok(g.tanh(a))
        });
    }

    #[test]
    fn relu_away_from_kink() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            // keep entries at least 0.1 from zero
            let data = (0..6)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.1..1.0);
                    if rng.gen() { x } else { -x }
                })
                .collect();
            let id = store.add("a", Tensor::from_vec(2, 3, data).unwrap()).unwrap();
            let r = gradient_check(&mut store, STEP, 1e-2, None, |g| {
                let a = g.param(id);
                let y = g.relu(a);
                project(g, y, seed)
            })
            .unwrap();
            assert!(r.max_rel_error < TOL);
        }
    }

    #[test]
    fn structural_ops() {
        check("linear", &[(2, 3), (4, 3), (1, 4)], |g, p| {
            let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
            g.linear(x, w, Some(b))
        });
        check("matmul", &[(2, 3), (3, 4)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.matmul(a, b)
        });
        check("concat", &[(2, 3), (2, 2)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.concat(&[a, b])
        });
        check("stack", &[(1, 3), (2, 3)], |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.stack(&[a, b, a])
        });
        check("rows", &[(4, 3)], |g, p| {
            let a = g.param(p[0]);
            g.rows(a, 1, 2)
        });
        check("cols", &[(2, 5)], |g, p| {
            let a = g.param(p[0]);
            g.cols(a, 1, 3)
        });
        check("reshape", &[(2, 6)], |g, p| {
            let a = g.param(p[0]);
            g.reshape(a, 3, 4)
        });
        check("softmax", &[(2, 4)], |g, p| {
            let a = g.param(p[0]);
            Ok(g.softmax(a))
        });
        check("gather", &[(5, 3)], |g, p| g.gather(p[0], &[4, 0, 4]));
        check("lstm_cell", &[(1, 8), (1, 2)], |g, p| {
            let (z, c) = (g.param(p[0]), g.param(p[1]));
            g.lstm_cell(z, Some(c))
        });
    }

    #[test]
    fn losses() {
        check("cross_entropy", &[(3, 4)], |g, p| {
            let a = g.param(p[0]);
            g.cross_entropy(a, &[0, 3, 1])
        });
        check("bce", &[(1, 4)], |g, p| {
            let a = g.param(p[0]);
            let s = g.sigmoid(a);
            g.bce(s, &[true, false, false, true])
        });
        // hinge is piecewise linear; scores kept off the hinge point
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let data = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
            let targets: Vec<bool> = data.iter().map(|&s: &f64| (s - 1.0).abs() > 0.1 && s > 0.0).collect();
            let data: Vec<f64> = data
                .iter()
                .zip(&targets)
                .map(|(&s, &t)| if (1.0 - if t { s } else { -s }).abs() < 0.1 { s * 1.5 + 0.3 } else { s })
                .collect();
            let id = store.add("s", Tensor::from_vec(1, 4, data).unwrap()).unwrap();
            let r = gradient_check(&mut store, STEP, 1e-2, None, |g| {
                let s = g.param(id);
                g.hinge(s, &targets)
            })
            .unwrap();
            assert!(r.max_rel_error < TOL, "hinge seed {seed}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn lstm_and_dense_stack() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let lstm = BiLstm::new(&mut store, "l", 3, 2, &mut rng).unwrap();
            let head = Dense::new(&mut store, "d", 4, 3, &mut rng).unwrap();
            let xs = Tensor::uniform(4, 3, 1.0, &mut rng);
            let r = gradient_check(&mut store, STEP, 1e-2, None, |g| {
                let x = g.input(xs.clone());
                let h = lstm.forward(g, x)?;
                let y = head.forward(g, h)?;
                g.cross_entropy(y, &[0, 2, 1, 1])
            })
            .unwrap();
            assert!(
                r.max_rel_error < TOL,
                "seed {seed}: {} at {}",
                r.max_rel_error,
                r.worst
            );
        }
    }
}
