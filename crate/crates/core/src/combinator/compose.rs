//! Interpolating two adjacent node vectors into their parent.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::autodiff::{Dense, Graph, ParamId, ParamStore, Var};

/// How the interpolation weight λ of a combined pair is produced.
///
/// `Add` sums the pair; every other variant returns
/// `λ ⊙ x_L + (1 − λ) ⊙ x_R` with λ from a sigmoid of:
///
/// | variant | λ     | input                                   |
/// |---------|-------|-----------------------------------------|
/// | `Ns`    | scalar| bias only                               |
/// | `Nv`    | vector| bias only                               |
/// | `Cs`    | scalar| dense over `x_L ⊕ x_R`                  |
/// | `Cv`    | vector| dense over `x_L ⊕ x_R`                  |
/// | `Bv`    | vector| `x_Lᵀ W x_R + U (x_L ⊕ x_R) + b`         |
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ComposeVariant {
    Add,
    Ns,
    Nv,
    Cs,
    #[default]
    Cv,
    Bv,
}

impl ComposeVariant {
    pub const ALL: [ComposeVariant; 6] = [
        ComposeVariant::Add,
        ComposeVariant::Ns,
        ComposeVariant::Nv,
        ComposeVariant::Cs,
        ComposeVariant::Cv,
        ComposeVariant::Bv,
    ];
}

impl std::fmt::Display for ComposeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ComposeVariant::Add => "ADD",
            ComposeVariant::Ns => "NS",
            ComposeVariant::Nv => "NV",
            ComposeVariant::Cs => "CS",
            ComposeVariant::Cv => "CV",
            ComposeVariant::Bv => "BV",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ComposeVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ComposeVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown compose variant `{s}` (ADD|NS|NV|CS|CV|BV)"))
    }
}

pub(super) enum Composer {
    Add,
    Bias { bias: ParamId, vector: bool },
    Concat(Dense),
    Biaffine { w: ParamId, u: Dense, size: usize },
}

impl Composer {
    pub fn new(
        variant: ComposeVariant,
        store: &mut ParamStore,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match variant {
            ComposeVariant::Add => Composer::Add,
            ComposeVariant::Ns | ComposeVariant::Nv => {
                let vector = variant == ComposeVariant::Nv;
                let cols = if vector { m } else { 1 };
                Composer::Bias {
                    bias: store.add_uniform("compose.bias", 1, cols, 1, rng)?,
                    vector,
                }
            }
            ComposeVariant::Cs => Composer::Concat(Dense::new(store, "compose", 2 * m, 1, rng)?),
            ComposeVariant::Cv => Composer::Concat(Dense::new(store, "compose", 2 * m, m, rng)?),
            ComposeVariant::Bv => Composer::Biaffine {
                w: store.add_uniform("compose.biaffine", m * m, m, m * m, rng)?,
                u: Dense::new(store, "compose", 2 * m, m, rng)?,
                size: m,
            },
        })
    }

    /// Combines rows `i` and `i + 1` of `x` for every `i` in `pairs`.
    /// Returns the `(pairs, m)` results and, per pair, the mean weight on
    /// each side (empty for `Add`).
    pub fn combine(&self, g: &mut Graph<'_>, x: Var, pairs: &[usize]) -> Result<(Var, Vec<Vec<f64>>)> {
        let mut left = Vec::with_capacity(pairs.len());
        let mut right = Vec::with_capacity(pairs.len());
        for &i in pairs {
            left.push(g.row(x, i)?);
            right.push(g.row(x, i + 1)?);
        }
        let xl = g.stack(&left)?;
        let xr = g.stack(&right)?;
        let lambda = match self {
            Composer::Add => return Ok((g.add(xl, xr)?, Vec::new())),
            Composer::Bias { bias, vector } => {
                let b = g.param(*bias);
                let l = g.sigmoid(b);
                if *vector {
                    g.stack(&vec![l; pairs.len()])?
                } else {
                    let m = g.shape(xl).cols;
                    let row = g.stack(&vec![l; m])?;
                    let row = g.reshape(row, 1, m)?;
                    g.stack(&vec![row; pairs.len()])?
                }
            }
            Composer::Concat(d) => {
                let both = g.concat(&[xl, xr])?;
                let z = d.forward(g, both)?;
                let l = g.sigmoid(z);
                if d.output == 1 {
                    let m = g.shape(xl).cols;
                    g.concat(&vec![l; m])?
                } else {
                    l
                }
            }
            Composer::Biaffine { w, u, size } => {
                let m = *size;
                let w = g.param(*w);
                // row k of the reshaped product is W_k x_R
                let t = g.linear(xr, w, None)?;
                let mut bil = Vec::with_capacity(pairs.len());
                for p in 0..pairs.len() {
                    let tp = g.row(t, p)?;
                    let a = g.reshape(tp, m, m)?;
                    let lp = g.row(xl, p)?;
                    bil.push(g.linear(lp, a, None)?);
                }
                let bil = g.stack(&bil)?;
                let both = g.concat(&[xl, xr])?;
                let lin = u.forward(g, both)?;
                let z = g.add(bil, lin)?;
                g.sigmoid(z)
            }
        };
        let a = g.mul(lambda, xl)?;
        let inv = g.one_minus(lambda);
        let b = g.mul(inv, xr)?;
        let out = g.add(a, b)?;
        let lv = g.value(lambda);
        let weights = (0..pairs.len())
            .map(|p| {
                let row = lv.row(p);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                vec![mean, 1.0 - mean]
            })
            .collect();
        Ok((out, weights))
    }
}
