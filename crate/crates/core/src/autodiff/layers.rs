use rand::Rng;

use super::{Graph, ParamId, ParamStore, Result, Var};

/// Affine layer `x · wᵀ + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), output, input, input, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), 1, output, input, rng)?;
        Ok(Dense {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Single-direction LSTM.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_input = store.add_uniform(format!("{name}.w_input"), 4 * hidden, input, input, rng)?;
        let w_hidden =
            store.add_uniform(format!("{name}.w_hidden"), 4 * hidden, hidden, hidden, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), 1, 4 * hidden, hidden, rng)?;
        Ok(Lstm {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        })
    }

    /// One recurrence step from precomputed input projection `zx: (1, 4H)`.
    /// Returns `(h, c)`.
    fn step(
        &self,
        g: &mut Graph<'_>,
        zx: Var,
        prev: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let (z, c_prev) = match prev {
            Some((h, c)) => {
                let w = g.param(self.w_hidden);
                let zh = g.linear(h, w, None)?;
                (g.add(zx, zh)?, Some(c))
            }
            None => (zx, None),
        };
        let hc = g.lstm_cell(z, c_prev)?;
        let h = g.cols(hc, 0, self.hidden)?;
        let c = g.cols(hc, self.hidden, self.hidden)?;
        Ok((h, c))
    }

    /// Single step from raw input `x: (1, in)`.
    pub fn lstm_step(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        prev: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let (wi, b) = (g.param(self.w_input), g.param(self.bias));
        let zx = g.linear(x, wi, Some(b))?;
        self.step(g, zx, prev)
    }

    /// Runs over the rows of `xs: (n, in)`, optionally right to left.
    /// Returns the hidden states `(n, H)` in input order.
    pub fn forward(&self, g: &mut Graph<'_>, xs: Var, reverse: bool) -> Result<Var> {
        let n = g.shape(xs).rows;
        if n == 0 {
            return Err(super::AutodiffError::Invalid {
                op: "lstm",
                message: "empty sequence".into(),
            });
        }
        let (wi, b) = (g.param(self.w_input), g.param(self.bias));
        let zx = g.linear(xs, wi, Some(b))?;
        let mut states = vec![None; n];
        let mut prev = None;
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let z = g.row(zx, t)?;
            let (h, c) = self.step(g, z, prev)?;
            states[t] = Some(h);
            prev = Some((h, c));
        }
        let hs: Vec<Var> = states.into_iter().map(|h| h.expect("every step ran")).collect();
        g.stack(&hs)
    }
}

/// Bidirectional LSTM; the forward and backward halves are kept separate.
#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    /// Per-position forward states and backward states, each `(n, H)`.
    pub fn states(&self, g: &mut Graph<'_>, xs: Var) -> Result<(Var, Var)> {
        let f = self.forward.forward(g, xs, false)?;
        let b = self.backward.forward(g, xs, true)?;
        Ok((f, b))
    }

    /// `(n, 2H)` concatenation of both directions.
    pub fn forward(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let (f, b) = self.states(g, xs)?;
        g.concat(&[f, b])
    }
}
