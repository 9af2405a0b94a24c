use crate::error::{Error, Result};
use crate::nn::{pinball, softmax_row_in_place, Init, Linear, Matrix, ParamId, ParamStore, RngStream, Tape, Var};

/// `σ(x·W + b) ⊙ x`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub lin: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        Self {
            lin: Linear::new(store, name, dim, dim, Init::XavierUniform, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = self.lin.forward(tape, store, x);
        let g = tape.sigmoid(a);
        tape.mul(g, x)
    }
}

/// Gate on plain values: `x [B×d]`, `w [d×d]`, `b [1×d]`.
pub fn gate(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let a = crate::nn::linear_forward(x, w, b)?;
    Ok(a.zip_map(x, |a, x| crate::nn::sigmoid(a) * x))
}

/// Softmax-weighted combination of per-feature embeddings.
///
/// Scores come from a dense layer over the concatenated embeddings, optionally
/// joined with a context vector.
#[derive(Clone, Copy, Debug)]
pub struct VariableSelection {
    pub score: Linear,
    pub n_features: usize,
}

impl VariableSelection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_features: usize,
        emb_dim: usize,
        context_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            score: Linear::new(store, name, n_features * emb_dim + context_dim, n_features, Init::XavierUniform, rng),
            n_features,
        }
    }

    /// `emb [B × n·d]`, `context [B × c]` → `(weights [B×n], combined [B×d])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, emb: Var, context: Option<Var>) -> (Var, Var) {
        let input = match context {
            Some(c) => tape.concat_cols(&[emb, c]),
            None => emb,
        };
        let scores = self.score.forward(tape, store, input);
        let weights = tape.softmax_rows(scores);
        let combined = tape.weighted_combine(weights, emb);
        (weights, combined)
    }
}

/// Selection from precomputed scores: `(softmax(scores), Σ wᵢ·embᵢ)`.
pub fn variable_select(scores: &[f64], embeddings: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.is_empty() {
        return Err(Error::Config("variable selection needs at least one feature".into()));
    }
    if scores.len() != embeddings.len() {
        return Err(Error::Shape {
            op: "variable_select",
            left: (1, scores.len()),
            right: (embeddings.len(), embeddings[0].len()),
        });
    }
    let d = embeddings[0].len();
    if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::Shape {
            op: "variable_select",
            left: (1, d),
            right: (1, e.len()),
        });
    }
    let mut weights = scores.to_vec();
    softmax_row_in_place(&mut weights);
    let mut combined = vec![0.0; d];
    for (w, e) in weights.iter().zip(embeddings) {
        for (c, x) in combined.iter_mut().zip(e) {
            *c += w * x;
        }
    }
    Ok((weights, combined))
}

/// Embeds the static categorical ids and condenses them into a context vector.
#[derive(Clone, Debug)]
pub struct StaticEncoder {
    pub tables: Vec<ParamId>,
    pub select: VariableSelection,
    pub out: Linear,
}

impl StaticEncoder {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], hidden: usize, rng: &mut RngStream) -> Self {
        let tables = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| store.add_init(format!("{name}.table{i}"), n, hidden, Init::XavierUniform, rng))
            .collect();
        let select = VariableSelection::new(store, &format!("{name}.select"), sizes.len(), hidden, 0, rng);
        let out = Linear::new(store, &format!("{name}.out"), hidden, hidden, Init::XavierUniform, rng);
        Self { tables, select, out }
    }

    /// `ids[b][i]` indexes table `i` → `(context [B×h], weights [B×n])`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[Vec<usize>]) -> (Var, Var) {
        let parts: Vec<Var> = self
            .tables
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let table = tape.param(store, t);
                let idx: Vec<usize> = ids.iter().map(|row| row[i]).collect();
                tape.gather_rows(table, &idx)
            })
            .collect();
        let emb = tape.concat_cols(&parts);
        let (weights, combined) = self.select.forward(tape, store, emb, None);
        let lin = self.out.forward(tape, store, combined);
        (tape.tanh(lin), weights)
    }
}

/// Single-head self-attention with learned Q/K/V projections. The key
/// projection has no bias: a shared key offset cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: ParamId,
    pub v: Linear,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, Init::XavierUniform, rng),
            k: store.add_init(format!("{name}.k.w"), dim, dim, Init::XavierUniform, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, Init::XavierUniform, rng),
        }
    }

    /// Time-major `x [steps·batch × d]`; returns the output node (weights via the tape).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, steps: usize) -> Var {
        let q = self.q.forward(tape, store, x);
        let wk = tape.param(store, self.k);
        let k = tape.matmul(x, wk);
        let v = self.v.forward(tape, store, x);
        tape.attention(q, k, v, batch, steps, true)
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` for one sequence → `(out [T×d_v], weights [T×T])`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<(Matrix, Matrix)> {
    if q.cols() == 0 {
        return Err(Error::Config("attention key dimension must be positive".into()));
    }
    q.check_same_shape(k, "attention")?;
    if v.rows() != q.rows() {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape(),
            right: v.shape(),
        });
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = tape.attention(qv, kv, vv, 1, q.rows(), causal);
    let weights = tape.attention_weights(out).expect("attention node").clone();
    Ok((tape.value(out).clone(), weights))
}

/// GRU cell acting on `[h, x]`:
/// `z = σ([h,x]·W_z + b_z)`, `r = σ([h,x]·W_r + b_r)`,
/// `ĥ = tanh([r⊙h, x]·W_h + b_h)`, `h' = (1 − z)⊙h + z⊙ĥ`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub z: Linear,
    pub r: Linear,
    pub h: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut lin = |g: &str| Linear::new(store, &format!("{name}.{g}"), hidden + input, hidden, Init::XavierUniform, rng);
        Self {
            z: lin("z"),
            r: lin("r"),
            h: lin("h"),
            hidden,
        }
    }

    /// Batched step: `h_prev [B×h]`, `x [B×in]` → `[B×h]`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h_prev: Var, x: Var) -> Var {
        let hx = tape.concat_cols(&[h_prev, x]);
        let za = self.z.forward(tape, store, hx);
        let z = tape.sigmoid(za);
        let ra = self.r.forward(tape, store, hx);
        let r = tape.sigmoid(ra);
        let rh = tape.mul(r, h_prev);
        let rhx = tape.concat_cols(&[rh, x]);
        let ca = self.h.forward(tape, store, rhx);
        let cand = tape.tanh(ca);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h_prev);
        let new = tape.mul(z, cand);
        tape.add(old, new)
    }
}

/// One GRU step on plain values.
pub fn gru_step(cell: &GruCell, store: &ParamStore, h_prev: &Matrix, x: &Matrix) -> Matrix {
    let mut tape = Tape::new();
    let (h, xv) = (tape.leaf(h_prev.clone()), tape.leaf(x.clone()));
    let out = cell.step(&mut tape, store, h, xv);
    tape.value(out).clone()
}

/// LSTM cell acting on `[h, x]` with forget, input, candidate and output gates.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub f: Linear,
    pub i: Linear,
    pub c: Linear,
    pub o: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut lin = |g: &str| Linear::new(store, &format!("{name}.{g}"), hidden + input, hidden, Init::XavierUniform, rng);
        Self {
            f: lin("f"),
            i: lin("i"),
            c: lin("c"),
            o: lin("o"),
            hidden,
        }
    }

    /// Batched step → `(h, c)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h_prev: Var, c_prev: Var, x: Var) -> (Var, Var) {
        let hx = tape.concat_cols(&[h_prev, x]);
        let fa = self.f.forward(tape, store, hx);
        let f = tape.sigmoid(fa);
        let ia = self.i.forward(tape, store, hx);
        let i = tape.sigmoid(ia);
        let ca = self.c.forward(tape, store, hx);
        let cand = tape.tanh(ca);
        let oa = self.o.forward(tape, store, hx);
        let o = tape.sigmoid(oa);
        let kept = tape.mul(f, c_prev);
        let added = tape.mul(i, cand);
        let c = tape.add(kept, added);
        let tc = tape.tanh(c);
        (tape.mul(o, tc), c)
    }
}

/// One LSTM step on plain values → `(h, c)`.
pub fn lstm_step(cell: &LstmCell, store: &ParamStore, h_prev: &Matrix, c_prev: &Matrix, x: &Matrix) -> (Matrix, Matrix) {
    let mut tape = Tape::new();
    let (h, c, xv) = (tape.leaf(h_prev.clone()), tape.leaf(c_prev.clone()), tape.leaf(x.clone()));
    let (h, c) = cell.step(&mut tape, store, h, c, xv);
    (tape.value(h).clone(), tape.value(c).clone())
}

/// Pinball loss `max(τ(y − ŷ), (1 − τ)(ŷ − y))`.
pub fn quantile_loss(y: f64, y_hat: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("quantile {tau} must be in (0, 1)")));
    }
    Ok(pinball(y, y_hat, tau))
}
