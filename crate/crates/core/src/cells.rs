//! Recurrent cells: the LSTM, the Mogrifier LSTM (optionally with low-rank
//! gating matrices), its no-zigzag ablation, and the multiplicative LSTM.
//!
//! Cells only declare parameter handles; values live in a
//! [`ParameterSet`](crate::numerics::ParameterSet) and every step is recorded on
//! a [`Tape`]. Inputs may be a single vector or a batch of rows.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{
    finite_difference_check, lit, GradCheckReport, Init, ParamId, ParamRegistry, ParameterSet, Real, Rng, Tape, Tensor, Var,
};

/// Cell state `c` and output `h` as recorded values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub c: Var,
    pub h: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Mogrifier,
    MogrifierNoZigzag,
    Mlstm,
}

impl CellKind {
    pub const ALL: [CellKind; 4] =
        [CellKind::Lstm, CellKind::Mogrifier, CellKind::MogrifierNoZigzag, CellKind::Mlstm];

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Mogrifier => "mogrifier",
            CellKind::MogrifierNoZigzag => "mogrifier_no_zigzag",
            CellKind::Mlstm => "mlstm",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown cell `{s}` (expected lstm, mogrifier, mogrifier_no_zigzag or mlstm)"))
    }
}

fn fan_in(cols: usize) -> Init {
    Init::Uniform((1.0 / cols as f64).sqrt())
}

/// Parameters of one LSTM: four `n×m` input maps, four `n×n` recurrent
/// maps and four biases, for the forget (`f`), input (`i`), candidate (`j`)
/// and output (`o`) gates.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    pub input_size: usize,
    pub hidden_size: usize,
    pub wfx: ParamId,
    pub wfh: ParamId,
    pub wix: ParamId,
    pub wih: ParamId,
    pub wjx: ParamId,
    pub wjh: ParamId,
    pub wox: ParamId,
    pub woh: ParamId,
    pub bf: ParamId,
    pub bi: ParamId,
    pub bj: ParamId,
    pub bo: ParamId,
}

impl LstmWeights {
    /// Declares the weights; the forget bias starts at +1, other biases at 0.
    pub fn declare(reg: &mut ParamRegistry, prefix: &str, m: usize, n: usize) -> Self {
        let mut x = |g: &str| reg.declare(format!("{prefix}.W{g}x"), &[n, m], fan_in(m));
        let (wfx, wix, wjx, wox) = (x("f"), x("i"), x("j"), x("o"));
        let mut h = |g: &str| reg.declare(format!("{prefix}.W{g}h"), &[n, n], fan_in(n));
        let (wfh, wih, wjh, woh) = (h("f"), h("i"), h("j"), h("o"));
        let bf = reg.declare(format!("{prefix}.bf"), &[n], Init::Constant(1.0));
        let bi = reg.declare(format!("{prefix}.bi"), &[n], Init::Zeros);
        let bj = reg.declare(format!("{prefix}.bj"), &[n], Init::Zeros);
        let bo = reg.declare(format!("{prefix}.bo"), &[n], Init::Zeros);
        LstmWeights { input_size: m, hidden_size: n, wfx, wfh, wix, wih, wjx, wjh, wox, woh, bf, bi, bj, bo }
    }
}

/// One gating matrix `Qⁱ` or `Rⁱ`, either dense or a product of two thin factors.
#[derive(Clone, Debug, PartialEq)]
pub enum GatingMatrix {
    Full(ParamId),
    Factored { left: ParamId, right: ParamId },
}

impl GatingMatrix {
    fn declare(reg: &mut ParamRegistry, name: &str, rows: usize, cols: usize, rank: Option<usize>) -> Self {
        match rank {
            None => GatingMatrix::Full(reg.declare(name, &[rows, cols], fan_in(cols))),
            Some(k) => {
                let left = reg.declare(format!("{name}_left"), &[rows, k], fan_in(k));
                let right = reg.declare(format!("{name}_right"), &[k, cols], fan_in(cols));
                GatingMatrix::Factored { left, right }
            }
        }
    }

    /// `M v`; a factored matrix is applied as `left (right v)`.
    pub fn apply<R: Real>(&self, tape: &mut Tape<'_, R>, v: Var) -> Result<Var> {
        match self {
            GatingMatrix::Full(id) => {
                let w = tape.param(*id);
                tape.affine(w, v, None)
            }
            GatingMatrix::Factored { left, right } => {
                let r = tape.param(*right);
                let inner = tape.affine(r, v, None)?;
                let l = tape.param(*left);
                tape.affine(l, inner, None)
            }
        }
    }

    /// The dense matrix this gate represents.
    pub fn compose<R: Real>(&self, params: &ParameterSet<R>) -> Result<Tensor<R>> {
        match self {
            GatingMatrix::Full(id) => Ok(params.get(*id).clone()),
            GatingMatrix::Factored { left, right } => compose_low_rank(params.get(*left), params.get(*right)),
        }
    }
}

/// `left[m×k] · right[k×n]`, a matrix of rank at most `k`.
pub fn compose_low_rank<R: Real>(left: &Tensor<R>, right: &Tensor<R>) -> Result<Tensor<R>> {
    if left.shape().len() != 2 || right.shape().len() != 2 || left.shape()[1] != right.shape()[0] {
        return Err(Error::Dimension(format!(
            "low-rank factors {:?} and {:?} do not compose",
            left.shape(),
            right.shape()
        )));
    }
    left.matmul(right)
}

/// Mogrifier parameters: `rounds` gating matrices in update order followed by
/// an ordinary LSTM. Odd rounds hold `Qⁱ` (`m×n`, gates `x` from `h`), even
/// rounds hold `Rⁱ` (`n×m`, gates `h` from `x`).
#[derive(Clone, Debug, PartialEq)]
pub struct MogrifierWeights {
    pub rounds: usize,
    /// `None` for dense gating matrices.
    pub rank: Option<usize>,
    pub gates: Vec<GatingMatrix>,
    pub inner: LstmWeights,
}

impl MogrifierWeights {
    /// `rank <= 0` selects dense gating matrices.
    pub fn declare(reg: &mut ParamRegistry, prefix: &str, m: usize, n: usize, rounds: i64, rank: i64) -> Result<Self> {
        if rounds < 0 {
            return Err(Error::config("mogrifier_rounds", format!("must be non-negative, got {rounds}")));
        }
        let rounds = rounds as usize;
        let rank = (rank > 0).then_some(rank as usize);
        let gates = (1..=rounds)
            .map(|i| {
                if i % 2 == 1 {
                    GatingMatrix::declare(reg, &format!("{prefix}.Q{i}"), m, n, rank)
                } else {
                    GatingMatrix::declare(reg, &format!("{prefix}.R{i}"), n, m, rank)
                }
            })
            .collect();
        let inner = LstmWeights::declare(reg, prefix, m, n);
        Ok(MogrifierWeights { rounds, rank, gates, inner })
    }

    pub fn q_count(&self) -> usize {
        self.rounds.div_ceil(2)
    }

    pub fn r_count(&self) -> usize {
        self.rounds / 2
    }
}

/// Multiplicative LSTM parameters: the two maps forming `(Wmx x) ⊙ (Wmh h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmWeights {
    pub wmx: ParamId,
    pub wmh: ParamId,
    pub inner: LstmWeights,
}

impl MlstmWeights {
    pub fn declare(reg: &mut ParamRegistry, prefix: &str, m: usize, n: usize) -> Self {
        let wmx = reg.declare(format!("{prefix}.Wmx"), &[n, m], fan_in(m));
        let wmh = reg.declare(format!("{prefix}.Wmh"), &[n, n], fan_in(n));
        MlstmWeights { wmx, wmh, inner: LstmWeights::declare(reg, prefix, m, n) }
    }
}

fn gate<R: Real>(
    tape: &mut Tape<'_, R>,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    x: Var,
    h: Var,
) -> Result<Var> {
    let (wx, wh, b) = (tape.param(wx), tape.param(wh), tape.param(b));
    let from_x = tape.affine(wx, x, Some(b))?;
    let from_h = tape.affine(wh, h, None)?;
    tape.add(from_x, from_h)
}

/// One LSTM update:
/// `f, i, o = σ(·)`, `j = tanh(·)`, `c = f⊙c_prev + i⊙j`, `h = o⊙tanh(c)`.
pub fn lstm_cell<R: Real>(tape: &mut Tape<'_, R>, x: Var, state: CellState, w: &LstmWeights) -> Result<CellState> {
    let h = state.h;
    let pf = gate(tape, w.wfx, w.wfh, w.bf, x, h)?;
    let pi = gate(tape, w.wix, w.wih, w.bi, x, h)?;
    let pj = gate(tape, w.wjx, w.wjh, w.bj, x, h)?;
    let po = gate(tape, w.wox, w.woh, w.bo, x, h)?;
    let f = tape.sigmoid(pf);
    let i = tape.sigmoid(pi);
    let j = tape.tanh(pj);
    let o = tape.sigmoid(po);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, j)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(CellState { c, h })
}

/// `2σ(M source) ⊙ target`.
fn scaled_gate<R: Real>(tape: &mut Tape<'_, R>, m: &GatingMatrix, source: Var, target: Var) -> Result<Var> {
    let pre = m.apply(tape, source)?;
    let s = tape.sigmoid(pre);
    let g = tape.scale(s, lit(2.0));
    tape.mul(g, target)
}

/// Alternating mutual gating of `x` and `h_prev`.
///
/// Round `i` (1-based) updates `x` when odd, reading the latest `h`, and `h`
/// when even, reading the latest `x`. Returns the last `x` and `h`.
pub fn mogrify<R: Real>(tape: &mut Tape<'_, R>, x: Var, h_prev: Var, w: &MogrifierWeights) -> Result<(Var, Var)> {
    let (mut x_cur, mut h_cur) = (x, h_prev);
    for (i, m) in (1..=w.rounds).zip(&w.gates) {
        if i % 2 == 1 {
            x_cur = scaled_gate(tape, m, h_cur, x_cur)?;
        } else {
            h_cur = scaled_gate(tape, m, x_cur, h_cur)?;
        }
    }
    Ok((x_cur, h_cur))
}

/// Ablation of [`mogrify`] whose gates always read the original `x` and `h_prev`.
pub fn mogrify_no_zigzag<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    h_prev: Var,
    w: &MogrifierWeights,
) -> Result<(Var, Var)> {
    let (mut x_cur, mut h_cur) = (x, h_prev);
    for (i, m) in (1..=w.rounds).zip(&w.gates) {
        if i % 2 == 1 {
            x_cur = scaled_gate(tape, m, h_prev, x_cur)?;
        } else {
            h_cur = scaled_gate(tape, m, x, h_cur)?;
        }
    }
    Ok((x_cur, h_cur))
}

/// Mogrifier LSTM step. `c_prev` is passed to the LSTM untouched.
pub fn mogrifier_cell<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    state: CellState,
    w: &MogrifierWeights,
) -> Result<CellState> {
    let (x_up, h_up) = mogrify(tape, x, state.h, w)?;
    lstm_cell(tape, x_up, CellState { c: state.c, h: h_up }, &w.inner)
}

pub fn mogrifier_no_zigzag_cell<R: Real>(
    tape: &mut Tape<'_, R>,
    x: Var,
    state: CellState,
    w: &MogrifierWeights,
) -> Result<CellState> {
    let (x_up, h_up) = mogrify_no_zigzag(tape, x, state.h, w)?;
    lstm_cell(tape, x_up, CellState { c: state.c, h: h_up }, &w.inner)
}

/// Multiplicative LSTM step: the LSTM sees `(Wmx x) ⊙ (Wmh h_prev)` in place of `h_prev`.
pub fn mlstm_cell<R: Real>(tape: &mut Tape<'_, R>, x: Var, state: CellState, w: &MlstmWeights) -> Result<CellState> {
    let wmx = tape.param(w.wmx);
    let wmh = tape.param(w.wmh);
    let a = tape.affine(wmx, x, None)?;
    let b = tape.affine(wmh, state.h, None)?;
    let hm = tape.mul(a, b)?;
    lstm_cell(tape, x, CellState { c: state.c, h: hm }, &w.inner)
}

/// A cell of any kind, as stacked by the language model.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Lstm(LstmWeights),
    Mogrifier(MogrifierWeights),
    MogrifierNoZigzag(MogrifierWeights),
    Mlstm(MlstmWeights),
}

impl Cell {
    /// Declares a cell with input size `m` and state size `n`. `rounds` and
    /// `rank` only matter for the Mogrifier kinds.
    pub fn declare(
        reg: &mut ParamRegistry,
        prefix: &str,
        kind: CellKind,
        m: usize,
        n: usize,
        rounds: i64,
        rank: i64,
    ) -> Result<Cell> {
        Ok(match kind {
            CellKind::Lstm => Cell::Lstm(LstmWeights::declare(reg, prefix, m, n)),
            CellKind::Mogrifier => Cell::Mogrifier(MogrifierWeights::declare(reg, prefix, m, n, rounds, rank)?),
            CellKind::MogrifierNoZigzag => {
                Cell::MogrifierNoZigzag(MogrifierWeights::declare(reg, prefix, m, n, rounds, rank)?)
            }
            CellKind::Mlstm => Cell::Mlstm(MlstmWeights::declare(reg, prefix, m, n)),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Lstm(_) => CellKind::Lstm,
            Cell::Mogrifier(_) => CellKind::Mogrifier,
            Cell::MogrifierNoZigzag(_) => CellKind::MogrifierNoZigzag,
            Cell::Mlstm(_) => CellKind::Mlstm,
        }
    }

    pub fn lstm(&self) -> &LstmWeights {
        match self {
            Cell::Lstm(w) => w,
            Cell::Mogrifier(w) | Cell::MogrifierNoZigzag(w) => &w.inner,
            Cell::Mlstm(w) => &w.inner,
        }
    }

    pub fn input_size(&self) -> usize {
        self.lstm().input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm().hidden_size
    }

    pub fn step<R: Real>(&self, tape: &mut Tape<'_, R>, x: Var, state: CellState) -> Result<CellState> {
        match self {
            Cell::Lstm(w) => lstm_cell(tape, x, state, w),
            Cell::Mogrifier(w) => mogrifier_cell(tape, x, state, w),
            Cell::MogrifierNoZigzag(w) => mogrifier_no_zigzag_cell(tape, x, state, w),
            Cell::Mlstm(w) => mlstm_cell(tape, x, state, w),
        }
    }
}

/// One case of the gradient suite: cell kind, input size, hidden size, rounds, rank.
pub type GradCase = (CellKind, usize, usize, i64, i64);

/// Every cell kind, and the Mogrifier at 1, 2 and 5 rounds both full rank
/// and at rank 2.
pub const GRADIENT_SUITE: [GradCase; 10] = [
    (CellKind::Lstm, 6, 5, 0, 0),
    (CellKind::Mogrifier, 5, 6, 1, 0),
    (CellKind::Mogrifier, 5, 6, 1, 2),
    (CellKind::Mogrifier, 6, 5, 2, 0),
    (CellKind::Mogrifier, 6, 5, 2, 2),
    (CellKind::Mogrifier, 7, 8, 5, 0),
    (CellKind::Mogrifier, 8, 7, 5, 2),
    (CellKind::MogrifierNoZigzag, 6, 6, 5, 0),
    (CellKind::MogrifierNoZigzag, 6, 6, 5, 2),
    (CellKind::Mlstm, 5, 6, 0, 0),
];

/// Central-difference check (step `1e-5`, 64-bit) of a `steps`-step unrolled
/// cell under the loss `Σ_t r_t · h_t` with random projections `r_t`.
pub fn unrolled_gradient_check(case: GradCase, steps: usize, seed: u64) -> Result<GradCheckReport> {
    let (kind, m, n, rounds, rank) = case;
    let mut reg = ParamRegistry::new();
    let cell = Cell::declare(&mut reg, "cell", kind, m, n, rounds, rank)?;
    let mut rng = Rng::new(seed);
    let mut params = reg.initialize::<f64>(&mut rng.substream("init"));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.uniform_in(-0.6, 0.6);
        }
    }
    let mut vector = |len: usize, scale: f64| Tensor::vector((0..len).map(|_| rng.uniform_in(-scale, scale)).collect());
    let xs = (0..steps).map(|_| vector(m, 1.0)).collect::<Result<Vec<_>>>()?;
    let rs = (0..steps).map(|_| vector(n, 1.0)).collect::<Result<Vec<_>>>()?;
    let (h0, c0) = (vector(n, 0.5)?, vector(n, 0.5)?);
    finite_difference_check(&params, 1e-5, |tape| {
        let mut state = CellState { c: tape.constant(c0.clone()), h: tape.constant(h0.clone()) };
        let mut total: Option<Var> = None;
        for (x, r) in xs.iter().zip(&rs) {
            let xv = tape.constant(x.clone());
            state = cell.step(tape, xv, state)?;
            let rv = tape.constant(r.clone());
            let weighted = tape.mul(state.h, rv)?;
            let s = tape.sum(weighted);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        total.ok_or_else(|| Error::Usage("the unrolled check needs at least one step".to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sigmoid, Rng};

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::vector(data.to_vec()).unwrap()
    }

    fn zeroed(reg: &ParamRegistry) -> ParameterSet<f64> {
        let mut set = reg.initialize::<f64>(&mut Rng::new(0));
        for t in set.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        set
    }

    fn run_lstm(params: &ParameterSet<f64>, w: &LstmWeights, x: &[f64], c: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new(params);
        let xv = tape.constant(v(x));
        let cv = tape.constant(v(c));
        let hv = tape.constant(v(h));
        let out = lstm_cell(&mut tape, xv, CellState { c: cv, h: hv }, w).unwrap();
        (tape.value(out.c).data().to_vec(), tape.value(out.h).data().to_vec())
    }

    #[test]
    fn zero_lstm_halves_memory() {
        let mut reg = ParamRegistry::new();
        let w = LstmWeights::declare(&mut reg, "l", 2, 3);
        let params = zeroed(&reg);
        let cp = [1.0, -2.0, 0.5];
        let (c, h) = run_lstm(&params, &w, &[0.3, 0.7], &cp, &[0.1, 0.2, 0.3]);
        for k in 0..3 {
            assert_eq!(c[k], 0.5 * cp[k]);
            assert_eq!(h[k], 0.5 * (0.5 * cp[k]).tanh());
        }
    }

    #[test]
    fn saturated_gates_keep_memory() {
        let mut reg = ParamRegistry::new();
        let w = LstmWeights::declare(&mut reg, "l", 2, 2);
        let mut params = zeroed(&reg);
        params.get_mut(w.bf).data_mut().fill(20.0);
        params.get_mut(w.bi).data_mut().fill(-20.0);
        params.get_mut(w.bo).data_mut().fill(-20.0);
        let cp = [0.8, -0.3];
        let (c, h) = run_lstm(&params, &w, &[1.0, -1.0], &cp, &[0.4, 0.4]);
        for k in 0..2 {
            assert!((c[k] - cp[k]).abs() < 1e-8);
            assert!(h[k].abs() < 1e-8);
        }
    }

    #[test]
    fn lstm_shape_mismatch() {
        let mut reg = ParamRegistry::new();
        let w = LstmWeights::declare(&mut reg, "l", 2, 2);
        let params = zeroed(&reg);
        let mut tape = Tape::new(&params);
        let x = tape.constant(v(&[1.0, 2.0, 3.0]));
        let c = tape.constant(v(&[0.0, 0.0]));
        let h = tape.constant(v(&[0.0, 0.0]));
        assert!(matches!(lstm_cell(&mut tape, x, CellState { c, h }, &w), Err(Error::Dimension(_))));
    }

    #[test]
    fn gating_counts_follow_rounds() {
        for r in 0..=6 {
            let mut reg = ParamRegistry::new();
            let w = MogrifierWeights::declare(&mut reg, "m", 3, 4, r, 2).unwrap();
            assert_eq!(w.q_count(), (r as usize).div_ceil(2));
            assert_eq!(w.r_count(), r as usize / 2);
            assert_eq!(w.gates.len(), r as usize);
        }
        let mut reg = ParamRegistry::new();
        assert!(MogrifierWeights::declare(&mut reg, "m", 3, 4, -1, 2).is_err());
    }

    #[test]
    fn non_positive_rank_is_dense() {
        let mut reg = ParamRegistry::new();
        let w = MogrifierWeights::declare(&mut reg, "m", 3, 4, 2, -5).unwrap();
        assert!(w.gates.iter().all(|g| matches!(g, GatingMatrix::Full(_))));
        let shapes: Vec<_> = reg.specs().iter().take(2).map(|s| s.shape.clone()).collect();
        assert_eq!(shapes, vec![vec![3, 4], vec![4, 3]]);
    }

    #[test]
    fn single_round_closed_form() {
        let mut reg = ParamRegistry::new();
        let w = MogrifierWeights::declare(&mut reg, "m", 1, 1, 1, 0).unwrap();
        let mut params = zeroed(&reg);
        let q = 0.37;
        let GatingMatrix::Full(qid) = w.gates[0] else { panic!("dense expected") };
        params.get_mut(qid).data_mut()[0] = q;
        let mut tape = Tape::new(&params);
        let x = tape.constant(v(&[1.0]));
        let h = tape.constant(v(&[1.0]));
        let (xu, hu) = mogrify(&mut tape, x, h, &w).unwrap();
        assert_eq!(tape.value(xu).data()[0], 2.0 * sigmoid(q));
        assert_eq!(tape.value(hu).data()[0], 1.0);
    }

    #[test]
    fn compose_low_rank_cases() {
        // Identity-padded left factor returns the right factor.
        let mut left = Tensor::<f64>::zeros(&[3, 2]);
        left.data_mut()[0] = 1.0;
        left.data_mut()[3] = 1.0;
        let right = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let q = compose_low_rank(&left, &right).unwrap();
        assert_eq!(&q.data()[..6], right.data());
        assert_eq!(&q.data()[6..], &[0.0; 3]);

        // Rank one: every 2x2 minor vanishes.
        let u = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::matrix(1, 3, vec![3.0, 1.0, -4.0]).unwrap();
        let p = compose_low_rank(&u, &w).unwrap();
        for (r1, r2) in [(0, 1), (0, 2), (1, 2)] {
            for (c1, c2) in [(0, 1), (0, 2), (1, 2)] {
                let det: f64 = p.get(r1, c1) * p.get(r2, c2) - p.get(r1, c2) * p.get(r2, c1);
                assert!(det.abs() < 1e-12);
            }
        }
        assert!(compose_low_rank(&u, &u).is_err());
    }

    #[test]
    fn cell_kind_round_trips_through_text() {
        for k in CellKind::ALL {
            assert_eq!(k.to_string().parse::<CellKind>().unwrap(), k);
        }
        assert!("gru".parse::<CellKind>().is_err());
    }
}
