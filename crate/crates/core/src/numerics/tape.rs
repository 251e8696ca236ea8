//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! A [`Tape`] borrows the [`ParameterSet`] it differentiates. Operations append
//! nodes holding their output value; [`Tape::backward`] walks the nodes in
//! exact reverse order of recording and accumulates gradients by summation.

use super::kernels::{matmul_nt, transpose};
use super::params::{Gradients, ParamId, ParameterSet};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Constant,
    Param(ParamId),
    Affine { w: Var, x: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Sigmoid(Var),
    Tanh(Var),
    Gather { table: Var, ids: Vec<u32> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, inv_temperature: R },
}

#[derive(Debug)]
struct Node<R> {
    /// `None` for parameters, whose value lives in the borrowed set.
    value: Option<Tensor<R>>,
    op: Op<R>,
    needs_grad: bool,
}

pub struct Tape<'p, R: Real> {
    params: &'p ParameterSet<R>,
    nodes: Vec<Node<R>>,
    param_vars: Vec<Option<Var>>,
}

/// Logistic sigmoid kept strictly inside `(0, 1)`.
#[inline]
pub fn sigmoid<R: Real>(v: R) -> R {
    let s = if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    };
    let top = R::one() - R::epsilon() / (R::one() + R::one());
    s.max(R::min_positive_value()).min(top)
}

/// Hyperbolic tangent kept strictly inside `(-1, 1)`.
#[inline]
pub fn tanh<R: Real>(v: R) -> R {
    let top = R::one() - R::epsilon() / (R::one() + R::one());
    v.tanh().max(-top).min(top)
}

/// Per-row negative log-likelihood of `targets` under `softmax(logits / temperature)`.
///
/// Computed in `f64` regardless of storage precision.
pub fn token_nll<R: Real>(logits: &Tensor<R>, targets: &[u32], temperature: f64) -> Result<Vec<f64>> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if rows != targets.len() {
        return Err(Error::dim(format!("{rows} logit rows for {} targets", targets.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", format!("must be positive, got {temperature}")));
    }
    let inv_t = 1.0 / temperature;
    let mut out = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= vocab {
            return Err(Error::Data(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let row = logits.row(r);
        let max = row.iter().map(|v| v.to_f64_lossless() * inv_t).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64_lossless() * inv_t - max).exp()).sum();
        let lse = max + sum.ln();
        out.push(lse - row[t].to_f64_lossless() * inv_t);
    }
    Ok(out)
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn slot<'g, R: Real>(grads: &'g mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> &'g mut Tensor<R> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl<'p, R: Real> Tape<'p, R> {
    pub fn new(params: &'p ParameterSet<R>) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParameterSet<R> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameters are stored by reference"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient (inputs, masks, carried state).
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// The node for parameter `id`, recorded once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `W x + b` applied to every row of `x`.
    ///
    /// `w` is `out×in`; `x` is a vector of length `in` or a `rows×in` matrix.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.value(w);
        let xt = self.value(x);
        if wt.shape().len() != 2 {
            return Err(Error::dim(format!("weight must be a matrix, got {:?}", wt.shape())));
        }
        let (out, inp) = (wt.shape()[0], wt.shape()[1]);
        if xt.cols() != inp || xt.shape().len() > 2 {
            return Err(Error::dim(format!("weight {:?} cannot act on {:?}", wt.shape(), xt.shape())));
        }
        let rows = xt.rows();
        let mut data = vec![R::zero(); rows * out];
        matmul_nt(xt.data(), wt.data(), &mut data, rows, inp, out, false);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [out] {
                return Err(Error::dim(format!("bias {:?} for output width {out}", bt.shape())));
            }
            for row in data.chunks_exact_mut(out) {
                for (y, &bias) in row.iter_mut().zip(bt.data()) {
                    *y += bias;
                }
            }
        }
        let shape = if xt.shape().len() == 1 { vec![out] } else { vec![rows, out] };
        let value = Tensor::new(shape, data)?;
        value.ensure_finite("affine output")?;
        let ng = self.needs(w) || self.needs(x) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Affine { w, x, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Rows of `table` selected by `ids`, as an `ids.len()×cols` matrix.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::dim(format!("lookup table must be a matrix, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::dim("empty id list".to_string()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {rows}")));
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        let ng = self.needs(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Mean over rows of `-log softmax(logits / temperature)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], temperature: f64) -> Result<Var> {
        let nll = token_nll(self.value(logits), targets, temperature)?;
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".to_string()));
        }
        let ng = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            inv_temperature: R::from_f64_lossy(1.0 / temperature),
        };
        Ok(self.push(Tensor::scalar(R::from_f64_lossy(mean)), op, ng))
    }

    /// Gradients of the scalar `output` with respect to every parameter read
    /// while recording, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: R) -> Result<Gradients<R>> {
        self.backward_impl(output, seed, None)
    }

    /// As [`Tape::backward`], also returning the node indices in visit order.
    pub fn backward_traced(&self, output: Var, seed: R) -> Result<(Gradients<R>, Vec<usize>)> {
        let mut trace = Vec::new();
        let g = self.backward_impl(output, seed, Some(&mut trace))?;
        Ok((g, trace))
    }

    fn backward_impl(&self, output: Var, seed: R, mut trace: Option<&mut Vec<usize>>) -> Result<Gradients<R>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".to_string()));
        }
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut result = Gradients::empty(self.params.len());
        let mut grads: Vec<Option<Tensor<R>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), seed));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(t) = trace.as_deref_mut() {
                t.push(i);
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => result.set(*id, g),
                Op::Affine { w, x, b } => self.affine_backward(&mut grads, &g, *w, *x, *b),
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map(self.value(*b), |u, y| u * y)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map(self.value(*a), |u, x| u * x)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|u| u * s));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    accumulate(&mut grads, *a, g.zip_map(y, |u, y| u * y * (R::one() - y))?);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    accumulate(&mut grads, *a, g.zip_map(y, |u, y| u * (R::one() - y * y))?);
                }
                Op::Gather { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    let cols = shape[1];
                    let dst = slot(&mut grads, *table, &shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        let row = &mut dst.data_mut()[id as usize * cols..(id as usize + 1) * cols];
                        for (d, &s) in row.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                Op::Sum(a) => {
                    let u = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), u));
                }
                Op::CrossEntropy { logits, targets, inv_temperature } => {
                    let z = self.value(*logits);
                    let (rows, vocab) = (z.rows(), z.cols());
                    let coef = g.data()[0] * *inv_temperature / R::from_usize(rows).expect("row count");
                    let mut d = vec![R::zero(); rows * vocab];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = z.row(r);
                        let max = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v * *inv_temperature));
                        let out = &mut d[r * vocab..(r + 1) * vocab];
                        let mut total = R::zero();
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = (v * *inv_temperature - max).exp();
                            total += *o;
                        }
                        for o in out.iter_mut() {
                            *o = *o / total * coef;
                        }
                        out[t as usize] -= coef;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(z.shape().to_vec(), d)?);
                }
            }
        }
        Ok(result)
    }

    fn affine_backward(&self, grads: &mut [Option<Tensor<R>>], g: &Tensor<R>, w: Var, x: Var, b: Option<Var>) {
        let wt = self.value(w);
        let xt = self.value(x);
        let (out, inp) = (wt.shape()[0], wt.shape()[1]);
        let rows = xt.rows();
        if self.needs(x) {
            let w_t = transpose(wt.data(), out, inp);
            let dx = slot(grads, x, xt.shape());
            matmul_nt(g.data(), &w_t, dx.data_mut(), rows, out, inp, true);
        }
        if self.needs(w) {
            let g_t = transpose(g.data(), rows, out);
            let x_t = transpose(xt.data(), rows, inp);
            let dw = slot(grads, w, wt.shape());
            matmul_nt(&g_t, &x_t, dw.data_mut(), out, rows, inp, true);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let db = slot(grads, b, &[out]);
                for row in g.data().chunks_exact(out) {
                    for (d, &u) in db.data_mut().iter_mut().zip(row) {
                        *d += u;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_zero_and_hand_cases() {
        let params = ParameterSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let eye = tape.constant(Tensor::identity(2));
        let x = tape.constant(vec64(&[3.0, -1.0]));
        let y = tape.affine(eye, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(vec64(&[1.0, 2.0]));
        let y = tape.affine(zero, x, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.constant(vec64(&[1.0, 1.0]));
        let zb = tape.constant(vec64(&[0.0, 0.0]));
        let y = tape.affine(w, ones, Some(zb)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_errors() {
        let params = ParameterSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let x = tape.constant(vec64(&[1.0, 2.0]));
        assert!(matches!(tape.affine(w, x, None), Err(Error::Dimension(_))));
        let bad = tape.constant(vec64(&[f64::NAN, 1.0, 0.0]));
        assert!(matches!(tape.affine(w, bad, None), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_examples() {
        let params = ParameterSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let z = tape.constant(vec64(&[0.0, 0.0, 0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5]);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).data(), &[0.0, 0.0, 0.0]);
        let a = tape.constant(vec64(&[2.0, 3.0]));
        let b = tape.constant(vec64(&[4.0, -1.0]));
        let h = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(h).data(), &[8.0, -3.0]);
        let c = tape.constant(vec64(&[1.0]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn activations_stay_inside_open_intervals() {
        for &v in &[-1e6, -800.0, -40.0, 0.0, 40.0, 800.0, 1e6] {
            let s: f64 = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
            let t: f64 = tanh(v);
            assert!(t > -1.0 && t < 1.0, "tanh({v}) = {t}");
            let s32: f32 = sigmoid(v as f32);
            assert!(s32 > 0.0 && s32 < 1.0);
        }
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut params = ParameterSet::<f64>::new();
        let id = params.push("x", vec64(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new(&params);
        let x = tape.param(id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss, 1.0).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut params = ParameterSet::<f64>::new();
        let id = params.push("w", vec64(&[0.0])).unwrap();
        let mut tape = Tape::new(&params);
        let w = tape.param(id);
        let s = tape.sigmoid(w);
        let loss = tape.sum(s);
        let g = tape.backward(loss, 1.0).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let params = ParameterSet::<f64>::new();
        let tape = Tape::new(&params);
        assert!(matches!(tape.backward(Var(0), 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut params = ParameterSet::<f64>::new();
        let id = params.push("w", Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let mut tape = Tape::new(&params);
        let w = tape.param(id);
        let x = tape.constant(vec64(&[1.0, -1.0]));
        let y = tape.affine(w, x, None).unwrap();
        let t = tape.tanh(y);
        let y2 = tape.affine(w, t, None).unwrap();
        let loss = tape.sum(y2);
        let (_, trace) = tape.backward_traced(loss, 1.0).unwrap();
        assert!(trace.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(trace.first(), Some(&loss.index()));
        assert_eq!(trace.last(), Some(&w.index()));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut params = ParameterSet::<f64>::new();
        let id = params.push("w", vec64(&[3.0])).unwrap();
        let mut tape = Tape::new(&params);
        let w = tape.param(id);
        let w_again = tape.param(id);
        assert_eq!(w, w_again);
        let a = tape.scale(w, 2.0);
        let b = tape.mul(w, w).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss, 1.0).unwrap();
        // d(2w + w^2)/dw = 2 + 2w
        assert_eq!(g.get(id).unwrap().data(), &[8.0]);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let params = ParameterSet::<f64>::new();
        let z = Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let nll = token_nll(&z, &[0], 1.0).unwrap();
        assert!((nll[0] - 0.287_682_072_451_780_9).abs() < 1e-12);
        let uniform = Tensor::<f64>::zeros(&[3, 5]);
        for v in token_nll(&uniform, &[0, 4, 2], 1.0).unwrap() {
            assert!((v - 5f64.ln()).abs() < 1e-12);
        }
        assert!(token_nll(&uniform, &[0, 1, 2], 0.0).is_err());
        let mut tape = Tape::new(&params);
        let v = tape.constant(z);
        assert!(tape.cross_entropy(v, &[0, 1], 1.0).is_err());
    }
}
