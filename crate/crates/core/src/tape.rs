//! Reverse-mode differentiation over dense row-major matrices.
//!
//! The tape only needs first-order adjoints: input gradients of the network
//! are written out as ordinary forward operations (see `scorenet`), so the
//! parameter gradient of anything built from them is a single reverse sweep.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Act(Var),
    ActD1(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    RowSum(Var),
    SumAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// SiLU activation `x * sigmoid(x)` and its first two derivatives.
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_d1(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn silu_d2(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input, no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is reported under `slot`.
    pub fn param(&mut self, value: Array2<f64>, slot: usize) -> Var {
        self.n_params = self.n_params.max(slot + 1);
        self.push(value, Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every column of `a` by the `m x 1` column `col`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn act(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        let ng = self.ng(a);
        self.push(v, Op::Act(a), ng)
    }

    /// Elementwise derivative of the activation.
    pub fn act_d1(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu_d1);
        let ng = self.ng(a);
        self.push(v, Op::ActD1(a), ng)
    }

    /// Row `r` of the result is row `idx[r]` of `a`.
    pub fn gather(&mut self, a: Var, idx: &Rc<[usize]>) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(v, Op::Gather(a, idx.clone()), ng)
    }

    /// Row `r` of `a` is added into row `idx[r]` of an `n_rows` result.
    pub fn scatter_add(&mut self, a: Var, idx: &Rc<[usize]>, n_rows: usize) -> Var {
        let v = scatter_rows(self.value(a), idx, n_rows);
        let ng = self.ng(a);
        self.push(v, Op::ScatterAdd(a, idx.clone()), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts must agree");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Reverse sweep from the scalar `out`; returns one gradient per parameter slot.
    pub fn backward(&self, out: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=out.0).map(|_| None).collect();
        let mut params: Vec<Option<Array2<f64>>> = (0..self.n_params).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones(self.value(out).raw_dim()));

        for k in (0..=out.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.ng(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => match &mut params[*slot] {
                    Some(existing) => *existing += &g,
                    p => *p = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(self.value(*b)), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, g.t().dot(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(*b, -&g, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MulCol(a, col) => {
                    if self.ng(*col) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(*col, d, &mut grads);
                    }
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*col), &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c, &mut grads),
                Op::Act(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= silu_d1(x));
                    acc(*a, d, &mut grads);
                }
                Op::ActD1(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= silu_d2(x));
                    acc(*a, d, &mut grads);
                }
                Op::Gather(a, idx) => {
                    let n = self.value(*a).nrows();
                    acc(*a, scatter_rows(&g, idx, n), &mut grads);
                }
                Op::ScatterAdd(a, idx) => acc(*a, g.select(Axis(0), idx), &mut grads),
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    if self.ng(*b) {
                        acc(*b, g.slice(ndarray::s![.., na..]).to_owned(), &mut grads);
                    }
                    if self.ng(*a) {
                        acc(*a, g.slice(ndarray::s![.., ..na]).to_owned(), &mut grads);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Array2::zeros(src.raw_dim());
                    d.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::RowSum(a) => {
                    let shape = self.value(*a).raw_dim();
                    let d = g.broadcast(shape).expect("column broadcast").to_owned();
                    acc(*a, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(*a, d, &mut grads);
                }
            }
        }
        params
    }
}

fn scatter_rows(a: &Array2<f64>, idx: &[usize], n_rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n_rows, a.ncols()));
    for (row, &target) in a.rows().into_iter().zip(idx) {
        let mut dst = out.row_mut(target);
        dst += &row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Array2<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone(), 0);
        let out = build(&mut tape, x);
        let grad = tape.backward(out).remove(0).unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let x = t.constant(xp);
                let o = build(&mut t, x);
                t.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - grad[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()),
                "entry ({r},{c}): fd {fd} vs {}",
                grad[[r, c]]
            );
        }
    }

    #[test]
    fn silu_derivatives_match_differences() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            assert!(((silu(x + h) - silu(x - h)) / (2.0 * h) - silu_d1(x)).abs() < 1e-8);
            assert!(((silu_d1(x + h) - silu_d1(x - h)) / (2.0 * h) - silu_d2(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn gradients_through_every_op() {
        let w = array![[0.3, -0.2], [0.5, 0.1], [-0.4, 0.9]];
        let idx: Rc<[usize]> = vec![2, 0, 0, 1].into();
        fd_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let h = t.matmul(x, wv); // 2x2
                let a = t.act(h);
                let d = t.act_d1(h);
                let m = t.mul(a, d);
                let bias = t.slice_cols(x, 0, 2);
                let bias = t.gather(bias, &Rc::from(vec![0usize]));
                let m = t.add_row(m, bias);
                let hx = t.matmul_t(m, wv); // 2x3
                let c = t.concat_cols(hx, x); // 2x6
                let rs = t.row_sum(c);
                let c = t.mul_col(c, rs);
                let tr: Rc<[usize]> = vec![1, 0].into();
                let g = t.gather(c, &tr);
                let s = t.sub(c, g);
                let s = t.scale(s, 0.7);
                let s = t.add(s, c);
                let sc = t.scatter_add(s, &Rc::from(vec![1usize, 1]), 3);
                let sc2 = t.gather(sc, &idx);
                let sq = t.mul(sc2, sc2);
                t.sum_all(sq)
            },
            array![[0.2, -0.4, 0.6], [-0.1, 0.8, 0.3]],
        );
    }

    #[test]
    fn constants_produce_no_gradient_work() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]], 0);
        let q = t.mul(c, c);
        assert!(!t.ng(q));
        let r = t.mul(q, p);
        let s = t.sum_all(r);
        let g = t.backward(s);
        assert_eq!(g[0].as_ref().unwrap(), &array![[1.0, 4.0]]);
    }
}
