//! Define-by-run reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Calling
//! [`Graph::backward`] on a 1x1 root walks the tape in reverse and accumulates
//! gradients into every node, including the leaves created from a
//! [`ParamStore`]. Graphs are cheap and meant to be rebuilt every step.
//!
//! Binary elementwise operations broadcast along any axis of length one, so a
//! `1xD` row can be added to an `MxD` block and a `Kx1` column times a `1xD`
//! row yields a `KxD` outer product. Primitive operations panic on
//! non-conforming shapes and report both operands in the message; layers built
//! on top validate their inputs and return [`Error::Shape`] instead.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{s, Array2, Axis, Zip};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Floor used inside `log`, `sqrt` and division denominators.
pub const EPS: f64 = 1e-10;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
}

/// Registry of trainable arrays for one model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize),
    Clip(usize, f64, f64),
    SumAll(usize),
    MeanAll(usize),
    ColumnSum(usize),
    ColumnMean(usize),
    RepeatRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
}

impl Op {
    fn any_input(&self, mut f: impl FnMut(usize) -> bool) -> bool {
        match self {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                f(*a) || f(*b)
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a)
            | Op::Clip(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::ColumnSum(a)
            | Op::ColumnMean(a)
            | Op::RepeatRows(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Transpose(a) => f(*a),
            Op::ConcatCols(parts) => parts.iter().any(|&p| f(p)),
        }
    }
}

/// One forward build. Confined to a single thread.
#[derive(Default)]
pub struct Graph {
    values: RefCell<Vec<Matrix>>,
    ops: RefCell<Vec<Op>>,
    grads: RefCell<Vec<Option<Matrix>>>,
    needs_grad: RefCell<Vec<bool>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Parameter gradients collected after [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(&id)
    }

    /// Gradient for `id`, or zeros shaped like the stored parameter.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Matrix {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(store.get(id).dim()))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

fn shape_of(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => (r, c),
        _ => panic!(
            "{}",
            Error::Shape {
                op,
                left: a,
                right: b
            }
        ),
    }
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn floor_denominator(d: f64) -> f64 {
    if d.abs() < EPS {
        if d < 0.0 {
            -EPS
        } else {
            EPS
        }
    } else {
        d
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, contribution: Matrix) {
    match &mut grads[idx] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let needs = {
            let flags = self.needs_grad.borrow();
            match &op {
                Op::Leaf => true,
                other => other.any_input(|i| flags[i]),
            }
        };
        self.push_flagged(value, op, needs)
    }

    fn push_flagged(&self, value: Matrix, op: Op, needs_grad: bool) -> Var<'_> {
        let mut values = self.values.borrow_mut();
        values.push(value);
        self.ops.borrow_mut().push(op);
        self.needs_grad.borrow_mut().push(needs_grad);
        Var {
            id: values.len() - 1,
            graph: self,
        }
    }

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Leaf that never needs a gradient (observed data, frozen noise).
    /// Work that only flows into inputs is skipped by the backward sweep.
    pub fn input(&self, value: Matrix) -> Var<'_> {
        self.push_flagged(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var {
                id: node,
                graph: self,
            };
        }
        let var = self.constant(store.get(id).clone());
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    fn unary(&self, x: Var<'_>, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let value = x.value().mapv(f);
        self.push(value, op)
    }

    /// Reverse sweep from a 1x1 `root`. Gradients are kept for leaves only.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let (rows, cols) = root.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        if self.backward_done.replace(true) {
            return Err(Error::BackwardTwice);
        }
        let values = self.values.borrow();
        let ops = self.ops.borrow();
        let needs = self.needs_grad.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; values.len()];
        grads[root.id] = Some(Matrix::ones((1, 1)));

        // Route a contribution to `idx` when it participates in differentiation.
        let send = |grads: &mut Vec<Option<Matrix>>, idx: usize, make: &dyn Fn() -> Matrix| {
            if needs[idx] {
                accumulate(grads, idx, make());
            }
        };

        for i in (0..=root.id).rev() {
            if !needs[i] {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let out = &values[i];
            match &ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    send(&mut grads, *a, &|| g.dot(&values[*b].t()));
                    send(&mut grads, *b, &|| values[*a].t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, &|| reduce_to(g.clone(), shape_of(&values[*a])));
                    send(&mut grads, *b, &|| reduce_to(g.clone(), shape_of(&values[*b])));
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, &|| reduce_to(g.clone(), shape_of(&values[*a])));
                    send(&mut grads, *b, &|| reduce_to(-&g, shape_of(&values[*b])));
                }
                Op::Mul(a, b) => {
                    send(&mut grads, *a, &|| reduce_to(&g * &values[*b], shape_of(&values[*a])));
                    send(&mut grads, *b, &|| reduce_to(&g * &values[*a], shape_of(&values[*b])));
                }
                Op::Div(a, b) => {
                    let den = values[*b].mapv(floor_denominator);
                    send(&mut grads, *a, &|| reduce_to(&g / &den, shape_of(&values[*a])));
                    send(&mut grads, *b, &|| {
                        let mut gb = &g * &values[*a];
                        // The floored region does not depend on the denominator.
                        Zip::from(&mut gb)
                            .and_broadcast(&values[*b])
                            .and_broadcast(&den)
                            .for_each(|gv, &raw, &d| {
                                *gv = if raw.abs() < EPS { 0.0 } else { -*gv / (d * d) };
                            });
                        reduce_to(gb, shape_of(&values[*b]))
                    });
                }
                Op::Neg(a) => {
                    g.mapv_inplace(|v| -v);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => {
                    g.mapv_inplace(|v| v * c);
                    accumulate(&mut grads, *a, g);
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => {
                    g *= out;
                    accumulate(&mut grads, *a, g);
                }
                Op::Log(a) => {
                    Zip::from(&mut g).and(&values[*a]).for_each(|gv, &x| {
                        *gv = if x > EPS { *gv / x } else { 0.0 };
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::Sqrt(a) => {
                    Zip::from(&mut g)
                        .and(&values[*a])
                        .and(out)
                        .for_each(|gv, &x, &y| {
                            *gv = if x > EPS { *gv * 0.5 / y } else { 0.0 };
                        });
                    accumulate(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    Zip::from(&mut g)
                        .and(&values[*a])
                        .for_each(|gv, &x| *gv *= 2.0 * x);
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    Zip::from(&mut g).and(out).for_each(|gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    Zip::from(&mut g)
                        .and(&values[*a])
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    Zip::from(&mut g)
                        .and(out)
                        .for_each(|gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    Zip::from(&mut g).and(&values[*a]).for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::LeakyRelu(a) => {
                    Zip::from(&mut g).and(&values[*a]).for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv *= LEAKY_RELU_SLOPE;
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::Clip(a, lo, hi) => {
                    Zip::from(&mut g).and(&values[*a]).for_each(|gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let ga = Matrix::from_elem(values[*a].dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let n = values[*a].len() as f64;
                    let ga = Matrix::from_elem(values[*a].dim(), g[[0, 0]] / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColumnSum(a) => {
                    let ga = g
                        .broadcast(values[*a].dim())
                        .expect("column-sum gradient broadcasts")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ColumnMean(a) => {
                    let n = values[*a].nrows() as f64;
                    let ga = g
                        .broadcast(values[*a].dim())
                        .expect("column-mean gradient broadcasts")
                        .mapv(|v| v / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RepeatRows(a) => {
                    accumulate(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = values[p].ncols();
                        send(&mut grads, p, &|| g.slice(s![.., start..start + width]).to_owned());
                        start += width;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Matrix::zeros(values[*a].dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Matrix::zeros(values[*a].dim());
                    for (j, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(j);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
            }
        }
        drop(needs);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> Gradients {
        let grads = self.grads.borrow();
        let by_param = self
            .param_nodes
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| {
                grads
                    .get(node)
                    .and_then(|g| g.as_ref())
                    .map(|g| (pid, g.clone()))
            })
            .collect();
        Gradients { by_param }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Matrix> {
        Ref::map(self.graph.values.borrow(), |v| &v[self.id])
    }

    pub fn to_matrix(&self) -> Matrix {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// The single entry of a 1x1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar node");
        v[[0, 0]]
    }

    /// Gradient of a leaf after backward; `None` for interior nodes, inputs,
    /// and leaves the root does not depend on.
    pub fn grad(&self) -> Option<Matrix> {
        self.graph.grads.borrow().get(self.id).cloned().flatten()
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph));
        let value = {
            let a = self.value();
            let b = other.value();
            broadcast_shape(name, a.dim(), b.dim());
            f(&a, &b)
        };
        self.graph.push(value, op)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let value = {
            let a = self.value();
            let b = other.value();
            if a.ncols() != b.nrows() {
                panic!(
                    "{}",
                    Error::Shape {
                        op: "matmul",
                        left: a.dim(),
                        right: b.dim()
                    }
                );
            }
            a.dot(&*b)
        };
        self.graph.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise division with the denominator's magnitude floored at [`EPS`].
    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            "div",
            |a, b| a / &b.mapv(floor_denominator),
            Op::Div(self.id, other.id),
        )
    }

    pub fn neg(self) -> Var<'g> {
        self.graph.unary(self, |x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.unary(self, |x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph.unary(self, |x| x + c, Op::Offset(self.id))
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'g> {
        self.neg().add_scalar(1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.unary(self, f64::exp, Op::Exp(self.id))
    }

    /// `ln(max(x, EPS))`
    pub fn log(self) -> Var<'g> {
        self.graph.unary(self, |x| x.max(EPS).ln(), Op::Log(self.id))
    }

    /// `sqrt(max(x, EPS))`
    pub fn sqrt(self) -> Var<'g> {
        self.graph.unary(self, |x| x.max(EPS).sqrt(), Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self.graph.unary(self, |x| x * x, Op::Square(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.graph.unary(self, f64::tanh, Op::Tanh(self.id))
    }

    pub fn softplus(self) -> Var<'g> {
        self.graph.unary(self, softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.graph.unary(self, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.unary(self, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(self) -> Var<'g> {
        self.graph.unary(
            self,
            |x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x },
            Op::LeakyRelu(self.id),
        )
    }

    /// Hard projection onto `[lo, hi]`; zero gradient outside the interval.
    pub fn clip(self, lo: f64, hi: f64) -> Var<'g> {
        self.graph
            .unary(self, |x| x.clamp(lo, hi), Op::Clip(self.id, lo, hi))
    }

    pub fn sum_all(self) -> Var<'g> {
        let v = self.value().sum();
        self.graph
            .push(Matrix::from_elem((1, 1), v), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'g> {
        let v = {
            let m = self.value();
            m.sum() / m.len() as f64
        };
        self.graph
            .push(Matrix::from_elem((1, 1), v), Op::MeanAll(self.id))
    }

    /// Sum over rows: `MxD -> 1xD`.
    pub fn column_sum(self) -> Var<'g> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.graph.push(v, Op::ColumnSum(self.id))
    }

    /// Mean over rows: `MxD -> 1xD`.
    pub fn column_mean(self) -> Var<'g> {
        let v = {
            let m = self.value();
            let n = m.nrows() as f64;
            m.sum_axis(Axis(0)).insert_axis(Axis(0)) / n
        };
        self.graph.push(v, Op::ColumnMean(self.id))
    }

    /// Tile a `1xD` row into `rows x D`.
    pub fn repeat_rows(self, rows: usize) -> Var<'g> {
        let v = {
            let m = self.value();
            assert_eq!(m.nrows(), 1, "repeat_rows expects a single row, got {:?}", m.dim());
            m.broadcast((rows, m.ncols())).unwrap().to_owned()
        };
        self.graph.push(v, Op::RepeatRows(self.id))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let graph = parts[0].graph;
        let value = {
            let views: Vec<Ref<'_, Matrix>> = parts.iter().map(|p| p.value()).collect();
            let rows = views[0].nrows();
            for v in &views[1..] {
                if v.nrows() != rows {
                    panic!(
                        "{}",
                        Error::Shape {
                            op: "concat_cols",
                            left: views[0].dim(),
                            right: v.dim()
                        }
                    );
                }
            }
            let plain: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &plain).expect("row counts checked")
        };
        graph.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g> {
        let v = {
            let m = self.value();
            assert!(
                start <= end && end <= m.ncols(),
                "slice_cols {start}..{end} out of range for {:?}",
                m.dim()
            );
            m.slice(s![.., start..end]).to_owned()
        };
        self.graph.push(v, Op::SliceCols(self.id, start))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Var<'g> {
        let v = {
            let m = self.value();
            m.select(Axis(0), rows)
        };
        self.graph
            .push(v, Op::GatherRows(self.id, rows.to_vec()))
    }

    pub fn transpose(self) -> Var<'g> {
        let v = self.value().t().to_owned();
        self.graph.push(v, Op::Transpose(self.id))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g> std::ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name, entry, autodiff and finite-difference values at the worst entry.
    pub worst: Option<(String, (usize, usize), f64, f64)>,
    pub entries_checked: usize,
    pub entries: Vec<GradEntry>,
}

/// One checked parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(1e-8)
    }

    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

impl GradCheckReport {
    /// Largest relative error among entries whose gradient magnitude is at
    /// least `floor`, i.e. large enough for central differences to resolve.
    pub fn max_rel_error_where(&self, floor: f64) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) >= floor)
            .map(GradEntry::rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.entries.iter().map(GradEntry::abs_error).fold(0.0, f64::max)
    }
}

/// Compare autodiff gradients against central finite differences.
///
/// `build` must be deterministic given the store (freeze any noise it draws).
/// At most `max_entries` entries per parameter are checked, sampled with `rng`.
/// The error per entry is `|ad - fd| / max(1e-8, |ad| + |fd|)`.
pub fn grad_check<F, R>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    max_entries: usize,
    rng: &mut R,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: for<'g> FnMut(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    R: Rng + ?Sized,
{
    if params.is_empty() {
        return Err(Error::Config("grad_check needs at least one parameter".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {step}")));
    }

    let analytic = {
        let graph = Graph::new();
        let loss = build(&graph, store)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                what: "loss at unperturbed parameters".into(),
            });
        }
        graph.backward(loss)?;
        graph.param_grads()
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let graph = Graph::new();
        Ok(build(&graph, store)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        entries: Vec::new(),
    };
    for &pid in params {
        let (rows, cols) = store.get(pid).dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= max_entries {
            (0..total).collect()
        } else {
            sample(rng, total, max_entries).into_vec()
        };
        let ad = analytic.get_or_zeros(store, pid);
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let original = store.get(pid)[[r, c]];
            store.get_mut(pid)[[r, c]] = original + step;
            let plus = eval(store);
            store.get_mut(pid)[[r, c]] = original - step;
            let minus = eval(store);
            store.get_mut(pid)[[r, c]] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss while perturbing {}[{r},{c}]", store.name(pid)),
                });
            }
            let fd = (plus - minus) / (2.0 * step);
            let entry = GradEntry {
                param: store.name(pid).to_string(),
                index: (r, c),
                analytic: ad[[r, c]],
                numeric: fd,
            };
            let rel = entry.rel_error();
            report.entries_checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((entry.param.clone(), entry.index, entry.analytic, entry.numeric));
            }
            report.entries.push(entry);
        }
    }
    Ok(report)
}
