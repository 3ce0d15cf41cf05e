//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] owns every node created while building an expression. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] simply walks it in reverse.
//!
//! ```
//! use smoothcert::autodiff::Graph;
//! use smoothcert::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::stats::{norm_icdf, norm_pdf};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRowVector(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Hinge(Var),
    Gather(Var, Vec<usize>),
    SoftmaxBeta(Var, f64),
    NormIcdf(Var),
    Clamp(Var, f64, f64),
    RepeatRows(Var, usize),
    GroupMeanRows(Var, usize),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient written by the last call to [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip(self.value(b), f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Callers clamp probabilities first (see [`Graph::clamp`]).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Hinge `max(u, 0)`.
    pub fn max_with_zero(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Hinge(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise standard-normal quantile; inputs must lie in (0, 1).
    pub fn norm_icdf(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&p| norm_icdf(p))
            .collect::<Result<Vec<_>>>()?;
        let value = self.value(a).with_data(data);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::NormIcdf(a), value, rg))
    }

    /// A copy of `a` that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), value, rg)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).expect_2d("matmul")?;
        let (k2, m) = self.value(b).expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Adds a length-`k` vector to every row of an `[n, k]` matrix.
    pub fn add_row_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, k) = self.value(a).expect_2d("add_row_vector")?;
        if self.value(v).shape() != [k] {
            return Err(Error::shape(
                "add_row_vector",
                format!("row width {k} vs vector {:?}", self.value(v).shape()),
            ));
        }
        let data = tensor::add_row_vector(self.value(a).data(), self.value(v).data());
        let value = self.value(a).with_data(data);
        let rg = self.rg(&[a, v]);
        Ok(self.push(Op::AddRowVector(a, v), value, rg))
    }

    /// Row-wise `softmax(beta * u)` over the class axis of `[n, c]`.
    pub fn softmax_beta(&mut self, a: Var, beta: f64) -> Result<Var> {
        let (_, c) = self.value(a).expect_2d("softmax_beta")?;
        let data = tensor::softmax_rows(self.value(a).data(), c, beta);
        let value = self.value(a).with_data(data);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxBeta(a, beta), value, rg))
    }

    /// Picks `a[i, index[i]]` from each row: `[n, c] -> [n]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.value(a).expect_2d("gather")?;
        if index.len() != n || index.iter().any(|&i| i >= c) {
            return Err(Error::shape("gather", format!("{} indices for [{n}, {c}]", index.len())));
        }
        let src = self.value(a).data();
        let data: Vec<f64> = index.iter().enumerate().map(|(r, &i)| src[r * c + i]).collect();
        let value = Tensor::vector(data);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gather(a, index.to_vec()), value, rg))
    }

    /// Repeats each row `times` times consecutively: `[n, d] -> [n*times, d]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (n, d) = self.value(a).expect_2d("repeat_rows")?;
        let data = tensor::repeat_rows(self.value(a).data(), d, times);
        let value = Tensor::matrix(n * times, d, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::RepeatRows(a, times), value, rg))
    }

    /// Averages consecutive blocks of `group` rows: `[n*group, c] -> [n, c]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.value(a).expect_2d("group_mean_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_mean_rows", format!("{rows} rows, group {group}")));
        }
        let data = tensor::group_mean_rows(self.value(a).data(), c, group);
        let value = Tensor::matrix(rows / group, c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GroupMeanRows(a, group), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Computes `d loss / d v` for every node `v` that requires a gradient.
    ///
    /// Gradients from earlier calls are overwritten, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            node.grad = Some(node.value.with_data(g));
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            val(v)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gi)| f(x, y, gi))
                .collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(gi, y)| gi / y).collect());
                send(
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect(),
                );
            }
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::MulScalar(a, s) => send(*a, g.iter().map(|gi| gi * s).collect()),
            Op::AddRowVector(a, v) => {
                send(*a, g.to_vec());
                let k = val(*v).len();
                let mut acc = vec![0.0; k];
                for row in g.chunks_exact(k) {
                    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                send(*v, acc);
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let m = self.nodes[b.0].value.cols();
                if self.nodes[a.0].requires_grad {
                    send(*a, tensor::matmul_nt(g, val(*b), n, k, m));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, tensor::matmul_tn(val(*a), g, n, k, m));
                }
            }
            Op::Relu(a) | Op::Hinge(a) => {
                send(*a, elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }))
            }
            Op::Tanh(a) => send(*a, elementwise(*a, &|_, y, gi| gi * (1.0 - y * y))),
            Op::Exp(a) => send(*a, elementwise(*a, &|_, y, gi| gi * y)),
            Op::Log(a) => send(*a, elementwise(*a, &|x, _, gi| gi / x)),
            Op::Clamp(a, lo, hi) => send(
                *a,
                elementwise(*a, &|x, _, gi| if x >= *lo && x <= *hi { gi } else { 0.0 }),
            ),
            Op::NormIcdf(a) => send(*a, elementwise(*a, &|_, y, gi| gi / norm_pdf(y))),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Gather(a, index) => {
                let c = self.nodes[a.0].value.cols();
                let mut acc = vec![0.0; val(*a).len()];
                for (r, (&i, &gi)) in index.iter().zip(g).enumerate() {
                    acc[r * c + i] += gi;
                }
                send(*a, acc);
            }
            Op::SoftmaxBeta(a, beta) => {
                let c = node.value.cols();
                let mut acc = vec![0.0; out.len()];
                for ((s, gr), dst) in out
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(acc.chunks_exact_mut(c))
                {
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, &si), &gi) in dst.iter_mut().zip(s).zip(gr) {
                        *d = beta * si * (gi - dot);
                    }
                }
                send(*a, acc);
            }
            Op::RepeatRows(a, times) => {
                let d = self.nodes[a.0].value.cols();
                send(*a, tensor::group_mean_rows(g, d, *times).iter().map(|v| v * *times as f64).collect());
            }
            Op::GroupMeanRows(a, group) => {
                let c = node.value.cols();
                let scale = 1.0 / *group as f64;
                let mut acc = Vec::with_capacity(g.len() * group);
                for row in g.chunks_exact(c) {
                    for _ in 0..*group {
                        acc.extend(row.iter().map(|v| v * scale));
                    }
                }
                send(*a, acc);
            }
        }
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over the
/// coordinates of `point`, for a scalar function built by `f`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x).expect("param has grad").data().to_vec();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(point.with_data(values));
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
