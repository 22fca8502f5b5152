//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends one node to the tape; node order is execution order, so
//! `backward` is a single reverse sweep. A fresh [`Graph`] is built for every
//! forward pass.

use crate::tensor::{all_finite, matmul_raw, sigmoid, softplus, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Var, Var),
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects
    /// a gradient.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let requires_grad = t.requires_grad;
        self.push_node(t, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient, whatever its flag says.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push_node(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Result<Var> {
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.value(a).expect_matrix("matmul")?;
        let (k2, c) = self.value(b).expect_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![r, k],
                rhs: vec![k2, c],
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), r, k, c);
        self.push("matmul", vec![r, c], out, Op::MatMul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).expect_matrix("add_bias")?;
        if self.value(b).len() != c {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.data(b);
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &bv)| v + bv))
            .collect();
        self.push("add_bias", vec![r, c], out, Op::AddBias(x, b))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, self.shape(a).to_vec(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(name, self.shape(x).to_vec(), out, op)
    }

    pub fn scale(&mut self, x: Var, k: F) -> Result<Var> {
        self.map("scale", x, |v| v * k, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, k: F) -> Result<Var> {
        self.map("add_scalar", x, |v| v + k, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, computed as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().fold(F::zero(), |acc, &v| acc + v);
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = F::from_usize(self.value(x).len()).expect("length fits");
        let s = self.data(x).iter().fold(F::zero(), |acc, &v| acc + v);
        self.push("mean", vec![1], vec![s / n], Op::Mean(x))
    }

    /// Stacks `b` under `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).expect_matrix("concat_rows")?;
        let (rb, cb) = self.value(b).expect_matrix("concat_rows")?;
        if ca != cb {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.data(a));
        out.extend_from_slice(self.data(b));
        self.push("concat_rows", vec![ra + rb, ca], out, Op::ConcatRows(a, b))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from a previous call are
    /// discarded; within one call they accumulate over every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.value(loss).is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.value.grad = g.clone();
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.shape(a)[0], self.shape(a)[1]);
                let c = self.shape(b)[1];
                if self.requires_grad(a) {
                    // dA = dOut · Bᵀ
                    let bd = self.data(b);
                    let mut da = vec![F::zero(); r * k];
                    for row in 0..r {
                        for p in 0..k {
                            let mut acc = F::zero();
                            for col in 0..c {
                                acc = acc + g[row * c + col] * bd[p * c + col];
                            }
                            da[row * k + p] = acc;
                        }
                    }
                    accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · dOut
                    let ad = self.data(a);
                    let mut db = vec![F::zero(); k * c];
                    for row in 0..r {
                        for p in 0..k {
                            let av = ad[row * k + p];
                            for col in 0..c {
                                db[p * c + col] = db[p * c + col] + av * g[row * c + col];
                            }
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if self.requires_grad(b) {
                    let c = self.value(b).len();
                    let mut db = vec![F::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.requires_grad(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.requires_grad(b) {
                    accumulate(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let d = g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                    accumulate(grads, a, d);
                }
                if self.requires_grad(b) {
                    let d = g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                    accumulate(grads, b, d);
                }
            }
            Op::Scale(x, k) => accumulate(grads, x, g.iter().map(|&v| v * k).collect()),
            Op::AddScalar(x) => accumulate(grads, x, g.to_vec()),
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                accumulate(grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(&gv, &s)| gv * s * (F::one() - s)).collect();
                accumulate(grads, x, d);
            }
            Op::Softplus(x) => {
                let d = g.iter().zip(self.data(x)).map(|(&gv, &xv)| gv * sigmoid(xv)).collect();
                accumulate(grads, x, d);
            }
            Op::Square(x) => {
                let two = F::one() + F::one();
                let d = g.iter().zip(self.data(x)).map(|(&gv, &xv)| two * xv * gv).collect();
                accumulate(grads, x, d);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                let share = g[0] / F::from_usize(n).expect("length fits");
                accumulate(grads, x, vec![share; n]);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                if self.requires_grad(a) {
                    accumulate(grads, a, g[..split].to_vec());
                }
                if self.requires_grad(b) {
                    accumulate(grads, b, g[split..].to_vec());
                }
            }
        }
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => {
            vec![a, b]
        }
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softplus(x)
        | Op::Square(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![x],
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, d: Vec<F>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Compares analytic gradients of a scalar function against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps` and returns the worst relative
/// error `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
///
/// `f` receives a fresh graph and one trainable leaf per input.
pub fn grad_check_many<Fun>(f: Fun, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::NonScalarLoss(g.value(out).shape().to_vec()));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.detached().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detached).collect();
    for (which, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(var) {
            Some(d) => d.to_vec(),
            None => vec![0.0; inputs[which].len()],
        };
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = probe[which].data()[idx];
            probe[which].data_mut()[idx] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}
