//! Tape-based reverse-mode differentiation over the fixed op set.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! registered by name; [`Graph::backward`] returns the gradient of a scalar
//! node with respect to each of them as a [`Gradients`] map.

use indexmap::IndexMap;

use crate::ops::{self, sigmoid};
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(IndexMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn insert(&mut self, name: String, t: Tensor) {
        self.0.insert(name, t);
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a differentiable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        debug_assert!(self.params.iter().all(|(n, _)| n != name), "duplicate parameter {name}");
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols) = ops::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let rg = self.grad_any(&[input, kernel, bias]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x_forward(self.value(x))?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        let out = xv.map(f64::ln).check_finite("log")?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?.check_finite("add")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?.check_finite("sub")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?.check_finite("mul")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor).check_finite("scale")?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c).check_finite("offset")?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Offset(x), rg))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.grad_any(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.grad_any(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse pass from a scalar node. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                    cols,
                } => {
                    let gt = Tensor::from_raw(out.shape().to_vec(), g);
                    let need_input = self.nodes[input.0].requires_grad;
                    let cg = ops::conv2d_backward(
                        &gt,
                        cols,
                        self.value(*input).shape(),
                        self.value(*kernel),
                        *stride,
                        *padding,
                        need_input,
                    )?;
                    if let Some(gi) = cg.input {
                        self.accumulate(&mut grads, *input, gi.into_data());
                    }
                    self.accumulate(&mut grads, *kernel, cg.kernel.into_data());
                    self.accumulate(&mut grads, *bias, cg.bias.into_data());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Upsample2x(x) => {
                    let gt = Tensor::from_raw(out.shape().to_vec(), g);
                    let d = ops::upsample2x_backward(&gt, self.value(*x).shape());
                    self.accumulate(&mut grads, *x, d.into_data());
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    let (ga, gb) = g.split_at(na);
                    self.accumulate(&mut grads, *a, ga.to_vec());
                    self.accumulate(&mut grads, *b, gb.to_vec());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::Log(x) => {
                    let d = g.iter().zip(self.value(*x).data()).map(|(g, x)| g / x).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = g.iter().zip(self.value(*x).data()).map(|(g, x)| 2.0 * g * x).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, g);
                    self.accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, f) => {
                    let d = g.iter().map(|v| v * f).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Offset(x) | Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, g);
                }
                Op::Clamp(x, lo, hi) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
            }
        }

        let mut result = Gradients::default();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape().to_vec();
            let t = match grads.get_mut(v.0).and_then(Option::take) {
                Some(d) => Tensor::from_raw(shape, d).check_finite("backward")?,
                None => Tensor::zeros(&shape),
            };
            result.insert(name.clone(), t);
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, delta: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot => *slot = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let t = g.param("theta", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("theta").unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn mean_sigmoid_at_zero() {
        let mut g = Graph::new();
        let t = g.param("theta", Tensor::scalar(0.0));
        let s = g.sigmoid(t);
        assert_eq!(g.value(s).item().unwrap(), 0.5);
        let m = g.mean(s);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get("theta").unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let t = g.param("t", Tensor::zeros(&[2]));
        assert!(matches!(g.backward(t), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn log_domain() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn unused_param_gets_zeros() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::full(&[2], 1.0));
        let _b = g.param("b", Tensor::full(&[3], 1.0));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(grads.get("b").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x * x) via mul of a node with itself
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1e300));
        assert!(matches!(g.scale(x, 1e10), Err(TensorError::NonFinite { .. })));
    }
}
