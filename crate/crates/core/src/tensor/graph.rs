use super::ops::{self, Resize};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    LeakyRelu { input: Var, slope: T },
    Abs { input: Var },
    Affine { input: Var, scale: T },
    Resize { input: Var, factor: usize, dir: Resize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Mean { input: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only tape. Nodes are created in topological order, so the
/// backward pass is a reverse sweep over the node list.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if the backward pass reached this node.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape matches value"))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, pad }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let value = ops::leaky_relu(self.value(input), slope)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::LeakyRelu { input, slope }, rg))
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, T::zero())
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = ops::abs(self.value(input));
        let rg = self.rg(input);
        self.push(value, Op::Abs { input }, rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let value = ops::affine(self.value(input), scale, shift);
        let rg = self.rg(input);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    pub fn resize_nearest(&mut self, input: Var, factor: usize, dir: Resize) -> Result<Var> {
        let value = ops::resize_nearest(self.value(input), factor, dir)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Resize { input, factor, dir }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::sub(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let value = ops::reduce_mean(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Mean { input }, rg))
    }

    /// Backpropagates from a single-element node with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_with(root, vec![T::one()])
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::invalid("backward seed does not match root shape"));
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.accumulate(root, seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                let want = (self.rg(input), self.rg(kernel), self.rg(bias));
                let (dx, dk, db) = ops::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    self.value(bias).len(),
                    stride,
                    pad,
                    g,
                    want,
                )?;
                if let Some(dx) = dx {
                    self.accumulate(input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(kernel, dk);
                }
                if let Some(db) = db {
                    self.accumulate(bias, db);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let dx = ops::leaky_relu_backward(self.value(input), slope, g);
                self.accumulate(input, dx);
            }
            Op::Abs { input } => {
                let dx = ops::abs_backward(self.value(input), g);
                self.accumulate(input, dx);
            }
            Op::Affine { input, scale } => {
                self.accumulate(input, g.iter().map(|&v| v * scale).collect());
            }
            Op::Resize { input, factor, dir } => {
                let dx = ops::resize_nearest_backward(self.value(input).shape(), factor, dir, g);
                self.accumulate(input, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let da = g.iter().zip(self.value(b).data()).map(|(&u, &y)| u * y).collect();
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = g.iter().zip(self.value(a).data()).map(|(&u, &x)| u * x).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = ops::concat_backward(self.value(a).shape(), self.value(b).shape(), g);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Mean { input } => {
                let n = self.value(input).len();
                let share = g[0] / T::of(n as f64);
                self.accumulate(input, vec![share; n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_backward_passes_upstream_to_both() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let b = g.leaf(Tensor::full([1, 1, 2, 2], 2.0), true);
        let s = g.add(a, b).unwrap();
        let seed = vec![0.5, -1.0, 2.0, 3.0];
        g.backward_with(s, seed.clone()).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), seed.as_slice());
        assert_eq!(g.grad(b).unwrap().data(), seed.as_slice());
    }

    #[test]
    fn non_grad_leaves_get_nothing() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::full([1, 1, 1, 3], 1.0), true);
        let b = g.leaf(Tensor::full([1, 1, 1, 3], 3.0), false);
        let p = g.mul(a, b).unwrap();
        let m = g.mean(p).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = mean(x * x) -> dy/dx = 2x / n
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new([1, 1, 1, 2], vec![1.5, -2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.5, -2.0]);
    }
}
