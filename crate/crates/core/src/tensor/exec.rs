//! One model definition, two evaluators: eager (values only, intermediates
//! dropped as soon as they go out of scope) and taped (differentiable).

use super::ops::{self, Resize};
use super::{Element, Graph, Tensor, Var};
use crate::error::Result;

/// The op subset the SR models are written against.
pub trait Exec<T: Element> {
    type Value: Clone;

    fn conv2d(&mut self, x: &Self::Value, k: &Self::Value, b: &Self::Value, stride: usize, pad: usize) -> Result<Self::Value>;
    fn leaky_relu(&mut self, x: &Self::Value, slope: T) -> Result<Self::Value>;
    fn resize_nearest(&mut self, x: &Self::Value, factor: usize, dir: Resize) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn shape(&self, x: &Self::Value) -> super::Shape;
}

/// Forward-only evaluation on plain tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Element> Exec<T> for Eager {
    type Value = Tensor<T>;

    fn conv2d(&mut self, x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        ops::conv2d(x, k, b, stride, pad)
    }

    fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        ops::leaky_relu(x, slope)
    }

    fn resize_nearest(&mut self, x: &Tensor<T>, factor: usize, dir: Resize) -> Result<Tensor<T>> {
        ops::resize_nearest(x, factor, dir)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::concat_channels(a, b)
    }

    fn shape(&self, x: &Tensor<T>) -> super::Shape {
        x.shape()
    }
}

impl<T: Element> Exec<T> for Graph<T> {
    type Value = Var;

    fn conv2d(&mut self, x: &Var, k: &Var, b: &Var, stride: usize, pad: usize) -> Result<Var> {
        Graph::conv2d(self, *x, *k, *b, stride, pad)
    }

    fn leaky_relu(&mut self, x: &Var, slope: T) -> Result<Var> {
        Graph::leaky_relu(self, *x, slope)
    }

    fn resize_nearest(&mut self, x: &Var, factor: usize, dir: Resize) -> Result<Var> {
        Graph::resize_nearest(self, *x, factor, dir)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::add(self, *a, *b)
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Graph::concat_channels(self, *a, *b)
    }

    fn shape(&self, x: &Var) -> super::Shape {
        self.value(*x).shape()
    }
}
