//! One network definition, two execution strategies: plain evaluation and
//! gradient-tracking evaluation on a [`Graph`].

use std::collections::HashMap;
use std::rc::Rc;

use super::graph::{Graph, Var};
use super::ops::{self, Activation, BinaryOp};
use super::Tensor;
use crate::error::Result;
use crate::params::Params;

pub trait Backend {
    type Value: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, name: &str) -> Result<Self::Value>;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn conv1d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, dilation: usize, groups: usize) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value>;
    fn leaky_relu(&mut self, x: &Self::Value, slope: f64) -> Self::Value;
    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;
    fn cgln(&mut self, x: &Self::Value, gain: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn maxpool(&mut self, x: &Self::Value, window: usize) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value], axis: usize) -> Result<Self::Value>;
    fn mean_time(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

/// Plain forward evaluation; intermediate values are dropped as soon as the
/// caller releases them.
pub struct Eval<'p> {
    params: &'p Params,
    cache: HashMap<String, Rc<Tensor>>,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p Params) -> Self {
        Eval {
            params,
            cache: HashMap::new(),
        }
    }
}

impl Backend for Eval<'_> {
    type Value = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn param(&mut self, name: &str) -> Result<Rc<Tensor>> {
        if let Some(v) = self.cache.get(name) {
            return Ok(v.clone());
        }
        let v = Rc::new(self.params.get(name)?.clone());
        self.cache.insert(name.to_string(), v.clone());
        Ok(v)
    }

    fn tensor<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn conv1d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: &Rc<Tensor>, dilation: usize, groups: usize) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::conv1d_causal(x, w, b, dilation, groups)?))
    }

    fn linear(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::fully_connected(x, w, b)?))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::activation(x, Activation::Relu))
    }

    fn prelu(&mut self, x: &Rc<Tensor>, slope: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::activation(x, Activation::Prelu(slope.item()?))))
    }

    fn leaky_relu(&mut self, x: &Rc<Tensor>, slope: f64) -> Rc<Tensor> {
        Rc::new(ops::activation(x, Activation::LeakyRelu(slope)))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(ops::activation(x, Activation::Sigmoid))
    }

    fn cgln(&mut self, x: &Rc<Tensor>, gain: &Rc<Tensor>, bias: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::cgln(x, gain, bias, ops::CGLN_EPS)?))
    }

    fn maxpool(&mut self, x: &Rc<Tensor>, window: usize) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::maxpool1d(x, window)?))
    }

    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::elementwise(a, b, BinaryOp::Mul)?))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::elementwise(a, b, BinaryOp::Add)?))
    }

    fn concat(&mut self, xs: &[Rc<Tensor>], axis: usize) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = xs.iter().map(|x| x.as_ref()).collect();
        Ok(Rc::new(ops::concat(&refs, axis)?))
    }

    fn mean_time(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::mean_time(x)?))
    }
}

/// Gradient-tracking evaluation. Every parameter touched becomes a leaf that
/// requires a gradient; [`Tape::gradients`] collects them after backward.
pub struct Tape<'p> {
    pub graph: Graph,
    params: &'p Params,
    bound: HashMap<String, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            graph: Graph::new(),
            params,
            bound: HashMap::new(),
        }
    }

    /// Gradients of every bound parameter; untouched-by-loss parameters get zeros.
    pub fn gradients(&self) -> Params {
        self.bound
            .iter()
            .map(|(name, v)| {
                let g = self
                    .graph
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Backend for Tape<'_> {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.graph.leaf(t, false)
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let v = self.graph.leaf(self.params.get(name)?.clone(), true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.graph.value(*v)
    }

    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, dilation: usize, groups: usize) -> Result<Var> {
        self.graph.conv1d_causal(*x, *w, *b, dilation, groups)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.graph.fully_connected(*x, *w, *b)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.graph.relu(*x)
    }

    fn prelu(&mut self, x: &Var, slope: &Var) -> Result<Var> {
        self.graph.prelu(*x, *slope)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        self.graph.leaky_relu(*x, slope)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        self.graph.sigmoid(*x)
    }

    fn cgln(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        self.graph.cgln(*x, *gain, *bias)
    }

    fn maxpool(&mut self, x: &Var, window: usize) -> Result<Var> {
        self.graph.maxpool1d(*x, window)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mul(*a, *b)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.graph.concat(xs, axis)
    }

    fn mean_time(&mut self, x: &Var) -> Result<Var> {
        self.graph.mean_time(*x)
    }
}
