//! Named parameter registry and the small layer vocabulary (linear, MLP,
//! conv) built on top of the tape.
//!
//! Every parameter is registered under a stable dotted name. Initialization
//! is keyed by (seed, name), so a parameter gets identical initial values in
//! any model variant that contains it — which makes variant-to-variant
//! comparisons and ablation wiring checks exact.

use std::collections::HashMap;

use crate::rng::{hash_name, SeedRng};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        assert!(!self.lookup.contains_key(name), "duplicate parameter name `{name}`");
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.lookup.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn lens(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.numel()).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Total scalar count over parameters whose name starts with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Leaf [`Var`]s for every parameter on a given tape, parallel to the
/// registry order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn leaf_all<S: Scalar>(
        params: &ParamSet<S>,
        tape: &mut Tape<S>,
        requires_grad: bool,
    ) -> Self {
        let vars =
            params.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        ParamVars { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters with (seed, name)-keyed He-uniform initialization.
pub struct NetBuilder<'a, S> {
    pub params: &'a mut ParamSet<S>,
    pub seed: u64,
}

impl<'a, S: Scalar> NetBuilder<'a, S> {
    pub fn new(params: &'a mut ParamSet<S>, seed: u64) -> Self {
        NetBuilder { params, seed }
    }

    fn init(&mut self, name: &str, shape: Vec<usize>, limit: f64) -> ParamId {
        let mut rng = SeedRng::from_seed(self.seed).split(hash_name(name));
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::of(rng.uniform(-limit, limit))).collect();
        self.params.add(name, Tensor::new(shape, data))
    }

    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        self.init(name, shape, (6.0 / fan_in as f64).sqrt())
    }

    fn bias(&mut self, name: &str, len: usize, fan_in: usize) -> ParamId {
        self.init(name, vec![len], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> LinearDef {
        LinearDef {
            w: self.weight(&format!("{name}.w"), vec![in_dim, out_dim], in_dim),
            b: self.bias(&format!("{name}.b"), out_dim, in_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn mlp(&mut self, name: &str, in_dim: usize, hidden: &[usize], out_dim: usize) -> MlpDef {
        let mut layers = Vec::new();
        let mut d = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(self.linear(&format!("{name}.l{i}"), d, h));
            d = h;
        }
        layers.push(self.linear(&format!("{name}.l{}", hidden.len()), d, out_dim));
        MlpDef { layers }
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        padding: usize,
    ) -> Conv2dDef {
        let fan_in = in_ch * k * k;
        Conv2dDef {
            w: self.weight(&format!("{name}.w"), vec![out_ch, in_ch, k, k], fan_in),
            b: self.bias(&format!("{name}.b"), out_ch, fan_in),
            padding,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearDef {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearDef {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let y = tape.matmul(x, pv.var(self.w));
        tape.add_row(y, pv.var(self.b))
    }
}

/// Fully-connected stack with ReLU between layers, none after the last.
#[derive(Debug, Clone)]
pub struct MlpDef {
    pub layers: Vec<LinearDef>,
}

impl MlpDef {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, pv, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dDef {
    pub w: ParamId,
    pub b: ParamId,
    pub padding: usize,
}

impl Conv2dDef {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, pv: &ParamVars, x: Var) -> Var {
        tape.conv2d(x, pv.var(self.w), pv.var(self.b), self.padding)
    }
}
