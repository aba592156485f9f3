//! Parameter storage and the small set of layers the model bundle uses.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchMoments, Graph, ParamKey, Var};
use crate::tensor::Tensor;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Layers initialized from a pre-trained network.
    Backbone,
    /// Freshly initialized layers.
    New,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::New => "new",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "new" => Some(ParamGroup::New),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Owner tag for the model bundle's parameters.
pub const BUNDLE_OWNER: u8 = 0;
/// Owner tag for domain-discriminator parameters.
pub const DISCRIMINATOR_OWNER: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    owner: u8,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(owner: u8) -> Self {
        Self {
            owner,
            params: Vec::new(),
        }
    }

    pub fn owner(&self) -> u8 {
        self.owner
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        self.params.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            owner: self.owner,
            index,
        }
    }

    pub fn bind(&self, g: &mut Graph, index: usize) -> Var {
        g.param(self.key(index), &self.params[index].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Gradients for every parameter that was bound in `g`, by index.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        (0..self.params.len()).map(|i| g.param_grad(self.key(i))).collect()
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn xavier_uniform(rng: &mut impl Rng, out: usize, inp: usize) -> Tensor {
    let bound = (6.0 / (inp + out) as f64).sqrt();
    Tensor::from_vec(&[out, inp], (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize, group: ParamGroup) -> Self {
        let w = store.push(format!("{name}.weight"), he_normal(rng, &[cout, cin, k, k], cin * k * k), group);
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]), group);
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        let k = store.get(self.w).value.shape()[2];
        g.conv2d(x, w, b, k / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    /// Present when the layer is weight-normalized; `w` then holds the
    /// direction and `g` the per-row magnitude.
    pub g: Option<usize>,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inp: usize, out: usize, group: ParamGroup, weight_norm: bool) -> Self {
        let wt = xavier_uniform(rng, out, inp);
        let g = weight_norm.then(|| {
            let norms: Vec<f64> = (0..out).map(|o| wt.row(o).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            store.push(format!("{name}.weight_g"), Tensor::from_vec(&[out], norms).unwrap(), group)
        });
        let w = store.push(format!("{name}.weight"), wt, group);
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[out]), group);
        Self { w, b, g }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let mut w = store.bind(g, self.w);
        if let Some(gi) = self.g {
            let gv = store.bind(g, gi);
            w = g.weight_norm(w, gv);
        }
        let b = store.bind(g, self.b);
        g.linear(x, w, Some(b))
    }

    pub fn indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.g.into_iter().collect();
        v.extend([self.w, self.b]);
        v
    }
}

/// Batch normalization with running statistics (momentum 0.1, eps 1e-5).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, group: ParamGroup) -> Self {
        let gamma = store.push(format!("{name}.weight"), Tensor::full(&[c], 1.0), group);
        let beta = store.push(format!("{name}.bias"), Tensor::zeros(&[c]), group);
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var, train: bool) -> (Var, Option<BatchMoments>) {
        let gm = store.bind(g, self.gamma);
        let bt = store.bind(g, self.beta);
        if train {
            let (y, m) = g.batch_norm_train(x, gm, bt, BN_EPS);
            (y, Some(m))
        } else {
            (g.batch_norm_eval(x, gm, bt, &self.running_mean, &self.running_var, BN_EPS), None)
        }
    }

    pub fn update(&mut self, m: &BatchMoments) {
        for (r, v) in self.running_mean.iter_mut().zip(&m.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(&m.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
