//! Layers over the autodiff graph and the forward context that binds
//! stored parameters onto a fresh tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode, RunningStats, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Batch-norm running statistics keyed by layer name.
pub type StatsMap = BTreeMap<String, RunningStats>;

enum Stats<'a> {
    Train(&'a mut StatsMap),
    Eval(&'a StatsMap),
}

/// One forward pass: a tape plus the parameter bindings made on it.
///
/// Parameters are bound lazily, once per tape. Frozen parameters enter as
/// constants, so no gradient is reported for them.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    frozen: BTreeSet<ParamId>,
    freeze_all: bool,
    stats: Stats<'a>,
}

impl<'a> Forward<'a> {
    /// Training pass: batch norm uses batch statistics and updates `stats`.
    pub fn train(store: &'a ParamStore, stats: &'a mut StatsMap) -> Self {
        Self::with(store, Stats::Train(stats), false)
    }

    /// Inference pass: batch norm uses running statistics, nothing is
    /// differentiable.
    pub fn eval(store: &'a ParamStore, stats: &'a StatsMap) -> Self {
        Self::with(store, Stats::Eval(stats), true)
    }

    fn with(store: &'a ParamStore, stats: Stats<'a>, freeze_all: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            frozen: BTreeSet::new(),
            freeze_all,
            stats,
        }
    }

    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn is_training(&self) -> bool {
        matches!(self.stats, Stats::Train(_))
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let value = self.store.get(id).clone();
        let v = if self.freeze_all || self.frozen.contains(&id) {
            self.graph.input(value)?
        } else {
            self.graph.param(id, value)?
        };
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.graph.input(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    fn batch_norm(&mut self, layer: &str, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let missing = || Error::InvalidArgument(format!("no running statistics for {layer}"));
        match &mut self.stats {
            Stats::Train(map) => {
                let s = map.get_mut(layer).ok_or_else(missing)?;
                self.graph.batch_norm2d(x, gamma, beta, NormMode::Train(s))
            }
            Stats::Eval(map) => {
                let s = map.get(layer).ok_or_else(missing)?;
                self.graph.batch_norm2d(x, gamma, beta, NormMode::Eval(s))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], std, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = self.bias.map(|b| f.param(b)).transpose()?;
        f.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, stats: &mut StatsMap, name: &str, channels: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        stats.insert(name.to_string(), RunningStats::new(channels));
        Self {
            name: name.to_string(),
            gamma,
            beta,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.param(self.gamma)?;
        let b = f.param(self.beta)?;
        f.batch_norm(&self.name, x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights from `Normal(0, 1/fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fin: usize, fout: usize) -> Self {
        let normal = Normal::new(0.0, (1.0 / fin as f64).sqrt()).expect("positive std");
        let w = Tensor::from_fn(&[fout, fin], |_| normal.sample(rng));
        Self {
            weight: store.insert(format!("{name}.weight"), w),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = f.param(self.bias)?;
        f.graph.linear(x, w, Some(b))
    }
}

/// `(conv 3x3 -> batch norm -> ReLU) x 2`; convolutions carry no bias.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stats: &mut StatsMap,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1, false),
            bn1: BatchNorm2d::new(store, stats, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
            bn2: BatchNorm2d::new(store, stats, &format!("{name}.bn2"), cout),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv1.params(), self.bn1.params(), self.conv2.params(), self.bn2.params()].concat()
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.graph.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        f.graph.relu(h)
    }
}
