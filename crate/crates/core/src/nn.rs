//! Named parameter storage, the per-forward graph context, and the basic
//! layers the network is assembled from.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{ConvGeom, Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running normalization statistics; updated by forward passes, not by the optimizer.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, insertion-ordered parameter table keyed by stable dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.trainable().map(|id| self.value(id).len()).sum()
    }

    /// Same names and values converted to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Graph<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub bn_momentum: T,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            bn_momentum: T::lit(0.1),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.value(id).clone();
        let v = match self.store.kind(id) {
            ParamKind::Trainable => self.tape.leaf(t),
            ParamKind::Buffer => self.tape.constant(t),
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every bound trainable parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let id = ParamId(i);
                if self.store.kind(id) != ParamKind::Trainable {
                    return None;
                }
                let v = (*v)?;
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape()));
                Some((id, g))
            })
            .collect()
    }

    fn update_running(&mut self, mean: ParamId, var: ParamId, batch_mean: &[T], batch_var: &[T]) {
        let m = self.bn_momentum;
        let keep = T::one() - m;
        for (r, &b) in self.store.value_mut(mean).data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.store.value_mut(var).data_mut().iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// He-normal draw with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            ParamKind::Trainable,
            he_normal(rng, [cout, cin, kernel.0, kernel.1]),
        );
        let bias = bias.then(|| {
            store.add(
                alloc::format!("{name}.bias"),
                ParamKind::Trainable,
                Tensor::zeros([1, cout, 1, 1]),
            )
        });
        Self { weight, bias, geom }
    }

    /// Shape-preserving `k x k` convolution with dilation `d`.
    pub fn same<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        d: usize,
        bias: bool,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, (k, k), ConvGeom::same(k, k, d, d), bias)
    }

    pub fn pointwise<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        Self::new(store, rng, name, cin, cout, (1, 1), ConvGeom::unit(), bias)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.geom)
    }

    /// Overwrites weight and bias with zeros.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let shape = [1, c, 1, 1];
        Self {
            gamma: store.add(alloc::format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(shape, T::one())),
            beta: store.add(alloc::format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(shape)),
            running_mean: store.add(alloc::format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(shape)),
            running_var: store.add(alloc::format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(shape, T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let eps = T::lit(BN_EPS);
        match g.mode {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm(x, gamma, beta, None, eps)?;
                if let Some(s) = stats {
                    g.update_running(self.running_mean, self.running_var, &s.mean, &s.var);
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = g.store.value(self.running_mean).data().to_vec();
                let var = g.store.value(self.running_var).data().to_vec();
                let (y, _) = g.tape.batch_norm(x, gamma, beta, Some((&mean, &var)), eps)?;
                Ok(y)
            }
        }
    }
}

/// Convolution, normalization, rectifier.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        Self {
            conv: Conv2d::same(store, rng, &alloc::format!("{name}.conv"), cin, cout, k, 1, false),
            bn: BatchNorm2d::new(store, &alloc::format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

/// Stack of `3x3` Conv-BN-ReLU layers (`Bconv_s`).
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<ConvBnRelu>,
}

impl ConvStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        depth: usize,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let c = if i == 0 { cin } else { cout };
                ConvBnRelu::new(store, rng, &alloc::format!("{name}.{i}"), c, cout, 3)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(g, x)?;
        }
        Ok(x)
    }
}
