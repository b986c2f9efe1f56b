//! Named parameter storage, per-step graph binding and the optimizer.

use std::collections::BTreeMap;

use megl_autodiff::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SeedBank;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

/// All weights of a model, keyed by dotted name. Iteration order is the
/// lexicographic name order, which fixes every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with this standard deviation.
    Normal(f64),
    /// He initialization from the given fan-in.
    He(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter, drawing its values from the stream named after it.
    pub fn init(&mut self, seeds: &SeedBank, name: &str, shape: &[usize], init: Init, trainable: bool) {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => normal(seeds, name, n, std),
            Init::He(fan_in) => normal(seeds, name, n, (2.0 / fan_in as f64).sqrt()),
        };
        self.insert(name, shape, value, trainable);
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>, trainable: bool) {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "param {name} size");
        self.params.insert(
            name.to_string(),
            Param { shape: shape.to_vec(), value, trainable },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Creates graph leaves for one step. Trainable parameters track gradients.
    pub fn bind(&self) -> Bound {
        let mut tensors = BTreeMap::new();
        for (k, p) in &self.params {
            let t = if p.trainable {
                Tensor::param(p.value.clone(), &p.shape)
            } else {
                Tensor::new(p.value.clone(), &p.shape)
            };
            tensors.insert(k.clone(), t);
        }
        Bound { tensors }
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen(&self) -> Bound {
        let tensors = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::new(p.value.clone(), &p.shape)))
            .collect();
        Bound { tensors }
    }
}

fn normal(seeds: &SeedBank, name: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = seeds.rng(&format!("init:{name}"));
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// Parameters bound as graph tensors for a single forward/backward pass.
pub struct Bound {
    tensors: BTreeMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never registered"))
    }

    /// Trainable leaves in name order.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: BTreeMap::new() }
    }

    /// Applies one update. Parameters without a gradient (not reached by the
    /// objective this step) are left untouched, including by weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Option<Vec<f64>>)]) {
        for (name, grad) in grads {
            let Some(g) = grad else { continue };
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            assert!(p.trainable, "gradient for frozen parameter {name}");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            for i in 0..g.len() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p.value[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.value[i]);
            }
        }
    }
}

/// Uniform draw helper used by generators that need a plain `f64` stream.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_everything;

    #[test]
    fn init_is_seeded_per_name() {
        let mut a = ParamStore::new();
        a.init(&seed_everything(7), "w", &[3, 3], Init::Normal(1.0), true);
        a.init(&seed_everything(7), "v", &[2], Init::Normal(1.0), true);
        let mut b = ParamStore::new();
        b.init(&seed_everything(7), "v", &[2], Init::Normal(1.0), true);
        b.init(&seed_everything(7), "w", &[3, 3], Init::Normal(1.0), true);
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.init(&seed_everything(8), "w", &[3, 3], Init::Normal(1.0), true);
        assert_ne!(a.get("w"), c.get("w"));
    }

    #[test]
    fn adamw_skips_parameters_without_gradient() {
        let mut s = ParamStore::new();
        s.insert("a", &[1], vec![1.0], true);
        s.insert("b", &[1], vec![1.0], true);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut s, &[("a".into(), Some(vec![1.0])), ("b".into(), None)]);
        assert!(s.get("a").unwrap().value[0] < 1.0);
        assert_eq!(s.get("b").unwrap().value[0], 1.0);
    }
}
