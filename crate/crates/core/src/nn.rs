//! Small building blocks shared by the text encoder, the compass encoder,
//! the denoiser and the regressor.

use std::collections::HashMap;

use compass_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

/// Resolves parameter names to graph nodes. Stores are searched in the
/// order they were added; parameters from trainable stores become graph
/// parameters, the rest constants.
#[derive(Default)]
pub struct Binder<'a> {
    stores: Vec<(&'a ParamStore, bool)>,
    cache: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frozen(mut self, store: &'a ParamStore) -> Self {
        self.stores.push((store, false));
        self
    }

    pub fn trainable(mut self, store: &'a ParamStore) -> Self {
        self.stores.push((store, true));
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.stores.iter().any(|(s, _)| s.contains(name))
    }

    /// Panics on unknown names: model code only asks for parameters it created.
    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.cache.get(name) {
            return v;
        }
        let (store, trainable) = self
            .stores
            .iter()
            .find(|(s, _)| s.contains(name))
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"));
        let t = store.expect(name);
        let v = if *trainable {
            g.param(name, t)
        } else {
            g.constant_arc(t)
        };
        self.cache.insert(name.to_string(), v);
        v
    }
}

/// Inserts `{prefix}.w` (`fan_in x fan_out`) and a zero `{prefix}.b`.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(fan_in, fan_out, std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
}

/// `x · W + b`
pub fn linear(g: &mut Graph, b: &mut Binder, x: Var, prefix: &str) -> Var {
    let w = b.get(g, &format!("{prefix}.w"));
    let bias = b.get(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

/// `x · W` without bias.
pub fn project(g: &mut Graph, b: &mut Binder, x: Var, name: &str) -> Var {
    let w = b.get(g, name);
    g.matmul(x, w)
}

/// Sinusoidal features of a scalar, `dim` wide (half sines, half cosines).
pub fn sinusoidal(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}
