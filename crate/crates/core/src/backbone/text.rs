//! Frozen per-token text encoder of the toy backbone.
//!
//! Each position is processed independently: token embedding plus a
//! learned position embedding, one residual MLP, then RMS normalisation.

use std::sync::Arc;

use compass_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CompassError, Result};
use crate::nn::{init_linear, linear, Binder};

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub context_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert("text.tok_emb", Tensor::randn(self.vocab_size, self.dim, 1.0, rng));
        store.insert("text.pos_emb", Tensor::randn(self.context_len, self.dim, 0.1, rng));
        init_linear(store, "text.mlp1", self.dim, 2 * self.dim, 2f64.sqrt(), rng);
        init_linear(store, "text.mlp2", 2 * self.dim, self.dim, 0.5, rng);
    }

    /// Token-embedding matrix (before positions are added).
    pub fn embed(&self, g: &mut Graph, b: &mut Binder, ids: &[u32]) -> Result<Var> {
        if ids.len() != self.context_len {
            return Err(CompassError::Prompt(format!(
                "sequence of {} ids for a context of {}",
                ids.len(),
                self.context_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(CompassError::Prompt(format!("token id {bad} outside the vocabulary")));
        }
        let table = b.get(g, "text.tok_emb");
        let index = Arc::new(ids.iter().map(|&i| Some(i as usize)).collect::<Vec<_>>());
        Ok(g.gather(table, index, 1))
    }

    pub fn encode(&self, g: &mut Graph, b: &mut Binder, emb: Var) -> Var {
        let pos = b.get(g, "text.pos_emb");
        let h = g.add(emb, pos);
        let n = g.rms_norm_rows(h, 1e-6);
        let m = linear(g, b, n, "text.mlp1");
        let m = g.silu(m);
        let m = linear(g, b, m, "text.mlp2");
        let h = g.add(h, m);
        g.rms_norm_rows(h, 1e-6)
    }
}
