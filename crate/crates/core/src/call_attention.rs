//! Coupled attention localization: additive spatial masks bound to the
//! compass and object tokens of each controlled object, applied inside
//! every cross-attention softmax.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use compass_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioning::PromptBinding;
use crate::error::{CompassError, Result};
use crate::geometry::{rasterize_mask, SpatialMask};

/// Finite stand-in for `-∞`: `exp` of it underflows to exactly zero once
/// the row maximum is subtracted, without producing NaN.
pub const MASK_NEG: f64 = f64::MIN;

pub type Grid = (usize, usize);

/// Per-resolution spatial masks keyed by token index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMaskSet {
    masks: BTreeMap<Grid, BTreeMap<usize, SpatialMask>>,
}

impl AttentionMaskSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.values().all(BTreeMap::is_empty)
    }

    pub fn resolutions(&self) -> impl Iterator<Item = Grid> + '_ {
        self.masks.keys().copied()
    }

    pub fn bound_tokens(&self) -> BTreeSet<usize> {
        self.masks.values().flat_map(|m| m.keys().copied()).collect()
    }

    pub fn mask(&self, grid: Grid, token: usize) -> Option<&SpatialMask> {
        self.masks.get(&grid)?.get(&token)
    }

    pub fn insert(&mut self, grid: Grid, token: usize, mask: SpatialMask) {
        self.masks.entry(grid).or_default().insert(token, mask);
    }

    /// `(cells, n_tokens)` additive offsets for one resolution, or `None`
    /// when no token is bound (the unmasked path is then taken verbatim).
    pub fn additive(&self, grid: Grid, n_tokens: usize) -> Result<Option<Tensor>> {
        if self.is_empty() {
            return Ok(None);
        }
        let per_token = self.masks.get(&grid).ok_or_else(|| {
            CompassError::Mask(format!("no mask for attention resolution {}x{}", grid.0, grid.1))
        })?;
        let cells = grid.0 * grid.1;
        let mut out = Tensor::zeros(cells, n_tokens);
        for (&tok, m) in per_token {
            if tok >= n_tokens {
                return Err(CompassError::Mask(format!(
                    "bound token {tok} outside a sequence of {n_tokens}"
                )));
            }
            for cell in 0..cells {
                if !m.is_open(cell) {
                    out.set(cell, tok, MASK_NEG);
                }
            }
        }
        Ok(Some(out))
    }
}

/// Masks for every bound token of `binding` at every grid in `resolutions`.
pub fn build_mask_set(
    binding: &PromptBinding,
    resolutions: &[Grid],
    image_w: f64,
    image_h: f64,
) -> Result<AttentionMaskSet> {
    if resolutions.is_empty() {
        return Err(CompassError::Mask("no attention resolutions given".into()));
    }
    let mut set = AttentionMaskSet::empty();
    for entry in &binding.entries {
        for &(gw, gh) in resolutions {
            let m = rasterize_mask(&entry.loose_box, gw, gh, image_w, image_h)?;
            for tok in entry.bound_tokens() {
                set.insert((gw, gh), tok, m.clone());
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// `(cells, tokens)` post-softmax weights.
    pub weights: Tensor,
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<AttentionOutput> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = q.matmul_t(k).scale(scale);
    if !logits.is_finite() {
        return Err(CompassError::Numeric("non-finite attention logits".into()));
    }
    let logits = match mask {
        Some(m) => logits.add(m),
        None => logits,
    };
    let weights = logits.softmax_rows();
    let output = weights.matmul(v);
    Ok(AttentionOutput { output, weights })
}

/// Plain scaled dot-product attention.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<AttentionOutput> {
    attend(q, k, v, None)
}

/// Cross-attention with the mask set's offsets for `grid` added to the
/// logits of bound tokens. `q` holds one row per grid cell, `k`/`v` one
/// row per token.
pub fn masked_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask_set: &AttentionMaskSet,
    grid: Grid,
) -> Result<AttentionOutput> {
    if q.rows() != grid.0 * grid.1 {
        return Err(CompassError::Mask(format!(
            "{} queries for a {}x{} grid",
            q.rows(),
            grid.0,
            grid.1
        )));
    }
    let mask = mask_set.additive(grid, k.rows())?;
    attend(q, k, v, mask.as_ref())
}

/// Graph form used inside the backbone: returns `(output, weights)` nodes.
pub fn attend_graph(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> (Var, Var) {
    let scale = 1.0 / (g.shape(q).1 as f64).sqrt();
    let logits = g.matmul_t(q, k);
    let logits = g.scale(logits, scale);
    let logits = match mask {
        Some(m) => g.add_const(logits, m),
        None => logits,
    };
    let weights = g.softmax_rows(logits);
    (g.matmul(weights, v), weights)
}

/// A cross-attention site of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub name: String,
    pub grid: Grid,
}

/// Backbones that can enumerate their cross-attention sites.
pub trait AttentionSites {
    fn cross_attention_sites(&self) -> Vec<SiteInfo>;
    /// Number of key tokens each site attends over.
    fn context_len(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct CrossAttentionHook {
    pub layer: String,
    pub resolution: Grid,
    pub enabled: bool,
    mask: Option<Arc<Tensor>>,
}

/// One hook per cross-attention site, carrying that site's precomputed
/// additive mask.
#[derive(Clone, Debug)]
pub struct HookRegistry {
    hooks: Vec<CrossAttentionHook>,
}

/// Builds a hook for every site of `backbone`. With `enabled == false`, or
/// an empty mask set, every site behaves exactly like the unhooked backbone.
pub fn attach_hooks(
    backbone: &dyn AttentionSites,
    mask_set: &AttentionMaskSet,
    enabled: bool,
) -> Result<HookRegistry> {
    let sites = backbone.cross_attention_sites();
    if sites.is_empty() {
        return Err(CompassError::Capability(
            "backbone exposes no cross-attention sites".into(),
        ));
    }
    let n = backbone.context_len();
    let hooks = sites
        .into_iter()
        .map(|s| {
            Ok(CrossAttentionHook {
                mask: mask_set.additive(s.grid, n)?.map(Arc::new),
                layer: s.name,
                resolution: s.grid,
                enabled,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HookRegistry { hooks })
}

impl HookRegistry {
    pub fn hooks(&self) -> &[CrossAttentionHook] {
        &self.hooks
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.hooks.iter_mut().for_each(|h| h.enabled = enabled);
    }

    /// The additive mask to apply at `layer`, if any.
    pub fn mask_for(&self, layer: &str) -> Option<&Tensor> {
        self.hooks
            .iter()
            .find(|h| h.layer == layer && h.enabled)
            .and_then(|h| h.mask.as_deref())
    }

    /// Removes the hooks; the backbone then runs unmodified.
    pub fn detach(self) {}
}

/// Collects attention weights of selected tokens while the backbone runs.
#[derive(Clone, Debug, Default)]
pub struct AttentionProbe {
    tokens: Vec<usize>,
    step: usize,
    timestep: f64,
    records: Vec<ProbeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: String,
    pub grid: Grid,
    pub step: usize,
    pub timestep: f64,
    /// Per probed token, its weight at every cell (row-major).
    pub maps: Vec<Vec<f64>>,
}

impl AttentionProbe {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn set_step(&mut self, step: usize, timestep: f64) {
        self.step = step;
        self.timestep = timestep;
    }

    pub fn record(&mut self, layer: &str, grid: Grid, weights: &Tensor) {
        let maps = self
            .tokens
            .iter()
            .map(|&t| (0..weights.rows()).map(|c| weights.get(c, t)).collect())
            .collect();
        self.records.push(ProbeRecord {
            layer: layer.to_string(),
            grid,
            step: self.step,
            timestep: self.timestep,
            maps,
        });
    }

    pub fn records(&self) -> &[ProbeRecord] {
        &self.records
    }

    pub fn into_dump(self, labels: Vec<String>) -> AttentionDump {
        AttentionDump {
            schema: ATTENTION_DUMP_SCHEMA.into(),
            tokens: self
                .tokens
                .iter()
                .zip(labels)
                .map(|(&index, label)| DumpToken { index, label })
                .collect(),
            records: self
                .records
                .into_iter()
                .map(|r| DumpRecord {
                    layer: r.layer,
                    grid: [r.grid.0, r.grid.1],
                    step: r.step,
                    timestep: r.timestep,
                    maps: r
                        .maps
                        .into_iter()
                        .map(|m| m.chunks(r.grid.0).map(<[f64]>::to_vec).collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

pub const ATTENTION_DUMP_SCHEMA: &str = "compass.attention-dump/1";

/// Debug dump: per layer and denoising step, one grayscale grid (rows of
/// cells) per probed token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub schema: String,
    pub tokens: Vec<DumpToken>,
    pub records: Vec<DumpRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpToken {
    pub index: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub layer: String,
    pub grid: [usize; 2],
    pub step: usize,
    pub timestep: f64,
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl AttentionDump {
    /// Mean map per token over the selected records (e.g. one layer, all steps).
    pub fn average(&self, select: impl Fn(&DumpRecord) -> bool) -> Option<Vec<Vec<Vec<f64>>>> {
        let chosen: Vec<&DumpRecord> = self.records.iter().filter(|r| select(r)).collect();
        let first = chosen.first()?;
        if chosen.iter().any(|r| r.grid != first.grid) {
            return None;
        }
        let mut acc = first.maps.clone();
        for r in &chosen[1..] {
            for (a, m) in acc.iter_mut().zip(&r.maps) {
                for (ar, mr) in a.iter_mut().zip(m) {
                    for (x, y) in ar.iter_mut().zip(mr) {
                        *x += y;
                    }
                }
            }
        }
        let n = chosen.len() as f64;
        acc.iter_mut().flatten().flatten().for_each(|x| *x /= n);
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{assemble_prompt, PromptObject};
    use crate::geometry::{Box2D, Orientation};
    use crate::tokenizer::Tokenizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_cell_worked_example() {
        let q = Tensor::zeros(2, 4);
        let k = Tensor::zeros(2, 4);
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0]]);
        let mut set = AttentionMaskSet::empty();
        // token 0 blocked at the second cell of a 2x1 grid
        set.insert((2, 1), 0, SpatialMask::from_open(2, 1, vec![true, false]).unwrap());
        let out = masked_cross_attention(&q, &k, &v, &set, (2, 1)).unwrap();
        assert_eq!(out.weights.row(0), &[0.5, 0.5]);
        assert_eq!(out.weights.row(1), &[0.0, 1.0]);
        assert_eq!(out.output.row(1), &[2.0]);
    }

    #[test]
    fn empty_set_is_bitwise_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(16, 8, 1.0, &mut rng);
        let k = Tensor::randn(6, 8, 1.0, &mut rng);
        let v = Tensor::randn(6, 5, 1.0, &mut rng);
        let a = masked_cross_attention(&q, &k, &v, &AttentionMaskSet::empty(), (4, 4)).unwrap();
        let b = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_for_missing_resolution_and_nan() {
        let mut set = AttentionMaskSet::empty();
        set.insert((2, 2), 0, SpatialMask::from_open(2, 2, vec![true; 4]).unwrap());
        let q = Tensor::zeros(16, 2);
        let k = Tensor::zeros(3, 2);
        assert!(matches!(
            masked_cross_attention(&q, &k, &k, &set, (4, 4)),
            Err(CompassError::Mask(_))
        ));
        let mut bad = Tensor::zeros(4, 2);
        bad.set(0, 0, f64::NAN);
        assert!(matches!(
            masked_cross_attention(&bad, &k, &k, &set, (2, 2)),
            Err(CompassError::Numeric(_))
        ));
    }

    #[test]
    fn graph_form_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::randn(4, 3, 1.0, &mut rng);
        let k = Tensor::randn(5, 3, 1.0, &mut rng);
        let v = Tensor::randn(5, 2, 1.0, &mut rng);
        let mut set = AttentionMaskSet::empty();
        set.insert((2, 2), 1, SpatialMask::from_open(2, 2, vec![true, false, false, true]).unwrap());
        let plain = masked_cross_attention(&q, &k, &v, &set, (2, 2)).unwrap();
        let mask = set.additive((2, 2), 5).unwrap().unwrap();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let (o, w) = attend_graph(&mut g, qv, kv, vv, Some(&mask));
        assert_eq!(g.value(o), &plain.output);
        assert_eq!(g.value(w), &plain.weights);
    }

    fn binding(boxes: &[[f64; 4]]) -> PromptBinding {
        let names = ["horse", "sedan"];
        let objects: Vec<PromptObject> = boxes
            .iter()
            .zip(names)
            .map(|(b, n)| PromptObject {
                name: n.into(),
                orientation: Orientation::yaw(0.0).unwrap(),
                tight_box: Box2D::try_from(*b).unwrap(),
            })
            .collect();
        let template = match boxes.len() {
            0 => "a photo",
            1 => "a photo of a {horse}",
            _ => "a photo of a {horse} and a {sedan}",
        };
        assemble_prompt(&Tokenizer::default(), template, &objects, 1.2, 64.0, 64.0).unwrap()
    }

    #[test]
    fn mask_set_examples() {
        let res = [(8, 8), (4, 4)];
        assert!(build_mask_set(&binding(&[]), &res, 64.0, 64.0).unwrap().is_empty());
        let full = build_mask_set(&binding(&[[0.0, 0.0, 64.0, 64.0]]), &res, 64.0, 64.0).unwrap();
        for r in res {
            for t in full.bound_tokens() {
                assert_eq!(full.mask(r, t).unwrap().open_cells().count(), r.0 * r.1);
            }
        }
        let two = binding(&[[2.0, 2.0, 20.0, 20.0], [36.0, 36.0, 60.0, 60.0]]);
        let set = build_mask_set(&two, &res, 64.0, 64.0).unwrap();
        assert_eq!(set.bound_tokens().len(), 4);
        for r in res {
            let a = set.mask(r, two.entries[0].compass_token_index).unwrap();
            let b = set.mask(r, two.entries[1].compass_token_index).unwrap();
            for c in 0..a.cells() {
                assert!(!(a.is_open(c) && b.is_open(c)));
            }
        }
        assert!(build_mask_set(&two, &[], 64.0, 64.0).is_err());
    }

    struct NoSites;
    impl AttentionSites for NoSites {
        fn cross_attention_sites(&self) -> Vec<SiteInfo> {
            Vec::new()
        }
        fn context_len(&self) -> usize {
            4
        }
    }

    #[test]
    fn attach_without_sites_is_a_capability_error() {
        assert!(matches!(
            attach_hooks(&NoSites, &AttentionMaskSet::empty(), true),
            Err(CompassError::Capability(_))
        ));
    }

    #[test]
    fn dump_average_over_steps() {
        let mut p = AttentionProbe::new(vec![1]);
        let mut w = Tensor::zeros(4, 3);
        w.set(0, 1, 1.0);
        p.set_step(0, 999.0);
        p.record("mid", (2, 2), &w);
        w.set(0, 1, 0.0);
        w.set(3, 1, 1.0);
        p.set_step(1, 500.0);
        p.record("mid", (2, 2), &w);
        let dump = p.into_dump(vec!["<compass_0>".into()]);
        let avg = dump.average(|r| r.layer == "mid").unwrap();
        assert_eq!(avg[0], vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
        let json = serde_json::to_string(&dump).unwrap();
        assert!(json.contains(ATTENTION_DUMP_SCHEMA));
    }
}
