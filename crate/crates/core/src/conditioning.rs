//! Compass encoder and prompt assembly.
//!
//! A compass token is a vector in the text encoder's input-embedding space.
//! [`assemble_prompt`] reserves one placeholder id right before each
//! object's first word; [`condition_sequence`] swaps the placeholder rows
//! of the embedding matrix for the encoder outputs before the text encoder
//! runs.

use compass_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TextEncoder;
use crate::error::{CompassError, Result};
use crate::geometry::{loose_box, Box2D, LooseBox, Orientation};
use crate::nn::{init_linear, linear, Binder};
use crate::tokenizer::{Tokenizer, COMPASS_SLOTS};

pub const COMPASS_HIDDEN: [usize; 2] = [256, 256];
const LAYERS: [&str; 3] = ["compass.l1", "compass.l2", "compass.l3"];

/// `(sin θᵢ, cos θᵢ)` for every angle, concatenated.
pub fn featurize(orientation: &Orientation) -> Vec<f64> {
    orientation
        .angles()
        .iter()
        .flat_map(|a| [a.sin(), a.cos()])
        .collect()
}

/// The compass MLP on whatever `compass.*` weights `b` resolves.
pub fn compass_forward(g: &mut Graph, b: &mut Binder, features: Var) -> Var {
    let h = linear(g, b, features, LAYERS[0]);
    let h = g.relu(h);
    let h = linear(g, b, h, LAYERS[1]);
    let h = g.relu(h);
    linear(g, b, h, LAYERS[2])
}

/// Weights of the three-layer compass MLP, stored under `compass.l{1,2,3}.{w,b}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompassEncoderParams {
    store: ParamStore,
    n_angles: usize,
    out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompassToken {
    pub embedding: Vec<f64>,
    pub source_orientation: Orientation,
}

impl CompassEncoderParams {
    pub fn new(n_angles: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = [2 * n_angles, COMPASS_HIDDEN[0], COMPASS_HIDDEN[1], out_dim];
        for (i, prefix) in LAYERS.iter().enumerate() {
            // He init for the ReLU layers, a small output layer so fresh
            // tokens start close to the origin of the embedding space.
            let gain = if i < 2 { 2f64.sqrt() } else { 0.1 };
            init_linear(&mut store, prefix, dims[i], dims[i + 1], gain, &mut rng);
        }
        Self {
            store,
            n_angles,
            out_dim,
        }
    }

    /// Validates layer shapes and chaining.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mut dims = Vec::new();
        for prefix in LAYERS {
            let (w, b) = match (
                store.get(&format!("{prefix}.w")),
                store.get(&format!("{prefix}.b")),
            ) {
                (Some(w), Some(b)) => (w, b),
                _ => {
                    return Err(CompassError::Config(format!(
                        "compass encoder weights lack layer {prefix}"
                    )))
                }
            };
            if b.shape() != (1, w.cols()) {
                return Err(CompassError::Config(format!("bias shape mismatch in {prefix}")));
            }
            if let Some(&prev) = dims.last() {
                if prev != w.rows() {
                    return Err(CompassError::Config(format!(
                        "layer {prefix} expects {} inputs, previous layer gives {prev}",
                        w.rows()
                    )));
                }
            } else {
                dims.push(w.rows());
            }
            dims.push(w.cols());
        }
        if dims[0] % 2 != 0 || !(dims[0] == 2 || dims[0] == 6) {
            return Err(CompassError::Config(format!(
                "compass encoder input width {} is not 2 or 6",
                dims[0]
            )));
        }
        if store.len() != 2 * LAYERS.len() {
            return Err(CompassError::Config("unexpected tensors in compass encoder weights".into()));
        }
        Ok(Self {
            n_angles: dims[0] / 2,
            out_dim: dims[3],
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn numel(&self) -> usize {
        self.store.numel()
    }

    /// Graph forward over a `(n, 2·angles)` feature matrix.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, features: Var) -> Var {
        compass_forward(g, b, features)
    }

    /// Feature matrix for a list of orientations.
    pub fn features(&self, orientations: &[&Orientation]) -> Result<Tensor> {
        let width = 2 * self.n_angles;
        let mut data = Vec::with_capacity(orientations.len() * width);
        for o in orientations {
            if o.len() != self.n_angles {
                return Err(CompassError::Config(format!(
                    "encoder expects {} angle(s), orientation has {}",
                    self.n_angles,
                    o.len()
                )));
            }
            data.extend(featurize(o));
        }
        Ok(Tensor::from_vec(orientations.len(), width, data))
    }
}

/// Deterministic forward pass of the compass encoder.
pub fn encode_compass(params: &CompassEncoderParams, orientation: &Orientation) -> Result<CompassToken> {
    let feats = params.features(&[orientation])?;
    let mut g = Graph::new();
    let mut b = Binder::new().frozen(params.store());
    let x = g.constant(feats);
    let y = params.forward(&mut g, &mut b, x);
    let embedding = g.value(y).data().to_vec();
    if !embedding.iter().all(|v| v.is_finite()) {
        return Err(CompassError::Numeric("compass embedding is not finite".into()));
    }
    Ok(CompassToken {
        embedding,
        source_orientation: orientation.clone(),
    })
}

/// One controlled object as handed to prompt assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptObject {
    pub name: String,
    pub orientation: Orientation,
    pub tight_box: Box2D,
}

/// Half-open token index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingEntry {
    pub object_name: String,
    /// Position of this object in the caller's object list.
    pub object_index: usize,
    pub compass_token_index: usize,
    pub object_token_span: Span,
    pub loose_box: LooseBox,
}

impl BindingEntry {
    /// Compass index followed by every object sub-token index.
    pub fn bound_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.compass_token_index).chain(self.object_token_span.indices())
    }
}

/// Token sequence plus per-object token/box bindings. Entries are ordered
/// by their position in the prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBinding {
    /// Framed and padded ids (`<bos> … <eos> <pad>…`).
    pub token_ids: Vec<u32>,
    /// Prompt text with the object names filled in.
    pub text: String,
    pub entries: Vec<BindingEntry>,
}

impl PromptBinding {
    /// Number of ids up to and including `<eos>`.
    pub fn used_len(&self) -> usize {
        self.token_ids
            .iter()
            .position(|&t| t == crate::tokenizer::EOS)
            .map_or(self.token_ids.len(), |p| p + 1)
    }

    /// Checks the structural invariants: compass index right before each
    /// span, disjoint increasing spans, indices inside the sequence.
    pub fn validate(&self) -> Result<()> {
        let mut last_end = 0;
        for e in &self.entries {
            if e.object_token_span.start == 0 || e.compass_token_index + 1 != e.object_token_span.start {
                return Err(CompassError::Binding(format!(
                    "compass token of `{}` does not precede its object span",
                    e.object_name
                )));
            }
            if e.object_token_span.end <= e.object_token_span.start {
                return Err(CompassError::Binding(format!("empty span for `{}`", e.object_name)));
            }
            if e.compass_token_index < last_end {
                return Err(CompassError::Binding("object spans overlap or are out of order".into()));
            }
            if e.object_token_span.end > self.token_ids.len() {
                return Err(CompassError::Binding(format!(
                    "span of `{}` exceeds the sequence",
                    e.object_name
                )));
            }
            last_end = e.object_token_span.end;
        }
        Ok(())
    }
}

enum Piece {
    Text(String),
    Slot(String),
}

fn parse_template(template: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| CompassError::Prompt(format!("unclosed slot in template `{template}`")))?;
        pieces.push(Piece::Text(rest[..open].to_string()));
        pieces.push(Piece::Slot(rest[open + 1..close].trim().to_string()));
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(CompassError::Prompt(format!("stray `}}` in template `{template}`")));
    }
    pieces.push(Piece::Text(rest.to_string()));
    Ok(pieces)
}

/// Fills `{name}` slots in `template`, puts a compass placeholder before
/// each controlled object's first word and records the bindings.
///
/// Each object takes the first unused slot with its (case-insensitive)
/// name; slots without an object are plain text.
pub fn assemble_prompt(
    tokenizer: &Tokenizer,
    template: &str,
    objects: &[PromptObject],
    padding: f64,
    image_w: f64,
    image_h: f64,
) -> Result<PromptBinding> {
    if objects.len() > COMPASS_SLOTS {
        return Err(CompassError::Prompt(format!(
            "at most {COMPASS_SLOTS} controlled objects per prompt, got {}",
            objects.len()
        )));
    }
    let pieces = parse_template(template)?;
    let mut taken = vec![false; objects.len()];
    let mut body: Vec<u32> = Vec::new();
    let mut text = String::new();
    let mut placed: Vec<(usize, Span)> = Vec::new();
    for piece in &pieces {
        match piece {
            Piece::Text(t) => {
                body.extend(tokenizer.tokenize(t));
                text.push_str(t);
            }
            Piece::Slot(name) => {
                let words = tokenizer.tokenize(name);
                if words.is_empty() {
                    return Err(CompassError::Prompt(format!("slot `{{{name}}}` has no words")));
                }
                text.push_str(name);
                let owner = objects
                    .iter()
                    .enumerate()
                    .position(|(i, o)| !taken[i] && o.name.trim().eq_ignore_ascii_case(name));
                if let Some(i) = owner {
                    taken[i] = true;
                    body.push(Tokenizer::compass_id(placed.len()));
                    // +1 for <bos>
                    let start = body.len() + 1;
                    body.extend(&words);
                    placed.push((
                        i,
                        Span {
                            start,
                            end: start + words.len(),
                        },
                    ));
                } else {
                    body.extend(&words);
                }
            }
        }
    }
    if let Some(i) = taken.iter().position(|t| !t) {
        return Err(CompassError::Binding(format!(
            "object `{}` has no slot in template `{template}`",
            objects[i].name
        )));
    }
    let token_ids = tokenizer.frame(&body)?;
    let entries = placed
        .into_iter()
        .map(|(i, span)| {
            let o = &objects[i];
            Ok(BindingEntry {
                object_name: o.name.clone(),
                object_index: i,
                compass_token_index: span.start - 1,
                object_token_span: span,
                loose_box: loose_box(&o.tight_box, padding, image_w, image_h)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let binding = PromptBinding {
        token_ids,
        text,
        entries,
    };
    binding.validate()?;
    Ok(binding)
}

/// Compass tokens in binding-entry order.
pub fn compass_tokens_for(
    params: &CompassEncoderParams,
    binding: &PromptBinding,
    objects: &[PromptObject],
) -> Result<Vec<CompassToken>> {
    binding
        .entries
        .iter()
        .map(|e| encode_compass(params, &objects[e.object_index].orientation))
        .collect()
}

fn check_tokens(binding: &PromptBinding, n_tokens: usize) -> Result<()> {
    if n_tokens != binding.entries.len() {
        return Err(CompassError::Binding(format!(
            "{} compass tokens for {} bound objects",
            n_tokens,
            binding.entries.len()
        )));
    }
    if let Some(e) = binding
        .entries
        .iter()
        .find(|e| e.compass_token_index >= binding.token_ids.len())
    {
        return Err(CompassError::Binding(format!(
            "compass index {} outside a sequence of {}",
            e.compass_token_index,
            binding.token_ids.len()
        )));
    }
    Ok(())
}

/// Graph form of the substitution: plain embedding lookup with the compass
/// rows replaced by `compass` (one row per binding entry).
pub fn substitute_compass(
    g: &mut Graph,
    b: &mut Binder,
    text: &TextEncoder,
    binding: &PromptBinding,
    compass: Option<Var>,
) -> Result<Var> {
    let emb = text.embed(g, b, &binding.token_ids)?;
    match compass {
        None => {
            check_tokens(binding, 0)?;
            Ok(emb)
        }
        Some(c) => {
            check_tokens(binding, g.shape(c).0)?;
            let rows: Vec<usize> = binding.entries.iter().map(|e| e.compass_token_index).collect();
            Ok(g.replace_rows(emb, &rows, c))
        }
    }
}

fn compass_matrix(tokens: &[CompassToken]) -> Option<Tensor> {
    let first = tokens.first()?;
    let rows: Vec<Vec<f64>> = tokens.iter().map(|t| t.embedding.clone()).collect();
    debug_assert!(rows.iter().all(|r| r.len() == first.embedding.len()));
    Some(Tensor::from_rows(&rows))
}

/// Pre-encoder embedding matrix with compass rows substituted.
pub fn pre_encoder_embeddings(
    binding: &PromptBinding,
    tokens: &[CompassToken],
    text: &TextEncoder,
    text_params: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new().frozen(text_params);
    let c = compass_matrix(tokens).map(|t| g.constant(t));
    let v = substitute_compass(&mut g, &mut b, text, binding, c)?;
    Ok(g.value(v).clone())
}

/// Text-encoder output used for cross-attention.
pub fn condition_sequence(
    binding: &PromptBinding,
    tokens: &[CompassToken],
    text: &TextEncoder,
    text_params: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new().frozen(text_params);
    let c = compass_matrix(tokens).map(|t| g.constant(t));
    let emb = substitute_compass(&mut g, &mut b, text, binding, c)?;
    let out = text.encode(&mut g, &mut b, emb);
    Ok(g.value(out).clone())
}

/// Subject personalization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationConfig {
    /// Placeholder word for the subject, e.g. `sks`.
    pub subject_token: String,
    /// Class noun the subject belongs to, e.g. `car`.
    #[serde(default = "default_class")]
    pub class_name: String,
    #[serde(default = "default_rank")]
    pub adapter_rank: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub images: Vec<std::path::PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_class() -> String {
    "car".into()
}
fn default_rank() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_steps() -> usize {
    1000
}

/// Documented usage template for a personalized subject.
pub const PERSONALIZED_TEMPLATE: &str = "A photo of a c(θ) û car on the beach";

impl PersonalizationConfig {
    pub fn new(subject_token: &str, class_name: &str) -> Self {
        Self {
            subject_token: subject_token.into(),
            class_name: class_name.into(),
            adapter_rank: default_rank(),
            learning_rate: default_lr(),
            steps: default_steps(),
            images: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        let words = Tokenizer::words(&self.subject_token);
        if words.len() != 1 || words[0] != self.subject_token.to_lowercase() {
            return Err(CompassError::Config(format!(
                "subject token `{}` must be a single alphanumeric word",
                self.subject_token
            )));
        }
        if tokenizer.is_known_word(&self.subject_token) {
            return Err(CompassError::Config(format!(
                "subject token `{}` is an ordinary vocabulary word",
                self.subject_token
            )));
        }
        if self.adapter_rank == 0 || !(self.learning_rate > 0.0) {
            return Err(CompassError::Config("adapter rank and learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Template for generation with this subject, slot `{û class}`.
    pub fn prompt_template(&self, scene: &str) -> String {
        format!("A photo of a {{{} {}}} {scene}", self.subject_token, self.class_name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn obj(name: &str, theta: f64, b: [f64; 4]) -> PromptObject {
        PromptObject {
            name: name.into(),
            orientation: Orientation::yaw(theta).unwrap(),
            tight_box: Box2D::try_from(b).unwrap(),
        }
    }

    #[test]
    fn featurize_examples() {
        let f = featurize(&Orientation::yaw(0.0).unwrap());
        assert_eq!(f, vec![0.0, 1.0]);
        let f = featurize(&Orientation::yaw(PI / 2.0).unwrap());
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15);
        let a = featurize(&Orientation::yaw(1.3).unwrap());
        let b = featurize(&Orientation::yaw(1.3 + TAU).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        assert_eq!(featurize(&Orientation::new(vec![0.1, 0.2, 0.3]).unwrap()).len(), 6);
    }

    #[test]
    fn encoder_determinism_and_periodicity() {
        let p = CompassEncoderParams::new(1, 32, 3);
        let a = encode_compass(&p, &Orientation::yaw(0.0).unwrap()).unwrap();
        let b = encode_compass(&p, &Orientation::yaw(0.0).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embedding.len(), 32);
        let c = encode_compass(&p, &Orientation::yaw(2.0).unwrap()).unwrap();
        let d = encode_compass(&p, &Orientation::yaw(2.0 + TAU).unwrap()).unwrap();
        let diff = c.embedding.iter().zip(&d.embedding).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
        let three = Orientation::new(vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(encode_compass(&p, &three), Err(CompassError::Config(_))));
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let mut p = CompassEncoderParams::new(1, 8, 0);
        let names: Vec<String> = p.store().names().map(String::from).collect();
        for n in names {
            let t = p.store_mut().get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        p.store_mut().insert("compass.l3.b", Tensor::row_vector(bias.clone()));
        let tok = encode_compass(&p, &Orientation::yaw(1.0).unwrap()).unwrap();
        assert_eq!(tok.embedding, bias);
    }

    #[test]
    fn encoder_store_round_trip_validation() {
        let p = CompassEncoderParams::new(3, 16, 1);
        let back = CompassEncoderParams::from_store(p.store().clone()).unwrap();
        assert_eq!(back.n_angles(), 3);
        assert_eq!(back.out_dim(), 16);
        let mut broken = p.store().clone();
        broken.insert("compass.l2.w", Tensor::zeros(7, 256));
        assert!(CompassEncoderParams::from_store(broken).is_err());
    }

    #[test]
    fn single_object_grows_sequence_by_one() {
        let t = Tokenizer::default();
        let plain = t.tokenize("A photo of a sedan");
        let b = assemble_prompt(&t, "A photo of a {sedan}", &[obj("sedan", 0.0, [100.0, 100.0, 160.0, 200.0])], 1.2, 512.0, 512.0)
            .unwrap();
        assert_eq!(b.used_len(), plain.len() + 2 + 1);
        let e = &b.entries[0];
        assert_eq!(e.compass_token_index, e.object_token_span.start - 1);
        assert_eq!(b.token_ids[e.compass_token_index], Tokenizer::compass_id(0));
        assert_eq!(b.text, "A photo of a sedan");
        assert_eq!(e.loose_box.side, 120.0);
    }

    #[test]
    fn two_objects_have_increasing_spans() {
        let t = Tokenizer::default();
        let objects = [obj("horse", 1.0, [0.0, 0.0, 10.0, 10.0]), obj("teddy bear", 2.0, [20.0, 20.0, 30.0, 30.0])];
        let b = assemble_prompt(&t, "a {teddy bear} next to a {horse} in a garden", &objects, 1.2, 64.0, 64.0).unwrap();
        assert_eq!(b.entries.len(), 2);
        assert_eq!(b.entries[0].object_name, "teddy bear");
        assert_eq!(b.entries[0].object_index, 1);
        assert_eq!(b.entries[0].object_token_span.end - b.entries[0].object_token_span.start, 2);
        assert!(b.entries[0].object_token_span.end <= b.entries[1].compass_token_index);
        // the reversed object order is a distinct binding
        let rev = [objects[1].clone(), objects[0].clone()];
        let b2 = assemble_prompt(&t, "a {teddy bear} next to a {horse} in a garden", &rev, 1.2, 64.0, 64.0).unwrap();
        assert_ne!(b, b2);
        assert_eq!(b.token_ids, b2.token_ids);
    }

    #[test]
    fn prompt_errors() {
        let t = Tokenizer::new(8);
        let o = obj("sedan", 0.0, [0.0, 0.0, 10.0, 10.0]);
        assert!(matches!(
            assemble_prompt(&t, "a photo of a {horse}", &[o.clone()], 1.2, 64.0, 64.0),
            Err(CompassError::Binding(_))
        ));
        assert!(matches!(
            assemble_prompt(&t, "a photo of a big red shiny {sedan}", &[o.clone()], 1.2, 64.0, 64.0),
            Err(CompassError::Prompt(_))
        ));
        assert!(matches!(
            assemble_prompt(&t, "a {sedan", &[o], 1.2, 64.0, 64.0),
            Err(CompassError::Prompt(_))
        ));
    }

    #[test]
    fn personalization_config_checks_literal() {
        let t = Tokenizer::default();
        assert!(PersonalizationConfig::new("sks", "car").validate(&t).is_ok());
        assert!(PersonalizationConfig::new("car", "car").validate(&t).is_err());
        assert!(PersonalizationConfig::new("two words", "car").validate(&t).is_err());
        let c = PersonalizationConfig::new("sks", "car");
        assert_eq!(c.prompt_template("on the beach"), "A photo of a {sks car} on the beach");
        assert_eq!(c.steps, 1000);
    }
}
