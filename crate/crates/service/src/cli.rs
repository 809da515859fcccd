//! `compass` subcommands. Each reads an optional JSON config and applies
//! flag overrides on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use compass_autograd::ParamStore;
use compass_core::backbone::{BackboneConfig, ModelWeights, ToyBackbone};
use compass_core::call_attention::AttentionProbe;
use compass_core::conditioning::PersonalizationConfig;
use compass_core::dataset::{
    apply_decisions, build_augmentation_jobs, builtin_templates, compile_manifest, count_kept, execute_augmentation,
    generate_corpus, read_manifest, review_records, write_manifest, AssetCatalog, Canny, CommandGenerator,
    CommandRenderer, CorpusPlan, FilterFlag, ImageGenerator, MomentReviewer, Provenance, Renderer, SceneConfig,
    Stage, StubGenerator, StubRenderer,
};
use compass_core::evaluation::{
    build_eval_set, builtin_prompt_lists, crops_from_records, evaluate, parse_prompt_list, ConstantAligner,
    Detector, EvalConfig, EvalSetConfig, HintDetector, HttpAligner, HttpDetector, OrientationRegressor,
    RegressorConfig, TextAligner,
};
use compass_core::generation::{personalize, GenerationRequest, Generator};
use compass_core::imaging::Canvas;
use compass_core::tokenizer::Tokenizer;
use compass_core::training::{load_examples, pretrain_base, Checkpoint, TrainConfig, Trainer, TrainingData};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::app::{App, ServeConfig};
use crate::engine::STUB_SIMILARITY;

pub const CHECKPOINT_ENV: &str = "COMPASS_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "compass", version, about = "Orientation-controlled image generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus generation, augmentation, review and compilation.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Pretrain the backbone (unless reused) and train the compass stage.
    Train(TrainArgs),
    /// Generate one image from a request file.
    Infer(InferArgs),
    /// Fit subject adapters on a handful of images.
    Personalize(PersonalizeArgs),
    /// Train the orientation regressor used by `eval`.
    RegressorTrain(RegressorArgs),
    /// Generate the evaluation set and score it.
    Eval(EvalArgs),
    /// Dump per-token cross-attention maps for one request.
    AttnDump(AttnDumpArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    Gen(GenArgs),
    Augment(AugmentArgs),
    Review(ReviewArgs),
    Compile(CompileArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Corpus plan (`single`, `multi`, `seed`, `scene`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; receives `manifest.jsonl` and `images/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub single: Option<usize>,
    #[arg(long)]
    pub multi: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Quantize headings to this many evenly spaced levels.
    #[arg(long)]
    pub orientation_levels: Option<usize>,
    /// Directory of asset descriptors replacing the built-in glyphs.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// External renderer program (JSON on stdin/stdout).
    #[arg(long)]
    pub renderer: Option<PathBuf>,
    #[arg(long = "renderer-arg")]
    pub renderer_args: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub seed: u64,
    /// Scene templates with a `<subject>` slot; the built-in list if empty.
    pub templates: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset root; defaults to the manifest's directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Output manifest (sources plus augmented records).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// External edge-conditioned generator program.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long = "generator-arg")]
    pub generator_args: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `{"record id": "keep" | "reject"}`; without it the moment reviewer decides.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    /// Moment reviewer tolerance in radians.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// 1 = single-object records only, 2 = everything usable.
    #[arg(long)]
    pub stage: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config; unspecified fields come from `--preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// staged, single-stage-25k or toy.
    #[arg(long, default_value = "staged")]
    pub preset: String,
    /// full, no-call, single-stage or no-augmentation.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many iterations (the checkpoint can be resumed).
    #[arg(long)]
    pub until: Option<usize>,
    /// Continue the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Reuse the pretrained backbone of another checkpoint.
    #[arg(long)]
    pub base_from: Option<PathBuf>,
    #[arg(long)]
    pub base_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Checkpoint directory; overrides COMPASS_CHECKPOINT and the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Extra adapter files from `personalize`.
    #[arg(long = "adapters")]
    pub adapters: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Generation request; may carry a `checkpoint` path.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    /// Disable coupled attention localization.
    #[arg(long)]
    pub no_call: bool,
    #[arg(long, default_value = "out.png")]
    pub out: PathBuf,
    /// Result JSON; defaults to the image path with a `.json` extension.
    #[arg(long)]
    pub result: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    /// Personalization config; image paths are relative to its directory.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adapter weights file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegressorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// toy or resnet18.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalFileConfig {
    pub checkpoint: Option<PathBuf>,
    pub eval_set: EvalSetConfig,
    pub eval: EvalConfig,
    /// Directory with `road.txt`, `water.txt`, `indoor.txt`; built-in lists if unset.
    pub prompt_lists: Option<PathBuf>,
    pub detector_url: Option<String>,
    pub aligner_url: Option<String>,
    pub regressor: Option<PathBuf>,
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Regressor directory from `regressor-train`.
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    /// Report directory (report.csv, report.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Use the in-process detector and aligner stubs.
    #[arg(long)]
    pub stub_clients: bool,
    #[arg(long)]
    pub detector_url: Option<String>,
    #[arg(long)]
    pub aligner_url: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub regressor: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn print(value: Value) {
    println!("{value}");
}

fn root_of(manifest: &Path, root: Option<PathBuf>) -> PathBuf {
    root.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// Flag, then environment, then config.
pub fn resolve_checkpoint(flag: Option<&Path>, from_config: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()) {
        return Ok(PathBuf::from(p));
    }
    match from_config {
        Some(p) => Ok(p.to_path_buf()),
        None => bail!(compass_core::CompassError::Config(format!(
            "no checkpoint: pass --checkpoint, set {CHECKPOINT_ENV} or add `checkpoint` to the config"
        ))),
    }
}

/// Splits an optional top-level `checkpoint` key off a request file.
fn request_file(path: &Path) -> Result<(Option<PathBuf>, GenerationRequest)> {
    let mut value: Value = read_json(path)?;
    let ckpt = match value.as_object_mut().and_then(|o| o.remove("checkpoint")) {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => bail!(compass_core::CompassError::Validation(vec![
            "checkpoint: expected a path string".into()
        ])),
        None => None,
    };
    Ok((ckpt, GenerationRequest::from_value(&value)?))
}

struct Model {
    backbone: ToyBackbone,
    weights: ModelWeights,
    id: String,
}

fn load_model(args: &ModelArgs, from_config: Option<&Path>) -> Result<Model> {
    let dir = resolve_checkpoint(args.checkpoint.as_deref(), from_config)?;
    let ckpt = Checkpoint::load(&dir)?;
    let mut weights = ckpt.weights();
    for path in &args.adapters {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        weights.adapters.extend(&ParamStore::from_bytes(&bytes).map_err(compass_core::CompassError::from)?);
    }
    Ok(Model {
        backbone: ckpt.backbone()?,
        weights,
        id: ckpt.id(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Gen(a)) => dataset_gen(a),
        Command::Dataset(DatasetCommand::Augment(a)) => dataset_augment(a),
        Command::Dataset(DatasetCommand::Review(a)) => dataset_review(a),
        Command::Dataset(DatasetCommand::Compile(a)) => dataset_compile(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Personalize(a) => personalize_cmd(a),
        Command::RegressorTrain(a) => regressor_train(a),
        Command::Eval(a) => eval(a),
        Command::AttnDump(a) => attn_dump(a),
        Command::Serve(a) => serve(a),
    }
}

fn dataset_gen(a: GenArgs) -> Result<()> {
    let mut plan = match &a.config {
        Some(p) => read_json::<CorpusPlan>(p)?,
        None => CorpusPlan {
            single: 1000,
            multi: 1000,
            seed: 0,
            scene: SceneConfig::default(),
        },
    };
    plan.single = a.single.unwrap_or(plan.single);
    plan.multi = a.multi.unwrap_or(plan.multi);
    plan.seed = a.seed.unwrap_or(plan.seed);
    if a.orientation_levels.is_some() {
        plan.scene.orientation_levels = a.orientation_levels;
    }
    let catalog = match &a.assets {
        Some(dir) => AssetCatalog::load_dir(dir)?,
        None => AssetCatalog::builtin(),
    };
    let renderer: Box<dyn Renderer> = match a.renderer {
        Some(program) => Box::new(CommandRenderer {
            program,
            args: a.renderer_args,
        }),
        None => Box::new(StubRenderer {
            catalog: catalog.clone(),
        }),
    };
    std::fs::create_dir_all(a.out.join("images")).with_context(|| format!("creating {}", a.out.display()))?;
    let records = generate_corpus(&plan, &catalog, renderer.as_ref(), &a.out)?;
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    print(json!({"manifest": manifest, "records": records.len()}));
    Ok(())
}

fn dataset_augment(a: AugmentArgs) -> Result<()> {
    let cfg: AugmentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AugmentConfig::default(),
    };
    let root = root_of(&a.manifest, a.root);
    let records = read_manifest(&a.manifest)?;
    let mut sources: Vec<_> = records
        .iter()
        .filter(|r| r.provenance == Provenance::Rendered && r.filter == FilterFlag::Keep)
        .cloned()
        .collect();
    if let Some(n) = a.limit {
        sources.truncate(n);
    }
    let templates = if cfg.templates.is_empty() {
        builtin_templates()
    } else {
        cfg.templates
    };
    let jobs = build_augmentation_jobs(&sources, &templates, &AssetCatalog::builtin(), a.seed.unwrap_or(cfg.seed))?;
    let generator: Box<dyn ImageGenerator> = match a.generator {
        Some(program) => {
            let work_dir = root.join("work");
            std::fs::create_dir_all(&work_dir).with_context(|| format!("creating {}", work_dir.display()))?;
            Box::new(CommandGenerator {
                program,
                args: a.generator_args,
                work_dir,
            })
        }
        None => Box::new(StubGenerator),
    };
    std::fs::create_dir_all(root.join("images"))?;
    let augmented = execute_augmentation(&jobs, &Canny::default(), generator.as_ref(), &root)?;
    let n = augmented.len();
    let mut all = records;
    all.extend(augmented);
    write_manifest(&a.out, &all)?;
    print(json!({"manifest": a.out, "augmented": n, "records": all.len()}));
    Ok(())
}

fn dataset_review(a: ReviewArgs) -> Result<()> {
    let root = root_of(&a.manifest, a.root);
    let mut records = read_manifest(&a.manifest)?;
    let summary = match &a.decisions {
        Some(p) => {
            let decisions: BTreeMap<String, FilterFlag> = read_json(p)?;
            apply_decisions(&mut records, &decisions)?;
            json!({"applied": decisions.len()})
        }
        None => {
            let reviewer = MomentReviewer {
                tolerance: a.tolerance.unwrap_or(MomentReviewer::default().tolerance),
            };
            let (kept, rejected) = review_records(&mut records, &reviewer, &root)?;
            json!({"kept": kept, "rejected": rejected})
        }
    };
    let out = a.out.unwrap_or(a.manifest);
    write_manifest(&out, &records)?;
    print(json!({"manifest": out, "review": summary, "counts": count_kept(&records)}));
    Ok(())
}

fn dataset_compile(a: CompileArgs) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let out = compile_manifest(&records, Stage::from_number(a.stage)?)?;
    write_manifest(&a.out, &out)?;
    print(json!({"manifest": a.out, "records": out.len()}));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let root = root_of(&a.manifest, a.root);
    let records = read_manifest(&a.manifest)?;
    let backbone = ToyBackbone::new(BackboneConfig::default())?;
    let examples = load_examples(&records, &root, &backbone)?;
    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&a.out)?;
        Trainer::from_checkpoint(&backbone, &ckpt)?
    } else {
        let preset = serde_json::to_value(TrainConfig::preset(&a.preset)?)?;
        let mut config: TrainConfig = match &a.config {
            Some(p) => {
                let mut merged = preset;
                let over: Value = read_json(p)?;
                merge(&mut merged, over);
                serde_json::from_value(merged).with_context(|| format!("parsing {}", p.display()))?
            }
            None => serde_json::from_value(preset)?,
        };
        if let Some(name) = &a.ablation {
            config = config.ablation(name)?;
        }
        config.seed = a.seed.unwrap_or(config.seed);
        config.base.iterations = a.base_iterations.unwrap_or(config.base.iterations);
        config.validate()?;
        let base = match &a.base_from {
            Some(dir) => Checkpoint::load(dir)?.base,
            None => {
                let tok = Tokenizer::new(backbone.config.context_len);
                let every = config.checkpoint_every.max(1);
                pretrain_base(&backbone, &tok, &examples, &config.base, config.padding, config.seed, |it, loss| {
                    if (it + 1) % every == 0 {
                        eprintln!("{}", json!({"stage": "base", "iteration": it + 1, "loss": loss}));
                    }
                })?
                .0
            }
        };
        Trainer::new(&backbone, config, base)?
    };
    let data = TrainingData::new(examples, trainer.config().include_augmented);
    let every = trainer.config().checkpoint_every.max(1);
    trainer.run(&data, a.until, Some(&a.out), |r| {
        if (r.iteration + 1) % every == 0 {
            eprintln!("{}", json!({"stage": r.stage_index + 1, "iteration": r.iteration + 1, "loss": r.loss}));
        }
    })?;
    let ckpt = trainer.checkpoint();
    print(json!({
        "checkpoint": a.out,
        "checkpoint_id": ckpt.id(),
        "iteration": trainer.iteration(),
        "loss": trainer.history().last().map(|r| r.loss),
    }));
    Ok(())
}

/// Recursively overlays `over` onto `base` (objects merge, everything else replaces).
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn infer(a: InferArgs) -> Result<()> {
    let (ckpt, mut req) = request_file(&a.config)?;
    req.seed = a.seed.unwrap_or(req.seed);
    req.steps = a.steps.unwrap_or(req.steps);
    req.guidance_scale = a.guidance_scale.unwrap_or(req.guidance_scale);
    req.use_call &= !a.no_call;
    let model = load_model(&a.model, ckpt.as_deref())?;
    let out = Generator::new(&model.backbone, &model.weights).generate(&req)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.image.save(&a.out)?;
    let result_path = a.result.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(&result_path, &out.result)?;
    print(json!({"image": a.out, "result": result_path, "checkpoint_id": model.id}));
    Ok(())
}

fn personalize_cmd(a: PersonalizeArgs) -> Result<()> {
    let mut value: Value = read_json(&a.config)?;
    let ckpt = match value.as_object_mut().and_then(|o| o.remove("checkpoint")) {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        _ => None,
    };
    let mut cfg: PersonalizationConfig =
        serde_json::from_value(value).with_context(|| format!("parsing {}", a.config.display()))?;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let base_dir = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let images = cfg
        .images
        .iter()
        .map(|p| Canvas::load(&if p.is_absolute() { p.clone() } else { base_dir.join(p) }))
        .collect::<compass_core::Result<Vec<_>>>()?;
    let model = load_model(&a.model, ckpt.as_deref())?;
    let adapters = personalize(&model.backbone, &model.weights, &cfg, &images, |_, _| {})?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, adapters.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    print(json!({
        "adapters": a.out,
        "subject_token": cfg.subject_token,
        "prefix": compass_core::generation::subject_prefix(&cfg.subject_token),
    }));
    Ok(())
}

fn regressor_train(a: RegressorArgs) -> Result<()> {
    let root = root_of(&a.manifest, a.root);
    let records = read_manifest(&a.manifest)?;
    let usable: Vec<_> = records.into_iter().filter(|r| r.filter == FilterFlag::Keep).collect();
    let mut config = match a.preset.as_str() {
        "toy" => RegressorConfig::toy(),
        "resnet18" => RegressorConfig::resnet18(),
        other => bail!(compass_core::CompassError::Config(format!(
            "unknown regressor preset `{other}` (toy, resnet18)"
        ))),
    };
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.seed = a.seed.unwrap_or(config.seed);
    let crops = crops_from_records(&usable, &root)?;
    let mut model = OrientationRegressor::init(config)?;
    model.train(&crops, |e| eprintln!("{}", json!({"epoch": e.epoch, "loss": e.loss})))?;
    let err = model.mean_error(&crops)?;
    model.save(&a.out)?;
    print(json!({"regressor": a.out, "crops": crops.len(), "train_mean_error": err}));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg: EvalFileConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalFileConfig::default(),
    };
    let lists = match &cfg.prompt_lists {
        Some(dir) => {
            let mut m = BTreeMap::new();
            for cat in ["road", "water", "indoor"] {
                let p = dir.join(format!("{cat}.txt"));
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                m.insert(cat.to_string(), parse_prompt_list(&text));
            }
            m
        }
        None => builtin_prompt_lists(),
    };
    let mut cases = build_eval_set(&lists, &cfg.eval_set)?;
    if let Some(n) = a.limit.or(cfg.limit) {
        cases.truncate(n);
    }
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.steps = a.steps.unwrap_or(eval_cfg.steps);
    let (detector, aligner): (Box<dyn Detector>, Box<dyn TextAligner>) = if a.stub_clients {
        (Box::new(HintDetector::new(1.0)), Box::new(ConstantAligner(STUB_SIMILARITY)))
    } else {
        let d = a.detector_url.or(cfg.detector_url);
        let t = a.aligner_url.or(cfg.aligner_url);
        match (d, t) {
            (Some(d), Some(t)) => (Box::new(HttpDetector { url: d }), Box::new(HttpAligner { url: t })),
            _ => bail!(compass_core::CompassError::Config(
                "eval needs --stub-clients or both detector and aligner URLs".into()
            )),
        }
    };
    let regressor = match a.regressor.or(cfg.regressor) {
        Some(dir) => OrientationRegressor::load(&dir)?,
        None if a.stub_clients => {
            eprintln!("{}", json!({"warning": "no regressor given; using an untrained toy regressor"}));
            OrientationRegressor::init(RegressorConfig::toy())?
        }
        None => bail!(compass_core::CompassError::Config("eval needs --regressor".into())),
    };
    let model = load_model(&a.model, cfg.checkpoint.as_deref())?;
    let gen = Generator::new(&model.backbone, &model.weights);
    let report = evaluate(&gen, &cases, detector.as_ref(), aligner.as_ref(), &regressor, &eval_cfg, |_| {})?;
    report.write(&a.out)?;
    print(json!({"report": a.out, "cases": report.rows.len(), "aggregates": report.aggregates}));
    Ok(())
}

fn attn_dump(a: AttnDumpArgs) -> Result<()> {
    let (ckpt, mut req) = request_file(&a.config)?;
    req.seed = a.seed.unwrap_or(req.seed);
    req.steps = a.steps.unwrap_or(req.steps);
    let model = load_model(&a.model, ckpt.as_deref())?;
    let gen = Generator::new(&model.backbone, &model.weights);
    let binding = gen.prepare(&req)?.binding;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for e in &binding.entries {
        tokens.push(e.compass_token_index);
        labels.push(format!("compass:{}", e.object_name));
        for i in e.object_token_span.indices() {
            tokens.push(i);
            labels.push(e.object_name.clone());
        }
    }
    let mut probe = AttentionProbe::new(tokens);
    gen.generate_probed(&req, Some(&mut probe))?;
    let dump = probe.into_dump(labels);
    write_json(&a.out, &dump)?;
    print(json!({"dump": a.out, "records": dump.records.len(), "tokens": dump.tokens.len()}));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg: ServeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ServeConfig::default(),
    };
    cfg.data_dir = a.data_dir.unwrap_or(cfg.data_dir);
    cfg.host = a.host.unwrap_or(cfg.host);
    cfg.port = a.port.unwrap_or(cfg.port);
    cfg.workers = a.workers.unwrap_or(cfg.workers);
    cfg.regressor = a.regressor.or(cfg.regressor);
    let dir = resolve_checkpoint(a.checkpoint.as_deref(), cfg.checkpoint.as_deref())?;
    let ckpt = Checkpoint::load(&dir)?;
    let regressor = cfg.regressor.as_deref().map(OrientationRegressor::load).transpose()?;
    let app = App::start(&ckpt, regressor, &cfg.data_dir, cfg.workers)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
        print(json!({"listening": listener.local_addr()?.to_string(), "checkpoint_id": app.engine.checkpoint_id()}));
        crate::server::serve(app, listener).await?;
        Ok(())
    })
}
