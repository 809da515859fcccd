//! Synthetic orientation dataset: scene sampling, rendering, background
//! augmentation, review and manifest compilation.

pub mod augment;
pub mod catalog;
pub mod manifest;
pub mod render;
pub mod scene;

pub use augment::{
    build_augmentation_jobs, builtin_templates, execute_augmentation, AugmentationJob, Canny,
    CommandGenerator, EdgeExtractor, ImageGenerator, StubGenerator,
};
pub use catalog::{AssetCatalog, AssetDescriptor, Glyph};
pub use manifest::{
    apply_decisions, compile_manifest, count_kept, generate_corpus, read_manifest, review_records, write_manifest,
    CorpusCounts, CorpusPlan,
    MomentReviewer, Reviewer, Stage,
};
pub use render::{draw_scene, pixel_moment_heading, render_record, CommandRenderer, Renderer, StubRenderer};
pub use scene::{
    heading_word, sample_scene_spec, FilterFlag, Provenance, RecordObject, SceneConfig, SceneRecord,
    SceneSpec,
};
