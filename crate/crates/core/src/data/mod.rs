//! Dataset plumbing: manifest ingestion and validation, synthetic benchmark
//! generation, and the four-frame caption prompt with its provider client.

mod manifest;
mod prompt;
mod synth;

pub use manifest::{
    load_manifest, serialize_manifest, validate_manifest, ManifestEntry, ManifestError,
    ValidationReport, CATEGORIES,
};
pub use prompt::{
    build_caption_prompt, CaptionProvider, CaptionRequest, HttpCaptionProvider,
    MockCaptionProvider, PromptError, ProviderError, CAPTION_ENDPOINT_ENV, CAPTION_TIMEOUT_ENV,
};
pub use synth::{
    synth_clips, synth_generate, GeneratedDataset, SoundKind, SynthClip, SynthError, SyntheticSpec,
};
