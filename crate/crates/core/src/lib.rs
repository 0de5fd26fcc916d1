//! Manga-to-music pipeline engine.
//!
//! Takes an annotated manga book (page images, face regions and a
//! speaker-attributed dialogue transcript) and produces page-synchronised
//! background music. Every stage writes a human-readable artifact that can be
//! inspected or overridden before downstream stages run again.
//!
//! ```text
//! corpus -> scenes -> emotion -> captioning (directive, page captions)
//!        -> music (per page) -> assembly (crossfade / continuation)
//! ```
//!
//! The two comparison conditions live in [`baselines`], the survey analysis
//! harness in [`evaluation`], and the stage graph with its artifact store in
//! [`orchestrator`].

pub mod assembly;
pub mod audio;
pub mod baselines;
pub mod captioning;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod emotion;
pub mod evaluation;
mod http_client;
pub mod llm;
pub mod music;
pub mod orchestrator;
pub mod scenes;
pub mod template;

pub use audio::{AudioTrack, Segment};

pub use corpus::{Book, DialogueLine, FaceRegion, Page};

pub use config::{Condition, PipelineConfig};
pub use orchestrator::{Orchestrator, RunManifest, StageArtifact};
