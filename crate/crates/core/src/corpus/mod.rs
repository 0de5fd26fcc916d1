//! Dataset loaders.
//!
//! Two layouts are understood:
//!
//! * manga books in the Manga109 layout (`annotations/<book>.xml`,
//!   `images/<book>/NNN.{png,jpg}` and an optional speaker-link file
//!   `dialog/<book>.xml`), see [`load_book`];
//! * a face-emotion dataset with a label manifest and split listings, see
//!   [`load_emotion_dataset`].
//!
//! Loaded records are immutable and can be shared freely between threads.

mod emotion_set;
mod manga;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use emotion_set::{load_emotion_dataset, EmotionDataset, EmotionDatasetEntry, Split};
pub use manga::load_book;

/// Version of the canonical [`Book`] JSON written to the artifact store.
pub const BOOK_SCHEMA_VERSION: u32 = 1;

/// Speaker recorded for lines without attribution.
pub const UNKNOWN_SPEAKER: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Book {
    pub schema_version: u32,
    pub book_id: String,
    pub pages: Vec<Page>,
    /// Sorted by `(page_index, reading_order)`; `line_id` counts from 1 in that order.
    pub dialogue: Vec<DialogueLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_index: usize,
    /// Path of the page image relative to the dataset root.
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub face_regions: Vec<FaceRegion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width > 0 && self.height > 0 && self.right() <= width && self.bottom() <= height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRegion {
    pub region_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Character name when the annotation links the face to a character.
    pub character: Option<String>,
}

/// Whether a text region is character speech or a narration box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    #[default]
    Speech,
    Narration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueLine {
    pub line_id: u32,
    /// Identifier of the text element in the source annotation.
    pub source_id: String,
    pub page_index: usize,
    pub speaker: String,
    pub text: String,
    pub reading_order: u32,
    pub kind: LineKind,
}

impl Book {
    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn line(&self, line_id: u32) -> Option<&DialogueLine> {
        // line ids are dense and 1-based
        self.dialogue
            .get((line_id as usize).wrapping_sub(1))
            .filter(|l| l.line_id == line_id)
    }

    pub fn lines_on_page(&self, page_index: usize) -> impl Iterator<Item = &DialogueLine> {
        self.dialogue.iter().filter(move |l| l.page_index == page_index)
    }

    pub fn lines_in_pages(&self, first: usize, last: usize) -> Vec<DialogueLine> {
        self.dialogue
            .iter()
            .filter(|l| (first..=last).contains(&l.page_index))
            .cloned()
            .collect()
    }

    /// Pretty-printed canonical JSON.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("book serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let book: Book = serde_json::from_str(text).map_err(|e| CorpusError::MalformedAnnotation {
            locus: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if book.schema_version != BOOK_SCHEMA_VERSION {
            return Err(CorpusError::MalformedAnnotation {
                locus: "schema_version".into(),
                message: format!(
                    "unsupported book schema version {} (expected {BOOK_SCHEMA_VERSION})",
                    book.schema_version
                ),
            });
        }
        book.validate()?;
        Ok(book)
    }

    /// Check the structural invariants of a book record.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (i, page) in self.pages.iter().enumerate() {
            if page.page_index != i {
                return Err(CorpusError::MalformedAnnotation {
                    locus: format!("page {i}"),
                    message: format!("page index {} out of sequence", page.page_index),
                });
            }
            for face in &page.face_regions {
                if !face.bbox.fits_within(page.width, page.height) {
                    return Err(CorpusError::MalformedAnnotation {
                        locus: format!("page {i}, face {}", face.region_id),
                        message: "face box outside the page image".into(),
                    });
                }
            }
        }
        let mut prev: Option<(usize, u32)> = None;
        for (i, line) in self.dialogue.iter().enumerate() {
            if line.line_id as usize != i + 1 {
                return Err(CorpusError::MalformedAnnotation {
                    locus: format!("dialogue line {}", line.line_id),
                    message: "line ids must be dense and start at 1".into(),
                });
            }
            if line.page_index >= self.pages.len() {
                return Err(CorpusError::DanglingReference {
                    text_id: line.source_id.clone(),
                    message: format!(
                        "dialogue on page {} of a {}-page book",
                        line.page_index,
                        self.pages.len()
                    ),
                });
            }
            if line.text.trim().is_empty() {
                return Err(CorpusError::MalformedAnnotation {
                    locus: format!("dialogue line {}", line.line_id),
                    message: "empty dialogue text".into(),
                });
            }
            let key = (line.page_index, line.reading_order);
            if prev.is_some_and(|p| p >= key) {
                return Err(CorpusError::MalformedAnnotation {
                    locus: format!("dialogue line {}", line.line_id),
                    message: "dialogue not sorted by (page, reading order)".into(),
                });
            }
            prev = Some(key);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no annotation file at {0}")]
    MissingAnnotation(PathBuf),
    #[error("malformed annotation at {locus}: {message}")]
    MalformedAnnotation { locus: String, message: String },
    #[error("dangling reference from text {text_id}: {message}")]
    DanglingReference { text_id: String, message: String },
    #[error("missing image for {0}")]
    MissingImage(String),
    #[error("label {label:?} at {locus} is not in the label manifest")]
    UnknownLabel { label: String, locus: String },
    #[error("image {image} appears in both {first:?} and {second:?} splits")]
    OverlappingSplits { image: String, first: Split, second: Split },
    #[error("missing dataset file {0}")]
    MissingManifest(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
