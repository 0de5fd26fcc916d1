//! Scene segmentation over the dialogue transcript.
//!
//! The model is shown one hand-segmented example and the numbered transcript
//! of the book, and answers with the last line of every scene. The answer is
//! repaired into a partition of whole pages: boundaries are snapped to page
//! breaks, out-of-order or out-of-range boundaries are dropped (first one
//! wins), and an unclosed tail becomes a final scene. Pages without dialogue
//! belong to the scene before them; leading ones belong to the first scene.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Book, DialogueLine, LineKind};
use crate::llm::{ask, strip_code_fence, AskError, AskPolicy, BackendError, Exchange, LanguageModel, Task};
use crate::template::{Prompt, TemplateRef, TemplateSet};

/// Instruction block appended verbatim to every segmentation prompt.
pub const OUTPUT_SCHEMA: &str = "Reply with JSON only, in the form\n\
{\"scenes\": [{\"last_line\": <line number>, \"rationale\": \"<one sentence>\"}, ...]}\n\
List the scenes in transcript order. last_line is the L-number of the final line of a scene; \
the last scene ends with the final line of the transcript. The rationale says why the scene ends there.";

const BUILTIN_EXEMPLAR: &str = include_str!("../assets/scene_exemplar.v1.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u32,
    pub first_line_id: u32,
    pub last_line_id: u32,
    /// First and last page, inclusive.
    pub page_range: (usize, usize),
    pub rationale: String,
}

impl Scene {
    pub fn pages(&self) -> std::ops::RangeInclusive<usize> {
        self.page_range.0..=self.page_range.1
    }

    pub fn page_count(&self) -> usize {
        self.page_range.1 - self.page_range.0 + 1
    }

    pub fn contains_page(&self, page_index: usize) -> bool {
        self.pages().contains(&page_index)
    }
}

/// A segmented excerpt shown to the model as the worked example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneExemplar {
    pub dialogue: Vec<DialogueLine>,
    /// Line ids after which a scene ends; the final scene is implicit.
    pub boundaries: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("book {0} has no dialogue lines")]
    EmptyDialogue(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("segmentation response could not be repaired into a partition: {violation}")]
    UnrepairableResponse { violation: String, exchanges: Vec<Exchange> },
    #[error("invalid scene exemplar: {0}")]
    InvalidExemplar(String),
    #[error("invalid scene list: {0}")]
    InvalidScenes(String),
    #[error("template error: {0}")]
    Template(String),
}

impl SceneExemplar {
    /// The exemplar bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_EXEMPLAR).expect("bundled exemplar is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let exemplar: SceneExemplar =
            serde_json::from_str(text).map_err(|e| SceneError::InvalidExemplar(e.to_string()))?;
        exemplar.validate()?;
        Ok(exemplar)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidExemplar(m));
        if self.dialogue.is_empty() {
            return bad("excerpt is empty".into());
        }
        let ids: Vec<u32> = self.dialogue.iter().map(|l| l.line_id).collect();
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return bad("line ids are not strictly increasing".into());
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad("boundaries are not strictly increasing".into());
        }
        if let Some(b) = self.boundaries.iter().find(|b| !ids.contains(b)) {
            return bad(format!("boundary {b} is not a line of the excerpt"));
        }
        Ok(())
    }
}

/// `L<id> | page <p> | <speaker>: <text>`, one line per dialogue line.
pub fn format_transcript(lines: &[DialogueLine]) -> String {
    lines
        .iter()
        .map(|l| {
            let speaker = match l.kind {
                LineKind::Narration => "(narration)",
                LineKind::Speech => l.speaker.as_str(),
            };
            format!("L{} | page {} | {}: {}", l.line_id, l.page_index, speaker, l.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_segmentation_prompt(
    book: &Book,
    exemplar: &SceneExemplar,
    templates: &TemplateSet,
) -> Result<Prompt, SceneError> {
    if book.dialogue.is_empty() {
        return Err(SceneError::EmptyDialogue(book.book_id.clone()));
    }
    let boundaries = exemplar
        .boundaries
        .iter()
        .map(|b| format!("L{b}"))
        .collect::<Vec<_>>()
        .join(", ");
    let count = exemplar.dialogue.len().to_string();
    let exemplar_transcript = format_transcript(&exemplar.dialogue);
    let transcript = format_transcript(&book.dialogue);
    templates
        .render_prompt(
            "segment",
            &[
                ("exemplar_line_count", &count),
                ("exemplar_transcript", &exemplar_transcript),
                ("exemplar_boundaries", &boundaries),
                ("transcript", &transcript),
                ("output_schema", OUTPUT_SCHEMA),
            ],
        )
        .map_err(|e| SceneError::Template(e.to_string()))
}

/// One scene end as stated by the model, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposedBoundary {
    pub last_line: i64,
    pub first_line: Option<i64>,
    pub rationale: String,
}

fn as_line_number(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.trim().trim_start_matches(['L', 'l']).parse().ok(),
        _ => None,
    }
}

/// Parse the model's reply. Errors describe the violation for the retry message.
pub fn parse_boundaries(raw: &str) -> Result<Vec<ProposedBoundary>, String> {
    let body = strip_code_fence(raw);
    let value: Value = serde_json::from_str(body).map_err(|e| format!("the reply is not valid JSON ({e})"))?;
    let entries = match &value {
        Value::Array(items) => items,
        Value::Object(map) => map
            .get("scenes")
            .and_then(Value::as_array)
            .ok_or("the reply has no \"scenes\" list")?,
        _ => return Err("the reply must be a JSON object with a \"scenes\" list".into()),
    };
    if entries.is_empty() {
        return Err("the \"scenes\" list is empty".into());
    }
    entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            if let Some(last_line) = as_line_number(entry) {
                return Ok(ProposedBoundary {
                    last_line,
                    first_line: None,
                    rationale: String::new(),
                });
            }
            let last_line = entry
                .get("last_line")
                .and_then(as_line_number)
                .ok_or_else(|| format!("scene {} has no integer \"last_line\"", i + 1))?;
            Ok(ProposedBoundary {
                last_line,
                first_line: entry.get("first_line").and_then(as_line_number),
                rationale: entry
                    .get("rationale")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .trim()
                    .to_string(),
            })
        })
        .collect()
}

/// Turn proposals into scenes. Returns the scenes and a note per repair.
pub fn repair(book: &Book, proposals: &[ProposedBoundary]) -> Result<(Vec<Scene>, Vec<String>), String> {
    let lines = &book.dialogue;
    let n = lines.len() as i64;
    if n == 0 {
        return Err("the book has no dialogue".into());
    }
    let page_of = |id: i64| lines[(id - 1) as usize].page_index;
    // last line id on each page break: the line before a page change
    let page_end = |id: i64| {
        let page = page_of(id);
        let mut end = id;
        while end < n && page_of(end + 1) == page {
            end += 1;
        }
        end
    };
    let page_start = |id: i64| {
        let page = page_of(id);
        let mut start = id;
        while start > 1 && page_of(start - 1) == page {
            start -= 1;
        }
        start
    };

    let mut notes = Vec::new();
    let mut kept: Vec<(i64, String)> = Vec::new();
    let mut in_range = 0;
    for (i, p) in proposals.iter().enumerate() {
        let k = i + 1;
        if p.last_line < 1 || p.last_line > n {
            notes.push(format!("dropped boundary {k}: line {} is not in the transcript", p.last_line));
            continue;
        }
        in_range += 1;
        let mut end = p.last_line;
        let (start, stop) = (page_start(end), page_end(end));
        if end != stop {
            // mid-page: move to the nearer page break, ties go forward
            let back = end - (start - 1);
            let forward = stop - end;
            end = if start > 1 && back < forward { start - 1 } else { stop };
            notes.push(format!(
                "moved boundary {k} from line {} to line {end} to end on a page break",
                p.last_line
            ));
        }
        let previous = kept.last().map_or(0, |(e, _)| *e);
        if end <= previous {
            notes.push(format!(
                "dropped boundary {k} at line {end}: it overlaps the scene ending at line {previous}"
            ));
            continue;
        }
        if let Some(first) = p.first_line {
            if first != previous + 1 {
                notes.push(format!(
                    "scene ending at line {end} starts at line {} instead of {first}",
                    previous + 1
                ));
            }
        }
        let rationale = if p.rationale.is_empty() {
            "no rationale given".to_string()
        } else {
            p.rationale.clone()
        };
        kept.push((end, rationale));
    }
    if in_range == 0 {
        return Err(format!("no boundary refers to a line between 1 and {n}"));
    }
    if kept.last().map(|(e, _)| *e) != Some(n) {
        notes.push(format!("added a final scene ending at line {n}"));
        kept.push((n, "final scene not closed by the response; it runs to the end of the transcript".into()));
    }

    let first_lines: Vec<i64> = std::iter::once(1)
        .chain(kept.iter().map(|(e, _)| e + 1))
        .take(kept.len())
        .collect();
    let last_page = book.pages.len().saturating_sub(1);
    let scenes = kept
        .iter()
        .enumerate()
        .map(|(i, (end, rationale))| {
            let first_page = if i == 0 { 0 } else { page_of(first_lines[i]) };
            let end_page = match first_lines.get(i + 1) {
                Some(next) => page_of(*next) - 1,
                None => last_page,
            };
            Scene {
                scene_id: i as u32 + 1,
                first_line_id: first_lines[i] as u32,
                last_line_id: *end as u32,
                page_range: (first_page, end_page),
                rationale: rationale.clone(),
            }
        })
        .collect();
    Ok((scenes, notes))
}

/// Check that `scenes` partitions both the pages and the dialogue of `book`.
pub fn validate_partition(book: &Book, scenes: &[Scene]) -> Result<(), SceneError> {
    let bad = |m: String| Err(SceneError::InvalidScenes(m));
    if scenes.is_empty() {
        return bad("no scenes".into());
    }
    let mut next_line = 1u32;
    let mut next_page = 0usize;
    for (i, s) in scenes.iter().enumerate() {
        if s.scene_id != i as u32 + 1 {
            return bad(format!("scene {} has id {}; ids must be 1..n in order", i + 1, s.scene_id));
        }
        if s.first_line_id != next_line || s.last_line_id < s.first_line_id {
            return bad(format!(
                "scene {} covers lines {}..{}, expected to start at {next_line}",
                s.scene_id, s.first_line_id, s.last_line_id
            ));
        }
        if s.page_range.0 != next_page || s.page_range.1 < s.page_range.0 {
            return bad(format!(
                "scene {} covers pages {}..{}, expected to start at {next_page}",
                s.scene_id, s.page_range.0, s.page_range.1
            ));
        }
        for id in s.first_line_id..=s.last_line_id {
            match book.line(id) {
                Some(line) if s.contains_page(line.page_index) => {}
                Some(line) => {
                    return bad(format!(
                        "line {id} is on page {} outside scene {}",
                        line.page_index, s.scene_id
                    ))
                }
                None => return bad(format!("line {id} does not exist")),
            }
        }
        next_line = s.last_line_id + 1;
        next_page = s.page_range.1 + 1;
    }
    if next_line as usize != book.dialogue.len() + 1 {
        return bad(format!("scenes end at line {} of {}", next_line - 1, book.dialogue.len()));
    }
    if next_page != book.pages.len() {
        return bad(format!("scenes end at page {} of {}", next_page - 1, book.pages.len()));
    }
    Ok(())
}

/// Everything the segmentation stage records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub scenes: Vec<Scene>,
    pub exchanges: Vec<Exchange>,
    /// Repairs applied to the accepted response.
    pub repairs: Vec<String>,
    pub templates: Vec<TemplateRef>,
}

impl Segmentation {
    /// Schema retries used before a response was accepted.
    pub fn retries(&self) -> usize {
        self.exchanges.len().saturating_sub(1)
    }
}

pub fn segment_scenes(
    book: &Book,
    model: &dyn LanguageModel,
    exemplar: &SceneExemplar,
    templates: &TemplateSet,
    policy: &AskPolicy,
) -> Result<Segmentation, SceneError> {
    let prompt = build_segmentation_prompt(book, exemplar, templates)?;
    let feedback = templates
        .get("retry_feedback")
        .map_err(|e| SceneError::Template(e.to_string()))?;
    let answer = ask(
        model,
        Task::SceneSegmentation,
        &prompt.system,
        &prompt.user,
        None,
        policy,
        feedback,
        |raw| {
            let proposals = parse_boundaries(raw)?;
            repair(book, &proposals)
        },
    )
    .map_err(|e| match e {
        AskError::Backend(b) => SceneError::Backend(b),
        AskError::Invalid { violation, exchanges } => SceneError::UnrepairableResponse { violation, exchanges },
        AskError::Template(t) => SceneError::Template(t),
    })?;
    let (scenes, repairs) = answer.value;
    validate_partition(book, &scenes)?;
    let mut used = prompt.templates;
    if answer.exchanges.len() > 1 {
        used.push(feedback.reference());
    }
    Ok(Segmentation {
        scenes,
        exchanges: answer.exchanges,
        repairs,
        templates: used,
    })
}

/// Scene containing `page_index`.
pub fn scene_of_page(scenes: &[Scene], page_index: usize) -> Option<&Scene> {
    scenes.iter().find(|s| s.contains_page(page_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Page, BOOK_SCHEMA_VERSION};
    use crate::llm::ScriptedLanguageModel;

    /// `pages[i]` is the number of dialogue lines on page i.
    fn book(pages: &[usize]) -> Book {
        let mut dialogue = Vec::new();
        for (p, &count) in pages.iter().enumerate() {
            for k in 0..count {
                dialogue.push(DialogueLine {
                    line_id: dialogue.len() as u32 + 1,
                    source_id: format!("t{}", dialogue.len()),
                    page_index: p,
                    speaker: if k % 2 == 0 { "Aki".into() } else { "Ren".into() },
                    text: format!("line {k} on page {p}"),
                    reading_order: k as u32,
                    kind: LineKind::Speech,
                });
            }
        }
        Book {
            schema_version: BOOK_SCHEMA_VERSION,
            book_id: "toy".into(),
            pages: (0..pages.len())
                .map(|i| Page {
                    page_index: i,
                    image_ref: format!("{i:03}.png"),
                    width: 100,
                    height: 150,
                    face_regions: vec![],
                })
                .collect(),
            dialogue,
        }
    }

    fn boundaries(ends: &[i64]) -> Vec<ProposedBoundary> {
        ends.iter()
            .map(|&e| ProposedBoundary {
                last_line: e,
                first_line: None,
                rationale: "r".into(),
            })
            .collect()
    }

    fn ranges(scenes: &[Scene]) -> Vec<(u32, u32, usize, usize)> {
        scenes
            .iter()
            .map(|s| (s.first_line_id, s.last_line_id, s.page_range.0, s.page_range.1))
            .collect()
    }

    #[test]
    fn exemplar_has_ninety_lines() {
        let ex = SceneExemplar::builtin();
        assert_eq!(ex.dialogue.len(), 90);
        assert!(!ex.boundaries.is_empty());
    }

    #[test]
    fn prompt_puts_exemplar_first() {
        let b = book(&[3, 3, 3, 3]);
        let prompt = build_segmentation_prompt(&b, &SceneExemplar::builtin(), &TemplateSet::default()).unwrap();
        let ex = prompt.user.find("L90 | page").unwrap();
        let own = prompt.user.find("L12 | page 3 | Aki: line 2 on page 3").unwrap();
        assert!(ex < own);
        assert!(prompt.user.contains(OUTPUT_SCHEMA));
        let empty = book(&[0, 0]);
        assert_eq!(
            build_segmentation_prompt(&empty, &SceneExemplar::builtin(), &TemplateSet::default()),
            Err(SceneError::EmptyDialogue("toy".into()))
        );
    }

    #[test]
    fn boundaries_on_page_breaks_are_kept() {
        // pages of 5, 4, 3 lines: ends at 5 and 9 are page breaks
        let b = book(&[5, 4, 3]);
        let (scenes, notes) = repair(&b, &boundaries(&[5, 9])).unwrap();
        assert_eq!(ranges(&scenes), vec![(1, 5, 0, 0), (6, 9, 1, 1), (10, 12, 2, 2)]);
        assert_eq!(notes, vec!["added a final scene ending at line 12"]);
    }

    #[test]
    fn overlaps_resolve_first_wins() {
        let b = book(&[3, 3, 3, 3]);
        let (scenes, notes) = repair(&b, &boundaries(&[6, 3, 6, 12])).unwrap();
        assert_eq!(ranges(&scenes), vec![(1, 6, 0, 1), (7, 12, 2, 3)]);
        assert_eq!(notes.len(), 2);
        assert!(parse_boundaries("nonsense").is_err());
        assert!(repair(&b, &boundaries(&[0, 40])).is_err());
    }

    #[test]
    fn mid_page_boundaries_snap_to_the_nearer_break() {
        let b = book(&[4, 4]);
        // line 2 is two lines from either break: ties go forward
        assert_eq!(ranges(&repair(&b, &boundaries(&[2])).unwrap().0), vec![(1, 4, 0, 0), (5, 8, 1, 1)]);
        // line 5 is one line past the first break
        assert_eq!(ranges(&repair(&b, &boundaries(&[5])).unwrap().0), vec![(1, 4, 0, 0), (5, 8, 1, 1)]);
        // line 7 is closer to the end of the book: one scene
        assert_eq!(ranges(&repair(&b, &boundaries(&[7])).unwrap().0), vec![(1, 8, 0, 1)]);
    }

    #[test]
    fn dialogue_free_pages_join_the_previous_scene() {
        // pages 0 and 3, 4 have no dialogue
        let b = book(&[0, 2, 2, 0, 0, 2]);
        let (scenes, _) = repair(&b, &boundaries(&[2, 4])).unwrap();
        assert_eq!(ranges(&scenes), vec![(1, 2, 0, 1), (3, 4, 2, 4), (5, 6, 5, 5)]);
        validate_partition(&b, &scenes).unwrap();
    }

    #[test]
    fn parses_loose_shapes() {
        let p = parse_boundaries("```json\n[3, \"L7\", {\"last_line\": 9, \"rationale\": \" x \"}]\n```").unwrap();
        assert_eq!(p.iter().map(|b| b.last_line).collect::<Vec<_>>(), vec![3, 7, 9]);
        assert_eq!(p[2].rationale, "x");
        assert!(parse_boundaries("{\"scenes\": []}").is_err());
        assert!(parse_boundaries("{\"scenes\": [{\"rationale\": \"x\"}]}").is_err());
    }

    #[test]
    fn retries_then_fails_unrepairable() {
        let b = book(&[3, 3]);
        let model = ScriptedLanguageModel::ok(["not json"]);
        let err = segment_scenes(&b, &model, &SceneExemplar::builtin(), &TemplateSet::default(), &AskPolicy::default())
            .unwrap_err();
        assert!(matches!(err, SceneError::UnrepairableResponse { ref exchanges, .. } if exchanges.len() == 4));
        assert_eq!(model.call_count(), 4);
    }

    #[test]
    fn accepts_after_a_retry() {
        let b = book(&[3, 3]);
        let model = ScriptedLanguageModel::ok(["oops", r#"{"scenes":[{"last_line":3,"rationale":"a"}]}"#]);
        let seg = segment_scenes(&b, &model, &SceneExemplar::builtin(), &TemplateSet::default(), &AskPolicy::default())
            .unwrap();
        assert_eq!(seg.retries(), 1);
        assert_eq!(ranges(&seg.scenes), vec![(1, 3, 0, 0), (4, 6, 1, 1)]);
        assert!(model.requests()[1].user.contains("not valid JSON"));
    }

    #[test]
    fn validation_rejects_gaps() {
        let b = book(&[2, 2]);
        let mut scenes = repair(&b, &boundaries(&[2])).unwrap().0;
        scenes[1].page_range = (2, 2);
        assert!(validate_partition(&b, &scenes).is_err());
    }
}
