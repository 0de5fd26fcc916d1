//! Stage instances of a run and the staleness rule.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::stages::{CaptionOutput, SegmentOutput};
use super::store::RunStore;
use super::{InputDigest, OrchestratorError, RunManifest, Stage, StageArtifact, StageStatus};
use crate::assembly::TransitionMode;
use crate::config::Condition;
use crate::corpus::Book;
use crate::digest::json_digest;
use crate::scenes::{scene_of_page, Scene};

/// Pseudo-artifact id for the run's book snapshot.
pub const BOOK: &str = "book";

/// The part of an input that a stage instance consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Whole,
    /// One scene record of the segmentation.
    Scene(u32),
    /// One page's entry of a scene's captions.
    PageCaption(usize),
    /// One page of the book with its dialogue.
    BookPage(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub artifact_id: String,
    pub projection: Projection,
}

impl InputRef {
    fn whole(id: impl Into<String>) -> Self {
        InputRef {
            artifact_id: id.into(),
            projection: Projection::Whole,
        }
    }

    fn part(id: impl Into<String>, projection: Projection) -> Self {
        InputRef {
            artifact_id: id.into(),
            projection,
        }
    }

    pub fn is_book(&self) -> bool {
        self.artifact_id == BOOK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub artifact_id: String,
    pub stage: Stage,
    pub scene_id: Option<u32>,
    pub page_index: Option<usize>,
    pub inputs: Vec<InputRef>,
}

/// Instances in topological order. `settled` is false while the set of
/// instances still depends on an artifact that does not exist yet.
pub struct Plan {
    pub nodes: Vec<NodeSpec>,
    pub settled: bool,
}

fn node(stage: Stage, artifact_id: String, scene_id: Option<u32>, page_index: Option<usize>, inputs: Vec<InputRef>) -> NodeSpec {
    NodeSpec {
        artifact_id,
        stage,
        scene_id,
        page_index,
        inputs,
    }
}

pub fn build(manifest: &RunManifest, store: &RunStore) -> Result<Plan, OrchestratorError> {
    let pages = &manifest.pages;
    let continuation = manifest.config.music.transition == TransitionMode::Continuation;
    let mut nodes = Vec::new();
    let mut settled = true;
    let synth_inputs = |p: usize, caption: InputRef, same_group: bool| {
        let mut inputs = vec![caption];
        if continuation && same_group && p > 0 && pages.contains(&(p - 1)) {
            inputs.push(InputRef::whole(Stage::Synth.page_artifact(p - 1)));
        }
        inputs
    };
    match manifest.condition {
        Condition::M2m => {
            nodes.push(node(Stage::Segment, "segment".into(), None, None, vec![InputRef::whole(BOOK)]));
            match store.read_artifact("segment")? {
                None => settled = false,
                Some(seg) => {
                    let scenes = seg.payload::<SegmentOutput>()?.scenes;
                    let active: Vec<&Scene> = scenes
                        .iter()
                        .filter(|s| pages.iter().any(|p| s.contains_page(*p)))
                        .collect();
                    let scene_input = |s: &Scene| InputRef::part("segment", Projection::Scene(s.scene_id));
                    for s in &active {
                        nodes.push(node(
                            Stage::Emotion,
                            Stage::Emotion.scene_artifact(s.scene_id),
                            Some(s.scene_id),
                            None,
                            vec![scene_input(s)],
                        ));
                    }
                    for s in &active {
                        nodes.push(node(
                            Stage::Directive,
                            Stage::Directive.scene_artifact(s.scene_id),
                            Some(s.scene_id),
                            None,
                            vec![scene_input(s), InputRef::whole(Stage::Emotion.scene_artifact(s.scene_id))],
                        ));
                    }
                    for s in &active {
                        nodes.push(node(
                            Stage::Caption,
                            Stage::Caption.scene_artifact(s.scene_id),
                            Some(s.scene_id),
                            None,
                            vec![
                                scene_input(s),
                                InputRef::whole(Stage::Directive.scene_artifact(s.scene_id)),
                                InputRef::whole(Stage::Emotion.scene_artifact(s.scene_id)),
                            ],
                        ));
                    }
                    for &p in pages {
                        let s = scene_of_page(&scenes, p).ok_or_else(|| OrchestratorError::CorruptArtifact {
                            artifact_id: "segment".into(),
                            message: format!("no scene contains page {p}"),
                        })?;
                        let same_scene = p > 0 && s.contains_page(p - 1);
                        let caption = InputRef::part(Stage::Caption.scene_artifact(s.scene_id), Projection::PageCaption(p));
                        nodes.push(node(
                            Stage::Synth,
                            Stage::Synth.page_artifact(p),
                            Some(s.scene_id),
                            Some(p),
                            synth_inputs(p, caption, same_scene),
                        ));
                    }
                    nodes.push(assemble_node(pages.iter().map(|p| Stage::Synth.page_artifact(*p))));
                }
            }
        }
        Condition::Baseline => {
            for &p in pages {
                nodes.push(node(
                    Stage::Describe,
                    Stage::Describe.page_artifact(p),
                    None,
                    Some(p),
                    vec![InputRef::part(BOOK, Projection::BookPage(p))],
                ));
            }
            for &p in pages {
                nodes.push(node(
                    Stage::BaselineCaption,
                    Stage::BaselineCaption.page_artifact(p),
                    None,
                    Some(p),
                    vec![InputRef::whole(Stage::Describe.page_artifact(p))],
                ));
            }
            for &p in pages {
                let caption = InputRef::whole(Stage::BaselineCaption.page_artifact(p));
                nodes.push(node(Stage::Synth, Stage::Synth.page_artifact(p), None, Some(p), synth_inputs(p, caption, true)));
            }
            nodes.push(assemble_node(pages.iter().map(|p| Stage::Synth.page_artifact(*p))));
        }
        Condition::Random => {
            nodes.push(node(
                Stage::RandomSelect,
                "random_select".into(),
                None,
                None,
                vec![InputRef::whole(BOOK)],
            ));
            nodes.push(assemble_node(["random_select".to_string()]));
        }
    }
    Ok(Plan { nodes, settled })
}

fn assemble_node(inputs: impl IntoIterator<Item = String>) -> NodeSpec {
    node(
        Stage::Assemble,
        "assemble".into(),
        None,
        None,
        inputs.into_iter().map(InputRef::whole).collect(),
    )
}

/// Reads each artifact at most once while computing digests.
pub struct DigestCache<'a> {
    book: &'a Book,
    store: &'a RunStore,
    artifacts: HashMap<String, Option<StageArtifact>>,
}

impl<'a> DigestCache<'a> {
    pub fn new(book: &'a Book, store: &'a RunStore) -> Self {
        DigestCache {
            book,
            store,
            artifacts: HashMap::new(),
        }
    }

    pub fn artifact(&mut self, id: &str) -> Result<Option<&StageArtifact>, OrchestratorError> {
        if !self.artifacts.contains_key(id) {
            let a = self.store.read_artifact(id)?;
            self.artifacts.insert(id.to_string(), a);
        }
        Ok(self.artifacts[id].as_ref())
    }

    /// Current digest of one input, or `None` when it is missing.
    pub fn digest(&mut self, input: &InputRef) -> Result<Option<String>, OrchestratorError> {
        if input.is_book() {
            let book = self.book;
            return Ok(Some(match input.projection {
                Projection::BookPage(p) => {
                    let lines: Vec<_> = book.lines_on_page(p).collect();
                    json_digest(&(book.pages.get(p), lines))
                }
                _ => json_digest(book),
            }));
        }
        let Some(a) = self.artifact(&input.artifact_id)? else {
            return Ok(None);
        };
        Ok(match input.projection {
            Projection::Whole | Projection::BookPage(_) => Some(a.output_digest.clone()),
            Projection::Scene(id) => a
                .payload::<SegmentOutput>()?
                .scenes
                .iter()
                .find(|s| s.scene_id == id)
                .map(json_digest),
            Projection::PageCaption(p) => a
                .payload::<CaptionOutput>()?
                .captions
                .iter()
                .find(|c| c.page_index == p)
                .map(json_digest),
        })
    }

    pub fn input_digests(&mut self, node: &NodeSpec) -> Result<Option<Vec<InputDigest>>, OrchestratorError> {
        let mut out = Vec::with_capacity(node.inputs.len());
        for input in &node.inputs {
            match self.digest(input)? {
                Some(digest) => out.push(InputDigest {
                    artifact_id: input.artifact_id.clone(),
                    digest,
                }),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }
}

/// Status of every planned instance. Failures are layered on by the caller.
pub fn statuses(plan: &Plan, book: &Book, store: &RunStore) -> Result<BTreeMap<String, StageStatus>, OrchestratorError> {
    let mut cache = DigestCache::new(book, store);
    let mut out: BTreeMap<String, StageStatus> = BTreeMap::new();
    for n in &plan.nodes {
        let status = match cache.artifact(&n.artifact_id)?.cloned() {
            None => StageStatus::Pending,
            Some(a) => {
                let inputs_done = n
                    .inputs
                    .iter()
                    .all(|i| i.is_book() || out.get(&i.artifact_id) == Some(&StageStatus::Done));
                if !inputs_done {
                    StageStatus::Stale
                } else {
                    match cache.input_digests(n)? {
                        Some(current) if current == a.input_digests => StageStatus::Done,
                        _ => StageStatus::Stale,
                    }
                }
            }
        };
        out.insert(n.artifact_id.clone(), status);
    }
    Ok(out)
}

/// Every planned instance that transitively consumes `artifact_id`.
pub fn downstream(plan: &Plan, artifact_id: &str) -> Vec<String> {
    let mut hit: Vec<String> = vec![artifact_id.to_string()];
    for n in &plan.nodes {
        if n.inputs.iter().any(|i| hit.contains(&i.artifact_id)) {
            hit.push(n.artifact_id.clone());
        }
    }
    hit.remove(0);
    hit
}
