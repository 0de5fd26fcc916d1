use std::collections::{BTreeMap, BTreeSet};

use super::{BackendError, ChatRequest, LanguageModel, Task};

/// Deterministic offline chat model.
///
/// It reads the same rendered prompts a hosted model would get, relying on
/// the section headers (`### Transcript to segment`, `### Facial emotions`,
/// `### Pages in this scene`, ...) of the built-in templates, and answers
/// in each stage's output format. Same prompt in, same text out.
#[derive(Debug, Clone)]
pub struct MockLanguageModel {
    /// A scene is closed at the first page break after this many lines.
    pub min_scene_lines: usize,
}

impl Default for MockLanguageModel {
    fn default() -> Self {
        MockLanguageModel { min_scene_lines: 8 }
    }
}

/// `(directive phrase, short caption phrase)` for an emotion label.
fn mood(label: &str) -> (&'static str, &'static str) {
    match label.to_lowercase().as_str() {
        "joy" | "happy" | "happiness" | "joyful" => (
            "a bright, cheerful major-key theme at a lively tempo with pizzicato strings, glockenspiel and light percussion",
            "bright cheerful major-key pizzicato and glockenspiel",
        ),
        "sadness" | "sad" | "sorrow" => (
            "a slow, melancholic minor-key piano melody over soft sustained strings",
            "slow melancholic minor piano with soft strings",
        ),
        "anger" | "angry" => (
            "a fast, intense minor-key cue with driving low strings, heavy percussion and brass stabs",
            "fast intense minor strings and heavy drums",
        ),
        "fear" | "scared" | "afraid" => (
            "a tense, ominous minor-key texture with deep cello drones and sparse piano",
            "tense ominous deep cello drones and sparse piano",
        ),
        "surprise" | "surprised" => (
            "a playful, sparkling theme with staccato woodwinds and bell accents",
            "playful sparkling staccato woodwinds and bells",
        ),
        "disgust" => (
            "a dark, uneasy minor-key texture with dissonant low strings",
            "dark uneasy low strings",
        ),
        _ => (
            "a calm, gentle piano and acoustic guitar theme at a moderate tempo",
            "calm gentle piano and acoustic guitar",
        ),
    }
}

/// Body of the `### <header>` section, up to the next `### ` header.
fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let marker = format!("### {header}");
    let start = text.find(&marker)?;
    let body = &text[start + marker.len()..];
    let body = body.split_once('\n').map_or("", |(_, rest)| rest);
    let end = body.find("\n### ").unwrap_or(body.len());
    Some(body[..end].trim())
}

/// Transcript lines `L<id> | page <p> | <speaker>: <text>`.
fn transcript_lines(block: &str) -> Vec<(u32, usize, String)> {
    block
        .lines()
        .filter_map(|line| {
            let mut parts = line.splitn(3, " | ");
            let id = parts.next()?.trim().strip_prefix('L')?.parse().ok()?;
            let page = parts.next()?.trim().strip_prefix("page ")?.parse().ok()?;
            let rest = parts.next()?;
            let speaker = rest.split_once(':').map_or("", |(s, _)| s).trim().to_string();
            Some((id, page, speaker))
        })
        .collect()
}

/// Emotion lines `page <p>: <character>: <label> (<confidence>); ...`.
fn emotion_labels(block: &str) -> BTreeMap<usize, Vec<String>> {
    let mut out = BTreeMap::new();
    for line in block.lines() {
        let Some(rest) = line.trim().strip_prefix("page ") else { continue };
        let Some((page, faces)) = rest.split_once(':') else { continue };
        let Ok(page) = page.trim().parse::<usize>() else { continue };
        let labels = faces
            .split(';')
            .filter_map(|face| {
                let (_, label) = face.rsplit_once(": ")?;
                let label = label.split(" (").next()?.trim();
                (!label.is_empty()).then(|| label.to_string())
            })
            .collect();
        out.insert(page, labels);
    }
    out
}

/// Most frequent label; ties go to the lexicographically smallest.
fn dominant<'a>(labels: impl IntoIterator<Item = &'a String>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|(_, c)| *c == best)
        .map(|(l, _)| l.to_string())
}

fn truncate_words(text: &str, max_chars: usize) -> String {
    let mut out = String::new();
    for word in text.split_whitespace() {
        let extra = if out.is_empty() { word.len() } else { word.len() + 1 };
        if out.chars().count() + extra > max_chars {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn number_after(text: &str, prefix: &str) -> Option<usize> {
    let start = text.find(prefix)? + prefix.len();
    text[start..]
        .trim_start()
        .split(|c: char| !c.is_ascii_digit())
        .next()?
        .parse()
        .ok()
}

impl MockLanguageModel {
    fn segment(&self, prompt: &str) -> Result<String, BackendError> {
        let block = section(prompt, "Transcript to segment")
            .ok_or_else(|| BackendError("mock: no transcript section in prompt".into()))?;
        let lines = transcript_lines(block);
        if lines.is_empty() {
            return Err(BackendError("mock: transcript is empty".into()));
        }
        let named = |s: &String| !s.is_empty() && s != "unknown" && s != "(narration)";
        let mut scenes = Vec::new();
        let mut count = 0;
        let mut cast: BTreeSet<String> = BTreeSet::new();
        for (i, (id, page, speaker)) in lines.iter().enumerate() {
            count += 1;
            if named(speaker) {
                cast.insert(speaker.clone());
            }
            let Some((_, next_page, _)) = lines.get(i + 1) else { break };
            if next_page == page {
                continue;
            }
            let next_cast: BTreeSet<String> = lines[i + 1..]
                .iter()
                .take_while(|(_, p, _)| p == next_page)
                .map(|(_, _, s)| s.clone())
                .filter(named)
                .collect();
            let cast_change = !next_cast.is_empty() && cast.is_disjoint(&next_cast);
            if count >= self.min_scene_lines || (count >= 3 && cast_change) {
                let rationale = if cast_change {
                    format!(
                        "the cast changes from {} to {}",
                        cast.iter().cloned().collect::<Vec<_>>().join(", "),
                        next_cast.iter().cloned().collect::<Vec<_>>().join(", ")
                    )
                } else {
                    format!("the conversation closes at the end of page {page}")
                };
                scenes.push(serde_json::json!({"last_line": id, "rationale": rationale}));
                count = 0;
                cast.clear();
            }
        }
        let last = lines.last().map(|(id, _, _)| *id).unwrap_or(0);
        scenes.push(serde_json::json!({"last_line": last, "rationale": "the transcript ends"}));
        Ok(serde_json::json!({ "scenes": scenes }).to_string())
    }

    fn directive(&self, prompt: &str) -> String {
        let emotions = section(prompt, "Facial emotions").map(emotion_labels).unwrap_or_default();
        let labels: Vec<String> = emotions.values().flatten().cloned().collect();
        let first = dominant(&labels).unwrap_or_else(|| "neutral".into());
        let second = dominant(labels.iter().filter(|l| **l != first));
        let pages = emotions.len().max(1);
        let mut text = format!(
            "Score this scene with {}. ",
            mood(&first).0
        );
        if let Some(second) = second {
            text.push_str(&format!(
                "Let moments of {second} colour the middle of the scene with {}. ",
                mood(&second).1
            ));
        }
        text.push_str(&format!(
            "The music should follow the {pages} pages of dialogue, starting quietly, building towards the emotional peak of the exchange and settling again at the end so that it hands over smoothly to the next scene. Keep the arrangement uncluttered so that it stays underneath the reading experience."
        ));
        text
    }

    fn captions(&self, prompt: &str) -> Result<String, BackendError> {
        let pages: Vec<usize> = section(prompt, "Pages in this scene")
            .and_then(|b| b.lines().next())
            .map(|b| {
                b.split(|c: char| c == ',' || c.is_whitespace())
                    .filter_map(|s| s.trim().parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        if pages.is_empty() {
            return Err(BackendError("mock: no page list in prompt".into()));
        }
        let max_chars = number_after(prompt, "at most").unwrap_or(300);
        let directive = section(prompt, "Scene music directive").unwrap_or_default();
        let head: String = directive.split_whitespace().take(14).collect::<Vec<_>>().join(" ");
        let emotions = section(prompt, "Facial emotions").map(emotion_labels).unwrap_or_default();
        let scene_label = dominant(emotions.values().flatten());
        let n = pages.len();
        let mut out = String::new();
        for (k, page) in pages.iter().enumerate() {
            let label = emotions
                .get(page)
                .and_then(|l| dominant(l))
                .or_else(|| scene_label.clone())
                .unwrap_or_else(|| "neutral".into());
            let caption = format!("{}, part {} of {n}, following: {head}", mood(&label).1, k + 1);
            out.push_str(&format!("{page}: {}\n", truncate_words(&caption, max_chars)));
        }
        Ok(out)
    }

    fn describe(&self, prompt: &str) -> String {
        let page = number_after(prompt, "manga page").unwrap_or(0);
        let dialogue = section(prompt, "Dialogue").unwrap_or_default();
        let lines = transcript_lines(dialogue);
        if lines.is_empty() {
            return format!("Page {page} has no dialogue; the panels carry the story through art alone, and the mood is quiet.");
        }
        let speakers: BTreeSet<&str> = lines.iter().map(|(_, _, s)| s.as_str()).collect();
        let mood = if dialogue.matches('!').count() >= 2 {
            "the exchange is loud and agitated"
        } else if dialogue.contains("...") {
            "the mood is quiet and hesitant"
        } else if dialogue.contains('?') {
            "the mood is curious and light"
        } else {
            "the mood is calm"
        };
        format!(
            "Page {page} shows {} lines of dialogue between {}; {mood}.",
            lines.len(),
            speakers.into_iter().collect::<Vec<_>>().join(", ")
        )
    }

    fn baseline_caption(&self, prompt: &str) -> String {
        let description = section(prompt, "Page description").unwrap_or_default();
        let max_chars = number_after(prompt, "at most").unwrap_or(300);
        let phrase = if description.contains("agitated") {
            "fast intense strings and heavy drums"
        } else if description.contains("hesitant") || description.contains("quiet") {
            "slow soft piano, melancholic and quiet"
        } else if description.contains("curious") {
            "playful pizzicato strings and light woodwinds"
        } else {
            "calm gentle piano at a moderate tempo"
        };
        truncate_words(&format!("{phrase}, background score for a manga page"), max_chars)
    }
}

impl LanguageModel for MockLanguageModel {
    fn id(&self) -> String {
        "mock-llm@1".into()
    }

    fn supports_images(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        match request.task {
            Task::SceneSegmentation => self.segment(&request.user),
            Task::SceneDirective => Ok(self.directive(&request.user)),
            Task::PageCaptions => self.captions(&request.user),
            Task::PageDescription => Ok(self.describe(&request.user)),
            Task::BaselineCaption => Ok(self.baseline_caption(&request.user)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let text = "intro\n### A\nfirst\nsecond\n### B\nthird\n";
        assert_eq!(section(text, "A"), Some("first\nsecond"));
        assert_eq!(section(text, "B"), Some("third"));
        assert_eq!(section(text, "C"), None);
    }

    #[test]
    fn emotion_lines() {
        let block = "page 3: Aki: joy (0.82); unknown: sadness (0.41)\npage 4: no faces";
        let parsed = emotion_labels(block);
        assert_eq!(parsed[&3], vec!["joy", "sadness"]);
        assert!(parsed[&4].is_empty());
    }

    #[test]
    fn dominant_breaks_ties_lexicographically() {
        let labels: Vec<String> = ["sadness", "joy"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dominant(&labels).as_deref(), Some("joy"));
    }

    #[test]
    fn truncation_respects_limit() {
        let t = truncate_words("one two three four", 9);
        assert_eq!(t, "one two");
    }
}
