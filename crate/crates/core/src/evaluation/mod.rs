//! Survey analysis for the listening studies.
//!
//! Responses are 1–5 Likert scores keyed by participant, stimulus and
//! metric. Each stimulus is one scene excerpt paired with one condition's
//! music, so a participant's stimuli cover every condition. The omnibus test
//! is a one-way repeated-measures ANOVA per metric on the participant ×
//! condition table of per-participant means, reported uncorrected and with
//! the Greenhouse–Geisser correction. Bonferroni-corrected paired t-tests
//! back up pairwise claims.
//!
//! CSV header: `participant_id,stimulus_id,condition,metric,score`.

pub mod anova;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use anova::{paired_t, permutation_p, rm_anova_table, AnovaStats, PairedT};

pub use crate::config::Condition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyMetric {
    Relevancy,
    Quality,
    Consistency,
}

impl SurveyMetric {
    pub const ALL: [SurveyMetric; 3] = [SurveyMetric::Relevancy, SurveyMetric::Quality, SurveyMetric::Consistency];

    pub fn as_str(self) -> &'static str {
        match self {
            SurveyMetric::Relevancy => "relevancy",
            SurveyMetric::Quality => "quality",
            SurveyMetric::Consistency => "consistency",
        }
    }
}

impl std::fmt::Display for SurveyMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant_id: String,
    pub stimulus_id: String,
    pub condition: Condition,
    pub metric: SurveyMetric,
    pub score: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    WithinScene,
    BetweenScenes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub study: Study,
    pub n_participants: usize,
    /// Stimuli each participant rates per condition.
    pub n_scenes: usize,
    pub conditions: Vec<Condition>,
}

impl StudyDesign {
    pub fn within_scene() -> Self {
        StudyDesign {
            study: Study::WithinScene,
            n_participants: 22,
            n_scenes: 6,
            conditions: Condition::ALL.to_vec(),
        }
    }

    pub fn between_scenes() -> Self {
        StudyDesign {
            study: Study::BetweenScenes,
            n_participants: 15,
            n_scenes: 6,
            conditions: Condition::ALL.to_vec(),
        }
    }

    pub fn for_study(study: Study) -> Self {
        match study {
            Study::WithinScene => Self::within_scene(),
            Study::BetweenScenes => Self::between_scenes(),
        }
    }
}

/// What to do with participants whose responses do not cover the design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Strict,
    /// Drop every participant with a missing or extra cell.
    Listwise,
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("cannot read responses: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Csv { row: u64, message: String },
    #[error("row {row}: score {score} is outside 1..=5")]
    InvalidScore { row: u64, score: i64 },
    #[error("duplicate response for participant {participant_id}, stimulus {stimulus_id}, metric {metric}")]
    DuplicateCell {
        participant_id: String,
        stimulus_id: String,
        metric: SurveyMetric,
    },
    #[error("stimulus {stimulus_id} appears under both {first} and {second}")]
    ConflictingCondition {
        stimulus_id: String,
        first: Condition,
        second: Condition,
    },
    #[error("incomplete design: {0}")]
    IncompleteDesign(String),
    #[error("cannot build synthetic responses: {0}")]
    Synthetic(String),
}

#[derive(Deserialize)]
struct RawRow {
    participant_id: String,
    stimulus_id: String,
    condition: String,
    metric: String,
    score: String,
}

/// Parse and validate a response CSV.
pub fn parse_responses(reader: impl Read) -> Result<Vec<SurveyResponse>, EvaluationError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in csv.deserialize::<RawRow>().enumerate() {
        // Header is row 1.
        let row = i as u64 + 2;
        let raw = rec.map_err(|e| EvaluationError::Csv { row, message: e.to_string() })?;
        let condition = raw
            .condition
            .parse::<Condition>()
            .map_err(|message| EvaluationError::Csv { row, message })?;
        let metric = match raw.metric.to_ascii_lowercase().as_str() {
            "relevancy" | "relevance" => SurveyMetric::Relevancy,
            "quality" => SurveyMetric::Quality,
            "consistency" => SurveyMetric::Consistency,
            other => {
                return Err(EvaluationError::Csv {
                    row,
                    message: format!("unknown metric {other:?}"),
                })
            }
        };
        let score: i64 = raw.score.parse().map_err(|_| EvaluationError::Csv {
            row,
            message: format!("score {:?} is not an integer", raw.score),
        })?;
        if !(1..=5).contains(&score) {
            return Err(EvaluationError::InvalidScore { row, score });
        }
        if raw.participant_id.is_empty() || raw.stimulus_id.is_empty() {
            return Err(EvaluationError::Csv {
                row,
                message: "participant_id and stimulus_id must not be empty".into(),
            });
        }
        out.push(SurveyResponse {
            participant_id: raw.participant_id,
            stimulus_id: raw.stimulus_id,
            condition,
            metric,
            score: score as u8,
        });
    }
    check_unique(&out)?;
    Ok(out)
}

pub fn load_responses(path: &Path) -> Result<Vec<SurveyResponse>, EvaluationError> {
    parse_responses(std::fs::File::open(path)?)
}

pub fn write_responses(path: &Path, responses: &[SurveyResponse]) -> Result<(), EvaluationError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvaluationError::Io(e.into()))?;
    for r in responses {
        w.serialize(r).map_err(|e| EvaluationError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_unique(responses: &[SurveyResponse]) -> Result<(), EvaluationError> {
    let mut seen = BTreeSet::new();
    let mut stimulus_condition: BTreeMap<&str, Condition> = BTreeMap::new();
    for r in responses {
        if !seen.insert((&r.participant_id, &r.stimulus_id, r.metric)) {
            return Err(EvaluationError::DuplicateCell {
                participant_id: r.participant_id.clone(),
                stimulus_id: r.stimulus_id.clone(),
                metric: r.metric,
            });
        }
        let first = *stimulus_condition.entry(&r.stimulus_id).or_insert(r.condition);
        if first != r.condition {
            return Err(EvaluationError::ConflictingCondition {
                stimulus_id: r.stimulus_id.clone(),
                first,
                second: r.condition,
            });
        }
    }
    Ok(())
}

/// Grand mean over all (participant, stimulus) cells of each condition.
pub fn condition_means(responses: &[SurveyResponse], metric: SurveyMetric) -> BTreeMap<Condition, f64> {
    let mut acc: BTreeMap<Condition, (f64, usize)> = BTreeMap::new();
    for r in responses.iter().filter(|r| r.metric == metric) {
        let e = acc.entry(r.condition).or_default();
        e.0 += f64::from(r.score);
        e.1 += 1;
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Per-participant condition means, rows ordered by participant id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTable {
    pub participants: Vec<String>,
    pub conditions: Vec<Condition>,
    pub rows: Vec<Vec<f64>>,
    /// Participants removed under listwise deletion.
    pub dropped: Vec<String>,
}

pub fn subject_table(
    responses: &[SurveyResponse],
    metric: SurveyMetric,
    design: &StudyDesign,
    policy: MissingPolicy,
) -> Result<SubjectTable, EvaluationError> {
    check_unique(responses)?;
    if design.conditions.len() < 2 {
        return Err(EvaluationError::IncompleteDesign("need at least two conditions".into()));
    }
    let mut by_participant: BTreeMap<&str, BTreeMap<Condition, Vec<(&str, u8)>>> = BTreeMap::new();
    for r in responses.iter().filter(|r| r.metric == metric) {
        by_participant
            .entry(&r.participant_id)
            .or_default()
            .entry(r.condition)
            .or_default()
            .push((&r.stimulus_id, r.score));
    }
    // The stimulus set shared by complete participants: the most common one.
    let mut stimulus_sets: BTreeMap<BTreeSet<&str>, usize> = BTreeMap::new();
    for cells in by_participant.values() {
        let set: BTreeSet<&str> = cells.values().flatten().map(|(s, _)| *s).collect();
        *stimulus_sets.entry(set).or_default() += 1;
    }
    let reference = stimulus_sets
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(s, _)| s.clone())
        .unwrap_or_default();

    let mut table = SubjectTable {
        participants: Vec::new(),
        conditions: design.conditions.clone(),
        rows: Vec::new(),
        dropped: Vec::new(),
    };
    for (pid, cells) in &by_participant {
        let problem = participant_problem(cells, &reference, design);
        match (problem, policy) {
            (Some(p), MissingPolicy::Strict) => {
                return Err(EvaluationError::IncompleteDesign(format!("participant {pid}: {p}")))
            }
            (Some(_), MissingPolicy::Listwise) => table.dropped.push(pid.to_string()),
            (None, _) => {
                table.participants.push(pid.to_string());
                table.rows.push(
                    design
                        .conditions
                        .iter()
                        .map(|c| {
                            let v = &cells[c];
                            v.iter().map(|(_, s)| f64::from(*s)).sum::<f64>() / v.len() as f64
                        })
                        .collect(),
                );
            }
        }
    }
    if policy == MissingPolicy::Strict && table.participants.len() != design.n_participants {
        return Err(EvaluationError::IncompleteDesign(format!(
            "expected {} participants rating {metric}, found {}",
            design.n_participants,
            table.participants.len()
        )));
    }
    if table.participants.len() < 2 {
        return Err(EvaluationError::IncompleteDesign(format!(
            "{} complete participants rating {metric}; at least two are needed",
            table.participants.len()
        )));
    }
    Ok(table)
}

fn participant_problem(
    cells: &BTreeMap<Condition, Vec<(&str, u8)>>,
    reference: &BTreeSet<&str>,
    design: &StudyDesign,
) -> Option<String> {
    for c in &design.conditions {
        let n = cells.get(c).map_or(0, Vec::len);
        if n != design.n_scenes {
            return Some(format!("{n} stimuli under {c}, expected {}", design.n_scenes));
        }
    }
    if let Some(extra) = cells.keys().find(|c| !design.conditions.contains(c)) {
        return Some(format!("responses under {extra}, which is not in the design"));
    }
    let set: BTreeSet<&str> = cells.values().flatten().map(|(s, _)| *s).collect();
    if &set != reference {
        return Some("rated a different set of stimuli than the other participants".into());
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub first: Condition,
    pub second: Condition,
    pub test: PairedT,
    /// Bonferroni-adjusted over all pairs of the design's conditions.
    pub p_bonferroni: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub metric: SurveyMetric,
    pub condition_means: BTreeMap<Condition, f64>,
    pub stats: AnovaStats,
    pub pairwise: Vec<PairwiseComparison>,
    pub dropped_participants: Vec<String>,
}

impl AnovaResult {
    pub fn f(&self) -> f64 {
        self.stats.f
    }

    pub fn p(&self) -> f64 {
        self.stats.p
    }

    pub fn df(&self) -> (f64, f64) {
        self.stats.df
    }
}

pub fn rm_anova(
    responses: &[SurveyResponse],
    metric: SurveyMetric,
    design: &StudyDesign,
    policy: MissingPolicy,
) -> Result<AnovaResult, EvaluationError> {
    let table = subject_table(responses, metric, design, policy)?;
    let stats = rm_anova_table(&table.rows);
    let kept: BTreeSet<&str> = table.participants.iter().map(String::as_str).collect();
    let used: Vec<SurveyResponse> = responses
        .iter()
        .filter(|r| kept.contains(r.participant_id.as_str()) && design.conditions.contains(&r.condition))
        .cloned()
        .collect();
    let k = design.conditions.len();
    let n_pairs = (k * (k - 1) / 2) as f64;
    let mut pairwise = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let col = |j: usize| table.rows.iter().map(|r| r[j]).collect::<Vec<_>>();
            let test = paired_t(&col(a), &col(b));
            pairwise.push(PairwiseComparison {
                first: design.conditions[a],
                second: design.conditions[b],
                p_bonferroni: (test.p * n_pairs).min(1.0),
                test,
            });
        }
    }
    Ok(AnovaResult {
        metric,
        condition_means: condition_means(&used, metric),
        stats,
        pairwise,
        dropped_participants: table.dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub design: StudyDesign,
    pub policy: MissingPolicy,
    pub n_responses: usize,
    pub results: Vec<AnovaResult>,
}

/// ANOVA for every metric present in the responses.
pub fn evaluate(
    responses: &[SurveyResponse],
    design: &StudyDesign,
    policy: MissingPolicy,
) -> Result<EvaluationReport, EvaluationError> {
    let metrics: BTreeSet<SurveyMetric> = responses.iter().map(|r| r.metric).collect();
    let results = metrics
        .into_iter()
        .map(|m| rm_anova(responses, m, design, policy))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluationReport {
        design: design.clone(),
        policy,
        n_responses: responses.len(),
        results,
    })
}

impl EvaluationReport {
    /// Mean-per-metric table, one row per metric and one column per condition.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "metric");
        for c in &self.design.conditions {
            let _ = write!(s, "{:>10}", c.as_str());
        }
        let _ = writeln!(s, "{:>10}{:>9}{:>11}{:>11}", "F", "df", "p", "p (GG)");
        for r in &self.results {
            let _ = write!(s, "{:<12}", r.metric.as_str());
            for c in &self.design.conditions {
                let _ = write!(s, "{:>10.2}", r.condition_means.get(c).copied().unwrap_or(f64::NAN));
            }
            let df = format!("{}/{}", r.stats.df.0, r.stats.df.1);
            let _ = writeln!(
                s,
                "{:>10.3}{:>9}{:>11}{:>11}",
                r.stats.f,
                df,
                format_p(r.stats.p),
                format_p(r.stats.p_gg)
            );
        }
        for r in &self.results {
            for pw in &r.pairwise {
                let _ = writeln!(
                    s,
                    "{:<12}{} vs {}: diff {:+.3}, t {:.3}, p (Bonferroni) {}",
                    r.metric.as_str(),
                    pw.first,
                    pw.second,
                    pw.test.mean_difference,
                    pw.test.t,
                    format_p(pw.p_bonferroni)
                );
            }
        }
        s
    }
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Continuous subject × condition table: a per-subject offset shared across
/// conditions plus independent N(0, sigma) noise per cell.
pub fn synthetic_table(means: &[f64], n_subjects: usize, sigma: f64, subject_sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let offset = Normal::new(0.0, subject_sd).expect("finite subject sd");
    (0..n_subjects)
        .map(|_| {
            let o = offset.sample(&mut rng);
            means.iter().map(|m| m + o + noise.sample(&mut rng)).collect()
        })
        .collect()
}

/// Likert responses whose per-condition grand means are exactly `means`.
///
/// Each condition needs `mean × participants × stimuli` to be a whole number
/// of points between 1 and 5 per cell. Scores are the floor of the mean with
/// the remaining points spread over a seeded shuffle of the cells.
pub fn synthetic_likert(
    means: &[(Condition, f64)],
    metric: SurveyMetric,
    n_participants: usize,
    stimuli_per_condition: usize,
    seed: u64,
) -> Result<Vec<SurveyResponse>, EvaluationError> {
    use rand::seq::SliceRandom;
    let cells = n_participants * stimuli_per_condition;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cells * means.len());
    for (c, m) in means {
        let total = m * cells as f64;
        let points = total.round();
        if (total - points).abs() > 1e-6 {
            return Err(EvaluationError::Synthetic(format!(
                "mean {m} for {c} needs {total} points over {cells} cells, not a whole number"
            )));
        }
        if !(1.0..=5.0).contains(m) {
            return Err(EvaluationError::Synthetic(format!("mean {m} for {c} is outside 1..=5")));
        }
        let base = m.floor().min(4.0) as u8;
        let extra = points as usize - base as usize * cells;
        let mut scores = vec![base; cells];
        for s in scores.iter_mut().take(extra) {
            *s += 1;
        }
        scores.shuffle(&mut rng);
        for p in 0..n_participants {
            for s in 0..stimuli_per_condition {
                out.push(SurveyResponse {
                    participant_id: format!("p{:02}", p + 1),
                    stimulus_id: format!("s{}-{c}", s + 1),
                    condition: *c,
                    metric,
                    score: scores[p * stimuli_per_condition + s],
                });
            }
        }
    }
    Ok(out)
}
