//! One-way repeated-measures ANOVA on a subject × condition table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

/// Residual sums of squares below this fraction of the total are treated as zero.
const ZERO_SS: f64 = 1e-12;

/// Sum-of-squares decomposition and omnibus test for one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaStats {
    pub n_subjects: usize,
    pub n_conditions: usize,
    pub ss_conditions: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
    pub ss_total: f64,
    /// `f64::INFINITY` when the residuals vanish but the condition effect does not.
    #[serde(with = "finite_or_inf")]
    pub f: f64,
    pub df: (f64, f64),
    pub p: f64,
    /// Set when the residual variance is zero, so F and p are conventions.
    pub degenerate: bool,
    /// Greenhouse–Geisser sphericity estimate, in `[1/(k-1), 1]`.
    pub gg_epsilon: f64,
    pub p_gg: f64,
}

mod finite_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Rows are subjects, columns are conditions. Panics on ragged input or
/// fewer than two subjects or conditions; callers validate the design first.
pub fn rm_anova_table(rows: &[Vec<f64>]) -> AnovaStats {
    let n = rows.len();
    assert!(n >= 2, "need at least two subjects");
    let k = rows[0].len();
    assert!(k >= 2, "need at least two conditions");
    assert!(rows.iter().all(|r| r.len() == k), "ragged table");

    let grand = mean(rows.iter().flatten().copied());
    let cond_means: Vec<f64> = (0..k).map(|j| mean(rows.iter().map(|r| r[j]))).collect();
    let subj_means: Vec<f64> = rows.iter().map(|r| mean(r.iter().copied())).collect();

    let ss_total: f64 = rows.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ss_conditions = n as f64 * cond_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subjects = k as f64 * subj_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_error = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, x) in r.iter().enumerate() {
            ss_error += (x - cond_means[j] - subj_means[i] + grand).powi(2);
        }
    }

    let df1 = (k - 1) as f64;
    let df2 = ((k - 1) * (n - 1)) as f64;
    let scale = ss_total.max(f64::MIN_POSITIVE);
    let no_effect = ss_conditions <= ZERO_SS * scale || ss_total == 0.0;
    let no_error = ss_error <= ZERO_SS * scale;
    let gg_epsilon = greenhouse_geisser(rows, &cond_means);
    let (f, p, p_gg, degenerate) = if no_effect {
        (0.0, 1.0, 1.0, no_error)
    } else if no_error {
        (f64::INFINITY, 0.0, 0.0, true)
    } else {
        let f = (ss_conditions / df1) / (ss_error / df2);
        let p = f_upper_tail(f, df1, df2);
        let p_gg = f_upper_tail(f, df1 * gg_epsilon, df2 * gg_epsilon);
        (f, p, p_gg, false)
    };
    AnovaStats {
        n_subjects: n,
        n_conditions: k,
        ss_conditions,
        ss_subjects,
        ss_error,
        ss_total,
        f,
        df: (df1, df2),
        p,
        degenerate,
        gg_epsilon,
        p_gg,
    }
}

fn f_upper_tail(f: f64, df1: f64, df2: f64) -> f64 {
    let dist = FisherSnedecor::new(df1, df2).expect("positive degrees of freedom");
    dist.sf(f).clamp(0.0, 1.0)
}

/// Box's epsilon from the double-centred condition covariance matrix.
fn greenhouse_geisser(rows: &[Vec<f64>], cond_means: &[f64]) -> f64 {
    let n = rows.len();
    let k = cond_means.len();
    let mut cov = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            cov[a][b] = rows
                .iter()
                .map(|r| (r[a] - cond_means[a]) * (r[b] - cond_means[b]))
                .sum::<f64>()
                / (n - 1) as f64;
        }
    }
    let row_means: Vec<f64> = cov.iter().map(|r| mean(r.iter().copied())).collect();
    let all = mean(row_means.iter().copied());
    let mut trace = 0.0;
    let mut sq = 0.0;
    for a in 0..k {
        for b in 0..k {
            let c = cov[a][b] - row_means[a] - row_means[b] + all;
            if a == b {
                trace += c;
            }
            sq += c * c;
        }
    }
    let lower = 1.0 / (k - 1) as f64;
    if sq <= 0.0 {
        return 1.0;
    }
    (trace * trace / ((k - 1) as f64 * sq)).clamp(lower, 1.0)
}

/// Permutation p-value for the omnibus F: condition labels are shuffled
/// independently within each subject. Returns `(hits + 1) / (shuffles + 1)`.
pub fn permutation_p(rows: &[Vec<f64>], shuffles: usize, seed: u64) -> f64 {
    let observed = rm_anova_table(rows).f;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Vec<f64>> = rows.to_vec();
    let tolerance = 1e-12 * observed.abs().max(1.0);
    let mut hits = 0usize;
    for _ in 0..shuffles {
        for r in work.iter_mut() {
            r.shuffle(&mut rng);
        }
        if fast_f(&work) >= observed - tolerance {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (shuffles + 1) as f64
}

/// F only; subject sums are permutation-invariant so only condition terms change.
fn fast_f(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let grand = mean(rows.iter().flatten().copied());
    let ss_total: f64 = rows.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ss_subjects: f64 = k as f64 * rows.iter().map(|r| (mean(r.iter().copied()) - grand).powi(2)).sum::<f64>();
    let mut ss_conditions = 0.0;
    for j in 0..k {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        ss_conditions += (m - grand).powi(2);
    }
    ss_conditions *= n;
    let ss_error = (ss_total - ss_subjects - ss_conditions).max(0.0);
    if ss_error == 0.0 {
        return if ss_conditions > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (ss_conditions / (k - 1) as f64) / (ss_error / ((k - 1) as f64 * (n - 1.0)))
}

/// Two-sided paired t-test on per-subject values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedT {
    pub mean_difference: f64,
    #[serde(with = "finite_or_inf")]
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub fn paired_t(a: &[f64], b: &[f64]) -> PairedT {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let n = a.len();
    assert!(n >= 2, "need at least two pairs");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(d.iter().copied());
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    if var <= ZERO_SS * m.abs().max(1.0).powi(2) {
        let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(m), 0.0) };
        return PairedT { mean_difference: m, t, df, p };
    }
    let t = m / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    PairedT { mean_difference: m, t, df, p }
}
