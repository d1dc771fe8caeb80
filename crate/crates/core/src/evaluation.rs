//! Patient-disjoint splitting, slide-level aggregation, one-vs-rest ROC/AUC
//! and bootstrap confidence intervals.
//!
//! Everything here is pure and seeded; reports serialize canonically so that
//! equal results are byte-identical.

use crate::canon::{self, ObjectWriter};
use crate::class::Class;
use crate::classifier::ClassProbabilities;
use crate::rng::{fisher_yates, hash64, SplitMix64};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

/// Patient → subset assignment. Every patient lands in exactly one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub proportions: [f64; 3],
    pub seed: u64,
    pub assignment: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn subset_of(&self, patient_id: &str) -> Option<Subset> {
        self.assignment.get(patient_id).copied()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for subset in self.assignment.values() {
            counts[*subset as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad split proportions: {0}")]
    BadProportions(String),
    #[error("need at least 3 distinct patients, have {0}")]
    TooFewPatients(usize),
    #[error("slide has no kept tiles")]
    NoTiles,
    #[error("scores and labels have different lengths")]
    MismatchedLengths,
    #[error("degenerate labels: {positives} positives, {negatives} negatives")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("bootstrap needs ≥2 positives and ≥2 negatives, have {positives}/{negatives}")]
    InsufficientClassMembers { positives: usize, negatives: usize },
    #[error("{skipped} of {rounds} bootstrap rounds were degenerate (>10% limit)")]
    TooManyDegenerateRounds { skipped: u32, rounds: u32 },
    #[error("no scored slides for class {0}")]
    MissingClass(Class),
    #[error("cannot parse report: {0}")]
    MalformedReport(String),
}

/// Splits patients into train/val/test.
///
/// Unique patient ids are sorted lexicographically, Fisher–Yates shuffled
/// with `SplitMix64(seed)`, subset sizes apportioned by largest remainder
/// (remainder ties go to the earlier subset in train/val/test order), and
/// assigned as contiguous ranges of the shuffled order.
pub fn make_split<'a>(
    patients: impl IntoIterator<Item = &'a str>,
    proportions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, EvalError> {
    let sum: f64 = proportions.iter().sum();
    if proportions.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(EvalError::BadProportions(format!("{proportions:?}")));
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadProportions(format!(
            "{proportions:?} sums to {sum}"
        )));
    }

    let unique: BTreeSet<&str> = patients.into_iter().collect();
    if unique.len() < 3 {
        return Err(EvalError::TooFewPatients(unique.len()));
    }
    let mut shuffled: Vec<&str> = unique.into_iter().collect();
    fisher_yates(&mut shuffled, &mut SplitMix64::new(seed));

    let sizes = largest_remainder(shuffled.len(), &proportions);
    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for (subset, size) in Subset::ALL.into_iter().zip(sizes) {
        for patient in &shuffled[cursor..cursor + size] {
            assignment.insert(patient.to_string(), subset);
        }
        cursor += size;
    }
    Ok(SplitAssignment {
        proportions,
        seed,
        assignment,
    })
}

/// Hamilton (largest remainder) apportionment of `n` into parts.
fn largest_remainder(n: usize, proportions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut sizes = [0usize; 3];
    let mut fractions: Vec<(f64, usize)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for (i, quota) in quotas.iter().enumerate() {
        let base = quota.floor() as usize;
        sizes[i] = base;
        assigned += base;
        fractions.push((quota - base as f64, i));
    }
    // Highest fractional remainder first; ties to the earlier subset.
    fractions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for k in 0..(n - assigned) {
        sizes[fractions[k % 3].1] += 1;
    }
    sizes
}

/// Slide-level prediction with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideResult {
    pub sop_instance_uid: String,
    pub patient_id: String,
    pub true_class: Class,
    pub probs: ClassProbabilities,
    pub kept_tile_count: u32,
}

impl SlideResult {
    pub fn to_canonical_json(&self) -> String {
        let mut w = ObjectWriter::new();
        w.field_u64("kept_tile_count", u64::from(self.kept_tile_count))
            .field_str("patient_id", &self.patient_id)
            .field_raw(
                "probs",
                &canon::array(self.probs.0.iter().map(|p| canon::fmt_f64_sig12(*p))),
            )
            .field_str("sop_instance_uid", &self.sop_instance_uid)
            .field_str("true_class", self.true_class.name());
        w.finish()
    }
}

/// Canonical JSON for a list of slide results; the basis of the per-slide
/// results digest in run records.
pub fn slide_results_canonical_json(results: &[SlideResult]) -> String {
    canon::array(results.iter().map(|r| r.to_canonical_json()))
}

/// Parses a slide-results file (a JSON array in the canonical shape).
pub fn slide_results_from_json(text: &str) -> Result<Vec<SlideResult>, EvalError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| EvalError::MalformedReport("expected a JSON array".into()))?;
    let missing = |what: &str| EvalError::MalformedReport(format!("missing {what}"));
    items
        .iter()
        .map(|item| {
            let s = |key: &str| -> Result<String, EvalError> {
                Ok(item
                    .get(key)
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| missing(key))?
                    .to_string())
            };
            let probs = item
                .get("probs")
                .and_then(|v| v.as_array())
                .filter(|a| a.len() == 3)
                .ok_or_else(|| missing("probs"))?;
            let mut p = [0.0f64; 3];
            for (slot, v) in p.iter_mut().zip(probs) {
                *slot = v.as_f64().ok_or_else(|| missing("probs value"))?;
            }
            Ok(SlideResult {
                sop_instance_uid: s("sop_instance_uid")?,
                patient_id: s("patient_id")?,
                true_class: s("true_class")?
                    .parse()
                    .map_err(EvalError::MalformedReport)?,
                probs: ClassProbabilities(p),
                kept_tile_count: item
                    .get("kept_tile_count")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| missing("kept_tile_count"))?
                    as u32,
            })
        })
        .collect()
}

/// Mean of per-tile probabilities, renormalized to sum 1.
pub fn aggregate_slide(tile_probs: &[ClassProbabilities]) -> Result<ClassProbabilities, EvalError> {
    if tile_probs.is_empty() {
        return Err(EvalError::NoTiles);
    }
    let mut mean = [0.0f64; 3];
    for probs in tile_probs {
        for (m, p) in mean.iter_mut().zip(probs.0) {
            *m += p;
        }
    }
    let n = tile_probs.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    let sum: f64 = mean.iter().sum();
    for m in &mut mean {
        *m /= sum;
    }
    Ok(ClassProbabilities(mean))
}

/// One-vs-rest AUC via the Mann–Whitney statistic with midranks:
/// `AUC = (R⁺ − n⁺(n⁺+1)/2) / (n⁺ n⁻)`, which equals
/// `P(score⁺ > score⁻) + ½ P(score⁺ = score⁻)`.
pub fn auc_ovr(scores: &[f64], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::MismatchedLengths);
    }
    let n_pos = positives.iter().filter(|p| **p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels {
            positives: n_pos,
            negatives: n_neg,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie group [i, j).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positives[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// ROC points from (0,0) to (1,1), one per distinct threshold in descending
/// score order with ties collapsed; collinear interior points are removed.
/// The trapezoidal area under the returned curve equals [`auc_ovr`].
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::MismatchedLengths);
    }
    let n_pos = positives.iter().filter(|p| **p).count() as i64;
    let n_neg = scores.len() as i64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels {
            positives: n_pos as usize,
            negatives: n_neg as usize,
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Integer (fp, tp) counts keep the collinearity test exact.
    let mut points: Vec<(i64, i64)> = vec![(0, 0)];
    let mut tp = 0i64;
    let mut fp = 0i64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        push_collapsing(&mut points, (fp, tp));
        i = j;
    }

    Ok(points
        .into_iter()
        .map(|(fp, tp)| (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64))
        .collect())
}

fn push_collapsing(points: &mut Vec<(i64, i64)>, next: (i64, i64)) {
    points.push(next);
    while points.len() >= 3 {
        let c = points[points.len() - 1];
        let b = points[points.len() - 2];
        let a = points[points.len() - 3];
        let collinear = (b.0 - a.0) * (c.1 - a.1) == (b.1 - a.1) * (c.0 - a.0);
        if collinear {
            points.remove(points.len() - 2);
        } else {
            break;
        }
    }
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Point AUC plus a bootstrap percentile confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AucWithCi {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap_rounds: u32,
    pub level: f64,
}

impl AucWithCi {
    fn to_canonical_json(&self) -> String {
        let mut w = ObjectWriter::new();
        w.field_f64("auc", self.auc)
            .field_u64("bootstrap_rounds", u64::from(self.bootstrap_rounds))
            .field_f64("ci_high", self.ci_high)
            .field_f64("ci_low", self.ci_low)
            .field_f64("level", self.level);
        w.finish()
    }
}

const MAX_REDRAWS_PER_ROUND: u32 = 100;

/// Percentile-bootstrap CI for the one-vs-rest AUC over raw scores.
///
/// Each round resamples all N observations with replacement from the stream
/// `SplitMix64(seed ^ round)`. A single-class resample is redrawn from the
/// same stream (cap 100); past the cap the round is skipped and counted.
/// Interval bounds are type-7 percentiles (linear interpolation between
/// order statistics) of the realized round AUCs.
pub fn bootstrap_auc_ci(
    scores: &[f64],
    positives: &[bool],
    rounds: u32,
    level: f64,
    seed: u64,
) -> Result<AucWithCi, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::MismatchedLengths);
    }
    let n_pos = positives.iter().filter(|p| **p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(EvalError::InsufficientClassMembers {
            positives: n_pos,
            negatives: n_neg,
        });
    }
    let point = auc_ovr(scores, positives)?;

    let n = scores.len();
    let mut round_aucs = Vec::with_capacity(rounds as usize);
    let mut skipped = 0u32;
    let mut resample_scores = vec![0.0f64; n];
    let mut resample_flags = vec![false; n];
    for round in 0..rounds {
        let mut rng = SplitMix64::new(seed ^ u64::from(round));
        let mut accepted = false;
        for _ in 0..=MAX_REDRAWS_PER_ROUND {
            let mut any_pos = false;
            let mut any_neg = false;
            for slot in 0..n {
                let pick = rng.next_below(n as u64) as usize;
                resample_scores[slot] = scores[pick];
                resample_flags[slot] = positives[pick];
                if positives[pick] {
                    any_pos = true;
                } else {
                    any_neg = true;
                }
            }
            if any_pos && any_neg {
                accepted = true;
                break;
            }
        }
        if accepted {
            round_aucs.push(auc_ovr(&resample_scores, &resample_flags)?);
        } else {
            skipped += 1;
        }
    }
    if f64::from(skipped) > 0.1 * f64::from(rounds) {
        return Err(EvalError::TooManyDegenerateRounds { skipped, rounds });
    }

    round_aucs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(AucWithCi {
        auc: point,
        ci_low: percentile_type7(&round_aucs, alpha),
        ci_high: percentile_type7(&round_aucs, 1.0 - alpha),
        bootstrap_rounds: rounds,
        level,
    })
}

/// Bootstrap CI for one class over slide results; the positive score of a
/// slide is its aggregated probability for that class.
pub fn bootstrap_ci(
    slide_results: &[SlideResult],
    class: Class,
    rounds: u32,
    level: f64,
    seed: u64,
) -> Result<AucWithCi, EvalError> {
    let scores: Vec<f64> = slide_results
        .iter()
        .map(|r| r.probs.0[class.index()])
        .collect();
    let flags: Vec<bool> = slide_results
        .iter()
        .map(|r| r.true_class == class)
        .collect();
    bootstrap_auc_ci(&scores, &flags, rounds, level, seed)
}

/// Linear interpolation between order statistics (the common "type 7" rule).
fn percentile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Identifiers and seeds reported alongside the evaluation numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportMeta {
    pub dataset_id: String,
    pub catalog_version: String,
    pub bootstrap_rounds: u32,
    pub level: f64,
    pub bootstrap_seed: u64,
    /// Any further seeds consumed by the run (split, subsample, training…).
    pub extra_seeds: BTreeMap<String, u64>,
}

/// Per-class AUC with CI plus the counts and identifiers needed to interpret
/// them. Canonically serializable; semantically equal reports are
/// byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset_id: String,
    pub catalog_version: String,
    pub slide_count: u64,
    /// Counts indexed by [`Class::index`].
    pub per_class_counts: [u64; 3],
    /// AUC+CI indexed by [`Class::index`].
    pub class_auc: [AucWithCi; 3],
    pub seeds: BTreeMap<String, u64>,
}

/// Builds the three one-vs-rest AUC rows for a slide-result set. Each class's
/// bootstrap stream is derived as `seed ^ hash64(class_name)`.
pub fn build_report(
    slide_results: &[SlideResult],
    meta: &ReportMeta,
) -> Result<EvalReport, EvalError> {
    let mut per_class_counts = [0u64; 3];
    for result in slide_results {
        per_class_counts[result.true_class.index()] += 1;
    }
    for class in Class::ALL {
        if per_class_counts[class.index()] == 0 {
            return Err(EvalError::MissingClass(class));
        }
    }
    let class_auc = [
        bootstrap_for(slide_results, Class::Normal, meta)?,
        bootstrap_for(slide_results, Class::Luad, meta)?,
        bootstrap_for(slide_results, Class::Lscc, meta)?,
    ];
    let mut seeds = meta.extra_seeds.clone();
    seeds.insert("bootstrap".to_string(), meta.bootstrap_seed);
    Ok(EvalReport {
        dataset_id: meta.dataset_id.clone(),
        catalog_version: meta.catalog_version.clone(),
        slide_count: slide_results.len() as u64,
        per_class_counts,
        class_auc,
        seeds,
    })
}

fn bootstrap_for(
    results: &[SlideResult],
    class: Class,
    meta: &ReportMeta,
) -> Result<AucWithCi, EvalError> {
    bootstrap_ci(
        results,
        class,
        meta.bootstrap_rounds,
        meta.level,
        meta.bootstrap_seed ^ hash64(class.name()),
    )
}

impl EvalReport {
    pub fn auc_for(&self, class: Class) -> &AucWithCi {
        &self.class_auc[class.index()]
    }

    pub fn macro_auc(&self) -> f64 {
        self.class_auc.iter().map(|a| a.auc).sum::<f64>() / 3.0
    }

    pub fn to_canonical_json(&self) -> String {
        let class_map = |f: &dyn Fn(Class) -> String| {
            // Lexicographic key order: LSCC < LUAD < normal.
            let mut w = ObjectWriter::new();
            w.field_raw("LSCC", &f(Class::Lscc))
                .field_raw("LUAD", &f(Class::Luad))
                .field_raw("normal", &f(Class::Normal));
            w.finish()
        };
        let mut seeds = ObjectWriter::new();
        for (name, value) in &self.seeds {
            seeds.field_u64(name, *value);
        }
        let mut w = ObjectWriter::new();
        w.field_str("catalog_version", &self.catalog_version)
            .field_raw(
                "class_auc",
                &class_map(&|c: Class| self.class_auc[c.index()].to_canonical_json()),
            )
            .field_str("dataset_id", &self.dataset_id)
            .field_raw(
                "per_class_counts",
                &class_map(&|c: Class| self.per_class_counts[c.index()].to_string()),
            )
            .field_raw("seeds", &seeds.finish())
            .field_u64("slide_count", self.slide_count);
        w.finish()
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, EvalError> {
        let missing = |what: &str| EvalError::MalformedReport(format!("missing {what}"));
        let string = |key: &str| -> Result<String, EvalError> {
            Ok(value
                .get(key)
                .and_then(|v| v.as_str())
                .ok_or_else(|| missing(key))?
                .to_string())
        };
        let class_entry = |key: &str, class: Class| -> Result<serde_json::Value, EvalError> {
            value
                .get(key)
                .and_then(|v| v.get(class.name()))
                .cloned()
                .ok_or_else(|| missing(&format!("{key}.{}", class.name())))
        };
        let mut per_class_counts = [0u64; 3];
        let mut class_auc = Vec::with_capacity(3);
        for class in Class::ALL {
            per_class_counts[class.index()] = class_entry("per_class_counts", class)?
                .as_u64()
                .ok_or_else(|| missing("count"))?;
            let entry = class_entry("class_auc", class)?;
            let f = |k: &str| -> Result<f64, EvalError> {
                entry
                    .get(k)
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| missing(k))
            };
            class_auc.push(AucWithCi {
                auc: f("auc")?,
                ci_low: f("ci_low")?,
                ci_high: f("ci_high")?,
                bootstrap_rounds: entry
                    .get("bootstrap_rounds")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| missing("bootstrap_rounds"))?
                    as u32,
                level: f("level")?,
            });
        }
        let mut seeds = BTreeMap::new();
        if let Some(map) = value.get("seeds").and_then(|v| v.as_object()) {
            for (k, v) in map {
                seeds.insert(k.clone(), v.as_u64().ok_or_else(|| missing("seed value"))?);
            }
        }
        Ok(EvalReport {
            dataset_id: string("dataset_id")?,
            catalog_version: string("catalog_version")?,
            slide_count: value
                .get("slide_count")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| missing("slide_count"))?,
            per_class_counts,
            class_auc: [
                class_auc[0].clone(),
                class_auc[1].clone(),
                class_auc[2].clone(),
            ],
            seeds,
        })
    }
}

/// Two-column CSV (fpr, tpr) for one ROC curve.
pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

/// One-vs-rest ROC points for one class over slide results.
pub fn roc_for_class(
    slide_results: &[SlideResult],
    class: Class,
) -> Result<Vec<(f64, f64)>, EvalError> {
    let scores: Vec<f64> = slide_results
        .iter()
        .map(|r| r.probs.0[class.index()])
        .collect();
    let flags: Vec<bool> = slide_results
        .iter()
        .map(|r| r.true_class == class)
        .collect();
    roc_curve(&scores, &flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_20_patients() {
        let ids: Vec<String> = (0..20).map(|i| format!("P{i:03}")).collect();
        let split = make_split(ids.iter().map(|s| s.as_str()), [0.70, 0.15, 0.15], 7).unwrap();
        assert_eq!(split.counts(), [14, 3, 3]);
    }

    #[test]
    fn split_sizes_1009_patients() {
        let ids: Vec<String> = (0..1009).map(|i| format!("P{i:04}")).collect();
        let split = make_split(ids.iter().map(|s| s.as_str()), [0.70, 0.15, 0.15], 42).unwrap();
        // Largest-remainder apportionment: the leftover seat goes to val.
        assert_eq!(split.counts(), [706, 152, 151]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids: Vec<String> = (0..57).map(|i| format!("P{i}")).collect();
        let a = make_split(ids.iter().map(|s| s.as_str()), [0.70, 0.15, 0.15], 9).unwrap();
        let b = make_split(ids.iter().map(|s| s.as_str()), [0.70, 0.15, 0.15], 9).unwrap();
        assert_eq!(a, b);
        // Duplicated input ids collapse to one patient.
        let doubled: Vec<&str> = ids.iter().flat_map(|s| [s.as_str(), s.as_str()]).collect();
        let c = make_split(doubled, [0.70, 0.15, 0.15], 9).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.assignment.len(), 57);
    }

    #[test]
    fn split_input_validation() {
        let ids = ["a", "b", "c"];
        assert!(matches!(
            make_split(ids.into_iter(), [0.5, 0.2, 0.2], 0),
            Err(EvalError::BadProportions(_))
        ));
        assert!(matches!(
            make_split(["a", "b"].into_iter(), [0.70, 0.15, 0.15], 0),
            Err(EvalError::TooFewPatients(2))
        ));
    }

    fn probs(a: f64, b: f64, c: f64) -> ClassProbabilities {
        ClassProbabilities([a, b, c])
    }

    #[test]
    fn aggregate_examples() {
        let agg = aggregate_slide(&[probs(1.0, 0.0, 0.0), probs(0.0, 1.0, 0.0)]).unwrap();
        assert_eq!(agg.0, [0.5, 0.5, 0.0]);
        assert_eq!(agg.argmax(), Class::Normal);

        let single = aggregate_slide(&[probs(0.2, 0.3, 0.5)]).unwrap();
        assert!((single.0[0] - 0.2).abs() < 1e-15);
        assert!((single.0[2] - 0.5).abs() < 1e-15);

        let thousand =
            aggregate_slide(&vec![probs(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0); 1000]).unwrap();
        for p in thousand.0 {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        assert!(matches!(aggregate_slide(&[]), Err(EvalError::NoTiles)));
    }

    #[test]
    fn aggregate_argmax_invariant_under_common_scaling() {
        let tiles = [probs(0.5, 0.3, 0.2), probs(0.1, 0.6, 0.3)];
        let scaled: Vec<ClassProbabilities> = tiles
            .iter()
            .map(|p| ClassProbabilities([p.0[0] * 3.5, p.0[1] * 3.5, p.0[2] * 3.5]))
            .collect();
        assert_eq!(
            aggregate_slide(&tiles).unwrap().argmax(),
            aggregate_slide(&scaled).unwrap().argmax()
        );
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_ovr(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(auc_ovr(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            auc_ovr(&[0.5, 0.6], &[true, true]),
            Err(EvalError::DegenerateLabels { .. })
        ));
    }

    /// Brute-force oracle: all-pairs counting with half credit for ties.
    fn auc_brute_force(scores: &[f64], positives: &[bool]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &pos) in positives.iter().enumerate() {
            if !pos {
                continue;
            }
            for (j, &neg_pos) in positives.iter().enumerate() {
                if neg_pos {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = SplitMix64::new(0xA0C);
        for _ in 0..50 {
            let n = 2 + rng.next_below(48) as usize;
            // Quantized scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.next_below(20) as f64 / 20.0).collect();
            let mut flags: Vec<bool> = (0..n).map(|_| rng.next_below(2) == 1).collect();
            flags[0] = true;
            flags[n - 1] = false;
            let fast = auc_ovr(&scores, &flags).unwrap();
            let slow = auc_brute_force(&scores, &flags);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariances() {
        let mut rng = SplitMix64::new(0xBEE);
        for _ in 0..20 {
            let n = 4 + rng.next_below(40) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let mut flags: Vec<bool> = (0..n).map(|_| rng.next_below(2) == 1).collect();
            flags[0] = true;
            flags[1] = false;
            let base = auc_ovr(&scores, &flags).unwrap();

            // Strictly monotone transforms leave the AUC unchanged.
            let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
            let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            assert!((auc_ovr(&affine, &flags).unwrap() - base).abs() <= 1e-12);
            assert!((auc_ovr(&cubic, &flags).unwrap() - base).abs() <= 1e-12);

            // Complementing the labels complements the AUC.
            let negated: Vec<bool> = flags.iter().map(|f| !f).collect();
            assert!((auc_ovr(&scores, &negated).unwrap() + base - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn roc_curve_examples() {
        let points = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);

        let flat = roc_curve(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert_eq!(flat, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((trapezoid_area(&flat) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn roc_area_equals_auc() {
        let mut rng = SplitMix64::new(0x20C);
        for _ in 0..50 {
            let n = 4 + rng.next_below(60) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_below(15) as f64 / 15.0).collect();
            let mut flags: Vec<bool> = (0..n).map(|_| rng.next_below(2) == 1).collect();
            flags[0] = true;
            flags[1] = false;
            let auc = auc_ovr(&scores, &flags).unwrap();
            let points = roc_curve(&scores, &flags).unwrap();
            assert_eq!(points.first(), Some(&(0.0, 0.0)));
            assert_eq!(points.last(), Some(&(1.0, 1.0)));
            assert!((trapezoid_area(&points) - auc).abs() <= 1e-12);
        }
    }

    fn separated_results(n_per_class: usize) -> Vec<SlideResult> {
        let mut out = Vec::new();
        for class in Class::ALL {
            for i in 0..n_per_class {
                let mut p = [0.05, 0.05, 0.05];
                p[class.index()] = 0.9;
                out.push(SlideResult {
                    sop_instance_uid: format!("{}.{i}", class.name()),
                    patient_id: format!("pat-{}-{i}", class.name()),
                    true_class: class,
                    probs: ClassProbabilities(p),
                    kept_tile_count: 5,
                });
            }
        }
        out
    }

    #[test]
    fn bootstrap_perfect_separation_is_degenerate_interval() {
        let results = separated_results(14);
        for class in Class::ALL {
            let ci = bootstrap_ci(&results, class, 200, 0.95, 11).unwrap();
            assert_eq!(ci.auc, 1.0);
            assert_eq!((ci.ci_low, ci.ci_high), (1.0, 1.0));
        }
    }

    #[test]
    fn bootstrap_is_bit_reproducible() {
        let results = separated_results(10);
        let mut shifted = results.clone();
        // Perturb toward an imperfect classifier so the CI is non-trivial.
        for (i, r) in shifted.iter_mut().enumerate() {
            let bump = (i % 7) as f64 / 10.0;
            let mut p = r.probs.0;
            p[0] = (p[0] + bump) / (1.0 + bump);
            p[1] /= 1.0 + bump;
            p[2] /= 1.0 + bump;
            r.probs = ClassProbabilities(p);
        }
        let a = bootstrap_ci(&shifted, Class::Luad, 500, 0.95, 77).unwrap();
        let b = bootstrap_ci(&shifted, Class::Luad, 500, 0.95, 77).unwrap();
        assert_eq!(a.ci_low.to_bits(), b.ci_low.to_bits());
        assert_eq!(a.ci_high.to_bits(), b.ci_high.to_bits());
        assert!(a.ci_low <= a.auc + 1e-12 && a.auc <= a.ci_high + 1e-12);
    }

    #[test]
    fn bootstrap_requires_two_per_class() {
        let scores = [0.9, 0.1, 0.2, 0.3];
        let flags = [true, false, false, false];
        assert!(matches!(
            bootstrap_auc_ci(&scores, &flags, 100, 0.95, 1),
            Err(EvalError::InsufficientClassMembers { positives: 1, .. })
        ));
    }

    #[test]
    fn report_round_trips_canonically() {
        let results = separated_results(5);
        let meta = ReportMeta {
            dataset_id: "fixture".into(),
            catalog_version: "idc_v11".into(),
            bootstrap_rounds: 100,
            level: 0.95,
            bootstrap_seed: 3,
            extra_seeds: [("split".to_string(), 9u64)].into_iter().collect(),
        };
        let report = build_report(&results, &meta).unwrap();
        assert_eq!(report.slide_count, 15);
        assert_eq!(report.per_class_counts, [5, 5, 5]);

        let json = report.to_canonical_json();
        let parsed = EvalReport::from_json(&json).unwrap();
        assert_eq!(parsed.to_canonical_json(), json);
        assert_eq!(parsed, report);
    }

    #[test]
    fn report_requires_every_class() {
        let mut results = separated_results(5);
        results.retain(|r| r.true_class != Class::Lscc);
        let meta = ReportMeta {
            dataset_id: "fixture".into(),
            catalog_version: "v".into(),
            bootstrap_rounds: 10,
            level: 0.95,
            bootstrap_seed: 0,
            extra_seeds: BTreeMap::new(),
        };
        assert!(matches!(
            build_report(&results, &meta),
            Err(EvalError::MissingClass(Class::Lscc))
        ));
    }

    #[test]
    fn slide_results_digest_input_is_stable() {
        let results = separated_results(2);
        let a = slide_results_canonical_json(&results);
        let b = slide_results_canonical_json(&results);
        assert_eq!(a, b);
        let value: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(value.as_array().unwrap().len(), 6);
    }
}
