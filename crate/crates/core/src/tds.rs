//! Temporal divergence scoring: how much an evaluator's first-token option
//! distribution moves when the clip is played backwards. Plus the filters and
//! ranking that turn those scores into a direction-sensitive subset.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{reverse_frames, shuffle_frames, EncodedSample, TaskKind};
use crate::error::{Error, Result};
use crate::policy::{sequence_perplexity, PolicyParams, ProbVector, RolloutPolicy};
use crate::rng::stream_rng;

pub const PROB_FLOOR: f64 = 1e-12;

fn smooth(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|v| v.max(PROB_FLOOR)).collect();
    let s: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / s).collect()
}

/// `KL(p ‖ q)` after flooring both vectors at 1e-12 and renormalizing.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Length { expected: p.len(), actual: q.len() });
    }
    let (p, q) = (smooth(p.probs()), smooth(q.probs()));
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(a, b)| if *a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .sum();
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    None,
    ReverseBeatsForward,
    UnanimousCorrect,
}

/// One evaluator's view of one MCQ sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdsRecord {
    pub sample_id: String,
    pub evaluator_tag: String,
    pub p_forward: ProbVector,
    pub p_reverse: ProbVector,
    pub tds: f64,
    pub forward_correct: bool,
    pub reverse_correct: bool,
    /// Planted label carried over from the sample, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<bool>,
    pub excluded: bool,
    pub exclusion_reason: ExclusionReason,
}

pub fn tds_for_sample(evaluator: &dyn RolloutPolicy, enc: &EncodedSample) -> Result<TdsRecord> {
    if enc.task() != TaskKind::Mcq {
        return Err(Error::Unsupported(format!("sample {} is not multiple choice", enc.id())));
    }
    let answer = enc.answer_index.ok_or_else(|| Error::Unsupported("mcq sample without answer".into()))?;
    let p_forward = evaluator.option_probs(enc, &enc.frames)?;
    let p_reverse = evaluator.option_probs(enc, &reverse_frames(&enc.frames))?;
    let tds = kl_divergence(&p_forward, &p_reverse)?;
    Ok(TdsRecord {
        sample_id: enc.id().to_string(),
        evaluator_tag: evaluator.tag().to_string(),
        forward_correct: p_forward.argmax() == answer,
        reverse_correct: p_reverse.argmax() == answer,
        p_forward,
        p_reverse,
        tds,
        sensitive: enc.sample.is_sensitive(),
        excluded: false,
        exclusion_reason: ExclusionReason::None,
    })
}

/// Records for every MCQ sample under every evaluator, ordered by evaluator then sample.
pub fn score_all(evaluators: &[&dyn RolloutPolicy], samples: &[EncodedSample]) -> Result<Vec<TdsRecord>> {
    let mut out = Vec::new();
    for ev in evaluators {
        let recs: Vec<Result<TdsRecord>> = samples
            .par_iter()
            .filter(|s| s.task() == TaskKind::Mcq)
            .map(|s| tds_for_sample(*ev, s))
            .collect();
        for r in recs {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Per-sample aggregate over evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAggregate {
    pub sample_id: String,
    pub mean_tds: f64,
    pub forward_accuracy: f64,
    pub reverse_accuracy: f64,
    pub sensitive: Option<bool>,
}

/// Aggregates keyed by sample id (sorted).
pub fn aggregate(records: &[TdsRecord]) -> BTreeMap<String, SampleAggregate> {
    let mut acc: BTreeMap<String, (f64, f64, f64, usize, Option<bool>)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.sample_id.clone()).or_insert((0.0, 0.0, 0.0, 0, r.sensitive));
        e.0 += r.tds;
        e.1 += f64::from(u8::from(r.forward_correct));
        e.2 += f64::from(u8::from(r.reverse_correct));
        e.3 += 1;
    }
    acc.into_iter()
        .map(|(id, (t, f, rv, n, sensitive))| {
            let n = n as f64;
            let agg = SampleAggregate {
                sample_id: id.clone(),
                mean_tds: t / n,
                forward_accuracy: f / n,
                reverse_accuracy: rv / n,
                sensitive,
            };
            (id, agg)
        })
        .collect()
}

/// Flag samples whose mean reverse correctness strictly exceeds mean forward correctness.
pub fn apply_reverse_filter(records: &mut [TdsRecord]) {
    let agg = aggregate(records);
    for r in records.iter_mut() {
        let a = &agg[&r.sample_id];
        if a.reverse_accuracy > a.forward_accuracy && !r.excluded {
            r.excluded = true;
            r.exclusion_reason = ExclusionReason::ReverseBeatsForward;
        }
    }
}

/// Flag samples every evaluator answers correctly on forward playback.
pub fn apply_unanimous_filter(records: &mut [TdsRecord]) {
    let agg = aggregate(records);
    for r in records.iter_mut() {
        if agg[&r.sample_id].forward_accuracy == 1.0 && !r.excluded {
            r.excluded = true;
            r.exclusion_reason = ExclusionReason::UnanimousCorrect;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub input: usize,
    pub removed_unanimous_correct: usize,
    pub removed_reverse_beats_forward: usize,
    /// Samples left after both filters; `selected` of them were kept.
    pub survivors: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curation {
    /// Sorted by mean TDS descending, then id ascending.
    pub selected: Vec<String>,
    pub summary: CurationSummary,
}

/// Drop unanimous-correct samples, then reverse-beats-forward samples, then
/// keep the top `k` of the rest by mean TDS. Marks exclusions on `records`.
pub fn curate_subset(records: &mut [TdsRecord], k: usize) -> Result<Curation> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    for r in records.iter_mut() {
        r.excluded = false;
        r.exclusion_reason = ExclusionReason::None;
    }
    apply_unanimous_filter(records);
    apply_reverse_filter(records);
    let agg = aggregate(records);
    let mut reason: BTreeMap<&str, ExclusionReason> = BTreeMap::new();
    for r in records.iter() {
        reason.insert(&r.sample_id, r.exclusion_reason);
    }
    let mut summary = CurationSummary { input: agg.len(), ..Default::default() };
    let mut ranked: Vec<&SampleAggregate> = Vec::new();
    for a in agg.values() {
        match reason[a.sample_id.as_str()] {
            ExclusionReason::UnanimousCorrect => summary.removed_unanimous_correct += 1,
            ExclusionReason::ReverseBeatsForward => summary.removed_reverse_beats_forward += 1,
            ExclusionReason::None => ranked.push(a),
        }
    }
    summary.survivors = ranked.len();
    ranked.sort_by(|a, b| b.mean_tds.total_cmp(&a.mean_tds).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let selected: Vec<String> = ranked.into_iter().take(k).map(|a| a.sample_id.clone()).collect();
    summary.selected = selected.len();
    Ok(Curation { selected, summary })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderingAccuracy {
    pub forward: f64,
    pub reverse: f64,
    pub shuffled: f64,
}

/// Argmax-option accuracy under forward, reversed and shuffled frames.
pub fn eval_orderings(policy: &dyn RolloutPolicy, samples: &[EncodedSample], shuffle_seed: u64) -> Result<OrderingAccuracy> {
    let mcq: Vec<(usize, &EncodedSample)> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.task() == TaskKind::Mcq)
        .collect();
    if mcq.is_empty() {
        return Ok(OrderingAccuracy::default());
    }
    let hits: Vec<Result<[bool; 3]>> = mcq
        .par_iter()
        .map(|&(i, s)| {
            let ans = s.answer_index.ok_or_else(|| Error::Unsupported("mcq sample without answer".into()))?;
            let mut rng = stream_rng(shuffle_seed, "shuffle", i as u64);
            let shuffled = shuffle_frames(&s.frames, &mut rng);
            Ok([
                policy.option_probs(s, &s.frames)?.argmax() == ans,
                policy.option_probs(s, &reverse_frames(&s.frames))?.argmax() == ans,
                policy.option_probs(s, &shuffled)?.argmax() == ans,
            ])
        })
        .collect();
    let mut counts = [0usize; 3];
    for h in hits {
        for (c, b) in counts.iter_mut().zip(h?) {
            *c += usize::from(b);
        }
    }
    let n = mcq.len() as f64;
    Ok(OrderingAccuracy {
        forward: counts[0] as f64 / n,
        reverse: counts[1] as f64 / n,
        shuffled: counts[2] as f64 / n,
    })
}

/// Keep samples whose target perplexity moves by at least `threshold` under reversal.
pub fn perplexity_filter<'a>(policy: &PolicyParams, samples: &'a [EncodedSample], threshold: f64) -> Vec<&'a EncodedSample> {
    samples
        .iter()
        .filter(|s| {
            let fwd = sequence_perplexity(policy, &s.query, &s.frames, s.decode_mask(), &s.target);
            let rev = sequence_perplexity(policy, &s.query, &reverse_frames(&s.frames), s.decode_mask(), &s.target);
            (rev - fwd).abs() >= threshold
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorAccuracy {
    pub evaluator: String,
    #[serde(flatten)]
    pub accuracy: OrderingAccuracy,
    /// `(forward − reverse) / forward`, or 0 when forward accuracy is 0.
    pub relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub benchmark: String,
    pub samples: usize,
    pub mean_tds_all: f64,
    pub mean_tds_selected: Option<f64>,
    pub evaluators: Vec<EvaluatorAccuracy>,
    pub relative_drop_mean: f64,
    pub relative_drop_std: f64,
}

pub fn relative_drop(acc: &OrderingAccuracy) -> f64 {
    if acc.forward > 0.0 {
        (acc.forward - acc.reverse) / acc.forward
    } else {
        0.0
    }
}

pub fn bench_report(
    benchmark: &str,
    records: &[TdsRecord],
    accuracies: Vec<(String, OrderingAccuracy)>,
    selected: Option<&[String]>,
) -> BenchReport {
    let agg = aggregate(records);
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mean_tds_all = mean(&mut agg.values().map(|a| a.mean_tds));
    let mean_tds_selected =
        selected.map(|ids| mean(&mut ids.iter().filter_map(|id| agg.get(id)).map(|a| a.mean_tds)));
    let evaluators: Vec<EvaluatorAccuracy> = accuracies
        .into_iter()
        .map(|(evaluator, accuracy)| EvaluatorAccuracy { relative_drop: relative_drop(&accuracy), evaluator, accuracy })
        .collect();
    let drops: Vec<f64> = evaluators.iter().map(|e| e.relative_drop).collect();
    let m = mean(&mut drops.iter().copied());
    let var = mean(&mut drops.iter().map(|d| (d - m).powi(2)));
    BenchReport {
        benchmark: benchmark.to_string(),
        samples: agg.len(),
        mean_tds_all,
        mean_tds_selected,
        evaluators,
        relative_drop_mean: m,
        relative_drop_std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap(), 0.0);
        let k = kl_divergence(&pv(&[0.9, 0.1]), &pv(&[0.1, 0.9])).unwrap();
        assert!((k - 0.8 * 9f64.ln()).abs() < 1e-9);
        assert!(kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap().is_finite());
        assert!(kl_divergence(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    fn rec(id: &str, ev: &str, tds: f64, f: bool, r: bool) -> TdsRecord {
        TdsRecord {
            sample_id: id.into(),
            evaluator_tag: ev.into(),
            p_forward: pv(&[0.5, 0.5]),
            p_reverse: pv(&[0.5, 0.5]),
            tds,
            forward_correct: f,
            reverse_correct: r,
            sensitive: None,
            excluded: false,
            exclusion_reason: ExclusionReason::None,
        }
    }

    #[test]
    fn reverse_filter_is_strict() {
        let mut rs = vec![
            rec("fwd", "e1", 0.0, true, false),
            rec("rev", "e1", 0.0, false, true),
            rec("tie", "e1", 0.0, true, false),
            rec("tie", "e2", 0.0, false, true),
        ];
        apply_reverse_filter(&mut rs);
        assert!(!rs[0].excluded);
        assert_eq!(rs[1].exclusion_reason, ExclusionReason::ReverseBeatsForward);
        assert!(!rs[2].excluded && !rs[3].excluded);
    }

    #[test]
    fn curation_orders_and_counts() {
        let mut rs = vec![
            rec("a", "e", 0.3, false, false),
            rec("b", "e", 0.9, false, false),
            rec("c", "e", 0.3, false, false),
            rec("d", "e", 5.0, true, false),
            rec("e", "e", 4.0, false, true),
        ];
        let c = curate_subset(&mut rs, 10).unwrap();
        assert_eq!(c.selected, vec!["b", "a", "c"]);
        let s = &c.summary;
        assert_eq!(s.removed_unanimous_correct + s.removed_reverse_beats_forward + s.survivors, s.input);
        assert_eq!(curate_subset(&mut rs, 1).unwrap().selected, vec!["b"]);
        assert!(curate_subset(&mut rs, 0).is_err());
    }

    #[test]
    fn all_unanimous_selects_nothing() {
        let mut rs = vec![rec("a", "e1", 1.0, true, true), rec("a", "e2", 1.0, true, false)];
        assert!(curate_subset(&mut rs, 3).unwrap().selected.is_empty());
    }
}
