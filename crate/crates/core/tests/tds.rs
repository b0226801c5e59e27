use arrowrl::domain::{encode_all, reverse_frames, EncodedSample, TaskKind};
use arrowrl::error::Error;
use arrowrl::policy::{PolicyDims, PolicyParams, ProbVector, ToyPolicy};
use arrowrl::run::{build_vocab, init_policy};
use arrowrl::synthworld::{gen_dataset, WorldConfig, WorldTask};
use arrowrl::tds::{
    aggregate, bench_report, curate_subset, eval_orderings, kl_divergence, perplexity_filter, relative_drop, score_all,
    tds_for_sample, ExclusionReason, OrderingAccuracy, TdsRecord,
};
use proptest::prelude::*;

fn record(id: &str, ev: &str, tds: f64, fwd: bool, rev: bool) -> TdsRecord {
    let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
    TdsRecord {
        sample_id: id.into(),
        evaluator_tag: ev.into(),
        p_forward: p.clone(),
        p_reverse: p,
        tds,
        forward_correct: fwd,
        reverse_correct: rev,
        sensitive: None,
        excluded: false,
        exclusion_reason: ExclusionReason::None,
    }
}

struct Fixture {
    params: Vec<PolicyParams>,
    samples: Vec<EncodedSample>,
}

fn fixture(tasks: Vec<WorldTask>, sensitive_fraction: f64) -> Fixture {
    let cfg = WorldConfig { num_samples: 60, tasks, sensitive_fraction, ..WorldConfig::default() };
    let raw = gen_dataset(&cfg).unwrap();
    let vocab = build_vocab(&raw);
    let dims = PolicyDims { frame_vocab: cfg.frame_vocab(), text_vocab: vocab.len(), max_frames: 13, d: 16 };
    Fixture {
        params: (0..3).map(|s| init_policy(dims, Default::default(), s)).collect(),
        samples: encode_all(&raw, &vocab, 13).unwrap(),
    }
}

#[test]
fn filters_run_in_order_and_summary_adds_up() {
    let mut recs = vec![
        // unanimous forward-correct
        record("a", "e1", 0.9, true, true),
        record("a", "e2", 0.9, true, false),
        // reverse beats forward
        record("b", "e1", 0.8, false, true),
        record("b", "e2", 0.8, true, true),
        // survivors
        record("c", "e1", 0.1, false, false),
        record("c", "e2", 0.3, true, false),
        record("d", "e1", 0.5, false, false),
        record("d", "e2", 0.5, false, false),
        record("e", "e1", 0.2, true, false),
        record("e", "e2", 0.2, false, false),
    ];
    let c = curate_subset(&mut recs, 2).unwrap();
    assert_eq!(c.selected, vec!["d", "c"]);
    let s = &c.summary;
    assert_eq!((s.input, s.removed_unanimous_correct, s.removed_reverse_beats_forward, s.survivors, s.selected), (5, 1, 1, 3, 2));
    assert_eq!(s.input, s.removed_unanimous_correct + s.removed_reverse_beats_forward + s.survivors);
    assert!(recs[..2].iter().all(|r| r.exclusion_reason == ExclusionReason::UnanimousCorrect));
    assert!(recs[2..4].iter().all(|r| r.exclusion_reason == ExclusionReason::ReverseBeatsForward));
    assert!(recs[4..].iter().all(|r| !r.excluded));
}

#[test]
fn unanimous_filter_takes_precedence() {
    // forward unanimous and reverse equally good: removed as unanimous, not reverse
    let mut recs = vec![record("a", "e1", 0.0, true, true)];
    let c = curate_subset(&mut recs, 1).unwrap();
    assert_eq!(c.summary.removed_unanimous_correct, 1);
    assert!(c.selected.is_empty());
}

#[test]
fn ties_break_by_id_and_k_beyond_survivors_returns_all() {
    let mut recs = vec![
        record("z", "e", 0.5, false, false),
        record("m", "e", 0.5, false, false),
        record("a", "e", 0.5, false, false),
        record("q", "e", 0.7, false, false),
    ];
    let c = curate_subset(&mut recs, 10).unwrap();
    assert_eq!(c.selected, vec!["q", "a", "m", "z"]);
    assert_eq!(c.summary.selected, 4);
}

#[test]
fn zero_k_is_rejected() {
    let mut recs = vec![record("a", "e", 0.5, false, false)];
    assert!(matches!(curate_subset(&mut recs, 0), Err(Error::Config(_))));
}

#[test]
fn curation_is_deterministic_on_real_records() {
    let f = fixture(vec![WorldTask::CaptionMatch], 0.7);
    let toys: Vec<ToyPolicy<'_>> = f.params.iter().enumerate().map(|(i, p)| ToyPolicy::new(p, format!("ev{i}"))).collect();
    let evs: Vec<&dyn arrowrl::policy::RolloutPolicy> = toys.iter().map(|t| t as _).collect();
    let mut a = score_all(&evs, &f.samples).unwrap();
    let mut b = score_all(&evs, &f.samples).unwrap();
    assert_eq!(a.len(), 3 * 60);
    assert_eq!(a, b);
    let ca = curate_subset(&mut a, 20).unwrap();
    let cb = curate_subset(&mut b, 20).unwrap();
    assert_eq!(ca, cb);
    let agg = aggregate(&a);
    for w in ca.selected.windows(2) {
        let (x, y) = (&agg[&w[0]], &agg[&w[1]]);
        assert!(x.mean_tds > y.mean_tds || (x.mean_tds == y.mean_tds && x.sample_id < y.sample_id));
    }
    let report = bench_report("synthetic", &a, vec![], Some(&ca.selected));
    assert!(report.mean_tds_selected.unwrap() >= report.mean_tds_all);
}

#[test]
fn palindromic_clips_have_zero_tds() {
    let f = fixture(vec![WorldTask::CaptionMatch], 0.0);
    let toy = ToyPolicy::new(&f.params[0], "p");
    for s in &f.samples {
        assert!(s.frames.is_palindrome());
        assert_eq!(tds_for_sample(&toy, s).unwrap().tds, 0.0);
    }
}

#[test]
fn free_text_samples_have_no_tds() {
    let f = fixture(vec![WorldTask::OpenQa], 0.7);
    let toy = ToyPolicy::new(&f.params[0], "p");
    assert!(matches!(tds_for_sample(&toy, &f.samples[0]), Err(Error::Unsupported(_))));
    assert!(score_all(&[&toy], &f.samples).unwrap().is_empty());
}

#[test]
fn palindrome_only_data_has_equal_forward_and_reverse_accuracy() {
    let f = fixture(vec![WorldTask::Direction, WorldTask::CaptionMatch], 0.0);
    let toy = ToyPolicy::new(&f.params[1], "p");
    let acc = eval_orderings(&toy, &f.samples, 0).unwrap();
    assert_eq!(acc.forward, acc.reverse);
    assert_eq!(acc, eval_orderings(&toy, &f.samples, 0).unwrap());
}

#[test]
fn perplexity_filter_thresholds() {
    let f = fixture(vec![WorldTask::Caption], 0.7);
    let p = &f.params[0];
    assert_eq!(perplexity_filter(p, &f.samples, 0.0).len(), f.samples.len());
    let kept = perplexity_filter(p, &f.samples, 1e-9);
    assert!(kept.iter().all(|s| !s.frames.is_palindrome()));
    let mut last = usize::MAX;
    for t in [0.0, 1e-6, 1e-4, 1e-3, 1e-2, 0.1, 1.0] {
        let n = perplexity_filter(p, &f.samples, t).len();
        assert!(n <= last);
        last = n;
    }
}

#[test]
fn relative_drop_cases() {
    assert_eq!(relative_drop(&OrderingAccuracy { forward: 0.75, reverse: 0.5, shuffled: 0.5 }), 1.0 / 3.0);
    assert_eq!(relative_drop(&OrderingAccuracy::default()), 0.0);
    let r = bench_report("b", &[], vec![("x".into(), OrderingAccuracy { forward: 0.5, reverse: 0.5, shuffled: 0.5 })], None);
    assert_eq!((r.samples, r.mean_tds_all, r.relative_drop_mean, r.relative_drop_std), (0, 0.0, 0.0, 0.0));
}

#[test]
fn tds_sees_reversed_frames() {
    let f = fixture(vec![WorldTask::CaptionMatch], 1.0);
    let toy = ToyPolicy::new(&f.params[0], "p");
    let s = &f.samples[0];
    assert_eq!(s.task(), TaskKind::Mcq);
    let r = tds_for_sample(&toy, s).unwrap();
    let manual = arrowrl::policy::first_token_option_probs(&f.params[0], s, &reverse_frames(&s.frames)).unwrap();
    assert_eq!(r.p_reverse, manual);
    assert!(r.tds > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn tds_is_invariant_under_consistent_option_relabeling(
        (p, q, perm) in (2usize..8).prop_flat_map(|n| (
            prop::collection::vec(0.001f64..1.0, n),
            prop::collection::vec(0.001f64..1.0, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let a = kl_divergence(&ProbVector::from_weights(&p).unwrap(), &ProbVector::from_weights(&q).unwrap()).unwrap();
        let b = kl_divergence(&ProbVector::from_weights(&pp).unwrap(), &ProbVector::from_weights(&qp).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }
}
