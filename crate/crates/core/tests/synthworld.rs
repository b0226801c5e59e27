use arrowrl::domain::{reverse_frames, write_samples_jsonl, FrameSeq, Sample, SEP};
use arrowrl::error::Error;
use arrowrl::rng::stream_rng;
use arrowrl::synthworld::{
    gen_clip, gen_dataset, gen_sample, gen_split, oracle_direction, world_vocab, Direction, ProcessKind, WorldConfig,
    WorldTask,
};
use proptest::prelude::*;

fn kind_of(s: &Sample) -> ProcessKind {
    ProcessKind::parse(&s.meta["process"]).unwrap()
}

fn jsonl(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    write_samples_jsonl(&mut out, samples).unwrap();
    out
}

#[test]
fn direction_answers_are_balanced() {
    let cfg = WorldConfig::default();
    let mut rng = stream_rng(11, "balance", 0);
    let n = 10_000;
    let mut first = 0;
    for i in 0..n {
        let s = gen_sample(ProcessKind::RampUp, WorldTask::Direction, format!("d{i}"), &cfg, &mut rng).unwrap();
        if s.answer == Direction::FirstReversed.answer() {
            first += 1;
        }
    }
    let frac = first as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn oracle_agrees_with_every_generated_label() {
    for seed in 0..3 {
        let cfg = WorldConfig { seed, num_samples: 1000, tasks: vec![WorldTask::Direction], ..WorldConfig::default() };
        let mut checked = 0;
        for s in gen_dataset(&cfg).unwrap() {
            if !kind_of(&s).is_sensitive() {
                continue;
            }
            let dir = oracle_direction(&s.frame_seq().unwrap(), &cfg).unwrap();
            assert_eq!(dir.answer(), s.answer, "{}", s.id);
            checked += 1;
        }
        assert_eq!(checked, 700);
    }
}

#[test]
fn oracle_on_hand_built_ramps() {
    let cfg = WorldConfig::default();
    let f = FrameSeq::new(vec![1, 2, 3, SEP, 3, 2, 1]).unwrap();
    assert_eq!(oracle_direction(&f, &cfg).unwrap(), Direction::SecondReversed);
    let f = FrameSeq::new(vec![3, 2, 1, SEP, 1, 2, 3]).unwrap();
    assert_eq!(oracle_direction(&f, &cfg).unwrap(), Direction::FirstReversed);
    let f = FrameSeq::new(vec![1, 2, 3, 3, 2, 1]).unwrap();
    assert!(matches!(oracle_direction(&f, &cfg), Err(Error::MalformedConcat(_))));
}

#[test]
fn ramp_down_cannot_be_a_direction_sample() {
    let cfg = WorldConfig::default();
    let mut rng = stream_rng(0, "pairing", 0);
    let r = gen_sample(ProcessKind::RampDown, WorldTask::Direction, "x".into(), &cfg, &mut rng);
    assert!(matches!(r, Err(Error::InvalidPairing { .. })));
}

#[test]
fn clip_shapes() {
    let cfg = WorldConfig::default();
    let mut rng = stream_rng(5, "shapes", 0);
    for _ in 0..200 {
        let up = gen_clip(ProcessKind::RampUp, &cfg, &mut rng);
        assert!(up.windows(2).all(|w| w[0] < w[1]));
        let down = gen_clip(ProcessKind::RampDown, &cfg, &mut rng);
        assert!(down.windows(2).all(|w| w[0] > w[1]));
        let burst = gen_clip(ProcessKind::BurstDecay, &cfg, &mut rng);
        let peak = *burst.iter().max().unwrap();
        assert_eq!(burst[1], peak);
        assert!(burst[1..].windows(2).all(|w| w[0] > w[1]));
        let cyc = gen_clip(ProcessKind::Cyclic, &cfg, &mut rng);
        assert_eq!(cyc.first(), cyc.last());
        assert_eq!(cyc, reverse_frames(&FrameSeq::new(cyc.clone()).unwrap()).into_inner());
        let hold = gen_clip(ProcessKind::StaticHold, &cfg, &mut rng);
        assert!(hold.iter().all(|v| *v == hold[0]));
        for clip in [up, down, burst, cyc, hold] {
            assert_eq!(clip.len(), cfg.segment_len);
        }
    }
}

#[test]
fn ramps_mirror_each_other() {
    for k in [ProcessKind::RampUp, ProcessKind::RampDown] {
        let other = if k == ProcessKind::RampUp { ProcessKind::RampDown } else { ProcessKind::RampUp };
        assert_eq!(k.reverse_caption(), other.caption());
        assert_eq!(k.reverse_answer(), other.answer());
        assert_eq!(k.band(), other.band());
    }
}

#[test]
fn caption_invariants_hold_on_generated_data() {
    let cfg = WorldConfig { num_samples: 500, ..WorldConfig::default() };
    let vocab = world_vocab();
    for s in gen_dataset(&cfg).unwrap() {
        let kind = kind_of(&s);
        assert_eq!(s.meta["sensitive"], kind.is_sensitive().to_string());
        s.validate(cfg.frame_vocab(), &vocab).unwrap();
        if kind.is_sensitive() {
            assert_ne!(kind.caption(), kind.reverse_caption());
        } else {
            let f = s.frame_seq().unwrap();
            assert!(f.is_palindrome() || kind.caption() == kind.reverse_caption());
        }
    }
}

#[test]
fn zero_sensitive_fraction_yields_only_insensitive_processes() {
    let cfg = WorldConfig { sensitive_fraction: 0.0, ..WorldConfig::default() };
    let samples = gen_dataset(&cfg).unwrap();
    assert_eq!(samples.len(), cfg.num_samples * cfg.tasks.len());
    assert!(samples
        .iter()
        .all(|s| matches!(kind_of(s), ProcessKind::Cyclic | ProcessKind::StaticHold)));
}

#[test]
fn sensitive_fraction_is_respected_per_task() {
    let cfg = WorldConfig { num_samples: 333, sensitive_fraction: 0.4, ..WorldConfig::default() };
    let samples = gen_dataset(&cfg).unwrap();
    for task in WorldTask::ALL {
        let n = samples
            .iter()
            .filter(|s| s.meta["format"] == task.as_str() && s.meta["sensitive"] == "true")
            .count();
        assert_eq!(n, 133);
    }
}

#[test]
fn generation_is_a_pure_function_of_the_config() {
    let cfg = WorldConfig { seed: 42, noise: 0.3, ..WorldConfig::default() };
    assert_eq!(jsonl(&gen_dataset(&cfg).unwrap()), jsonl(&gen_dataset(&cfg).unwrap()));
    let other = WorldConfig { seed: 43, ..cfg.clone() };
    assert_ne!(jsonl(&gen_dataset(&cfg).unwrap()), jsonl(&gen_dataset(&other).unwrap()));
    assert_ne!(jsonl(&gen_split(&cfg, "train").unwrap()), jsonl(&gen_split(&cfg, "eval").unwrap()));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        WorldConfig { sensitive_fraction: 1.5, ..WorldConfig::default() },
        WorldConfig { segment_len: 1, ..WorldConfig::default() },
        WorldConfig { tasks: vec![], ..WorldConfig::default() },
    ] {
        assert!(matches!(gen_dataset(&cfg), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn noisy_frames_stay_in_band(seed in 0u64..1000, noise in 0.0f64..1.0) {
        let cfg = WorldConfig { seed, noise, num_samples: 20, ..WorldConfig::default() };
        for s in gen_dataset(&cfg).unwrap() {
            let band = kind_of(&s).band();
            prop_assert!(s.frames.iter().all(|&v| v == SEP || cfg.band_of(v) == Some(band)));
        }
    }
}
