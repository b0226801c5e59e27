use arrowrl::domain::TrainConfig;
use arrowrl::grpo::{kl_penalty, normalize_advantages, token_surrogate};
use arrowrl::policy::ProbVector;
use arrowrl::reward::{gate_alpha, RewardConfig};
use arrowrl::tds::kl_divergence;

#[test]
fn one_hot_group_of_eight() {
    let mut r = vec![0.0; 8];
    r[0] = 1.0;
    let (adv, degenerate) = normalize_advantages(&r);
    assert!(!degenerate);
    // mean 1/8, population std sqrt(7)/8
    let std = (1.0f64 / 8.0 * (7.0 / 8.0f64).powi(2) + 7.0 / 8.0 * (1.0f64 / 8.0).powi(2)).sqrt();
    assert!((std - 7f64.sqrt() / 8.0).abs() < 1e-15);
    assert!((adv[0] - (7.0 / 8.0) / std).abs() < 1e-6);
    assert!((adv[0] - 7f64.sqrt()).abs() < 1e-6);
    for a in &adv[1..] {
        assert!((a + 1.0 / 7f64.sqrt()).abs() < 1e-6);
    }
}

#[test]
fn constant_group_is_degenerate() {
    let (adv, degenerate) = normalize_advantages(&[0.4; 8]);
    assert!(degenerate);
    assert_eq!(adv, vec![0.0; 8]);
}

#[test]
fn kl_of_mirrored_binary_distributions() {
    let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
    let q = ProbVector::new(vec![0.1, 0.9]).unwrap();
    let by_hand = 0.9 * (0.9f64 / 0.1).ln() + 0.1 * (0.1f64 / 0.9).ln();
    let expected = 0.8 * 9f64.ln();
    assert!((by_hand - expected).abs() < 1e-15);
    assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn gate_switches_off_above_gamma() {
    let cfg = RewardConfig { alpha: 0.5, gamma: 0.5 };
    assert_eq!(gate_alpha(0.7, &cfg), 0.0);
    assert_eq!(gate_alpha(0.5, &cfg), 0.5);
    assert_eq!(gate_alpha(0.3, &cfg), 0.5);
}

#[test]
fn reward_weights_and_group_size_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.alpha, 0.5);
    assert_eq!(cfg.gamma, 0.5);
    assert_eq!(cfg.group_size, 8);
    assert_eq!(RewardConfig::default(), RewardConfig { alpha: 0.5, gamma: 0.5 });
}

#[test]
fn surrogate_clipping_by_hand() {
    let eps = 0.2;
    // r = 1.5, positive advantage: clipped at 1.2
    let lp = 1.5f64.ln();
    assert!((token_surrogate(lp, 0.0, 2.0, eps) - 2.4).abs() < 1e-12);
    // r = 1.5, negative advantage: unclipped term is smaller
    assert!((token_surrogate(lp, 0.0, -2.0, eps) + 3.0).abs() < 1e-12);
    // r = 0.5, negative advantage: clipped at 0.8
    let lp = 0.5f64.ln();
    assert!((token_surrogate(lp, 0.0, -1.0, eps) + 0.8).abs() < 1e-12);
}

#[test]
fn k3_by_hand() {
    // u = 2: 2 - ln 2 - 1
    let v = kl_penalty(0.0, 2f64.ln());
    assert!((v - (1.0 - 2f64.ln())).abs() < 1e-12);
}
