//! End-to-end integration checks that cut across modules: a selective
//! run with differential privacy enabled, mask record roundtrips, and
//! the security classification of the shipped parameter profiles.

use sefl::he::{meets_128_bit_security, params_for_security, profile_by_name};
use sefl::flsim::{run_training, FlConfig, Mode};
use sefl::sensitivity::{read_mask_records, write_mask_records, Level};

#[test]
fn selective_run_with_noise_produces_consistent_artifacts() {
    let mut cfg = FlConfig::default();
    cfg.rounds = 6;
    cfg.clients = 3;
    cfg.model_dim = 60;
    cfg.samples_per_client = 32;
    cfg.val_samples = 80;
    cfg.mode = Mode::Selective;
    cfg.dp_enabled = true;
    cfg.epsilon = 1.0;
    cfg.scale_bits = 10;
    cfg.seed = 5;
    let out = run_training(&cfg).expect("training run");

    assert_eq!(out.metrics.len(), cfg.rounds);
    assert_eq!(out.weights.len(), cfg.model_dim);
    // One mask line per establishment plus one audit line per
    // (client, round).
    let audit_lines = out
        .transcript
        .iter()
        .filter(|l| l.starts_with("round="))
        .count();
    assert_eq!(audit_lines, cfg.rounds * cfg.clients);

    let ledger = out.ledger.expect("ledger present when noise is on");
    assert_eq!(ledger.rounds_executed(), cfg.rounds);
    let last = out.metrics.last().unwrap();
    let (eps_basic, _) = ledger.compose_basic().unwrap();
    assert_eq!(last.eps_basic, eps_basic);
    assert!(last.eps_advanced > 0.0);

    // The mask actually splits traffic both ways at the default
    // threshold, and the byte accounting reflects it.
    assert!(out.mask.encrypted_count() > 0);
    assert!(out.mask.encrypted_count() < cfg.model_dim);
    assert!(last.bytes_encrypted > 0);
    assert!(last.bytes_plain > 0);
}

#[test]
fn mask_records_roundtrip_through_text() {
    let mut cfg = FlConfig::default();
    cfg.rounds = 2;
    cfg.clients = 2;
    cfg.model_dim = 30;
    cfg.samples_per_client = 16;
    cfg.val_samples = 40;
    cfg.mode = Mode::Selective;
    let out = run_training(&cfg).expect("training run");

    let scores = sefl::sensitivity::SensitivityMap::new(
        out.weights.iter().map(|w| w.abs() + 0.125).collect(),
    )
    .unwrap();
    let mask = sefl::sensitivity::partition(&scores, 0.25).unwrap();
    let text = write_mask_records(&scores, &mask).unwrap();
    let (scores_back, mask_back) = read_mask_records(&text).unwrap();
    assert_eq!(scores.scores(), scores_back.scores());
    assert_eq!(mask.levels(), mask_back.levels());
    assert_eq!(
        mask.levels().iter().filter(|&&l| l == Level::Encrypt).count(),
        mask_back.encrypted_count()
    );
    // The text format stores no threshold, so the reader derives one
    // from the scores; the reconstructed mask must still split
    // identically even though its version digest may differ.
    let (e1, p1) = mask.split(&out.weights).unwrap();
    let (e2, p2) = mask_back.split(&out.weights).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(p1, p2);
}

#[test]
fn shipped_profiles_classify_security_as_documented() {
    // A 60-bit modulus is far too large for 128-bit security at
    // degrees 1024 and 2048, fits comfortably inside the 109-bit cap
    // at 4096, and the 213-bit production chain sits under the 218-bit
    // cap at 8192.
    let toy = profile_by_name("toy-1024").unwrap();
    let test = profile_by_name("test-2048").unwrap();
    let bench = profile_by_name("bench-4096").unwrap();
    let prod = profile_by_name("prod-8192").unwrap();
    assert!(!meets_128_bit_security(&toy));
    assert!(!meets_128_bit_security(&test));
    assert!(meets_128_bit_security(&bench));
    assert!(meets_128_bit_security(&prod));

    let secure = params_for_security(128).unwrap();
    assert_eq!(secure.degree(), prod.degree());
    assert!(meets_128_bit_security(&secure));

    assert!(profile_by_name("no-such-profile").is_err());
}
