//! Differential privacy mechanics: L2 clipping, calibrated noise, and
//! cumulative (epsilon, delta) accounting across rounds.
//!
//! Noise is always added to plaintext update vectors on the client,
//! before encryption; nothing here touches ciphertexts. The default
//! policy is a uniform scale sigma = sensitivity / epsilon on every
//! coordinate, with two opt-in refinements: a multiplier on PLAIN
//! coordinates (`plain_noise_ratio`) and per-coordinate multipliers
//! proportional to normalized sensitivity scores.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::error::{Error, Result};
use crate::sensitivity::{Level, Mask, SensitivityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone)]
pub struct DpParams {
    /// Per-round privacy budget, > 0.
    pub epsilon: f64,
    /// Per-round failure probability in [0, 1); Gaussian requires > 0.
    pub delta: f64,
    /// L2 clipping bound C, > 0.
    pub clip_norm: f64,
    pub mechanism: Mechanism,
    /// Query sensitivity; the conventional estimate is 1.0.
    pub sensitivity: f64,
    /// Noise multiplier applied to PLAIN-labeled coordinates
    /// (1.0 = uniform noise everywhere, the default policy).
    pub plain_noise_ratio: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, delta: f64, clip_norm: f64, mechanism: Mechanism) -> Result<Self> {
        let dp = DpParams {
            epsilon,
            delta,
            clip_norm,
            mechanism,
            sensitivity: 1.0,
            plain_noise_ratio: 1.0,
        };
        dp.validate()?;
        Ok(dp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidParams(format!(
                "delta must lie in [0, 1), got {}",
                self.delta
            )));
        }
        if self.mechanism == Mechanism::Gaussian && self.delta == 0.0 {
            return Err(Error::InvalidParams(
                "the Gaussian mechanism requires delta > 0".into(),
            ));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::InvalidParams(format!(
                "clip_norm must be positive and finite, got {}",
                self.clip_norm
            )));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(Error::InvalidParams(format!(
                "sensitivity must be positive and finite, got {}",
                self.sensitivity
            )));
        }
        if !(self.plain_noise_ratio.is_finite() && self.plain_noise_ratio >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "plain_noise_ratio must be non-negative, got {}",
                self.plain_noise_ratio
            )));
        }
        Ok(())
    }

    /// Base noise scale: sigma for Gaussian, b for Laplace.
    pub fn noise_scale(&self) -> f64 {
        self.sensitivity / self.epsilon
    }
}

/// Rescales the update to L2 norm at most `clip_norm`:
/// v * min(1, C / ||v||). The zero vector passes through unchanged.
pub fn clip_update(update: &[f64], clip_norm: f64) -> Vec<f64> {
    assert!(
        clip_norm.is_finite() && clip_norm > 0.0,
        "clip norm must be positive"
    );
    let norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
    // The tolerance makes clipping exactly idempotent: a clipped vector
    // whose recomputed norm lands a few ulps above C passes through.
    if norm <= clip_norm * (1.0 + 1e-12) {
        return update.to_vec();
    }
    let factor = clip_norm / norm;
    update.iter().map(|v| v * factor).collect()
}

fn sample_laplace<R: Rng>(b: f64, rng: &mut R) -> f64 {
    // Inverse CDF: u uniform on (-1/2, 1/2), x = -b sgn(u) ln(1 - 2|u|).
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds mechanism noise to an already clipped update. Coordinate j's
/// scale is noise_scale() times the PLAIN ratio where the mask says
/// PLAIN, times score_j / mean(scores) when per-coordinate multipliers
/// are supplied.
pub fn add_dp_noise<R: Rng>(
    update: &[f64],
    dp: &DpParams,
    mask: &Mask,
    multipliers: Option<&SensitivityMap>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    dp.validate()?;
    if update.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            got: update.len(),
        });
    }
    let per_coord: Option<Vec<f64>> = match multipliers {
        None => None,
        Some(map) => {
            if map.len() != update.len() {
                return Err(Error::LengthMismatch {
                    expected: update.len(),
                    got: map.len(),
                });
            }
            let mean = map.scores().iter().sum::<f64>() / map.len().max(1) as f64;
            if mean <= 0.0 {
                return Err(Error::InvalidParams(
                    "sensitivity-scaled noise needs a non-zero score mean".into(),
                ));
            }
            Some(map.scores().iter().map(|s| s / mean).collect())
        }
    };
    let base = dp.noise_scale();
    let mut out = Vec::with_capacity(update.len());
    for (j, (&v, &level)) in update.iter().zip(mask.levels()).enumerate() {
        let mut scale = base;
        if level == Level::Plain {
            scale *= dp.plain_noise_ratio;
        }
        if let Some(m) = &per_coord {
            scale *= m[j];
        }
        let noise = match dp.mechanism {
            Mechanism::Gaussian => {
                let normal = Normal::new(0.0, scale)
                    .map_err(|e| Error::InvalidParams(format!("noise scale: {e}")))?;
                normal.sample(rng)
            }
            Mechanism::Laplace => sample_laplace(scale, rng),
        };
        out.push(v + noise);
    }
    Ok(out)
}

/// The advanced composition bound across K rounds at per-round budget
/// epsilon and target failure probability delta:
/// sqrt(2 K ln(1/delta)) * epsilon + K * epsilon * (e^epsilon - 1).
pub fn compose_advanced(epsilon: f64, delta: f64, k: u64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParams(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParams(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParams("composition needs K >= 1 rounds".into()));
    }
    let kf = k as f64;
    Ok((2.0 * kf * (1.0 / delta).ln()).sqrt() * epsilon + kf * epsilon * epsilon.exp_m1())
}

/// Append-only record of per-round (epsilon, delta) spends plus the
/// target delta used for advanced composition reporting.
#[derive(Debug, Clone)]
pub struct PrivacyLedger {
    per_round: Vec<(f64, f64)>,
    delta_target: f64,
}

impl PrivacyLedger {
    pub fn new(delta_target: f64) -> Self {
        PrivacyLedger {
            per_round: Vec::new(),
            delta_target,
        }
    }

    pub fn record(&mut self, epsilon: f64, delta: f64) {
        self.per_round.push((epsilon, delta));
    }

    pub fn rounds_executed(&self) -> usize {
        self.per_round.len()
    }

    pub fn per_round(&self) -> &[(f64, f64)] {
        &self.per_round
    }

    /// Exact sums (Sigma eps_i, Sigma delta_i); with uniform entries
    /// this is (k eps, k delta).
    pub fn compose_basic(&self) -> Result<(f64, f64)> {
        if self.per_round.is_empty() {
            return Err(Error::InvalidParams(
                "composition over an empty ledger".into(),
            ));
        }
        let eps = self.per_round.iter().map(|(e, _)| e).sum();
        let delta = self.per_round.iter().map(|(_, d)| d).sum();
        Ok((eps, delta))
    }

    /// Advanced composition over the ledger, requiring uniform
    /// per-round entries. The delta component is reported as
    /// K * delta + delta_target; the bound itself fixes only epsilon'.
    pub fn compose_advanced(&self) -> Result<(f64, f64)> {
        let (eps, delta) = *self.per_round.first().ok_or_else(|| {
            Error::InvalidParams("composition over an empty ledger".into())
        })?;
        if self
            .per_round
            .iter()
            .any(|&(e, d)| e != eps || d != delta)
        {
            return Err(Error::InvalidParams(
                "advanced composition requires uniform per-round budgets".into(),
            ));
        }
        let k = self.per_round.len() as u64;
        let eps_prime = compose_advanced(eps, self.delta_target, k)?;
        Ok((eps_prime, k as f64 * delta + self.delta_target))
    }

    /// One JSON record per round: round, epsilon, delta, basic_total,
    /// advanced_total (null while the prefix is non-uniform).
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        let mut eps_sum = 0.0;
        let mut uniform = true;
        for (i, &(eps, delta)) in self.per_round.iter().enumerate() {
            eps_sum += eps;
            if i > 0 && (eps, delta) != self.per_round[0] {
                uniform = false;
            }
            let advanced = if uniform {
                compose_advanced(self.per_round[0].0, self.delta_target, (i + 1) as u64)
                    .ok()
                    .map(serde_json::Value::from)
                    .unwrap_or(serde_json::Value::Null)
            } else {
                serde_json::Value::Null
            };
            let record = json!({
                "round": i + 1,
                "epsilon": eps,
                "delta": delta,
                "basic_total": eps_sum,
                "advanced_total": advanced,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::{partition, SensitivityMap};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn clipping_rescales_only_above_the_bound() {
        assert_eq!(clip_update(&[3.0, 4.0], 10.0), vec![3.0, 4.0]);
        let clipped = clip_update(&[30.0, 40.0], 10.0);
        assert!((clipped[0] - 6.0).abs() < 1e-12);
        assert!((clipped[1] - 8.0).abs() < 1e-12);
        assert_eq!(clip_update(&[0.0, 0.0], 5.0), vec![0.0, 0.0]);
    }

    #[test]
    fn clipping_is_idempotent_and_norm_bounded() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..500 {
            let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 40.0 - 20.0).collect();
            let c = 10.0;
            let once = clip_update(&v, c);
            let norm = once.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= c * (1.0 + 1e-9));
            assert_eq!(clip_update(&once, c), once);
        }
    }

    fn all_plain_mask(d: usize) -> Mask {
        Mask::uniform(Level::Plain, d, 0.0)
    }

    #[test]
    fn gaussian_noise_std_matches_sigma() {
        let dp = DpParams::new(1.0, 1e-5, 10.0, Mechanism::Gaussian).unwrap();
        assert_eq!(dp.noise_scale(), 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let d = 100_000;
        let noisy = add_dp_noise(&vec![0.0; d], &dp, &all_plain_mask(d), None, &mut rng).unwrap();
        let mean = noisy.iter().sum::<f64>() / d as f64;
        let var = noisy.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (d - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
        assert!(mean.abs() < 4.0 / (d as f64).sqrt());
    }

    #[test]
    fn laplace_noise_std_matches_scale() {
        let mut dp = DpParams::new(0.5, 0.0, 10.0, Mechanism::Laplace).unwrap();
        dp.sensitivity = 1.0;
        // b = 2, std = b * sqrt(2).
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let d = 100_000;
        let noisy = add_dp_noise(&vec![0.0; d], &dp, &all_plain_mask(d), None, &mut rng).unwrap();
        let var = noisy.iter().map(|x| x * x).sum::<f64>() / d as f64;
        let expect = 2.0 * 2.0f64.sqrt();
        assert!((var.sqrt() - expect).abs() < 0.03 * expect, "std {}", var.sqrt());
    }

    #[test]
    fn huge_epsilon_adds_negligible_noise() {
        let dp = DpParams::new(1e300, 1e-5, 10.0, Mechanism::Gaussian).unwrap();
        let v = [1.0, -2.0, 3.0];
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let noisy = add_dp_noise(&v, &dp, &all_plain_mask(3), None, &mut rng).unwrap();
        for (a, b) in v.iter().zip(&noisy) {
            assert!((a - b).abs() < 1e-290);
        }
    }

    #[test]
    fn plain_ratio_and_score_multipliers_shape_the_noise() {
        let mut dp = DpParams::new(1.0, 1e-5, 10.0, Mechanism::Gaussian).unwrap();
        dp.plain_noise_ratio = 0.0;
        let map = SensitivityMap::new(vec![9.0, 1.0]).unwrap();
        let mask = partition(&map, 5.0).unwrap(); // index 0 ENCRYPT, 1 PLAIN
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let noisy = add_dp_noise(&[0.0, 0.0], &dp, &mask, None, &mut rng).unwrap();
        assert_ne!(noisy[0], 0.0);
        assert_eq!(noisy[1], 0.0);

        // Per-coordinate multipliers: scores 9 and 1, mean 5.
        let mut sum_sq = [0.0f64; 2];
        let trials = 20_000;
        let dp2 = DpParams::new(1.0, 1e-5, 10.0, Mechanism::Gaussian).unwrap();
        for _ in 0..trials {
            let noisy = add_dp_noise(&[0.0, 0.0], &dp2, &mask, Some(&map), &mut rng).unwrap();
            sum_sq[0] += noisy[0] * noisy[0];
            sum_sq[1] += noisy[1] * noisy[1];
        }
        let std0 = (sum_sq[0] / trials as f64).sqrt();
        let std1 = (sum_sq[1] / trials as f64).sqrt();
        assert!((std0 - 1.8).abs() < 0.05, "std0 {std0}");
        assert!((std1 - 0.2).abs() < 0.01, "std1 {std1}");
    }

    #[test]
    fn params_validation_catches_bad_fields() {
        assert!(DpParams::new(0.0, 1e-5, 10.0, Mechanism::Gaussian).is_err());
        assert!(DpParams::new(1.0, 1.0, 10.0, Mechanism::Gaussian).is_err());
        assert!(DpParams::new(1.0, 0.0, 10.0, Mechanism::Gaussian).is_err());
        assert!(DpParams::new(1.0, 0.0, 10.0, Mechanism::Laplace).is_ok());
        assert!(DpParams::new(1.0, 1e-5, 0.0, Mechanism::Gaussian).is_err());
        let mut dp = DpParams::new(1.0, 1e-5, 10.0, Mechanism::Gaussian).unwrap();
        dp.sensitivity = -1.0;
        assert!(dp.validate().is_err());
    }

    #[test]
    fn basic_composition_sums_exactly() {
        let mut ledger = PrivacyLedger::new(1e-5);
        assert!(ledger.compose_basic().is_err());
        for _ in 0..3 {
            ledger.record(1.0, 1e-5);
        }
        let (e, d) = ledger.compose_basic().unwrap();
        assert_eq!(e, 3.0);
        assert!((d - 3e-5).abs() < 1e-20);
        assert_eq!(ledger.rounds_executed(), 3);

        let mut single = PrivacyLedger::new(1e-5);
        single.record(0.7, 2e-6);
        assert_eq!(single.compose_basic().unwrap(), (0.7, 2e-6));

        // Non-uniform ledgers still sum exactly.
        let mut mixed = PrivacyLedger::new(1e-5);
        mixed.record(0.5, 1e-6);
        mixed.record(0.25, 3e-6);
        let (e, d) = mixed.compose_basic().unwrap();
        assert_eq!(e, 0.75);
        assert_eq!(d, 4e-6);
        assert!(mixed.compose_advanced().is_err());
    }

    #[test]
    fn advanced_composition_matches_frozen_reference_values() {
        // Reference values computed with 50-digit arithmetic before this
        // function was written; tolerance 1e-9 relative.
        let table: [(f64, f64, u64, f64); 10] = [
            (0.5, 1e-5, 1, 2.7236235914441046772),
            (0.5, 1e-5, 10, 10.830742000426372489),
            (0.5, 1e-5, 100, 56.42869309594681338),
            (1.0, 1e-5, 1, 6.5168077406471264429),
            (1.0, 1e-5, 50, 119.84479354502782076),
            (1.0, 1e-6, 10, 33.805399647281551604),
            (0.1, 1e-6, 100, 6.3082309505134082267),
            (2.0, 1e-5, 5, 85.350221252199974669),
            (0.25, 1e-7, 20, 7.7679801951132205982),
            (1.0, 0.36787944117144233, 1, 3.132495390832140268),
        ];
        for (eps, delta, k, expect) in table {
            let got = compose_advanced(eps, delta, k).unwrap();
            assert!(
                ((got - expect) / expect).abs() < 1e-9,
                "({eps},{delta},{k}): got {got}, expected {expect}"
            );
        }
    }

    #[test]
    fn advanced_composition_dominates_its_first_term() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..200 {
            let eps = rng.random::<f64>() * 2.0 + 1e-3;
            let delta = 10f64.powf(-(rng.random::<f64>() * 6.0 + 1.0));
            let k = rng.random_range(1..=100u64);
            let total = compose_advanced(eps, delta, k).unwrap();
            let first = (2.0 * k as f64 * (1.0 / delta).ln()).sqrt() * eps;
            assert!(total >= first);
        }
        assert!(compose_advanced(1.0, 1e-5, 0).is_err());
        assert!(compose_advanced(-1.0, 1e-5, 1).is_err());
        assert!(compose_advanced(1.0, 0.0, 1).is_err());
    }

    #[test]
    fn small_epsilon_drives_the_bound_to_zero() {
        let mut prev = f64::MAX;
        for exp in 1..10 {
            let eps = 10f64.powi(-exp);
            let val = compose_advanced(eps, 1e-5, 10).unwrap();
            assert!(val < prev);
            prev = val;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn ledger_advanced_matches_free_function_and_exports_jsonl() {
        let mut ledger = PrivacyLedger::new(1e-5);
        for _ in 0..10 {
            ledger.record(1.0, 1e-5);
        }
        let (eps_prime, delta_prime) = ledger.compose_advanced().unwrap();
        assert_eq!(eps_prime, compose_advanced(1.0, 1e-5, 10).unwrap());
        assert!((delta_prime - (10.0 * 1e-5 + 1e-5)).abs() < 1e-18);

        let text = ledger.export_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["round"], 1);
        assert_eq!(first["epsilon"], 1.0);
        assert_eq!(first["basic_total"], 1.0);
        let last: serde_json::Value = serde_json::from_str(lines[9]).unwrap();
        assert_eq!(last["round"], 10);
        assert_eq!(last["basic_total"], 10.0);
        let adv = last["advanced_total"].as_f64().unwrap();
        assert!((adv - compose_advanced(1.0, 1e-5, 10).unwrap()).abs() < 1e-12);
    }
}
