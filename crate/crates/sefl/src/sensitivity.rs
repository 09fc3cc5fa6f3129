//! Per-parameter sensitivity scoring and the encrypt/plaintext split.
//!
//! A [`SensitivityMap`] assigns every model parameter a non-negative
//! score; [`partition`] turns a map and a threshold tau into a [`Mask`]
//! labeling each index ENCRYPT (score strictly above tau) or PLAIN.
//! Clients combine their score vectors without revealing them by
//! encrypting quantized scores and letting the server run
//! [`aggregate_masks_encrypted`]; only key holders see the result.
//! Comparison on ciphertexts is not possible in an additive scheme, so
//! thresholding happens client side after decryption ([`filter_mask`]).

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::he::{he_add, he_mul_plain, noise_budget_bits, scalar_plaintext, Ciphertext};

/// How scores are derived from model state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMode {
    /// Score is the absolute value of the current weight; uses only the
    /// last row of the supplied history.
    AbsWeight,
    /// Score is the mean absolute gradient across the whole history.
    GradMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    scores: Vec<f64>,
}

impl SensitivityMap {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::BadScore { index: i });
            }
        }
        Ok(SensitivityMap { scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Encrypt,
    Plain,
}

/// A complete labeling of parameter indices, together with the
/// threshold that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    levels: Vec<Level>,
    tau: f64,
}

impl Mask {
    /// Uniform mask: every index at the same level (the full-encryption
    /// and plaintext baseline modes).
    pub fn uniform(level: Level, d: usize, tau: f64) -> Self {
        Mask {
            levels: vec![level; d],
            tau,
        }
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn encrypted_indices(&self) -> Vec<usize> {
        self.indices_at(Level::Encrypt)
    }

    pub fn plain_indices(&self) -> Vec<usize> {
        self.indices_at(Level::Plain)
    }

    fn indices_at(&self, level: Level) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == level)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn encrypted_count(&self) -> usize {
        self.levels.iter().filter(|&&l| l == Level::Encrypt).count()
    }

    /// Splits a full-length vector into (encrypted slice, plain slice),
    /// each in ascending index order.
    pub fn split(&self, values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if values.len() != self.levels.len() {
            return Err(Error::LengthMismatch {
                expected: self.levels.len(),
                got: values.len(),
            });
        }
        let mut enc = Vec::new();
        let mut plain = Vec::new();
        for (&v, &l) in values.iter().zip(&self.levels) {
            match l {
                Level::Encrypt => enc.push(v),
                Level::Plain => plain.push(v),
            }
        }
        Ok((enc, plain))
    }

    /// Inverse of [`split`](Self::split): interleaves the two slices
    /// back into index order.
    pub fn merge(&self, enc: &[f64], plain: &[f64]) -> Result<Vec<f64>> {
        if enc.len() + plain.len() != self.levels.len() {
            return Err(Error::LengthMismatch {
                expected: self.levels.len(),
                got: enc.len() + plain.len(),
            });
        }
        let mut enc_it = enc.iter();
        let mut plain_it = plain.iter();
        let mut out = Vec::with_capacity(self.levels.len());
        for &l in &self.levels {
            let v = match l {
                Level::Encrypt => enc_it.next(),
                Level::Plain => plain_it.next(),
            }
            .ok_or(Error::LengthMismatch {
                expected: self.levels.len(),
                got: enc.len() + plain.len(),
            })?;
            out.push(*v);
        }
        Ok(out)
    }

    /// Content-derived identifier; updates built against different
    /// masks carry different versions and refuse to aggregate.
    pub fn version(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.tau.to_bits().to_le_bytes());
        for &l in &self.levels {
            hasher.update([match l {
                Level::Encrypt => 1u8,
                Level::Plain => 0u8,
            }]);
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Scores model parameters. `history` is one row per round (gradient or
/// weight snapshots); AbsWeight reads the last row as the current
/// weights, GradMagnitude averages absolute values over all rows.
pub fn compute_sensitivity(history: &[Vec<f64>], mode: SensitivityMode) -> Result<SensitivityMap> {
    let last = history
        .last()
        .ok_or_else(|| Error::InvalidParams("sensitivity needs a non-empty history".into()))?;
    let d = last.len();
    if let Some(row) = history.iter().find(|r| r.len() != d) {
        return Err(Error::LengthMismatch {
            expected: d,
            got: row.len(),
        });
    }
    let scores = match mode {
        SensitivityMode::AbsWeight => last.iter().map(|w| w.abs()).collect(),
        SensitivityMode::GradMagnitude => {
            let mut acc = vec![0.0f64; d];
            for row in history {
                for (a, &g) in acc.iter_mut().zip(row) {
                    *a += g.abs();
                }
            }
            let k = history.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        }
    };
    SensitivityMap::new(scores)
}

/// Threshold split: index j is ENCRYPT iff score[j] > tau; ties go to
/// PLAIN. tau must be non-negative (infinity is allowed and yields an
/// all-plain mask).
pub fn partition(map: &SensitivityMap, tau: f64) -> Result<Mask> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::InvalidParams(format!(
            "threshold must be non-negative, got {tau}"
        )));
    }
    let levels = map
        .scores
        .iter()
        .map(|&s| if s > tau { Level::Encrypt } else { Level::Plain })
        .collect();
    Ok(Mask { levels, tau })
}

/// Client-side thresholding of a decrypted aggregate map; identical
/// semantics to [`partition`].
pub fn filter_mask(decrypted_sum: &SensitivityMap, tau: f64) -> Result<Mask> {
    partition(decrypted_sum, tau)
}

/// Checks score[j] <= c * risk[j] for all j; the validation gate for
/// externally supplied maps.
pub fn check_monotonicity(map: &SensitivityMap, risk: &[f64], c: f64) -> Result<bool> {
    if risk.len() != map.len() {
        return Err(Error::LengthMismatch {
            expected: map.len(),
            got: risk.len(),
        });
    }
    if !c.is_finite() || c < 1.0 {
        return Err(Error::InvalidParams(format!(
            "monotonicity constant must be finite and >= 1, got {c}"
        )));
    }
    Ok(map.scores.iter().zip(risk).all(|(&s, &r)| s <= c * r))
}

/// [`check_monotonicity`] as a hard gate, reporting the first offender.
pub fn enforce_monotonicity(map: &SensitivityMap, risk: &[f64], c: f64) -> Result<()> {
    if risk.len() != map.len() {
        return Err(Error::LengthMismatch {
            expected: map.len(),
            got: risk.len(),
        });
    }
    if !c.is_finite() || c < 1.0 {
        return Err(Error::InvalidParams(format!(
            "monotonicity constant must be finite and >= 1, got {c}"
        )));
    }
    for (i, (&s, &r)) in map.scores.iter().zip(risk).enumerate() {
        if s > c * r {
            return Err(Error::MonotonicityViolation {
                index: i,
                score: s,
                bound: c * r,
            });
        }
    }
    Ok(())
}

/// Quantizes scores to integers in [0, 255] (max score maps to 255) so
/// weighted sums of encrypted score vectors stay far below the
/// plaintext modulus.
pub fn quantize_scores(map: &SensitivityMap) -> Vec<i64> {
    let max = map.scores.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return vec![0; map.len()];
    }
    map.scores
        .iter()
        .map(|&s| (255.0 * s / max).round() as i64)
        .collect()
}

/// Server-side weighted sum of encrypted score vectors: the server
/// combines without decrypting, key holders decrypt the broadcast
/// result and threshold locally.
pub fn aggregate_masks_encrypted(
    encrypted: &[Ciphertext],
    weights: &[u64],
) -> Result<Ciphertext> {
    if encrypted.is_empty() {
        return Err(Error::InvalidParams(
            "mask aggregation needs at least one vector".into(),
        ));
    }
    if encrypted.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: encrypted.len(),
            got: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|&&w| w == 0) {
        return Err(Error::InvalidParams(format!("weight must be >= 1, got {w}")));
    }
    let params = encrypted[0].params().clone();
    let mut acc: Option<Ciphertext> = None;
    for (ct, &w) in encrypted.iter().zip(weights) {
        let weighted = he_mul_plain(ct, &scalar_plaintext(w, &params)?)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => he_add(&a, &weighted)?,
        });
    }
    let out = acc.expect("non-empty input produces an accumulator");
    if noise_budget_bits(&out) == 0 {
        return Err(Error::NoiseBudgetExhausted {
            bound: out.noise_bound(),
            ceiling: params.noise_ceiling(),
        });
    }
    Ok(out)
}

/// Text form: one `index score level` record per line, the format the
/// CLI accepts for hand-crafted maps.
pub fn write_mask_records(map: &SensitivityMap, mask: &Mask) -> Result<String> {
    if map.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: map.len(),
            got: mask.len(),
        });
    }
    let mut out = String::new();
    for (i, (&s, &l)) in map.scores.iter().zip(&mask.levels).enumerate() {
        let tag = match l {
            Level::Encrypt => "ENCRYPT",
            Level::Plain => "PLAIN",
        };
        out.push_str(&format!("{i} {s} {tag}\n"));
    }
    Ok(out)
}

/// Parses [`write_mask_records`] output. Indices must be 0..d in order.
/// The threshold is not stored in the file; the loaded mask carries the
/// largest PLAIN score (or 0), and the levels are validated to be
/// consistent with that threshold.
pub fn read_mask_records(text: &str) -> Result<(SensitivityMap, Mask)> {
    let mut scores = Vec::new();
    let mut levels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let idx: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("line {}: bad index", lineno + 1)))?;
        if idx != scores.len() {
            return Err(Error::Malformed(format!(
                "line {}: expected index {}, got {idx}",
                lineno + 1,
                scores.len()
            )));
        }
        let score: f64 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("line {}: bad score", lineno + 1)))?;
        let level = match parts.next() {
            Some("ENCRYPT") => Level::Encrypt,
            Some("PLAIN") => Level::Plain,
            _ => {
                return Err(Error::Malformed(format!(
                    "line {}: level must be ENCRYPT or PLAIN",
                    lineno + 1
                )))
            }
        };
        if parts.next().is_some() {
            return Err(Error::Malformed(format!(
                "line {}: trailing fields",
                lineno + 1
            )));
        }
        scores.push(score);
        levels.push(level);
    }
    let map = SensitivityMap::new(scores)?;
    let tau = map
        .scores
        .iter()
        .zip(&levels)
        .filter(|(_, &l)| l == Level::Plain)
        .map(|(&s, _)| s)
        .fold(0.0f64, f64::max);
    for (i, (&s, &l)) in map.scores.iter().zip(&levels).enumerate() {
        let consistent = match l {
            Level::Encrypt => s > tau,
            Level::Plain => s <= tau,
        };
        if !consistent {
            return Err(Error::Malformed(format!(
                "record {i}: levels are not consistent with any single threshold"
            )));
        }
    }
    Ok((map, Mask { levels, tau }))
}
