//! Server-side aggregation of hybrid client updates.
//!
//! Each client submits a [`HybridUpdate`]: the sensitive slice of its
//! model delta encrypted block-by-block, the rest in clear, plus an
//! integer weight (its dataset size). The server folds the encrypted
//! blocks homomorphically and the plain slices in floating point, never
//! decrypting anything; division by the total weight happens after
//! decryption on the key-holder side ([`decode_global`]).
//!
//! Two integrity layers sit alongside the plain additive fold: a
//! sampling [`audit_update`] the server runs on plaintext slices, and
//! an opt-in hash-weighted mode where every ciphertext is multiplied by
//! a digest-derived sparse ring element before summation so a
//! key-holder can detect post-hoc ciphertext tampering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::he::{
    decrypt, he_add, he_mul_plain, noise_budget_bits, plaintext_add, plaintext_from_residues,
    plaintext_mul, scalar_plaintext, serialize_ciphertext, Ciphertext, Plaintext, SecretKey,
};
use crate::sensitivity::Mask;

/// Number of nonzero coefficients in a hash-derived ring element; small
/// enough that plaintext multiplication multiplies noise by at most 32.
pub const HASH_WEIGHT: usize = 32;

/// One client's round contribution.
#[derive(Debug, Clone)]
pub struct HybridUpdate {
    pub client_id: u64,
    /// Aggregation weight (dataset size), >= 1.
    pub weight: u64,
    /// Version digest of the mask this update was split under.
    pub mask_version: u64,
    /// Ciphertext blocks covering the encrypted indices in mask order,
    /// `degree()` slots per block.
    pub enc_part: Vec<Ciphertext>,
    /// Number of meaningful slots in `enc_part` (the rest is padding).
    pub enc_len: usize,
    /// Clear values for the plain indices, in mask order.
    pub plain_part: Vec<f64>,
}

impl HybridUpdate {
    /// Structural checks: weight, slot coverage d = enc_len + plain,
    /// and block count consistent with the ring degree.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.weight == 0 {
            return Err(Error::InvalidParams(format!(
                "client {}: weight must be >= 1",
                self.client_id
            )));
        }
        if self.enc_len + self.plain_part.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: self.enc_len + self.plain_part.len(),
            });
        }
        let expected_blocks = if self.enc_len == 0 {
            0
        } else {
            let n = self.enc_part[0].params().degree();
            self.enc_len.div_ceil(n)
        };
        if self.enc_part.len() != expected_blocks {
            return Err(Error::LengthMismatch {
                expected: expected_blocks,
                got: self.enc_part.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AggregateResult {
    pub enc_agg: Vec<Ciphertext>,
    pub plain_agg: Vec<f64>,
    pub total_weight: u64,
    pub rejected: Vec<(u64, String)>,
}

fn check_uniform(updates: &[&HybridUpdate]) -> Result<()> {
    let Some(first) = updates.first() else {
        return Err(Error::InvalidParams(
            "aggregation needs at least one update".into(),
        ));
    };
    for u in updates {
        if u.mask_version != first.mask_version {
            return Err(Error::InvalidParams(format!(
                "client {} was built against a different mask version",
                u.client_id
            )));
        }
        if u.enc_part.len() != first.enc_part.len()
            || u.enc_len != first.enc_len
            || u.plain_part.len() != first.plain_part.len()
        {
            return Err(Error::LengthMismatch {
                expected: first.enc_len + first.plain_part.len(),
                got: u.enc_len + u.plain_part.len(),
            });
        }
        if u.weight == 0 {
            return Err(Error::InvalidParams(format!(
                "client {}: weight must be >= 1",
                u.client_id
            )));
        }
    }
    Ok(())
}

/// Updates sorted by client id, the deterministic fold order that makes
/// ciphertext aggregates byte-for-byte reproducible.
fn sorted_refs<'a>(updates: &'a [HybridUpdate]) -> Vec<&'a HybridUpdate> {
    let mut refs: Vec<&HybridUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    refs
}

/// Weighted homomorphic sum per block: fold of w_i * c_i over clients
/// in ascending client-id order. Errors if any output block's noise
/// budget is exhausted.
pub fn aggregate_encrypted(updates: &[HybridUpdate]) -> Result<Vec<Ciphertext>> {
    let refs = sorted_refs(updates);
    check_uniform(&refs)?;
    let blocks = refs[0].enc_part.len();
    if blocks == 0 {
        return Ok(Vec::new());
    }
    let params = refs[0].enc_part[0].params().clone();
    let mut out = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut acc: Option<Ciphertext> = None;
        for u in &refs {
            let weighted = he_mul_plain(&u.enc_part[b], &scalar_plaintext(u.weight, &params)?)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => he_add(&a, &weighted)?,
            });
        }
        let block = acc.expect("at least one update");
        if noise_budget_bits(&block) == 0 {
            return Err(Error::NoiseBudgetExhausted {
                bound: block.noise_bound(),
                ceiling: params.noise_ceiling(),
            });
        }
        out.push(block);
    }
    Ok(out)
}

/// Remaining budget per aggregated block, for diagnostics.
pub fn block_budgets(blocks: &[Ciphertext]) -> Vec<u32> {
    blocks.iter().map(noise_budget_bits).collect()
}

/// Weighted floating-point sum of the plaintext slices; the caller
/// divides by the total weight.
pub fn aggregate_plain(updates: &[HybridUpdate]) -> Result<Vec<f64>> {
    let refs = sorted_refs(updates);
    check_uniform(&refs)?;
    let d = refs[0].plain_part.len();
    let mut out = vec![0.0f64; d];
    for u in &refs {
        let w = u.weight as f64;
        for (o, &v) in out.iter_mut().zip(&u.plain_part) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Expands the SHA-256 digest of a ciphertext's canonical serialization
/// into a sparse ternary ring element with [`HASH_WEIGHT`] nonzero
/// coefficients (fewer only when the ring is smaller than that).
pub fn hash_to_plaintext(ct: &Ciphertext) -> Plaintext {
    let params = ct.params().clone();
    let digest = Sha256::digest(serialize_ciphertext(ct));
    let mut rng = ChaCha20Rng::from_seed(digest.into());
    let n = params.degree();
    let t = params.plain_modulus();
    let weight = HASH_WEIGHT.min(n);
    let mut coeffs = vec![0u64; n];
    let mut placed = 0;
    while placed < weight {
        let pos = rng.random_range(0..n);
        if coeffs[pos] != 0 {
            continue;
        }
        coeffs[pos] = if rng.random_range(0..2u32) == 0 { 1 } else { t - 1 };
        placed += 1;
    }
    plaintext_from_residues(coeffs, &params).expect("residues are valid by construction")
}

/// Integrity-mode aggregation: sum of c_i (x) H(c_i) per block, plus
/// the hash elements themselves (client-major, then block) so a
/// key-holder can verify. Decrypts to Sigma m_i * h_i in R_t, not to
/// the model aggregate; this mode exists for verification only.
pub fn aggregate_hash_weighted(
    updates: &[HybridUpdate],
) -> Result<(Vec<Ciphertext>, Vec<Vec<Plaintext>>)> {
    let refs = sorted_refs(updates);
    check_uniform(&refs)?;
    let blocks = refs[0].enc_part.len();
    let mut hashes: Vec<Vec<Plaintext>> = Vec::with_capacity(refs.len());
    for u in &refs {
        hashes.push(u.enc_part.iter().map(hash_to_plaintext).collect());
    }
    let mut agg = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut acc: Option<Ciphertext> = None;
        for (u, h) in refs.iter().zip(&hashes) {
            let weighted = he_mul_plain(&u.enc_part[b], &h[b])?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => he_add(&a, &weighted)?,
            });
        }
        agg.push(acc.expect("at least one update"));
    }
    Ok((agg, hashes))
}

/// Key-holder verification of the hash-weighted aggregate: recomputes
/// each h_i from the received ciphertexts, decrypts each block, and
/// checks Dec(agg) = Sigma m_i * h_i in R_t. Any single-bit tamper of a
/// ciphertext after aggregation changes both its digest and its
/// decryption, breaking the equality with overwhelming probability.
pub fn verify_hash_aggregate(
    sk: &SecretKey,
    updates: &[HybridUpdate],
    agg: &[Ciphertext],
) -> Result<bool> {
    let refs = sorted_refs(updates);
    check_uniform(&refs)?;
    let blocks = refs[0].enc_part.len();
    if agg.len() != blocks {
        return Err(Error::LengthMismatch {
            expected: blocks,
            got: agg.len(),
        });
    }
    for b in 0..blocks {
        let mut expected: Option<Plaintext> = None;
        for u in &refs {
            let h = hash_to_plaintext(&u.enc_part[b]);
            let m = decrypt(sk, &u.enc_part[b])?;
            let term = plaintext_mul(&m, &h)?;
            expected = Some(match expected {
                None => term,
                Some(e) => plaintext_add(&e, &term)?,
            });
        }
        let got = decrypt(sk, &agg[b])?;
        if got != expected.expect("at least one update") {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(String),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

/// Sampling audit: draws ceil(sample_fraction * d) distinct coordinates
/// and rejects when any sampled magnitude exceeds beta or the sampled
/// L2 mass extrapolates past beta * sqrt(d). Non-finite values are
/// rejected outright.
pub fn audit_update<R: Rng>(
    candidate: &[f64],
    beta: f64,
    sample_fraction: f64,
    rng: &mut R,
) -> Verdict {
    assert!(beta > 0.0 && beta.is_finite(), "audit bound must be positive");
    assert!(
        sample_fraction > 0.0 && sample_fraction <= 1.0,
        "sample fraction must lie in (0, 1]"
    );
    let d = candidate.len();
    if d == 0 {
        return Verdict::Accept;
    }
    let k = ((sample_fraction * d as f64).ceil() as usize).clamp(1, d);
    // Partial Fisher-Yates: the first k entries become a uniform sample
    // without replacement.
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.random_range(i..d);
        idx.swap(i, j);
    }
    let mut sq_sum = 0.0f64;
    for &i in &idx[..k] {
        let x = candidate[i];
        if !x.is_finite() {
            return Verdict::Reject(format!("coordinate {i} is not finite"));
        }
        if x.abs() > beta {
            return Verdict::Reject(format!(
                "coordinate {i} magnitude {:.6} exceeds bound {beta}",
                x.abs()
            ));
        }
        sq_sum += x * x;
    }
    let extrapolated = (sq_sum * d as f64 / k as f64).sqrt();
    let l2_bound = beta * (d as f64).sqrt();
    if extrapolated > l2_bound {
        return Verdict::Reject(format!(
            "extrapolated norm {extrapolated:.6} exceeds {l2_bound:.6}"
        ));
    }
    Verdict::Accept
}

/// The broadcast package: hybrid aggregate, the mask that shaped it,
/// and the weight divisor. The server assembles this without ever
/// holding a secret key.
#[derive(Debug, Clone)]
pub struct GlobalUpdate {
    pub enc_blocks: Vec<Ciphertext>,
    pub plain_sum: Vec<f64>,
    pub mask: Mask,
    pub total_weight: u64,
}

pub fn merge_global(
    enc_agg: Vec<Ciphertext>,
    plain_agg: Vec<f64>,
    mask: &Mask,
    total_weight: u64,
) -> Result<GlobalUpdate> {
    if total_weight == 0 {
        return Err(Error::InvalidParams("total weight must be >= 1".into()));
    }
    let enc_len = mask.encrypted_count();
    if plain_agg.len() != mask.len() - enc_len {
        return Err(Error::LengthMismatch {
            expected: mask.len() - enc_len,
            got: plain_agg.len(),
        });
    }
    let expected_blocks = if enc_len == 0 {
        0
    } else {
        let n = enc_agg
            .first()
            .map(|c| c.params().degree())
            .unwrap_or(usize::MAX);
        enc_len.div_ceil(n)
    };
    if enc_agg.len() != expected_blocks {
        return Err(Error::LengthMismatch {
            expected: expected_blocks,
            got: enc_agg.len(),
        });
    }
    Ok(GlobalUpdate {
        enc_blocks: enc_agg,
        plain_sum: plain_agg,
        mask: mask.clone(),
        total_weight,
    })
}

/// Key-holder consumption of a broadcast: decrypt + decode the
/// encrypted blocks, divide everything by the total weight, and
/// interleave back to a full-length weighted-mean delta.
pub fn decode_global(update: &GlobalUpdate, sk: &SecretKey) -> Result<Vec<f64>> {
    let enc_len = update.mask.encrypted_count();
    let mut enc_vals = Vec::with_capacity(enc_len);
    for (b, block) in update.enc_blocks.iter().enumerate() {
        let n = block.params().degree();
        let remaining = enc_len - b * n;
        let take = remaining.min(n);
        let pt = decrypt(sk, block)?;
        enc_vals.extend(pt.decode().into_iter().take(take));
    }
    let w = update.total_weight as f64;
    let enc_mean: Vec<f64> = enc_vals.iter().map(|v| v / w).collect();
    let plain_mean: Vec<f64> = update.plain_sum.iter().map(|v| v / w).collect();
    update.mask.merge(&enc_mean, &plain_mean)
}

/// Hex SHA-256 of a ciphertext's canonical bytes, the transcript's
/// commitment to each encrypted block.
pub fn ciphertext_digest_hex(ct: &Ciphertext) -> String {
    let digest = Sha256::digest(serialize_ciphertext(ct));
    to_hex(&digest)
}

/// Hex SHA-256 over the little-endian bit patterns of a float slice.
pub fn plain_checksum_hex(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    to_hex(&hasher.finalize())
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One transcript record: stable, greppable key=value text. The digest
/// commits to every encrypted block; the checksum to the plain slice.
pub fn transcript_record(round: usize, update: &HybridUpdate, verdict: &Verdict) -> String {
    let verdict_text = match verdict {
        Verdict::Accept => "ACCEPT".to_string(),
        Verdict::Reject(reason) => format!("REJECT({})", reason.replace(' ', "_")),
    };
    let mut hasher = Sha256::new();
    for ct in &update.enc_part {
        hasher.update(serialize_ciphertext(ct));
    }
    let enc_digest = to_hex(&hasher.finalize());
    format!(
        "round={round} client={} weight={} verdict={verdict_text} enc_digest={enc_digest} plain_checksum={}",
        update.client_id,
        update.weight,
        plain_checksum_hex(&update.plain_part)
    )
}

/// Exact weighted sum of small integer vectors in Z, the oracle the
/// homomorphic path is tested against.
pub fn weighted_integer_sum(vectors: &[Vec<i64>], weights: &[u64]) -> Vec<i128> {
    let d = vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut out = vec![0i128; d];
    for (v, &w) in vectors.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += x as i128 * w as i128;
        }
    }
    out
}
