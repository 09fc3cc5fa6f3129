//! RLWE encryption with additive and plaintext-multiplicative
//! homomorphism over R_q = Z_q[x]/(x^n + 1).
//!
//! Construction. KeyGen samples ternary s and uniform a, publishes
//! (a, b = -(a s) - e). Encryption of m in R_t under ephemeral ternary u:
//! c0 = b u + e1 + Delta m, c1 = a u + e2 with Delta = floor(q / t).
//! Decryption computes c0 + s c1 = Delta m + E and rounds t/q of it:
//! the result is exact while the accumulated error magnitude stays
//! below q/(2t).
//!
//! Noise accounting is static and conservative: every ciphertext carries
//! an upper bound on |E| that callers can turn into a bit budget via
//! [`noise_budget_bits`]. A fresh ciphertext starts at k(1 + 2n) where k
//! hard-bounds the error sampler. Addition sums the bounds plus the
//! message-wrap cross term q mod t; plaintext multiplication scales by
//! the centered l1 norm of the multiplier plus the rounding cross term.
//! Bounds saturate u64: a saturated bound reads as budget zero, and
//! decryption refuses rather than return unreliable output.
//!
//! ```
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha20Rng;
//! use sefl::he::{decrypt, encode, encrypt, keygen};
//! use sefl::ring::RingParams;
//!
//! let params = RingParams::new(64, &[576460752303439873], 786433, 1.0).unwrap();
//! let mut rng = ChaCha20Rng::seed_from_u64(7);
//! let keys = keygen(&params, &mut rng);
//! let pt = encode(&[1.5, -0.25, 3.0], 10, &params).unwrap();
//! let ct = encrypt(&keys.public, &pt, &mut rng).unwrap();
//! let back = decrypt(&keys.secret, &ct).unwrap();
//! assert_eq!(back.decode()[..3], [1.5, -0.25, 3.0]);
//! ```

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ring::ntt::{mul_shoup, shoup};
use crate::ring::primes::{add_mod, mul_mod};
use crate::ring::sampler::{sample_error, sample_ternary, sample_uniform};
use crate::ring::{Polynomial, RingParams};

pub const CIPHERTEXT_MAGIC: [u8; 4] = *b"SEFL";
pub const KEY_MAGIC: [u8; 4] = *b"SEFK";
pub const FORMAT_VERSION: u8 = 1;

// ---------------------------------------------------------------------------
// Parameter profiles
// ---------------------------------------------------------------------------

/// Single 60-bit transform-friendly prime (≡ 1 mod 8192), shared by the
/// sub-production profiles.
pub const Q60: u64 = 576460752303439873;

/// Four 54-bit transform-friendly primes (≡ 1 mod 16384) whose product
/// is the 213-bit production modulus, within the 218-bit budget the
/// 128-bit-security table allows at n = 8192.
pub const Q54_CHAIN: [u64; 4] = [
    9007199255019521,
    9007199255347201,
    9007199255560193,
    9007199255658497,
];

/// Named ring profiles accepted by configs and the CLI.
pub fn profile_by_name(name: &str) -> Result<Arc<RingParams>> {
    match name {
        // Smallest prime ≡ 1 mod 2n above a per-profile floor; the floor
        // leaves fixed-point headroom for weighted sums (see flsim).
        "toy-1024" => RingParams::new(1024, &[Q60], 4206593, 3.2),
        "test-2048" => RingParams::new(2048, &[Q60], 1073153, 3.2),
        "bench-4096" => RingParams::new(4096, &[Q60], 557057, 3.2),
        "prod-8192" => RingParams::new(8192, &Q54_CHAIN, 557057, 3.2),
        other => Err(Error::Config(format!(
            "unknown ring profile '{other}' (expected toy-1024, test-2048, bench-4096, or prod-8192)"
        ))),
    }
}

/// Parameters meeting the requested classical security level with a
/// ternary secret. Only 128 is tabulated.
pub fn params_for_security(bits: u32) -> Result<Arc<RingParams>> {
    match bits {
        128 => profile_by_name("prod-8192"),
        other => Err(Error::InvalidParams(format!(
            "no parameter set tabulated for {other}-bit security"
        ))),
    }
}

/// Maximum total modulus bits at each degree for 128-bit classical
/// security with a ternary secret.
const SECURITY_128_TABLE: [(usize, u64); 4] = [(1024, 27), (2048, 54), (4096, 109), (8192, 218)];

/// True when (n, total q bits) sits within the tabulated 128-bit region.
pub fn meets_128_bit_security(params: &RingParams) -> bool {
    SECURITY_128_TABLE
        .iter()
        .any(|&(n, max_bits)| params.degree() >= n && params.modulus_bits() <= max_bits)
}

// ---------------------------------------------------------------------------
// Plaintexts and encoding
// ---------------------------------------------------------------------------

/// How logical slot values map onto polynomial coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotMapping {
    /// Value j sits in coefficient j. Always available; the default,
    /// since the protocol only adds and scalar-multiplies.
    Coefficient,
    /// Slot values are evaluations at the roots of x^n + 1 over Z_t;
    /// requires t prime with t ≡ 1 (mod 2n). Plaintext products act
    /// slotwise in this mapping.
    Batched,
}

/// An element of R_t tagged with its fixed-point scale and how many
/// leading slots carry caller data.
#[derive(Clone)]
pub struct Plaintext {
    coeffs: Vec<u64>,
    scale_bits: u32,
    slot_count: usize,
    mapping: SlotMapping,
    params: Arc<RingParams>,
}

impl Plaintext {
    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn mapping(&self) -> SlotMapping {
        self.mapping
    }

    pub fn params(&self) -> &Arc<RingParams> {
        &self.params
    }

    pub fn coefficients(&self) -> &[u64] {
        &self.coeffs
    }

    /// Reinterprets the number of meaningful slots (presentation
    /// metadata only; the ring element is unchanged).
    pub fn with_slot_count(mut self, slot_count: usize) -> Self {
        self.slot_count = slot_count.min(self.params.degree());
        self
    }

    /// Reinterprets the slot mapping, e.g. after decrypting a batched
    /// ciphertext (the wire format does not carry the mapping).
    pub fn with_mapping(mut self, mapping: SlotMapping) -> Self {
        self.mapping = mapping;
        self
    }

    /// Centered lift of the stored residues to (-t/2, t/2].
    fn centered(&self) -> Vec<i64> {
        let t = self.params.plain_modulus();
        let half = (t - 1) / 2;
        self.coeffs
            .iter()
            .map(|&c| if c <= half { c as i64 } else { c as i64 - t as i64 })
            .collect()
    }

    /// Fixed-point decode of the leading `slot_count` slots.
    pub fn decode(&self) -> Vec<f64> {
        let scale = (1u64 << self.scale_bits) as f64;
        let slot_values = match self.mapping {
            SlotMapping::Coefficient => self.centered(),
            SlotMapping::Batched => {
                let table = self
                    .params
                    .plain_table()
                    .expect("batched plaintext implies a plain-modulus table");
                let evals = table.to_eval(&self.coeffs);
                let t = self.params.plain_modulus();
                let half = (t - 1) / 2;
                evals
                    .iter()
                    .map(|&c| if c <= half { c as i64 } else { c as i64 - t as i64 })
                    .collect()
            }
        };
        slot_values[..self.slot_count]
            .iter()
            .map(|&v| v as f64 / scale)
            .collect()
    }

    /// Integer decode (centered residues) of the leading slots.
    pub fn decode_integers(&self) -> Vec<i64> {
        let mut vals = self.centered();
        vals.truncate(self.slot_count);
        vals
    }

    /// Centered l1 norm: the factor by which multiplying a ciphertext
    /// by this plaintext scales the tracked noise bound.
    pub fn centered_l1(&self) -> u64 {
        let t = self.params.plain_modulus();
        let mut acc: u128 = 0;
        for &c in &self.coeffs {
            acc += c.min(t - c) as u128;
        }
        acc.min(u64::MAX as u128) as u64
    }

    fn is_constant(&self) -> bool {
        self.coeffs[1..].iter().all(|&c| c == 0)
    }
}

impl PartialEq for Plaintext {
    /// Ring-content equality: coefficients and scale. Slot count and
    /// mapping are presentation metadata and do not participate.
    fn eq(&self, other: &Self) -> bool {
        self.params.compatible(&other.params)
            && self.scale_bits == other.scale_bits
            && self.coeffs == other.coeffs
    }
}

impl fmt::Debug for Plaintext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plaintext")
            .field("slots", &self.slot_count)
            .field("scale_bits", &self.scale_bits)
            .field("mapping", &self.mapping)
            .finish()
    }
}

fn scaled_residues(values: &[f64], scale_bits: u32, params: &RingParams) -> Result<Vec<u64>> {
    let t = params.plain_modulus();
    let scale = (1u64 << scale_bits) as f64;
    let mut out = vec![0u64; params.degree()];
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::EncodeOverflow {
                value: v,
                scale_bits,
                half_t: t / 2,
            });
        }
        let scaled = (v * scale).round();
        if 2.0 * scaled.abs() >= t as f64 {
            return Err(Error::EncodeOverflow {
                value: v,
                scale_bits,
                half_t: t / 2,
            });
        }
        let s = scaled as i64;
        out[i] = if s >= 0 { s as u64 } else { t - s.unsigned_abs() };
    }
    Ok(out)
}

/// Fixed-point encode: value v becomes round(v * 2^scale_bits) mod t in
/// its slot. Errors when any |v| * 2^scale_bits reaches t/2.
pub fn encode(values: &[f64], scale_bits: u32, params: &Arc<RingParams>) -> Result<Plaintext> {
    encode_with(values, scale_bits, params, SlotMapping::Coefficient)
}

pub fn encode_with(
    values: &[f64],
    scale_bits: u32,
    params: &Arc<RingParams>,
    mapping: SlotMapping,
) -> Result<Plaintext> {
    if values.len() > params.degree() {
        return Err(Error::LengthMismatch {
            expected: params.degree(),
            got: values.len(),
        });
    }
    let residues = scaled_residues(values, scale_bits, params)?;
    let coeffs = match mapping {
        SlotMapping::Coefficient => residues,
        SlotMapping::Batched => {
            let table = params.plain_table().ok_or_else(|| {
                Error::InvalidParams(format!(
                    "plaintext modulus {} is not a prime ≡ 1 mod 2n; batching unavailable",
                    params.plain_modulus()
                ))
            })?;
            let mut evals = residues;
            table.from_eval(&mut evals);
            evals
        }
    };
    Ok(Plaintext {
        coeffs,
        scale_bits,
        slot_count: values.len(),
        mapping,
        params: Arc::clone(params),
    })
}

/// Integer encode at scale 0 (coefficient mapping).
pub fn encode_integers(values: &[i64], params: &Arc<RingParams>) -> Result<Plaintext> {
    if values.len() > params.degree() {
        return Err(Error::LengthMismatch {
            expected: params.degree(),
            got: values.len(),
        });
    }
    let t = params.plain_modulus();
    let mut coeffs = vec![0u64; params.degree()];
    for (i, &v) in values.iter().enumerate() {
        if 2 * v.unsigned_abs() >= t {
            return Err(Error::EncodeOverflow {
                value: v as f64,
                scale_bits: 0,
                half_t: t / 2,
            });
        }
        coeffs[i] = if v >= 0 { v as u64 } else { t - v.unsigned_abs() };
    }
    Ok(Plaintext {
        coeffs,
        scale_bits: 0,
        slot_count: values.len(),
        mapping: SlotMapping::Coefficient,
        params: Arc::clone(params),
    })
}

/// Constant polynomial w (scale 0); the scalar multiplier used for
/// weighted aggregation.
pub fn scalar_plaintext(w: u64, params: &Arc<RingParams>) -> Result<Plaintext> {
    let t = params.plain_modulus();
    if w >= t {
        return Err(Error::EncodeOverflow {
            value: w as f64,
            scale_bits: 0,
            half_t: t / 2,
        });
    }
    let mut coeffs = vec![0u64; params.degree()];
    coeffs[0] = w;
    Ok(Plaintext {
        coeffs,
        scale_bits: 0,
        slot_count: 1,
        mapping: SlotMapping::Coefficient,
        params: Arc::clone(params),
    })
}

/// Builds a plaintext directly from residues mod t (scale 0); used by
/// the hash-expansion and test plumbing.
pub fn plaintext_from_residues(residues: Vec<u64>, params: &Arc<RingParams>) -> Result<Plaintext> {
    if residues.len() != params.degree() {
        return Err(Error::LengthMismatch {
            expected: params.degree(),
            got: residues.len(),
        });
    }
    let t = params.plain_modulus();
    if let Some(&bad) = residues.iter().find(|&&c| c >= t) {
        return Err(Error::Malformed(format!("residue {bad} not below t = {t}")));
    }
    Ok(Plaintext {
        coeffs: residues,
        scale_bits: 0,
        slot_count: params.degree(),
        mapping: SlotMapping::Coefficient,
        params: Arc::clone(params),
    })
}

/// Negacyclic product of two plaintexts in R_t (reference path; used by
/// the hash-weighted aggregate verifier).
pub fn plaintext_mul(a: &Plaintext, b: &Plaintext) -> Result<Plaintext> {
    if !a.params.compatible(&b.params) {
        return Err(Error::ParamsMismatch);
    }
    let t = a.params.plain_modulus();
    let coeffs = match a.params.plain_table() {
        Some(table) => table.negacyclic_mul(&a.coeffs, &b.coeffs),
        None => crate::ring::ntt::schoolbook_negacyclic(&a.coeffs, &b.coeffs, t),
    };
    Ok(Plaintext {
        coeffs,
        scale_bits: a.scale_bits + b.scale_bits,
        slot_count: a.params.degree(),
        mapping: SlotMapping::Coefficient,
        params: Arc::clone(&a.params),
    })
}

/// Sum of two plaintexts in R_t.
pub fn plaintext_add(a: &Plaintext, b: &Plaintext) -> Result<Plaintext> {
    if !a.params.compatible(&b.params) {
        return Err(Error::ParamsMismatch);
    }
    if a.scale_bits != b.scale_bits {
        return Err(Error::InvalidParams(format!(
            "plaintext scales differ: {} vs {}",
            a.scale_bits, b.scale_bits
        )));
    }
    let t = a.params.plain_modulus();
    let coeffs = a
        .coeffs
        .iter()
        .zip(&b.coeffs)
        .map(|(&x, &y)| add_mod(x, y, t))
        .collect();
    Ok(Plaintext {
        coeffs,
        scale_bits: a.scale_bits,
        slot_count: a.slot_count.max(b.slot_count),
        mapping: a.mapping,
        params: Arc::clone(&a.params),
    })
}

// ---------------------------------------------------------------------------
// Keys
// ---------------------------------------------------------------------------

/// Evaluation-domain cache of one key polynomial: per transform-friendly
/// limb, the eval form and its Shoup companions.
#[derive(Clone)]
struct EvalCache {
    eval: Vec<Vec<u64>>,
    eval_shoup: Vec<Vec<u64>>,
}

impl EvalCache {
    fn build(poly: &Polynomial) -> Self {
        let params = poly.params();
        let mut eval = Vec::with_capacity(params.limb_count());
        let mut eval_shoup = Vec::with_capacity(params.limb_count());
        for j in 0..params.limb_count() {
            match params.table(j) {
                Some(table) => {
                    let e = table.to_eval(poly.limb(j));
                    let es = e.iter().map(|&w| shoup(w, params.moduli()[j])).collect();
                    eval.push(e);
                    eval_shoup.push(es);
                }
                None => {
                    eval.push(Vec::new());
                    eval_shoup.push(Vec::new());
                }
            }
        }
        EvalCache { eval, eval_shoup }
    }
}

#[derive(Clone)]
pub struct PublicKey {
    a: Polynomial,
    b: Polynomial,
    a_cache: EvalCache,
    b_cache: EvalCache,
    params: Arc<RingParams>,
}

impl PublicKey {
    pub fn params(&self) -> &Arc<RingParams> {
        &self.params
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(n={})", self.params.degree())
    }
}

#[derive(Clone)]
pub struct SecretKey {
    s: Polynomial,
    s_cache: EvalCache,
    params: Arc<RingParams>,
}

impl SecretKey {
    pub fn params(&self) -> &Arc<RingParams> {
        &self.params
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Never print key material.
        write!(f, "SecretKey([REDACTED])")
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// Samples a keypair: ternary s, uniform a, b = -(a s) - e.
pub fn keygen<R: Rng>(params: &Arc<RingParams>, rng: &mut R) -> KeyPair {
    let s = sample_ternary(params, rng);
    let a = sample_uniform(params, rng);
    let e = sample_error(params, rng);
    let b = a
        .mul(&s)
        .and_then(|as_| as_.add(&e))
        .expect("freshly sampled operands share params")
        .neg();
    let a_cache = EvalCache::build(&a);
    let b_cache = EvalCache::build(&b);
    let s_cache = EvalCache::build(&s);
    KeyPair {
        public: PublicKey {
            a,
            b,
            a_cache,
            b_cache,
            params: Arc::clone(params),
        },
        secret: SecretKey {
            s,
            s_cache,
            params: Arc::clone(params),
        },
    }
}

/// key_poly * x computed limbwise, reusing the eval-domain cache of the
/// key polynomial and a precomputed eval form of x where available.
fn mul_cached(
    key_poly: &Polynomial,
    cache: &EvalCache,
    x: &Polynomial,
    x_eval: &[Vec<u64>],
) -> Polynomial {
    let params = Arc::clone(key_poly.params());
    let mut out = Polynomial::zero(&params);
    for j in 0..params.limb_count() {
        let m = params.moduli()[j];
        let prod = match params.table(j) {
            Some(table) => {
                let mut acc = x_eval[j].clone();
                let w = &cache.eval[j];
                let ws = &cache.eval_shoup[j];
                for (i, v) in acc.iter_mut().enumerate() {
                    *v = mul_shoup(*v, w[i], ws[i], m);
                }
                table.from_eval(&mut acc);
                acc
            }
            None => crate::ring::ntt::schoolbook_negacyclic(x.limb(j), key_poly.limb(j), m),
        };
        out.limb_mut(j).copy_from_slice(&prod);
    }
    out
}

// ---------------------------------------------------------------------------
// Ciphertexts
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Ciphertext {
    c0: Polynomial,
    c1: Polynomial,
    noise_bound: u64,
    ops_depth: u32,
    scale_bits: u32,
    params: Arc<RingParams>,
}

impl Ciphertext {
    pub fn params(&self) -> &Arc<RingParams> {
        &self.params
    }

    pub fn noise_bound(&self) -> u64 {
        self.noise_bound
    }

    pub fn ops_depth(&self) -> u32 {
        self.ops_depth
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn component(&self, which: usize) -> &Polynomial {
        match which {
            0 => &self.c0,
            1 => &self.c1,
            _ => panic!("ciphertexts have two components"),
        }
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("n", &self.params.degree())
            .field("noise_bound", &self.noise_bound)
            .field("ops_depth", &self.ops_depth)
            .field("scale_bits", &self.scale_bits)
            .finish()
    }
}

/// Noise bound of a fresh encryption: |e1 + s e2 - e u| <= k (1 + 2n)
/// with ternary s, u and every error coefficient hard-bounded by k.
pub fn fresh_noise_bound(params: &RingParams) -> u64 {
    let k = params.cbd_k() as u64;
    k.saturating_mul(1 + 2 * params.degree() as u64)
}

/// Encrypts a plaintext under the public key.
pub fn encrypt<R: Rng>(pk: &PublicKey, pt: &Plaintext, rng: &mut R) -> Result<Ciphertext> {
    if !pk.params.compatible(&pt.params) {
        return Err(Error::ParamsMismatch);
    }
    let params = &pk.params;
    let u = sample_ternary(params, rng);
    let e1 = sample_error(params, rng);
    let e2 = sample_error(params, rng);

    // One forward transform of u serves both key products.
    let u_eval: Vec<Vec<u64>> = (0..params.limb_count())
        .map(|j| match params.table(j) {
            Some(table) => table.to_eval(u.limb(j)),
            None => Vec::new(),
        })
        .collect();

    let mut c0 = mul_cached(&pk.b, &pk.b_cache, &u, &u_eval).add(&e1)?;
    let c1 = mul_cached(&pk.a, &pk.a_cache, &u, &u_eval).add(&e2)?;

    // c0 += Delta * m, limbwise scalar products.
    for j in 0..params.limb_count() {
        let m = params.moduli()[j];
        let dj = params.delta_mod()[j];
        let limb = c0.limb_mut(j);
        for (i, &mc) in pt.coeffs.iter().enumerate() {
            limb[i] = add_mod(limb[i], mul_mod(dj, mc, m), m);
        }
    }

    Ok(Ciphertext {
        c0,
        c1,
        noise_bound: fresh_noise_bound(params),
        ops_depth: 0,
        scale_bits: pt.scale_bits,
        params: Arc::clone(params),
    })
}

/// Remaining noise budget in bits: floor(log2 of ceiling / bound), where
/// ceiling = floor(q / (2t)). Zero means decryption is refused.
pub fn noise_budget_bits(ct: &Ciphertext) -> u32 {
    budget_from_bound(&ct.params, ct.noise_bound)
}

pub(crate) fn budget_from_bound(params: &RingParams, bound: u64) -> u32 {
    let ceiling = params.noise_ceiling();
    let bound = bound.max(1);
    let quotient = ceiling / bound;
    if quotient == 0 {
        0
    } else {
        quotient.ilog2()
    }
}

/// Decrypts, refusing when the tracked budget is exhausted.
pub fn decrypt(sk: &SecretKey, ct: &Ciphertext) -> Result<Plaintext> {
    if !sk.params.compatible(&ct.params) {
        return Err(Error::ParamsMismatch);
    }
    if noise_budget_bits(ct) == 0 {
        return Err(Error::NoiseBudgetExhausted {
            bound: ct.noise_bound,
            ceiling: ct.params.noise_ceiling(),
        });
    }
    let phi = decryption_residual(sk, ct)?;
    let params = &ct.params;
    let t = params.plain_modulus();
    let n = params.degree();
    let mut coeffs = vec![0u64; n];
    if params.limb_count() == 1 {
        let q = params.moduli()[0];
        let half_q = q >> 1;
        for i in 0..n {
            let x = phi.limb(0)[i] as u128;
            coeffs[i] = (((t as u128 * x + half_q as u128) / q as u128) % t as u128) as u64;
        }
    } else {
        let q = params.modulus();
        let half_q: BigUint = q >> 1;
        let t_big = BigUint::from(t);
        for (i, c) in coeffs.iter_mut().enumerate() {
            let x = phi.coeff_value(i);
            let m = ((&t_big * x + &half_q) / q) % &t_big;
            *c = m.to_u64_digits().first().copied().unwrap_or(0);
        }
    }
    Ok(Plaintext {
        coeffs,
        scale_bits: ct.scale_bits,
        slot_count: n,
        mapping: SlotMapping::Coefficient,
        params: Arc::clone(params),
    })
}

/// c0 + s c1, the ring element Delta m + E; exposed for noise
/// measurement in tests and the audit tooling.
pub fn decryption_residual(sk: &SecretKey, ct: &Ciphertext) -> Result<Polynomial> {
    if !sk.params.compatible(&ct.params) {
        return Err(Error::ParamsMismatch);
    }
    let params = &ct.params;
    let c1_eval: Vec<Vec<u64>> = (0..params.limb_count())
        .map(|j| match params.table(j) {
            Some(table) => table.to_eval(ct.c1.limb(j)),
            None => Vec::new(),
        })
        .collect();
    let sc1 = mul_cached(&sk.s, &sk.s_cache, &ct.c1, &c1_eval);
    ct.c0.add(&sc1)
}

/// Exact measured error |c0 + s c1 - Delta m| given the true plaintext;
/// the quantity the static bound must dominate.
pub fn measured_noise(sk: &SecretKey, ct: &Ciphertext, pt: &Plaintext) -> Result<BigUint> {
    let phi = decryption_residual(sk, ct)?;
    let params = &ct.params;
    let mut delta_m = Polynomial::zero(params);
    for j in 0..params.limb_count() {
        let m = params.moduli()[j];
        let dj = params.delta_mod()[j];
        let limb = delta_m.limb_mut(j);
        for (i, &mc) in pt.coeffs.iter().enumerate() {
            limb[i] = mul_mod(dj, mc, m);
        }
    }
    Ok(phi.sub(&delta_m)?.max_centered_abs())
}

/// Homomorphic addition. The tracked bound grows by both operands plus
/// q mod t, covering a possible message wrap.
pub fn he_add(a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    if !a.params.compatible(&b.params) {
        return Err(Error::ParamsMismatch);
    }
    if a.scale_bits != b.scale_bits {
        return Err(Error::InvalidParams(format!(
            "ciphertext scales differ: {} vs {}",
            a.scale_bits, b.scale_bits
        )));
    }
    Ok(Ciphertext {
        c0: a.c0.add(&b.c0)?,
        c1: a.c1.add(&b.c1)?,
        noise_bound: a
            .noise_bound
            .saturating_add(b.noise_bound)
            .saturating_add(a.params.wrap_term()),
        ops_depth: a.ops_depth.max(b.ops_depth),
        scale_bits: a.scale_bits,
        params: Arc::clone(&a.params),
    })
}

/// Embeds a plaintext into R_q with centered representatives: residues
/// above t/2 lift to q - (t - c) on each limb. Keeping the lifted
/// magnitudes at most t/2 is what makes the noise growth of a plain
/// product track the centered l1 norm instead of raw residue sizes.
fn lift_centered(pt: &Plaintext, params: &Arc<RingParams>) -> Polynomial {
    let t = params.plain_modulus();
    let mut poly = Polynomial::zero(params);
    for j in 0..params.limb_count() {
        let q = params.moduli()[j];
        let limb = poly.limb_mut(j);
        for (slot, &c) in limb.iter_mut().zip(&pt.coeffs) {
            *slot = if c <= t / 2 { c } else { q - (t - c) };
        }
    }
    poly
}

/// Homomorphic plaintext multiplication. Scalar multipliers take the
/// O(n) path; general plaintexts embed into R_q and use the ring
/// product. The bound scales by the multiplier's centered l1 norm plus
/// the rounding cross term (q mod t)(l1 + 1).
pub fn he_mul_plain(ct: &Ciphertext, pt: &Plaintext) -> Result<Ciphertext> {
    if !ct.params.compatible(&pt.params) {
        return Err(Error::ParamsMismatch);
    }
    let l1 = pt.centered_l1().max(1);
    let t = ct.params.plain_modulus();
    let (c0, c1) = if pt.is_constant() {
        // A residue above t/2 is a negative scalar: multiply by its
        // magnitude, then negate, so the ring values stay small.
        let w = pt.coeffs[0];
        if w <= t - w {
            (ct.c0.scalar_mul(w), ct.c1.scalar_mul(w))
        } else {
            (
                ct.c0.scalar_mul(t - w).neg(),
                ct.c1.scalar_mul(t - w).neg(),
            )
        }
    } else {
        let p_ring = lift_centered(pt, &ct.params);
        (ct.c0.mul(&p_ring)?, ct.c1.mul(&p_ring)?)
    };
    let wrap = ct.params.wrap_term();
    let noise_bound = ct
        .noise_bound
        .saturating_mul(l1)
        .saturating_add(wrap.saturating_mul(l1.saturating_add(1)));
    Ok(Ciphertext {
        c0,
        c1,
        noise_bound,
        ops_depth: ct.ops_depth + 1,
        scale_bits: ct.scale_bits + pt.scale_bits,
        params: Arc::clone(&ct.params),
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn write_params_block(out: &mut Vec<u8>, params: &RingParams, scale_bits: u32) {
    out.extend_from_slice(&(params.degree() as u32).to_le_bytes());
    out.extend_from_slice(&(params.limb_count() as u32).to_le_bytes());
    for &m in params.moduli() {
        out.extend_from_slice(&m.to_le_bytes());
    }
    out.extend_from_slice(&params.plain_modulus().to_le_bytes());
    out.extend_from_slice(&scale_bits.to_le_bytes());
}

fn read_params_block<'a>(
    bytes: &'a [u8],
    params: &RingParams,
) -> Result<(u32, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Malformed("truncated parameter block".into()));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let limbs = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let need = 8 + limbs * 8 + 8 + 4;
    if bytes.len() < need {
        return Err(Error::Malformed("truncated parameter block".into()));
    }
    if n != params.degree() || limbs != params.limb_count() {
        return Err(Error::ParamsMismatch);
    }
    let mut off = 8;
    for &m in params.moduli() {
        let wire = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if wire != m {
            return Err(Error::ParamsMismatch);
        }
        off += 8;
    }
    let t = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    if t != params.plain_modulus() {
        return Err(Error::ParamsMismatch);
    }
    off += 8;
    let scale_bits = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    Ok((scale_bits, &bytes[off + 4..]))
}

/// Wire format: magic "SEFL", version byte, parameter block
/// (n, limb count, q limbs, t, scale_bits), c0, c1 (each in the
/// polynomial encoding), then the noise bound as 8 bytes little-endian.
pub fn serialize_ciphertext(ct: &Ciphertext) -> Vec<u8> {
    let params = &ct.params;
    let poly_len = 8 + params.degree() * params.limb_count() * 8;
    let mut out = Vec::with_capacity(4 + 1 + 8 + params.limb_count() * 8 + 12 + 2 * poly_len + 8);
    out.extend_from_slice(&CIPHERTEXT_MAGIC);
    out.push(FORMAT_VERSION);
    write_params_block(&mut out, params, ct.scale_bits);
    ct.c0.serialize_into(&mut out);
    ct.c1.serialize_into(&mut out);
    out.extend_from_slice(&ct.noise_bound.to_le_bytes());
    out
}

/// Serialized size of any ciphertext under these parameters.
pub fn ciphertext_wire_len(params: &RingParams) -> usize {
    let poly_len = 8 + params.degree() * params.limb_count() * 8;
    4 + 1 + 8 + params.limb_count() * 8 + 12 + 2 * poly_len + 8
}

pub fn deserialize_ciphertext(bytes: &[u8], params: &Arc<RingParams>) -> Result<Ciphertext> {
    if bytes.len() < 5 || bytes[0..4] != CIPHERTEXT_MAGIC {
        return Err(Error::Malformed("bad ciphertext magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    let (scale_bits, rest) = read_params_block(&bytes[5..], params)?;
    let (c0, used0) = Polynomial::deserialize_prefix(rest, params)?;
    let (c1, used1) = Polynomial::deserialize_prefix(&rest[used0..], params)?;
    let tail = &rest[used0 + used1..];
    if tail.len() != 8 {
        return Err(Error::Malformed(format!(
            "expected 8 trailing noise-bound bytes, got {}",
            tail.len()
        )));
    }
    let noise_bound = u64::from_le_bytes(tail.try_into().unwrap());
    Ok(Ciphertext {
        c0,
        c1,
        noise_bound,
        ops_depth: 0,
        scale_bits,
        params: Arc::clone(params),
    })
}

/// Key container: magic "SEFK", version, parameter block (scale field
/// zero), sigma_err as f64 bits, then a, b, s.
pub fn serialize_keypair(keys: &KeyPair) -> Vec<u8> {
    let params = &keys.public.params;
    let mut out = Vec::new();
    out.extend_from_slice(&KEY_MAGIC);
    out.push(FORMAT_VERSION);
    write_params_block(&mut out, params, 0);
    out.extend_from_slice(&params.sigma_err().to_bits().to_le_bytes());
    keys.public.a.serialize_into(&mut out);
    keys.public.b.serialize_into(&mut out);
    keys.secret.s.serialize_into(&mut out);
    out
}

/// Reads a key container written by [`serialize_keypair`], rebuilding
/// the ring parameters it names.
pub fn deserialize_keypair(bytes: &[u8]) -> Result<(KeyPair, Arc<RingParams>)> {
    if bytes.len() < 13 || bytes[0..4] != KEY_MAGIC {
        return Err(Error::Malformed("bad key magic".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::BadVersion(bytes[4]));
    }
    let body = &bytes[5..];
    if body.len() < 8 {
        return Err(Error::Malformed("truncated key parameter block".into()));
    }
    let n = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    let limbs = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let head = 8 + limbs * 8 + 8 + 4;
    if body.len() < head + 8 {
        return Err(Error::Malformed("truncated key parameter block".into()));
    }
    let mut moduli = Vec::with_capacity(limbs);
    let mut off = 8;
    for _ in 0..limbs {
        moduli.push(u64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let t = u64::from_le_bytes(body[off..off + 8].try_into().unwrap());
    off += 8 + 4; // skip the unused scale field
    let sigma = f64::from_bits(u64::from_le_bytes(body[off..off + 8].try_into().unwrap()));
    off += 8;
    let params = RingParams::new(n, &moduli, t, sigma)?;
    let rest = &body[off..];
    let (a, u0) = Polynomial::deserialize_prefix(rest, &params)?;
    let (b, u1) = Polynomial::deserialize_prefix(&rest[u0..], &params)?;
    let (s, u2) = Polynomial::deserialize_prefix(&rest[u0 + u1..], &params)?;
    if rest.len() != u0 + u1 + u2 {
        return Err(Error::Malformed("trailing bytes after key material".into()));
    }
    let keys = KeyPair {
        public: PublicKey {
            a_cache: EvalCache::build(&a),
            b_cache: EvalCache::build(&b),
            a,
            b,
            params: Arc::clone(&params),
        },
        secret: SecretKey {
            s_cache: EvalCache::build(&s),
            s,
            params: Arc::clone(&params),
        },
    };
    Ok((keys, params))
}
