//! Arithmetic in R_q = Z_q[x]/(x^n + 1) with n a power of two.
//!
//! The coefficient modulus q is a product of word-sized limbs held in
//! residue form: each coefficient is stored as one residue per limb,
//! limb-major, so every ring operation acts limbwise. Limbs that are
//! transform-friendly primes (p ≡ 1 mod 2n) multiply through the NTT;
//! any other odd limb falls back to the schoolbook path, which is also
//! exposed directly as the reference oracle. A single limb of at most
//! 62 bits covers test profiles; the production profile composes four
//! 54-bit primes.

pub mod ntt;
pub mod primes;
pub mod sampler;

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;

use crate::error::{Error, Result};
use ntt::{schoolbook_negacyclic, NttTable};
use primes::{add_mod, gcd_u64, inv_mod, mul_mod, neg_mod, sub_mod};

pub const MIN_DEGREE: usize = 4;
pub const MAX_DEGREE: usize = 65536;
pub const MAX_LIMB_BITS: u32 = 62;

/// Ring dimensions, moduli, and sampler width, plus everything derived
/// from them that arithmetic needs precomputed. Construct once and share
/// behind `Arc`; all fields are immutable afterwards.
pub struct RingParams {
    n: usize,
    moduli: Vec<u64>,
    t: u64,
    sigma_err: f64,
    cbd_k: u32,
    q_big: BigUint,
    half_q: BigUint,
    delta_mod: Vec<u64>,
    wrap_term: u64,
    noise_ceiling: u64,
    tables: Vec<Option<NttTable>>,
    plain_table: Option<NttTable>,
    crt_m: Vec<BigUint>,
    crt_c: Vec<u64>,
}

impl RingParams {
    pub fn new(n: usize, moduli: &[u64], t: u64, sigma_err: f64) -> Result<Arc<Self>> {
        if !n.is_power_of_two() || !(MIN_DEGREE..=MAX_DEGREE).contains(&n) {
            return Err(Error::InvalidParams(format!(
                "degree {n} must be a power of two in [{MIN_DEGREE}, {MAX_DEGREE}]"
            )));
        }
        if moduli.is_empty() {
            return Err(Error::InvalidParams("no coefficient modulus limbs".into()));
        }
        for &m in moduli {
            if m < 3 || m % 2 == 0 || m >= (1u64 << MAX_LIMB_BITS) {
                return Err(Error::InvalidParams(format!(
                    "limb {m} must be odd, at least 3, and below 2^{MAX_LIMB_BITS}"
                )));
            }
        }
        for i in 0..moduli.len() {
            for j in i + 1..moduli.len() {
                if gcd_u64(moduli[i], moduli[j]) != 1 {
                    return Err(Error::InvalidParams(format!(
                        "limbs {} and {} share a factor",
                        moduli[i], moduli[j]
                    )));
                }
            }
        }
        let q_big: BigUint = moduli.iter().map(|&m| BigUint::from(m)).product();
        let t_big = BigUint::from(t);
        if t < 2 || t_big >= q_big {
            return Err(Error::InvalidParams(format!(
                "plaintext modulus {t} must satisfy 2 <= t < q"
            )));
        }
        if let Some(&m) = moduli.iter().find(|&&m| t > m) {
            return Err(Error::InvalidParams(format!(
                "plaintext modulus {t} exceeds limb {m}"
            )));
        }
        if moduli.iter().any(|&m| m % t == 0) || (&q_big % &t_big) == BigUint::ZERO {
            return Err(Error::InvalidParams(format!(
                "plaintext modulus {t} must be coprime with q"
            )));
        }
        if !(sigma_err > 0.0) || !sigma_err.is_finite() {
            return Err(Error::InvalidParams(format!(
                "error width {sigma_err} must be finite and positive"
            )));
        }

        let cbd_k = ((2.0 * sigma_err * sigma_err).round() as u32).max(1);
        let half_q = (&q_big - 1u32) / 2u32;
        let delta_big = &q_big / &t_big;
        let delta_mod: Vec<u64> = moduli
            .iter()
            .map(|&m| digits_mod(&delta_big.to_u64_digits(), m))
            .collect();
        let wrap_term = digits_mod(&q_big.to_u64_digits(), t);
        let ceiling_big = &q_big / (2u64 * t);
        let noise_ceiling = if ceiling_big.bits() > 63 {
            u64::MAX
        } else {
            ceiling_big.to_u64_digits().first().copied().unwrap_or(0)
        };

        let tables: Vec<Option<NttTable>> =
            moduli.iter().map(|&m| NttTable::build(m, n)).collect();
        let plain_table = NttTable::build(t, n);

        let mut crt_m = Vec::with_capacity(moduli.len());
        let mut crt_c = Vec::with_capacity(moduli.len());
        for &m in moduli {
            let mj = &q_big / BigUint::from(m);
            let mj_mod = digits_mod(&mj.to_u64_digits(), m);
            let cj = inv_mod(mj_mod, m).ok_or_else(|| {
                Error::InvalidParams("limbs are not pairwise coprime".into())
            })?;
            crt_m.push(mj);
            crt_c.push(cj);
        }

        Ok(Arc::new(RingParams {
            n,
            moduli: moduli.to_vec(),
            t,
            sigma_err,
            cbd_k,
            q_big,
            half_q,
            delta_mod,
            wrap_term,
            noise_ceiling,
            tables,
            plain_table,
            crt_m,
            crt_c,
        }))
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn limb_count(&self) -> usize {
        self.moduli.len()
    }

    pub fn moduli(&self) -> &[u64] {
        &self.moduli
    }

    pub fn plain_modulus(&self) -> u64 {
        self.t
    }

    pub fn sigma_err(&self) -> f64 {
        self.sigma_err
    }

    /// Width parameter of the centered-binomial error sampler; also its
    /// hard support bound |e_i| <= k.
    pub fn cbd_k(&self) -> u32 {
        self.cbd_k
    }

    pub fn modulus(&self) -> &BigUint {
        &self.q_big
    }

    pub fn modulus_bits(&self) -> u64 {
        self.q_big.bits()
    }

    /// floor(q / (2t)), saturated to u64: the noise magnitude at which
    /// decryption stops being guaranteed.
    pub fn noise_ceiling(&self) -> u64 {
        self.noise_ceiling
    }

    /// q mod t: the cross term a message wrap contributes to the noise.
    pub fn wrap_term(&self) -> u64 {
        self.wrap_term
    }

    pub(crate) fn delta_mod(&self) -> &[u64] {
        &self.delta_mod
    }

    pub(crate) fn table(&self, limb: usize) -> Option<&NttTable> {
        self.tables[limb].as_ref()
    }

    /// Transform table over Z_t, present when t is a prime ≡ 1 (mod 2n);
    /// required by the slot-batching encoder.
    pub(crate) fn plain_table(&self) -> Option<&NttTable> {
        self.plain_table.as_ref()
    }

    /// True when both operands were built for the same ring (degree,
    /// limbs, and plaintext modulus all agree).
    pub fn compatible(&self, other: &RingParams) -> bool {
        self.n == other.n && self.moduli == other.moduli && self.t == other.t
    }
}

impl fmt::Debug for RingParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RingParams")
            .field("n", &self.n)
            .field("moduli", &self.moduli)
            .field("t", &self.t)
            .field("sigma_err", &self.sigma_err)
            .finish()
    }
}

/// Horner reduction of a little-endian u64 digit string mod m < 2^62.
fn digits_mod(digits: &[u64], m: u64) -> u64 {
    let mut acc: u128 = 0;
    for &d in digits.iter().rev() {
        acc = ((acc << 64) | d as u128) % m as u128;
    }
    acc as u64
}

/// An element of R_q in residue form: limb j occupies
/// coeffs[j*n .. (j+1)*n], each entry in [0, moduli[j]).
#[derive(Clone)]
pub struct Polynomial {
    coeffs: Vec<u64>,
    params: Arc<RingParams>,
}

impl Polynomial {
    pub fn zero(params: &Arc<RingParams>) -> Self {
        Polynomial {
            coeffs: vec![0; params.n * params.moduli.len()],
            params: Arc::clone(params),
        }
    }

    /// Embeds centered integer coefficients; values reduce mod each limb.
    pub fn from_centered(params: &Arc<RingParams>, values: &[i64]) -> Result<Self> {
        if values.len() > params.n {
            return Err(Error::LengthMismatch {
                expected: params.n,
                got: values.len(),
            });
        }
        let mut poly = Self::zero(params);
        for (j, &m) in params.moduli.iter().enumerate() {
            let limb = &mut poly.coeffs[j * params.n..(j + 1) * params.n];
            for (i, &v) in values.iter().enumerate() {
                limb[i] = if v >= 0 {
                    (v as u64) % m
                } else {
                    neg_mod((v.unsigned_abs()) % m, m)
                };
            }
        }
        Ok(poly)
    }

    /// Embeds non-negative coefficients (e.g. plaintext residues < t).
    pub fn from_u64(params: &Arc<RingParams>, values: &[u64]) -> Result<Self> {
        if values.len() > params.n {
            return Err(Error::LengthMismatch {
                expected: params.n,
                got: values.len(),
            });
        }
        let mut poly = Self::zero(params);
        for (j, &m) in params.moduli.iter().enumerate() {
            let limb = &mut poly.coeffs[j * params.n..(j + 1) * params.n];
            for (i, &v) in values.iter().enumerate() {
                limb[i] = v % m;
            }
        }
        Ok(poly)
    }

    pub fn params(&self) -> &Arc<RingParams> {
        &self.params
    }

    pub fn degree(&self) -> usize {
        self.params.n
    }

    pub fn limb(&self, j: usize) -> &[u64] {
        &self.coeffs[j * self.params.n..(j + 1) * self.params.n]
    }

    pub(crate) fn limb_mut(&mut self, j: usize) -> &mut [u64] {
        &mut self.coeffs[j * self.params.n..(j + 1) * self.params.n]
    }

    fn check_compatible(&self, other: &Polynomial) -> Result<()> {
        if !self.params.compatible(&other.params) {
            return Err(Error::ParamsMismatch);
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (j, &m) in self.params.moduli.iter().enumerate() {
            let b = other.limb(j);
            for (i, x) in out.limb_mut(j).iter_mut().enumerate() {
                *x = add_mod(*x, b[i], m);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (j, &m) in self.params.moduli.iter().enumerate() {
            let b = other.limb(j);
            for (i, x) in out.limb_mut(j).iter_mut().enumerate() {
                *x = sub_mod(*x, b[i], m);
            }
        }
        Ok(out)
    }

    pub fn neg(&self) -> Polynomial {
        let mut out = self.clone();
        for (j, &m) in self.params.moduli.iter().enumerate() {
            for x in out.limb_mut(j) {
                *x = neg_mod(*x, m);
            }
        }
        out
    }

    /// Multiplies every coefficient by the scalar w (reduced per limb).
    pub fn scalar_mul(&self, w: u64) -> Polynomial {
        let mut out = self.clone();
        for (j, &m) in self.params.moduli.iter().enumerate() {
            let wj = w % m;
            for x in out.limb_mut(j) {
                *x = mul_mod(*x, wj, m);
            }
        }
        out
    }

    /// Negacyclic product, NTT-accelerated on transform-friendly limbs.
    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = Self::zero(&self.params);
        for (j, &m) in self.params.moduli.iter().enumerate() {
            let prod = match self.params.table(j) {
                Some(table) => table.negacyclic_mul(self.limb(j), other.limb(j)),
                None => schoolbook_negacyclic(self.limb(j), other.limb(j), m),
            };
            out.limb_mut(j).copy_from_slice(&prod);
        }
        Ok(out)
    }

    /// Negacyclic product via the quadratic reference path on every limb.
    pub fn mul_schoolbook(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_compatible(other)?;
        let mut out = Self::zero(&self.params);
        for (j, &m) in self.params.moduli.iter().enumerate() {
            let prod = schoolbook_negacyclic(self.limb(j), other.limb(j), m);
            out.limb_mut(j).copy_from_slice(&prod);
        }
        Ok(out)
    }

    /// Canonical value of coefficient i in [0, q), reconstructed from
    /// the residues.
    pub fn coeff_value(&self, i: usize) -> BigUint {
        let params = &self.params;
        if params.moduli.len() == 1 {
            return BigUint::from(self.coeffs[i]);
        }
        let mut acc = BigUint::ZERO;
        for (j, &m) in params.moduli.iter().enumerate() {
            let scaled = mul_mod(self.limb(j)[i], params.crt_c[j], m);
            acc += &params.crt_m[j] * scaled;
        }
        acc % &params.q_big
    }

    /// |coefficient i| after a centered lift to (-q/2, q/2].
    pub fn coeff_centered_abs(&self, i: usize) -> BigUint {
        let v = self.coeff_value(i);
        if v > self.params.half_q {
            &self.params.q_big - v
        } else {
            v
        }
    }

    /// Largest centered coefficient magnitude; the measured noise of a
    /// decryption residual.
    pub fn max_centered_abs(&self) -> BigUint {
        (0..self.params.n)
            .map(|i| self.coeff_centered_abs(i))
            .max()
            .unwrap_or(BigUint::ZERO)
    }

    /// Wire encoding: n (u32 LE), limb count (u32 LE), then n canonical
    /// coefficients, each limb-count x 8 bytes little-endian.
    pub fn serialize_into(&self, out: &mut Vec<u8>) {
        let params = &self.params;
        let limbs = params.moduli.len();
        out.extend_from_slice(&(params.n as u32).to_le_bytes());
        out.extend_from_slice(&(limbs as u32).to_le_bytes());
        if limbs == 1 {
            for &c in &self.coeffs {
                out.extend_from_slice(&c.to_le_bytes());
            }
            return;
        }
        for i in 0..params.n {
            let mut digits = self.coeff_value(i).to_u64_digits();
            digits.resize(limbs, 0);
            for d in digits {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.coeffs.len() * 8);
        self.serialize_into(&mut out);
        out
    }

    /// Parses one polynomial from the front of `bytes`; returns it with
    /// the number of bytes consumed.
    pub fn deserialize_prefix(bytes: &[u8], params: &Arc<RingParams>) -> Result<(Self, usize)> {
        let limbs = params.moduli.len();
        let need = 8 + params.n * limbs * 8;
        if bytes.len() < need {
            return Err(Error::Malformed(format!(
                "polynomial needs {need} bytes, got {}",
                bytes.len()
            )));
        }
        let n_wire = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let limbs_wire = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if n_wire != params.n || limbs_wire != limbs {
            return Err(Error::ParamsMismatch);
        }
        let mut poly = Self::zero(params);
        let mut off = 8;
        let mut digits = vec![0u64; limbs];
        for i in 0..params.n {
            for d in digits.iter_mut() {
                *d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
            if limbs == 1 {
                if digits[0] >= params.moduli[0] {
                    return Err(Error::Malformed(format!(
                        "coefficient {i} out of range"
                    )));
                }
                poly.coeffs[i] = digits[0];
            } else {
                if BigUint::from_slice_u64(&digits) >= params.q_big {
                    return Err(Error::Malformed(format!(
                        "coefficient {i} out of range"
                    )));
                }
                for (j, &m) in params.moduli.iter().enumerate() {
                    poly.limb_mut(j)[i] = digits_mod(&digits, m);
                }
            }
        }
        Ok((poly, need))
    }

    pub fn deserialize(bytes: &[u8], params: &Arc<RingParams>) -> Result<Self> {
        let (poly, used) = Self::deserialize_prefix(bytes, params)?;
        if used != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after polynomial",
                bytes.len() - used
            )));
        }
        Ok(poly)
    }
}

trait FromSliceU64 {
    fn from_slice_u64(digits: &[u64]) -> BigUint;
}

impl FromSliceU64 for BigUint {
    fn from_slice_u64(digits: &[u64]) -> BigUint {
        let mut bytes = Vec::with_capacity(digits.len() * 8);
        for d in digits {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        BigUint::from_bytes_le(&bytes)
    }
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        self.params.compatible(&other.params) && self.coeffs == other.coeffs
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Polynomial(n={}, limbs={})",
            self.params.n,
            self.params.moduli.len()
        )
    }
}
