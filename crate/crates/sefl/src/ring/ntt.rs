//! Negacyclic number-theoretic transform over Z_p for p ≡ 1 (mod 2n).
//!
//! Multiplication in Z_p[x]/(x^n + 1) is done as a length-n cyclic
//! transform of psi-twisted inputs (the discrete weighted transform):
//! with psi a primitive 2n-th root of unity and omega = psi^2,
//! c = a * b (negacyclic) iff NTT(twist(c)) = NTT(twist(a)) . NTT(twist(b))
//! pointwise. The inverse transform folds the n^-1 scaling into the
//! untwist table. All twiddle multiplications use Shoup precomputation,
//! valid because every supported prime is below 2^63.

use super::primes::{add_mod, inv_mod, mul_mod, pow_mod, primitive_2n_root, sub_mod};

/// Precomputed Shoup companion floor(w * 2^64 / p).
#[inline]
pub fn shoup(w: u64, p: u64) -> u64 {
    (((w as u128) << 64) / p as u128) as u64
}

/// x * w mod p with precomputed ws = shoup(w, p). Requires p < 2^63.
#[inline]
pub fn mul_shoup(x: u64, w: u64, ws: u64, p: u64) -> u64 {
    let q = ((x as u128 * ws as u128) >> 64) as u64;
    let r = x.wrapping_mul(w).wrapping_sub(q.wrapping_mul(p));
    if r >= p {
        r - p
    } else {
        r
    }
}

#[derive(Debug, Clone)]
pub struct NttTable {
    p: u64,
    n: usize,
    twist: Vec<u64>,
    twist_shoup: Vec<u64>,
    untwist: Vec<u64>,
    untwist_shoup: Vec<u64>,
    fwd: Vec<u64>,
    fwd_shoup: Vec<u64>,
    inv: Vec<u64>,
    inv_shoup: Vec<u64>,
}

impl NttTable {
    /// Builds transform tables, or None when p has no primitive 2n-th
    /// root of unity (composite p, or 2n does not divide p - 1).
    pub fn build(p: u64, n: usize) -> Option<Self> {
        if !n.is_power_of_two() || n < 2 || p >= (1 << 63) {
            return None;
        }
        let psi = primitive_2n_root(p, 2 * n as u64)?;
        let omega = mul_mod(psi, psi, p);
        let psi_inv = inv_mod(psi, p)?;
        let omega_inv = inv_mod(omega, p)?;
        let n_inv = inv_mod(n as u64, p)?;

        let mut twist = Vec::with_capacity(n);
        let mut untwist = Vec::with_capacity(n);
        let (mut tw, mut un) = (1u64, n_inv);
        for _ in 0..n {
            twist.push(tw);
            untwist.push(un);
            tw = mul_mod(tw, psi, p);
            un = mul_mod(un, psi_inv, p);
        }

        // Stage tables for the cyclic transform: the butterfly with span
        // `half` uses fwd[half - 1 + k] = omega^(k * n / (2 * half)).
        let mut fwd = Vec::with_capacity(n - 1);
        let mut inv = Vec::with_capacity(n - 1);
        let mut half = 1;
        while half < n {
            let step = pow_mod(omega, (n / (2 * half)) as u64, p);
            let step_inv = pow_mod(omega_inv, (n / (2 * half)) as u64, p);
            let (mut w, mut wi) = (1u64, 1u64);
            for _ in 0..half {
                fwd.push(w);
                inv.push(wi);
                w = mul_mod(w, step, p);
                wi = mul_mod(wi, step_inv, p);
            }
            half *= 2;
        }

        let pre = |v: &[u64]| v.iter().map(|&w| shoup(w, p)).collect::<Vec<_>>();
        Some(NttTable {
            p,
            n,
            twist_shoup: pre(&twist),
            untwist_shoup: pre(&untwist),
            fwd_shoup: pre(&fwd),
            inv_shoup: pre(&inv),
            twist,
            untwist,
            fwd,
            inv,
        })
    }

    pub fn modulus(&self) -> u64 {
        self.p
    }

    fn bit_reverse(a: &mut [u64]) {
        let n = a.len();
        let mut j = 0;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                a.swap(i, j);
            }
        }
    }

    fn cyclic(&self, a: &mut [u64], tw: &[u64], tw_shoup: &[u64]) {
        let (n, p) = (self.n, self.p);
        Self::bit_reverse(a);
        let mut half = 1;
        while half < n {
            let base = half - 1;
            let mut start = 0;
            while start < n {
                for k in 0..half {
                    let w = tw[base + k];
                    let ws = tw_shoup[base + k];
                    let u = a[start + k];
                    let v = mul_shoup(a[start + k + half], w, ws, p);
                    a[start + k] = add_mod(u, v, p);
                    a[start + k + half] = sub_mod(u, v, p);
                }
                start += 2 * half;
            }
            half *= 2;
        }
    }

    /// Coefficient form -> evaluation form (twist, then cyclic transform).
    pub fn to_eval(&self, a: &[u64]) -> Vec<u64> {
        debug_assert_eq!(a.len(), self.n);
        let mut out: Vec<u64> = (0..self.n)
            .map(|i| mul_shoup(a[i], self.twist[i], self.twist_shoup[i], self.p))
            .collect();
        self.cyclic(&mut out, &self.fwd, &self.fwd_shoup);
        out
    }

    /// Evaluation form -> coefficient form, in place.
    pub fn from_eval(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        self.cyclic(a, &self.inv, &self.inv_shoup);
        for i in 0..self.n {
            a[i] = mul_shoup(a[i], self.untwist[i], self.untwist_shoup[i], self.p);
        }
    }

    /// a[i] <- a[i] * b[i] mod p.
    pub fn pointwise_into(&self, a: &mut [u64], b: &[u64]) {
        debug_assert_eq!(a.len(), b.len());
        for (x, &y) in a.iter_mut().zip(b) {
            *x = mul_mod(*x, y, self.p);
        }
    }

    /// Full negacyclic product of two coefficient-form operands.
    pub fn negacyclic_mul(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        let mut ae = self.to_eval(a);
        let be = self.to_eval(b);
        self.pointwise_into(&mut ae, &be);
        self.from_eval(&mut ae);
        ae
    }
}

/// Schoolbook negacyclic product: the reference oracle every fast path
/// must match bit for bit. x^(i+j) wraps to -x^(i+j-n) past degree n-1.
pub fn schoolbook_negacyclic(a: &[u64], b: &[u64], m: u64) -> Vec<u64> {
    let n = a.len();
    debug_assert_eq!(b.len(), n);
    let mut c = vec![0u64; n];
    for i in 0..n {
        if a[i] == 0 {
            continue;
        }
        for j in 0..n {
            let prod = mul_mod(a[i], b[j], m);
            let k = i + j;
            if k < n {
                c[k] = add_mod(c[k], prod, m);
            } else {
                c[k - n] = sub_mod(c[k - n], prod, m);
            }
        }
    }
    c
}
