//! Prime-hunting utilities for transform-friendly moduli.
//!
//! Negacyclic number-theoretic transforms over Z_p need p prime with
//! p ≡ 1 (mod 2n), so a primitive 2n-th root of unity exists. Plaintext
//! moduli compatible with slot batching obey the same congruence.

/// Deterministic Miller-Rabin for u64.
///
/// The witness set {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37} is
/// deterministic for every integer below 3.3 * 10^24, which covers u64.
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == p {
            return true;
        }
        if n % p == 0 {
            return false;
        }
    }
    let mut d = n - 1;
    let mut s = 0u32;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime p >= lower with p ≡ 1 (mod m). Panics if the search
/// leaves u64 range, which no supported parameter set approaches.
pub fn next_prime_congruent_one(m: u64, lower: u64) -> u64 {
    assert!(m >= 2, "congruence modulus must be at least 2");
    let mut k = lower.saturating_sub(1).div_ceil(m).max(1);
    loop {
        let p = k
            .checked_mul(m)
            .and_then(|v| v.checked_add(1))
            .expect("prime search overflowed u64");
        if p >= lower && is_prime_u64(p) {
            return p;
        }
        k += 1;
    }
}

/// A primitive 2n-th root of unity mod prime p, i.e. psi with psi^n = -1.
///
/// Requires 2n | p - 1 and 2n a power of two. Candidates x^((p-1)/2n) have
/// order dividing 2n; the order is exactly 2n iff the n-th power is -1.
pub fn primitive_2n_root(p: u64, two_n: u64) -> Option<u64> {
    if (p - 1) % two_n != 0 || !two_n.is_power_of_two() {
        return None;
    }
    let exp = (p - 1) / two_n;
    for x in 2..p.min(1 << 20) {
        let psi = pow_mod(x, exp, p);
        if pow_mod(psi, two_n / 2, p) == p - 1 {
            return Some(psi);
        }
    }
    None
}

#[inline]
pub fn add_mod(a: u64, b: u64, m: u64) -> u64 {
    // a, b < m < 2^63: the sum cannot wrap u64.
    let s = a + b;
    if s >= m {
        s - m
    } else {
        s
    }
}

#[inline]
pub fn sub_mod(a: u64, b: u64, m: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + m - b
    }
}

#[inline]
pub fn neg_mod(a: u64, m: u64) -> u64 {
    if a == 0 {
        0
    } else {
        m - a
    }
}

#[inline]
pub fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

pub fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    if m == 1 {
        return 0;
    }
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Modular inverse via extended Euclid; m need not be prime, but
/// gcd(a, m) must be 1.
pub fn inv_mod(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (a as i128, m as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    let mut inv = old_s % m as i128;
    if inv < 0 {
        inv += m as i128;
    }
    Some(inv as u64)
}

pub fn gcd_u64(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_primes_classified() {
        let primes = [2u64, 3, 5, 17, 257, 65537, 786433, 557057];
        for p in primes {
            assert!(is_prime_u64(p), "{p} should be prime");
        }
        for c in [1u64, 4, 9, 15, 65536, 786432, 557056, 6_700_417 * 641] {
            assert!(!is_prime_u64(c), "{c} should be composite");
        }
    }

    #[test]
    fn large_prime_classified() {
        assert!(is_prime_u64(576460752303439873));
        assert!(is_prime_u64(9007199255019521));
        assert!(!is_prime_u64(576460752303439873 - 2));
    }

    #[test]
    fn prime_search_matches_reference() {
        // Frozen from an independent primality oracle.
        assert_eq!(next_prime_congruent_one(2 * 8192, 1 << 19), 557057);
        assert_eq!(next_prime_congruent_one(2 * 4096, 1 << 19), 557057);
        assert_eq!(next_prime_congruent_one(2 * 2048, 1 << 20), 1073153);
        assert_eq!(next_prime_congruent_one(2 * 1024, 1 << 22), 4206593);
        assert_eq!(
            next_prime_congruent_one(2 * 4096, 1 << 59),
            576460752303439873
        );
    }

    #[test]
    fn root_has_exact_order() {
        for (p, two_n) in [(17u64, 8u64), (257, 16), (65537, 128), (786433, 2048)] {
            let psi = primitive_2n_root(p, two_n).expect("root exists");
            assert_eq!(pow_mod(psi, two_n / 2, p), p - 1);
            assert_eq!(pow_mod(psi, two_n, p), 1);
        }
        assert_eq!(primitive_2n_root(17, 64), None);
    }

    #[test]
    fn inverse_roundtrips() {
        for a in [1u64, 2, 3, 12345, 65536] {
            let m = 786433;
            let inv = inv_mod(a, m).unwrap();
            assert_eq!(mul_mod(a, inv, m), 1);
        }
        assert_eq!(inv_mod(4, 16), None);
    }
}
