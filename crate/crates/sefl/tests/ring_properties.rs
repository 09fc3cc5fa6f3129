//! Property tests for the negacyclic ring layer: algebraic axioms,
//! agreement between the NTT path and the schoolbook reference, the
//! negacyclic wraparound law, and wire-format roundtrips, on both a
//! single-modulus ring and the residue-form modulus chain.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use sefl::he::{Q54_CHAIN, Q60};
use sefl::ring::{Polynomial, RingParams};

const N: usize = 16;

fn single_limb() -> Arc<RingParams> {
    static CELL: OnceLock<Arc<RingParams>> = OnceLock::new();
    CELL.get_or_init(|| RingParams::new(N, &[Q60], 786_433, 3.2).unwrap())
        .clone()
}

fn multi_limb() -> Arc<RingParams> {
    static CELL: OnceLock<Arc<RingParams>> = OnceLock::new();
    CELL.get_or_init(|| RingParams::new(N, &Q54_CHAIN, 786_433, 3.2).unwrap())
        .clone()
}

fn poly(params: &Arc<RingParams>, coeffs: &[u64]) -> Polynomial {
    Polynomial::from_u64(params, coeffs).expect("length matches the ring degree")
}

fn coeffs() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(any::<u64>(), N)
}

proptest! {
    #[test]
    fn addition_commutes(a in coeffs(), b in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb) = (poly(&params, &a), poly(&params, &b));
            prop_assert!(pa.add(&pb).unwrap() == pb.add(&pa).unwrap());
        }
    }

    #[test]
    fn addition_associates(a in coeffs(), b in coeffs(), c in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb, pc) = (poly(&params, &a), poly(&params, &b), poly(&params, &c));
            let left = pa.add(&pb).unwrap().add(&pc).unwrap();
            let right = pa.add(&pb.add(&pc).unwrap()).unwrap();
            prop_assert!(left == right);
        }
    }

    #[test]
    fn negation_inverts_addition(a in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let pa = poly(&params, &a);
            prop_assert!(pa.add(&pa.neg()).unwrap() == Polynomial::zero(&params));
            prop_assert!(pa.sub(&pa).unwrap() == Polynomial::zero(&params));
        }
    }

    #[test]
    fn multiplication_commutes(a in coeffs(), b in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb) = (poly(&params, &a), poly(&params, &b));
            prop_assert!(pa.mul(&pb).unwrap() == pb.mul(&pa).unwrap());
        }
    }

    #[test]
    fn multiplication_associates(a in coeffs(), b in coeffs(), c in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb, pc) = (poly(&params, &a), poly(&params, &b), poly(&params, &c));
            let left = pa.mul(&pb).unwrap().mul(&pc).unwrap();
            let right = pa.mul(&pb.mul(&pc).unwrap()).unwrap();
            prop_assert!(left == right);
        }
    }

    #[test]
    fn multiplication_distributes_over_addition(a in coeffs(), b in coeffs(), c in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb, pc) = (poly(&params, &a), poly(&params, &b), poly(&params, &c));
            let left = pa.mul(&pb.add(&pc).unwrap()).unwrap();
            let right = pa.mul(&pb).unwrap().add(&pa.mul(&pc).unwrap()).unwrap();
            prop_assert!(left == right);
        }
    }

    #[test]
    fn ntt_agrees_with_schoolbook(a in coeffs(), b in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let (pa, pb) = (poly(&params, &a), poly(&params, &b));
            prop_assert!(pa.mul(&pb).unwrap() == pa.mul_schoolbook(&pb).unwrap());
        }
    }

    #[test]
    fn scalar_multiplication_matches_constant_product(a in coeffs(), k in any::<u64>()) {
        for params in [single_limb(), multi_limb()] {
            let pa = poly(&params, &a);
            let mut c = vec![0u64; N];
            c[0] = k;
            let constant = poly(&params, &c);
            prop_assert!(pa.scalar_mul(k) == pa.mul(&constant).unwrap());
        }
    }

    #[test]
    fn serialization_roundtrips(a in coeffs()) {
        for params in [single_limb(), multi_limb()] {
            let pa = poly(&params, &a);
            let mut bytes = Vec::new();
            pa.serialize_into(&mut bytes);
            let (back, used) = Polynomial::deserialize_prefix(&bytes, &params).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert!(back == pa);
        }
    }
}

// Multiplying by x rotates coefficients one step and negates the one
// that wraps past x^(n-1), the defining law of Z_q[x]/(x^n + 1).
#[test]
fn multiplication_by_x_wraps_negacyclically() {
    let params = single_limb();
    let q = Q60;
    let mut x = vec![0u64; N];
    x[1] = 1;
    let px = poly(&params, &x);
    let a: Vec<u64> = (1..=N as u64).collect();
    let pa = poly(&params, &a);
    let product = pa.mul(&px).unwrap();
    let mut expected = vec![0u64; N];
    expected[0] = q - a[N - 1];
    expected[1..N].copy_from_slice(&a[..N - 1]);
    assert!(product == poly(&params, &expected));
}

#[test]
fn degree_must_be_a_supported_power_of_two() {
    assert!(RingParams::new(24, &[Q60], 786_433, 3.2).is_err());
    assert!(RingParams::new(0, &[Q60], 786_433, 3.2).is_err());
}
