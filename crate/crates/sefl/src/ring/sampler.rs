//! Ring-element samplers.
//!
//! Every sampler takes the caller's RNG: deterministic runs seed a
//! stream cipher RNG per actor, and nothing here shares state. Secrets
//! are uniform ternary; errors come from a centered binomial CBD(k)
//! with k = max(1, round(2 * sigma_err^2)), so the variance matches
//! sigma_err^2 and the support is hard-bounded by k.

use std::sync::Arc;

use rand::Rng;

use super::{Polynomial, RingParams};

/// Uniform element of R_q. Independent uniform residues per limb are
/// exactly uniform mod q by the CRT bijection.
pub fn sample_uniform<R: Rng>(params: &Arc<RingParams>, rng: &mut R) -> Polynomial {
    let mut poly = Polynomial::zero(params);
    let n = params.degree();
    for j in 0..params.limb_count() {
        let m = params.moduli()[j];
        for x in &mut poly.coeffs[j * n..(j + 1) * n] {
            *x = rng.random_range(0..m);
        }
    }
    poly
}

/// Uniform ternary polynomial with coefficients in {-1, 0, +1}; the
/// secret-key distribution.
pub fn sample_ternary<R: Rng>(params: &Arc<RingParams>, rng: &mut R) -> Polynomial {
    let values: Vec<i64> = (0..params.degree())
        .map(|_| rng.random_range(0..3i64) - 1)
        .collect();
    Polynomial::from_centered(params, &values).expect("length matches degree")
}

/// Centered binomial error polynomial: sum of k coin differences per
/// coefficient, variance k/2, support [-k, k].
pub fn sample_error<R: Rng>(params: &Arc<RingParams>, rng: &mut R) -> Polynomial {
    let values = sample_cbd_values(params.degree(), params.cbd_k(), rng);
    Polynomial::from_centered(params, &values).expect("length matches degree")
}

pub(crate) fn sample_cbd_values<R: Rng>(count: usize, k: u32, rng: &mut R) -> Vec<i64> {
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = 0i64;
        let mut remaining = k;
        while remaining > 0 {
            // One u64 word funds up to 32 coin pairs.
            let chunk = remaining.min(32);
            let mask = (1u64 << chunk) - 1;
            let bits = rng.next_u64();
            v += (bits & mask).count_ones() as i64;
            v -= ((bits >> chunk) & mask).count_ones() as i64;
            remaining -= chunk;
        }
        values.push(v);
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_params() -> Arc<RingParams> {
        RingParams::new(64, &[65537], 17, 1.0).unwrap()
    }

    #[test]
    fn ternary_values_and_balance() {
        let params = toy_params();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..500 {
            let s = sample_ternary(&params, &mut rng);
            for i in 0..64 {
                let v = s.limb(0)[i];
                assert!(v == 0 || v == 1 || v == 65536, "non-ternary residue {v}");
                let idx = if v == 0 {
                    1
                } else if v == 1 {
                    2
                } else {
                    0
                };
                counts[idx] += 1;
            }
        }
        let total = (500 * 64) as f64;
        for c in counts {
            let frac = c as f64 / total;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "skewed ternary: {frac}");
        }
    }

    #[test]
    fn error_variance_tracks_sigma() {
        for sigma in [1.0f64, 2.0, 3.2] {
            let params = RingParams::new(64, &[65537], 17, sigma).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            let k = params.cbd_k() as i64;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let draws = 100_000 / 64 + 1;
            let count = (draws * 64) as f64;
            for _ in 0..draws {
                let e = sample_error(&params, &mut rng);
                for i in 0..64 {
                    let r = e.limb(0)[i];
                    let v = if r > 32768 { r as i64 - 65537 } else { r as i64 };
                    assert!(v.abs() <= k, "|{v}| beyond CBD support {k}");
                    assert!(v.abs() as f64 <= 8.0 * sigma, "|{v}| beyond 8 sigma");
                    sum += v as f64;
                    sum_sq += (v * v) as f64;
                }
            }
            let mean = sum / count;
            let var = sum_sq / count - mean * mean;
            let target = k as f64 / 2.0;
            assert!(
                (var - target).abs() / target < 0.10,
                "variance {var} vs target {target} at sigma {sigma}"
            );
        }
    }

    #[test]
    fn uniform_spreads_over_range() {
        let params = toy_params();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut low = 0usize;
        let mut total = 0usize;
        for _ in 0..200 {
            let a = sample_uniform(&params, &mut rng);
            for i in 0..64 {
                if a.limb(0)[i] < 65537 / 2 {
                    low += 1;
                }
                total += 1;
            }
        }
        let frac = low as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "uniform skew: {frac}");
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let params = toy_params();
        let mut r1 = ChaCha20Rng::seed_from_u64(99);
        let mut r2 = ChaCha20Rng::seed_from_u64(99);
        assert_eq!(sample_uniform(&params, &mut r1), sample_uniform(&params, &mut r2));
        assert_eq!(sample_ternary(&params, &mut r1), sample_ternary(&params, &mut r2));
        assert_eq!(sample_error(&params, &mut r1), sample_error(&params, &mut r2));
    }
}
