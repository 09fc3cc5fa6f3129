//! Benchmark harness and communication cost model.
//!
//! Measures the two server-visible costs of one aggregation round at a
//! given model size: client-side encryption time and server-side fold
//! time, for full encryption, selective encryption at a fraction, and
//! the plaintext baseline. Work is streamed block-by-block so the
//! resident set stays near the accumulator size, and a memory guard
//! refuses configurations whose estimated footprint exceeds a cap
//! instead of getting the process killed.
//!
//! The cost model is a two-coefficient linear fit: shipping one
//! encrypted slot costs `c_enc` bytes (amortized block padding
//! included), one plain slot `c_plain` bytes. [`CostModel::calibrate`]
//! recovers the coefficients from measured sweeps by least squares.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::he::{
    ciphertext_wire_len, encode, encrypt, he_add, keygen, profile_by_name, Ciphertext,
};
use crate::ring::RingParams;

/// Default footprint cap: 8 GiB.
pub const DEFAULT_MEMORY_CAP: u64 = 8 << 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BenchMode {
    Plaintext,
    Full,
    /// Encrypt this fraction of coordinates, send the rest in clear.
    Selective(f64),
}

impl BenchMode {
    pub fn enc_fraction(&self) -> f64 {
        match self {
            BenchMode::Plaintext => 0.0,
            BenchMode::Full => 1.0,
            BenchMode::Selective(f) => *f,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::Plaintext => "plaintext",
            BenchMode::Full => "full",
            BenchMode::Selective(_) => "selective",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub modes: Vec<BenchMode>,
    pub profile: String,
    pub clients: usize,
    /// Timing repeats per (size, mode); the report carries medians.
    pub repeats: usize,
    pub seed: u64,
    pub scale_bits: u32,
    pub memory_cap: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            sizes: vec![10_000, 100_000, 1_000_000],
            modes: vec![
                BenchMode::Plaintext,
                BenchMode::Selective(0.1),
                BenchMode::Full,
            ],
            profile: "bench-4096".to_string(),
            clients: 10,
            repeats: 3,
            seed: 42,
            scale_bits: 12,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }
}

/// One report row; field order is the CSV column order.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub model_size: usize,
    pub mode: String,
    pub enc_fraction: f64,
    pub agg_wall_ms: f64,
    pub enc_wall_ms: f64,
    pub total_ct_bytes: u64,
    pub total_plain_bytes: u64,
    /// (enc + agg) of the full-encryption row over this row; 1 for
    /// full itself, 0 when no full row exists for the size.
    pub speedup_vs_full: f64,
}

/// Encrypted slot count and block count for a fraction of a model.
fn enc_layout(d: usize, fraction: f64, n: usize) -> (usize, usize) {
    let enc_slots = ((d as f64) * fraction).round() as usize;
    let enc_slots = enc_slots.min(d);
    let blocks = enc_slots.div_ceil(n);
    (enc_slots, blocks)
}

/// Bytes one round puts on the wire: ciphertext blocks plus 8-byte
/// clear values, across all clients.
pub fn traffic_bytes(
    d: usize,
    enc_fraction: f64,
    params: &RingParams,
    clients: usize,
) -> (u64, u64) {
    let (enc_slots, blocks) = enc_layout(d, enc_fraction, params.degree());
    let ct = (blocks as u64) * (ciphertext_wire_len(params) as u64) * clients as u64;
    let plain = ((d - enc_slots) as u64) * 8 * clients as u64;
    (ct, plain)
}

/// Estimated peak resident footprint of one (size, mode) benchmark:
/// the ciphertext accumulator, the plain accumulator, per-client
/// in-flight blocks, and fixed slack.
pub fn estimate_footprint(d: usize, enc_fraction: f64, params: &RingParams) -> u64 {
    let n = params.degree();
    let (enc_slots, blocks) = enc_layout(d, enc_fraction, n);
    let ct_bytes = ciphertext_wire_len(params) as u64;
    let acc = blocks as u64 * ct_bytes;
    let inflight = 4 * ct_bytes + (n as u64) * 8 * 4;
    let plain_acc = ((d - enc_slots) as u64) * 8 * 2;
    acc + inflight + plain_acc + (16 << 20)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let k = samples.len();
    if k == 0 {
        return 0.0;
    }
    if k % 2 == 1 {
        samples[k / 2]
    } else {
        0.5 * (samples[k / 2 - 1] + samples[k / 2])
    }
}

/// Runs the configured sweep and returns one row per (size, mode).
/// Every (size, mode) pair is checked against the memory cap before
/// any allocation happens.
pub fn run_benchmark(settings: &BenchSettings) -> Result<Vec<BenchRow>> {
    if settings.clients == 0 || settings.repeats == 0 {
        return Err(Error::Config(
            "benchmark needs at least one client and one repeat".into(),
        ));
    }
    for mode in &settings.modes {
        let f = mode.enc_fraction();
        if !(0.0..=1.0).contains(&f) || !f.is_finite() {
            return Err(Error::Config(format!(
                "encrypted fraction must lie in [0, 1], got {f}"
            )));
        }
    }
    let params = profile_by_name(&settings.profile)?;
    for &d in &settings.sizes {
        if d == 0 {
            return Err(Error::Config("model size must be positive".into()));
        }
        for mode in &settings.modes {
            let estimated = estimate_footprint(d, mode.enc_fraction(), &params);
            if estimated > settings.memory_cap {
                return Err(Error::MemoryGuard {
                    estimated_bytes: estimated,
                    cap_bytes: settings.memory_cap,
                });
            }
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed);
    let keys = keygen(&params, &mut rng);

    let mut rows = Vec::with_capacity(settings.sizes.len() * settings.modes.len());
    for &d in &settings.sizes {
        let size_start = rows.len();
        for mode in &settings.modes {
            let f = mode.enc_fraction();
            let mut enc_samples = Vec::with_capacity(settings.repeats);
            let mut agg_samples = Vec::with_capacity(settings.repeats);
            for repeat in 0..settings.repeats {
                let (enc_ms, agg_ms) = one_round(
                    d,
                    f,
                    &params,
                    &keys.public,
                    settings,
                    repeat as u64,
                )?;
                enc_samples.push(enc_ms);
                agg_samples.push(agg_ms);
            }
            let (total_ct_bytes, total_plain_bytes) =
                traffic_bytes(d, f, &params, settings.clients);
            rows.push(BenchRow {
                model_size: d,
                mode: mode.name().to_string(),
                enc_fraction: f,
                agg_wall_ms: median(&mut agg_samples),
                enc_wall_ms: median(&mut enc_samples),
                total_ct_bytes,
                total_plain_bytes,
                speedup_vs_full: 0.0,
            });
        }
        // Fill in speedups now that the size's rows are complete.
        let full_time = rows[size_start..]
            .iter()
            .find(|r| r.mode == "full")
            .map(|r| r.enc_wall_ms + r.agg_wall_ms);
        for row in &mut rows[size_start..] {
            row.speedup_vs_full = match full_time {
                Some(ft) => {
                    let own = row.enc_wall_ms + row.agg_wall_ms;
                    if own > 0.0 {
                        ft / own
                    } else {
                        f64::INFINITY
                    }
                }
                None => 0.0,
            };
        }
    }
    Ok(rows)
}

/// One timed aggregation round: every client encrypts its share
/// streamingly (enc clock) and the server folds blocks and clear
/// values as they arrive (agg clock). Returns (enc_ms, agg_ms).
fn one_round(
    d: usize,
    enc_fraction: f64,
    params: &Arc<RingParams>,
    pk: &crate::he::PublicKey,
    settings: &BenchSettings,
    repeat: u64,
) -> Result<(f64, f64)> {
    let n = params.degree();
    let (enc_slots, blocks) = enc_layout(d, enc_fraction, n);
    let plain_slots = d - enc_slots;

    let mut acc: Vec<Option<Ciphertext>> = vec![None; blocks];
    let mut plain_acc = vec![0.0f64; plain_slots];
    let mut chunk = vec![0.0f64; n];
    let mut enc_secs = 0.0f64;
    let mut agg_secs = 0.0f64;

    for client in 0..settings.clients {
        let mut vrng = ChaCha20Rng::seed_from_u64(settings.seed);
        vrng.set_stream(((client as u64) << 20) | repeat);

        for (b, slot) in acc.iter_mut().enumerate() {
            let width = (enc_slots - b * n).min(n);
            for v in chunk.iter_mut().take(width) {
                *v = vrng.random::<f64>() * 2.0 - 1.0;
            }
            for v in chunk.iter_mut().skip(width) {
                *v = 0.0;
            }
            let t0 = Instant::now();
            let pt = encode(&chunk[..width], settings.scale_bits, params)?;
            let ct = encrypt(pk, &pt, &mut vrng)?;
            enc_secs += t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            *slot = Some(match slot.take() {
                None => ct,
                Some(a) => he_add(&a, &ct)?,
            });
            agg_secs += t1.elapsed().as_secs_f64();
        }

        if plain_slots > 0 {
            // Generate outside the clock, fold inside it, in chunks so
            // the scratch stays small.
            let mut offset = 0usize;
            let mut scratch = vec![0.0f64; n.min(plain_slots)];
            while offset < plain_slots {
                let width = (plain_slots - offset).min(scratch.len());
                for v in scratch.iter_mut().take(width) {
                    *v = vrng.random::<f64>() * 2.0 - 1.0;
                }
                let t2 = Instant::now();
                for (a, v) in plain_acc[offset..offset + width].iter_mut().zip(&scratch) {
                    *a += v;
                }
                agg_secs += t2.elapsed().as_secs_f64();
                offset += width;
            }
        }
    }
    Ok((enc_secs * 1e3, agg_secs * 1e3))
}

// ---------------------------------------------------------------------------
// Communication cost model
// ---------------------------------------------------------------------------

/// Linear per-slot cost model: shipping one encrypted coordinate costs
/// `c_enc`, one clear coordinate `c_plain`, in the calibrated unit
/// (bytes here). Invariant: 0 <= c_plain <= c_enc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub c_enc: f64,
    pub c_plain: f64,
}

impl CostModel {
    pub fn new(c_enc: f64, c_plain: f64) -> Result<Self> {
        if !(c_enc.is_finite() && c_plain.is_finite() && c_plain >= 0.0 && c_enc >= c_plain) {
            return Err(Error::InvalidParams(format!(
                "cost coefficients must satisfy 0 <= c_plain <= c_enc, got ({c_enc}, {c_plain})"
            )));
        }
        Ok(CostModel { c_enc, c_plain })
    }

    /// Predicted cost of a round with the given slot split.
    pub fn estimate_cost(&self, enc_slots: u64, plain_slots: u64) -> f64 {
        enc_slots as f64 * self.c_enc + plain_slots as f64 * self.c_plain
    }

    /// Predicted cost of encrypting a fraction of d slots relative to
    /// encrypting everything.
    pub fn selective_ratio(&self, d: u64, fraction: f64) -> f64 {
        let enc = (d as f64 * fraction).round() as u64;
        self.estimate_cost(enc, d - enc) / self.estimate_cost(d, 0)
    }

    /// Least-squares fit of (c_enc, c_plain) from (enc_slots,
    /// plain_slots, measured cost) observations via the 2x2 normal
    /// equations. Needs at least two observations with independent
    /// slot splits.
    pub fn calibrate(observations: &[(u64, u64, f64)]) -> Result<CostModel> {
        if observations.len() < 2 {
            return Err(Error::InvalidParams(
                "calibration needs at least two observations".into(),
            ));
        }
        let (mut s11, mut s12, mut s22, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(enc, plain, y) in observations {
            let (x1, x2) = (enc as f64, plain as f64);
            if !y.is_finite() {
                return Err(Error::InvalidParams("non-finite measurement".into()));
            }
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            sy1 += x1 * y;
            sy2 += x2 * y;
        }
        let det = s11 * s22 - s12 * s12;
        let scale = s11.max(s22).max(1.0);
        if det.abs() <= 1e-9 * scale * scale {
            return Err(Error::InvalidParams(
                "degenerate calibration sweep: slot splits are collinear".into(),
            ));
        }
        let c_enc = (sy1 * s22 - sy2 * s12) / det;
        let c_plain = (sy2 * s11 - sy1 * s12) / det;
        CostModel::new(c_enc, c_plain)
    }
}

/// Deterministic byte-cost observations over a fraction sweep, the
/// calibration input: total shipped bytes per fraction at a fixed
/// model size.
pub fn byte_cost_sweep(
    d: usize,
    fractions: &[f64],
    params: &RingParams,
    clients: usize,
) -> Vec<(u64, u64, f64)> {
    fractions
        .iter()
        .map(|&f| {
            let (enc_slots, _) = enc_layout(d, f, params.degree());
            let (ct, plain) = traffic_bytes(d, f, params, clients);
            (
                enc_slots as u64 * clients as u64,
                (d - enc_slots) as u64 * clients as u64,
                (ct + plain) as f64,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "model_size,mode,enc_fraction,agg_wall_ms,enc_wall_ms,total_ct_bytes,total_plain_bytes,speedup_vs_full\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.3},{:.3},{},{},{:.3}\n",
            r.model_size,
            r.mode,
            r.enc_fraction,
            r.agg_wall_ms,
            r.enc_wall_ms,
            r.total_ct_bytes,
            r.total_plain_bytes,
            r.speedup_vs_full
        ));
    }
    out
}

pub fn rows_to_jsonl(rows: &[BenchRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize"))
        .fold(String::new(), |mut acc, line| {
            acc.push_str(&line);
            acc.push('\n');
            acc
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_model_recovers_exact_linear_data() {
        let points: Vec<(u64, u64, f64)> = vec![
            (100, 900, 100.0 * 3.0 + 900.0 * 1.0),
            (500, 500, 500.0 * 3.0 + 500.0 * 1.0),
            (900, 100, 900.0 * 3.0 + 100.0 * 1.0),
        ];
        let model = CostModel::calibrate(&points).unwrap();
        assert!((model.c_enc - 3.0).abs() < 1e-9);
        assert!((model.c_plain - 1.0).abs() < 1e-9);
        assert!((model.estimate_cost(200, 300) - 900.0).abs() < 1e-6);
        // Half the slots encrypted costs between the extremes.
        let ratio = model.selective_ratio(1000, 0.5);
        assert!(ratio > 0.5 && ratio < 1.0);
    }

    #[test]
    fn degenerate_calibration_is_rejected() {
        let same = vec![(100, 100, 400.0), (100, 100, 400.0)];
        assert!(CostModel::calibrate(&same).is_err());
        assert!(CostModel::calibrate(&[(1, 1, 2.0)]).is_err());
        assert!(CostModel::new(1.0, 2.0).is_err());
    }

    #[test]
    fn calibrated_byte_model_predicts_the_sweep() {
        let params = profile_by_name("toy-1024").unwrap();
        let d = 20_000;
        let fractions = [0.05, 0.1, 0.25, 0.6, 1.0];
        let sweep = byte_cost_sweep(d, &fractions, &params, 4);
        let model = CostModel::calibrate(&sweep).unwrap();
        assert!(model.c_enc > model.c_plain);
        for &(enc, plain, measured) in &sweep {
            let predicted = model.estimate_cost(enc, plain);
            let rel = (predicted - measured).abs() / measured;
            assert!(
                rel <= 0.15,
                "prediction off by {:.1}% at ({enc}, {plain})",
                rel * 100.0
            );
        }
    }

    #[test]
    fn traffic_accounting_matches_the_layout() {
        let params = profile_by_name("toy-1024").unwrap();
        let wire = ciphertext_wire_len(&params) as u64;
        // 2048 slots fully encrypted: two blocks per client.
        let (ct, plain) = traffic_bytes(2048, 1.0, &params, 3);
        assert_eq!(ct, 2 * wire * 3);
        assert_eq!(plain, 0);
        // Fraction 0.5: one block, half the slots in clear.
        let (ct, plain) = traffic_bytes(2048, 0.5, &params, 3);
        assert_eq!(ct, wire * 3);
        assert_eq!(plain, 1024 * 8 * 3);
        // Plaintext only.
        let (ct, plain) = traffic_bytes(2048, 0.0, &params, 3);
        assert_eq!(ct, 0);
        assert_eq!(plain, 2048 * 8 * 3);
    }

    #[test]
    fn benchmark_produces_consistent_rows() {
        let settings = BenchSettings {
            sizes: vec![2048],
            modes: vec![
                BenchMode::Plaintext,
                BenchMode::Selective(0.5),
                BenchMode::Full,
            ],
            profile: "toy-1024".to_string(),
            clients: 2,
            repeats: 1,
            seed: 9,
            scale_bits: 12,
            memory_cap: DEFAULT_MEMORY_CAP,
        };
        let rows = run_benchmark(&settings).unwrap();
        assert_eq!(rows.len(), 3);

        let full = rows.iter().find(|r| r.mode == "full").unwrap();
        let half = rows.iter().find(|r| r.mode == "selective").unwrap();
        let plain = rows.iter().find(|r| r.mode == "plaintext").unwrap();
        assert!(full.total_ct_bytes > half.total_ct_bytes);
        assert_eq!(plain.total_ct_bytes, 0);
        assert_eq!(full.total_plain_bytes, 0);
        assert!((full.speedup_vs_full - 1.0).abs() < 1e-9);
        assert!(half.enc_wall_ms < full.enc_wall_ms);
        assert!(plain.enc_wall_ms == 0.0);
        assert!(half.speedup_vs_full >= 1.0);
    }

    #[test]
    fn memory_guard_refuses_oversized_runs() {
        let settings = BenchSettings {
            sizes: vec![1_000_000],
            modes: vec![BenchMode::Full],
            profile: "toy-1024".to_string(),
            clients: 2,
            repeats: 1,
            seed: 1,
            scale_bits: 12,
            memory_cap: 1 << 20, // 1 MiB cannot hold the accumulator
            ..BenchSettings::default()
        };
        match run_benchmark(&settings) {
            Err(Error::MemoryGuard {
                estimated_bytes,
                cap_bytes,
            }) => {
                assert!(estimated_bytes > cap_bytes);
            }
            other => panic!("expected the memory guard, got {other:?}"),
        }
    }

    #[test]
    fn emitters_render_every_row() {
        let rows = vec![BenchRow {
            model_size: 1000,
            mode: "selective".into(),
            enc_fraction: 0.1,
            agg_wall_ms: 1.25,
            enc_wall_ms: 3.5,
            total_ct_bytes: 4096,
            total_plain_bytes: 7200,
            speedup_vs_full: 5.321,
        }];
        let csv = rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model_size,mode,enc_fraction,agg_wall_ms,enc_wall_ms,total_ct_bytes,total_plain_bytes,speedup_vs_full"
        );
        assert_eq!(
            lines.next().unwrap(),
            "1000,selective,0.1000,1.250,3.500,4096,7200,5.321"
        );

        let jsonl = rows_to_jsonl(&rows);
        let parsed: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
        assert_eq!(parsed["model_size"], 1000);
        assert_eq!(parsed["mode"], "selective");
        assert_eq!(parsed["total_ct_bytes"], 4096);
    }
}
