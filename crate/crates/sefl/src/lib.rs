//! Selective homomorphic encryption for federated learning.
//!
//! The crate stacks six layers:
//!
//! - [`ring`]: arithmetic in Z_q[x]/(x^n + 1) with NTT fast paths and a
//!   schoolbook reference, residue-form multi-limb moduli, and samplers;
//! - [`he`]: an RLWE scheme supporting ciphertext addition and
//!   plaintext multiplication, with fixed-point encoding and static
//!   noise tracking;
//! - [`sensitivity`]: per-parameter sensitivity scoring and the
//!   encrypt/plain mask that drives selective encryption;
//! - [`privacy`]: L2 clipping, calibrated noise, and a privacy ledger
//!   with basic and advanced composition;
//! - [`aggregate`]: weighted homomorphic aggregation of hybrid updates,
//!   a hash-weighted integrity mode, and a sampling audit;
//! - [`flsim`]: a deterministic multi-client logistic-regression
//!   simulator wiring all of the above, plus [`bench`] for the cost
//!   model and the benchmark harness behind the CLI.

pub mod aggregate;
pub mod bench;
pub mod error;
pub mod flsim;
pub mod he;
pub mod privacy;
pub mod ring;
pub mod sensitivity;

pub use error::{Error, Result};
