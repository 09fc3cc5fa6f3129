//! `sefl`: train, benchmark, audit, and keygen entry points.
//!
//! Exit codes: 0 success, 2 configuration problem, 3 memory guard
//! refusal, 4 audit-demo expectation failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use sefl::aggregate::{
    aggregate_hash_weighted, audit_update, ciphertext_digest_hex, transcript_record,
    verify_hash_aggregate, HybridUpdate, Verdict,
};
use sefl::bench::{rows_to_csv, rows_to_jsonl, run_benchmark, BenchMode, BenchSettings};
use sefl::flsim::{report_csv, run_training, FlConfig, Mode};
use sefl::he::{
    deserialize_ciphertext, encode, encrypt, keygen, meets_128_bit_security, profile_by_name,
    serialize_ciphertext, serialize_keypair,
};
use sefl::privacy::clip_update;
use sefl::Error;

#[derive(Parser)]
#[command(
    name = "sefl",
    version,
    about = "Selective homomorphic encryption for federated learning",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training; writes a CSV report and an audit transcript.
    Train(TrainArgs),
    /// Time encryption and aggregation across model sizes and modes.
    Bench(BenchArgs),
    /// Walk through the update audit and ciphertext integrity check.
    AuditDemo(AuditDemoArgs),
    /// Generate a key container for the 128-bit production profile.
    Keygen(KeygenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration file (flat key = value); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured mode.
    #[arg(long, value_parser = ["full", "selective", "plaintext"])]
    mode: Option<String>,
    /// Override the configured client count.
    #[arg(long)]
    clients: Option<usize>,
    /// Override the sensitivity threshold (0..255 scale).
    #[arg(long)]
    tau: Option<f64>,
    /// Per-round privacy budget; passing this also enables noise.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; the transcript lands next to it.
    #[arg(long, default_value = "training_report.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated model sizes.
    #[arg(long, default_value = "10000,100000,1000000")]
    sizes: String,
    /// Use the large size set (10M, 50M, 100M) instead of --sizes.
    #[arg(long)]
    large: bool,
    /// Benchmark only this mode instead of all three.
    #[arg(long, value_parser = ["full", "selective", "plaintext"])]
    mode: Option<String>,
    /// Encrypted fraction for the selective mode.
    #[arg(long, default_value_t = 0.1)]
    enc_fraction: f64,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "jsonl"], default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct AuditDemoArgs {
    #[arg(long, default_value_t = 3)]
    clients: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct KeygenArgs {
    /// Key container output path.
    #[arg(long, default_value = "keys.sefk")]
    out: PathBuf,
    /// Seed for reproducible keys; omit for OS randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Read the ring profile from a training configuration instead of
    /// using the 128-bit production profile.
    #[arg(long)]
    config: Option<PathBuf>,
}

enum CliError {
    Lib(Error),
    AuditMismatch(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args),
        Command::AuditDemo(args) => cmd_audit_demo(args),
        Command::Keygen(args) => cmd_keygen(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::AuditMismatch(msg)) => {
            eprintln!("audit-demo mismatch: {msg}");
            ExitCode::from(4)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::MemoryGuard { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => FlConfig::from_file(path)?,
        None => FlConfig::default(),
    };
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "full" => Mode::Full,
            "selective" => Mode::Selective,
            _ => Mode::Plaintext,
        };
    }
    if let Some(clients) = args.clients {
        cfg.clients = clients;
    }
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(epsilon) = args.epsilon {
        cfg.epsilon = epsilon;
        cfg.dp_enabled = true;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let output = run_training(&cfg)?;
    let csv = report_csv(&output.metrics);
    write_text(&args.out, &csv)?;
    let transcript_path = args.out.with_extension("transcript");
    write_text(&transcript_path, &(output.transcript.join("\n") + "\n"))?;

    let last = output.metrics.last().expect("at least one round");
    println!(
        "trained {} round(s): train_acc {:.4}, val_acc {:.4}, loss {:.4}",
        output.metrics.len(),
        last.train_acc,
        last.val_acc,
        last.loss
    );
    println!(
        "mask: {} of {} coordinates encrypted (version {:016x})",
        output.mask.encrypted_count(),
        output.mask.len(),
        output.mask.version()
    );
    if let Some(ledger) = &output.ledger {
        let (eps, delta) = ledger.compose_advanced()?;
        println!(
            "privacy after {} round(s): epsilon {:.4}, delta {:.2e} (advanced composition)",
            ledger.rounds_executed(),
            eps,
            delta
        );
        let ledger_path = args.out.with_extension("privacy.jsonl");
        write_text(&ledger_path, &ledger.export_jsonl())?;
        println!("ledger: {}", ledger_path.display());
    }
    println!("report: {}", args.out.display());
    println!("transcript: {}", transcript_path.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let sizes: Vec<usize> = if args.large {
        vec![10_000_000, 50_000_000, 100_000_000]
    } else {
        args.sizes
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad model size {part:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let all_modes = [
        BenchMode::Plaintext,
        BenchMode::Selective(args.enc_fraction),
        BenchMode::Full,
    ];
    let modes: Vec<BenchMode> = match &args.mode {
        None => all_modes.to_vec(),
        Some(name) => all_modes
            .iter()
            .copied()
            .filter(|m| m.name() == name)
            .collect(),
    };
    let settings = BenchSettings {
        sizes,
        modes,
        clients: args.clients,
        seed: args.seed,
        ..BenchSettings::default()
    };
    let rows = run_benchmark(&settings)?;
    let rendered = match args.format.as_str() {
        "jsonl" => rows_to_jsonl(&rows),
        _ => rows_to_csv(&rows),
    };
    match &args.out {
        Some(path) => {
            write_text(path, &rendered)?;
            println!("report: {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

/// Scripted walk through both integrity layers: the sampling audit
/// accepts honest clipped updates and rejects an oversized one, and
/// the hash-weighted aggregate detects a bit flipped in transit.
fn cmd_audit_demo(args: AuditDemoArgs) -> Result<(), CliError> {
    let expect = |ok: bool, msg: &str| -> Result<(), CliError> {
        if ok {
            println!("ok: {msg}");
            Ok(())
        } else {
            Err(CliError::AuditMismatch(msg.to_string()))
        }
    };

    let d = 1000;
    let clip = 1.0;
    let beta = 2.0 * clip;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);

    println!("== sampling audit (d = {d}, beta = {beta}) ==");
    for client in 0..args.clients.max(1) {
        let raw: Vec<f64> = (0..d)
            .map(|_| rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0)
            .collect();
        let honest = clip_update(&raw, clip);
        let verdict = audit_update(&honest, beta, 0.1, &mut rng);
        expect(
            verdict.is_accept(),
            &format!("client {client}: honest clipped update accepted"),
        )?;
    }
    let mut attack = vec![0.0; d];
    attack[7] = 25.0 * clip;
    let verdict = audit_update(&attack, beta, 1.0, &mut rng);
    expect(
        !verdict.is_accept(),
        "oversized update rejected by the audit",
    )?;
    if let Verdict::Reject(reason) = &verdict {
        println!("   reject reason: {reason}");
    }

    println!("== ciphertext integrity (hash-weighted aggregation) ==");
    let params = profile_by_name("toy-1024")?;
    let keys = keygen(&params, &mut rng);
    let updates: Vec<HybridUpdate> = (0..args.clients.max(2) as u64)
        .map(|client_id| {
            let values: Vec<f64> = (0..16)
                .map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5)
                .collect();
            let pt = encode(&values, 12, &params)?;
            let ct = encrypt(&keys.public, &pt, &mut rng)?;
            Ok(HybridUpdate {
                client_id,
                weight: 1,
                mask_version: 0,
                enc_part: vec![ct],
                enc_len: 16,
                plain_part: Vec::new(),
            })
        })
        .collect::<Result<_, Error>>()?;
    for u in &updates {
        println!(
            "   {}",
            transcript_record(0, u, &Verdict::Accept)
        );
    }
    let (agg, _) = aggregate_hash_weighted(&updates)?;
    expect(
        verify_hash_aggregate(&keys.secret, &updates, &agg)?,
        "honest aggregate verifies against recomputed hashes",
    )?;

    let mut tampered = updates.clone();
    let mut bytes = serialize_ciphertext(&tampered[0].enc_part[0]);
    let flip = bytes.len() / 2;
    bytes[flip] ^= 0x01;
    tampered[0].enc_part[0] = deserialize_ciphertext(&bytes, &params)?;
    println!(
        "   flipped one bit of client 0's ciphertext (digest now {})",
        &ciphertext_digest_hex(&tampered[0].enc_part[0])[..16]
    );
    expect(
        !verify_hash_aggregate(&keys.secret, &tampered, &agg)?,
        "tampered ciphertext fails verification",
    )?;

    println!("all audit-demo expectations held");
    Ok(())
}

fn cmd_keygen(args: KeygenArgs) -> Result<(), CliError> {
    let params = match &args.config {
        Some(path) => {
            let cfg = FlConfig::from_file(path)?;
            profile_by_name(&cfg.profile)?
        }
        None => profile_by_name("prod-8192")?,
    };
    let mut rng = match args.seed {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed),
        None => ChaCha20Rng::from_os_rng(),
    };
    let keys = keygen(&params, &mut rng);
    let bytes = serialize_keypair(&keys);
    std::fs::write(&args.out, &bytes).map_err(Error::from)?;
    println!(
        "ring degree {}, modulus {} bits, 128-bit secure: {}",
        params.degree(),
        params.modulus_bits(),
        if meets_128_bit_security(&params) { "yes" } else { "no" }
    );
    println!("wrote {} bytes to {}", bytes.len(), args.out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
