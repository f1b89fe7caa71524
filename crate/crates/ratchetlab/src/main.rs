use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ratchetlab::crypto::{
    dh, hmac_sha256, kdf, toy_dh_roundtrip, KeyPair, PrivateKey, ToyDhParams,
};
use ratchetlab::sim::{
    fold_transcript_relays, mark_attack_suite, metadata_demo, verify_expectations, Scenario,
    Simulator, Transcript,
};

#[derive(Parser)]
#[command(name = "ratchetlab", version, about = "End-to-end encrypted messaging workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and check its delivery expectations.
    Run {
        /// Path to a JSON scenario.
        scenario: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON-lines transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run the adversary suite against the first two parties of a scenario.
    Attack {
        /// Path to a JSON scenario (parties and seed are used).
        scenario: PathBuf,
    },
    /// Summarize what the server saw in a transcript: who talked to whom,
    /// how often, and when — never a plaintext byte.
    Metadata {
        /// Path to a JSON-lines transcript produced by `run --transcript`.
        transcript: PathBuf,
    },
    /// Print deterministic known-answer vectors for the primitives.
    Vectors,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            transcript,
        } => {
            let mut scenario = Scenario::from_json(&fs::read_to_string(scenario)?)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let result = Simulator::run(&scenario)?;
            if let Some(path) = transcript {
                fs::write(path, result.to_jsonl())?;
            } else {
                print!("{}", result.to_jsonl());
            }
            match verify_expectations(&scenario, &result) {
                Ok(()) => {
                    eprintln!("all delivery expectations hold");
                    Ok(true)
                }
                Err(failures) => {
                    for failure in &failures {
                        eprintln!("expectation failed: {failure}");
                    }
                    Ok(false)
                }
            }
        }
        Command::Attack { scenario } => {
            let scenario = Scenario::from_json(&fs::read_to_string(scenario)?)?;
            if scenario.parties.len() < 2 {
                return Err("attack suite needs at least two parties".into());
            }
            let report =
                mark_attack_suite(&scenario.parties[0], &scenario.parties[1], scenario.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            // Also show the server's-eye view of the scripted scenario.
            let demo = metadata_demo(&scenario)?;
            eprintln!(
                "scenario metadata: {} parties profiled, {} plaintext bytes observed",
                demo.per_party.len(),
                demo.plaintext_bytes_observed
            );
            Ok(report.all_pass())
        }
        Command::Metadata { transcript } => {
            let transcript = Transcript::from_jsonl(&fs::read_to_string(transcript)?)?;
            let counts = fold_transcript_relays(&transcript);
            for ((from, to), count) in &counts {
                println!("{from} -> {to}: {count} messages");
            }
            if counts.is_empty() {
                println!("no messages relayed");
            }
            Ok(true)
        }
        Command::Vectors => {
            print_vectors()?;
            Ok(true)
        }
    }
}

fn print_vectors() -> Result<(), Box<dyn std::error::Error>> {
    // X25519 from fixed scalars.
    let a = KeyPair::from_private(PrivateKey::from_bytes([0x11; 32]));
    let b = KeyPair::from_private(PrivateKey::from_bytes([0x22; 32]));
    let shared = dh(&a.private, &b.public)?;
    println!("x25519.pub_a  = {}", hex::encode(a.public.as_bytes()));
    println!("x25519.pub_b  = {}", hex::encode(b.public.as_bytes()));
    println!("x25519.shared = {}", hex::encode(shared.as_bytes()));

    // HKDF-SHA256 with the standard extract-and-expand test inputs.
    let okm = kdf(
        &[0x0b; 22],
        &hex::decode("000102030405060708090a0b0c")?,
        &hex::decode("f0f1f2f3f4f5f6f7f8f9")?,
        42,
    )?;
    println!("hkdf.okm      = {}", hex::encode(okm));

    // HMAC-SHA256 with the standard keyed-hash test inputs.
    let mac = hmac_sha256(&[0x0b; 20], b"Hi There");
    println!("hmac.tag      = {}", hex::encode(mac));

    // The small-number walkthrough: B=5, G=23, x=4, y=3.
    let (big_x, big_y, s) = toy_dh_roundtrip(ToyDhParams::new(5, 23)?, 4, 3)?;
    println!("toydh.X       = {big_x}");
    println!("toydh.Y       = {big_y}");
    println!("toydh.S       = {s}");
    Ok(())
}
