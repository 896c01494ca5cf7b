use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Subcommand;
use gridsight_core::capsule::{
    package_capsule, Capsule, CapsuleEngine, CapsulePolicy, EventScript, KeyServer, ObjectKind,
    OwnerDirectory, OwnerKey, OwnerRecord, PayloadObject,
};

#[derive(Subcommand)]
pub enum Command {
    /// Generate an owner signing key, optionally publishing it to a directory file.
    Keygen {
        #[arg(long)]
        owner: String,
        #[arg(long)]
        out: PathBuf,
        /// Owner directory (JSON list) to add the public key to.
        #[arg(long)]
        directory: Option<PathBuf>,
    },
    /// Create an empty key server state file.
    KeyserverInit {
        #[arg(long)]
        out: PathBuf,
        /// Release keys only to attested platforms.
        #[arg(long)]
        require_attestation: bool,
    },
    /// Encrypt and sign files into a capsule; the key is escrowed with the key server.
    Package {
        #[arg(long)]
        owner_key: PathBuf,
        #[arg(long)]
        keyserver: PathBuf,
        /// Policy JSON: {"rules": [...], "default_verdict": "deny"}
        #[arg(long)]
        policy: PathBuf,
        /// Files to include; each becomes an object named after the file.
        #[arg(long = "payload", required = true)]
        payloads: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a capsule, fetch its key and register its objects in the engine state.
    Install {
        #[arg(long)]
        capsule: PathBuf,
        #[arg(long)]
        directory: PathBuf,
        #[arg(long)]
        keyserver: PathBuf,
        /// Engine state file (NDJSON); created if missing.
        #[arg(long)]
        state: PathBuf,
        /// Present an attestation token for this platform name.
        #[arg(long)]
        attest_as: Option<String>,
    },
    /// Replay an event script against the engine state and print verdicts.
    Simulate {
        #[arg(long)]
        state: PathBuf,
        /// {"objects": [{"id", "kind"}], "events": [{"source", "sink", "operation", "tier"?}]}
        #[arg(long)]
        script: PathBuf,
        /// Write the resulting state back.
        #[arg(long)]
        save: bool,
        /// Print the transcript as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn load_engine(path: &Path) -> anyhow::Result<CapsuleEngine> {
    if path.exists() {
        CapsuleEngine::restore(path).with_context(|| format!("restoring {}", path.display()))
    } else {
        Ok(CapsuleEngine::new())
    }
}

pub fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Keygen {
            owner,
            out,
            directory,
        } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            let key = OwnerKey::generate(&owner, &mut rand::rngs::OsRng);
            std::fs::write(&out, serde_json::to_string_pretty(&key)?)?;
            if let Some(dir) = directory {
                let mut records: Vec<OwnerRecord> = if dir.exists() {
                    crate::read_json(&dir)?
                } else {
                    Vec::new()
                };
                if records.iter().any(|r| r.owner_id == owner) {
                    bail!("{} already lists {owner}", dir.display());
                }
                records.push(key.record()?);
                std::fs::write(&dir, serde_json::to_string_pretty(&records)?)?;
            }
            println!("{owner}: key written to {}", out.display());
        }
        Command::KeyserverInit {
            out,
            require_attestation,
        } => {
            if out.exists() {
                bail!("{} already exists", out.display());
            }
            KeyServer::generate(&mut rand::rngs::OsRng, require_attestation).save(&out)?;
            println!("key server state written to {}", out.display());
        }
        Command::Package {
            owner_key,
            keyserver,
            policy,
            payloads,
            out,
        } => {
            let owner: OwnerKey = crate::read_json(&owner_key)?;
            let policy: CapsulePolicy = crate::read_json(&policy)?;
            let ks = KeyServer::load(&keyserver)?;
            let mut objects = Vec::new();
            for p in &payloads {
                let name = p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .with_context(|| format!("{} has no usable file name", p.display()))?;
                let data = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                objects.push(PayloadObject {
                    name: name.to_owned(),
                    kind: ObjectKind::File,
                    data,
                });
            }
            let capsule = package_capsule(&objects, policy, &owner, &ks, &mut rand::rngs::OsRng)?;
            std::fs::write(&out, capsule.encode())?;
            ks.save(&keyserver)?;
            println!(
                "capsule {} ({} objects) written to {}",
                capsule.capsule_id,
                objects.len(),
                out.display()
            );
        }
        Command::Install {
            capsule,
            directory,
            keyserver,
            state,
            attest_as,
        } => {
            let bytes = std::fs::read(&capsule)
                .with_context(|| format!("reading {}", capsule.display()))?;
            let capsule = Capsule::decode(&bytes)?;
            let owners = OwnerDirectory::load(&directory)?;
            let ks = KeyServer::load(&keyserver)?;
            let token = attest_as.map(|p| ks.attest(&p));
            let mut engine = load_engine(&state)?;
            let installed = engine.install_capsule(&capsule, &owners, &ks, token.as_ref())?;
            engine.persist(&state)?;
            println!(
                "installed capsule {} as {}",
                installed.capsule_id, installed.label
            );
            for name in &installed.sources {
                println!("  {name}");
            }
        }
        Command::Simulate {
            state,
            script,
            save,
            json,
        } => {
            let script: EventScript = crate::read_json(&script)?;
            let mut engine = load_engine(&state)?;
            let transcript = engine.run_script(&script)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&transcript)?);
            } else {
                for line in &transcript.lines {
                    println!("{line}");
                }
                println!(
                    "{} events, {} denied",
                    transcript.lines.len(),
                    transcript.denied()
                );
            }
            if save {
                engine.persist(&state)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
