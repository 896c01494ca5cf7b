use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::Subcommand;
use gridsight_client::{Client, ClientError};
use gridsight_core::report::{
    random_nonce, sign, DeviceKey, GeoPoint, IncidentReport, RegistryRecord, SignedEnvelope,
};
use rand::RngCore;

#[derive(Subcommand)]
pub enum Command {
    /// Generate a device signing key, optionally enrolling it in a registry file.
    Keygen {
        #[arg(long)]
        device: String,
        /// Key file to create.
        #[arg(long)]
        out: PathBuf,
        /// Registry file to add the public key to (created if missing).
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Write an unsigned incident report.
    New {
        #[arg(long)]
        device: String,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, default_value_t = 1.0)]
        confidence: f64,
        #[arg(long, default_value = "")]
        description: String,
        /// Milliseconds since the epoch; now if omitted.
        #[arg(long)]
        timestamp: Option<i64>,
        /// Fixes the report id and nonce (test builds only).
        #[cfg(feature = "seeded-nonce")]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign a report with a device key, producing an envelope.
    Sign {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Submit an envelope to a running service and print the acceptance record.
    Send {
        /// Service root, e.g. http://127.0.0.1:8080
        #[arg(long)]
        server: String,
        #[arg(long)]
        envelope: PathBuf,
    },
}

fn now_ms() -> i64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn create_new(path: &Path, text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("creating {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn rng_for(_seed: Option<u64>) -> Box<dyn RngCore> {
    #[cfg(feature = "seeded-nonce")]
    if let Some(seed) = _seed {
        use rand::SeedableRng;
        return Box::new(rand::rngs::StdRng::seed_from_u64(seed));
    }
    Box::new(rand::rngs::OsRng)
}

pub fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Keygen {
            device,
            out,
            registry,
        } => {
            let key = DeviceKey::generate(&device, &mut rand::rngs::OsRng);
            create_new(&out, &serde_json::to_string_pretty(&key)?)?;
            if let Some(reg) = registry {
                let mut records: Vec<RegistryRecord> = if reg.exists() {
                    crate::read_json(&reg)?
                } else {
                    Vec::new()
                };
                if records.iter().any(|r| r.device_key_id == device) {
                    bail!("{} already enrolls {device}", reg.display());
                }
                records.push(key.registry_record()?);
                std::fs::write(&reg, serde_json::to_string_pretty(&records)?)?;
            }
            println!("{device}: key written to {}", out.display());
        }
        Command::New {
            device,
            lat,
            lon,
            confidence,
            description,
            timestamp,
            #[cfg(feature = "seeded-nonce")]
            seed,
            out,
        } => {
            #[cfg(not(feature = "seeded-nonce"))]
            let seed = None;
            let mut rng = rng_for(seed);
            let mut id = [0u8; 16];
            rng.fill_bytes(&mut id);
            let report = IncidentReport {
                report_id: uuid::Builder::from_random_bytes(id).into_uuid(),
                device_key_id: device,
                timestamp: timestamp.unwrap_or_else(now_ms),
                location: GeoPoint { lat, lon },
                confidence,
                description,
                attachments: vec![],
                nonce: random_nonce(&mut rng),
            };
            report.validate()?;
            crate::emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Sign { key, report, out } => {
            let key: DeviceKey = crate::read_json(&key)?;
            let report: IncidentReport = crate::read_json(&report)?;
            if report.device_key_id != key.device_key_id {
                bail!(
                    "report names device {:?} but the key belongs to {:?}",
                    report.device_key_id,
                    key.device_key_id
                );
            }
            report.validate()?;
            let envelope = sign(&report, &key)?;
            crate::emit(out.as_deref(), &serde_json::to_string_pretty(&envelope)?)?;
        }
        Command::Send { server, envelope } => {
            let envelope: SignedEnvelope = crate::read_json(&envelope)?;
            let rt = tokio::runtime::Runtime::new()?;
            match rt.block_on(Client::new(&server).submit_report(&envelope)) {
                Ok(record) => println!("{}", serde_json::to_string_pretty(&record)?),
                Err(ClientError::Rejected {
                    status,
                    code,
                    reason,
                }) => {
                    eprintln!("rejected ({status}) {code}: {reason}");
                    return Ok(ExitCode::from(1));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
