//! Envelope fuzzer: fresh envelopes that must be accepted mixed with
//! mutated, replayed, misattributed and skewed ones that must not be.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::Signer;
use gridsight_core::fixtures::seven_bus;
use gridsight_core::grid::GridSpec;
use gridsight_core::report::{
    canonical_bytes, ingest, random_nonce, sign, DeviceKey, DeviceRegistry, GeoFrame,
    IncidentReport, IngestSettings, ReportStore, SignedEnvelope, TIMESTAMP_WINDOW_MS,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use uuid::Uuid;

pub const START_MS: i64 = 1_800_000_000_000;

pub struct Fleet {
    pub enrolled: Vec<DeviceKey>,
    pub revoked: DeviceKey,
    pub stranger: DeviceKey,
    pub registry: DeviceRegistry,
}

pub fn fleet(rng: &mut StdRng) -> Fleet {
    let enrolled: Vec<DeviceKey> = (0..4)
        .map(|i| DeviceKey::generate(&format!("phone-{i}"), rng))
        .collect();
    let revoked = DeviceKey::generate("phone-lost", rng);
    let stranger = DeviceKey::generate("phone-unknown", rng);
    let mut records: Vec<_> = enrolled
        .iter()
        .map(|k| k.registry_record().unwrap())
        .collect();
    let mut r = revoked.registry_record().unwrap();
    r.revoked = true;
    records.push(r);
    let registry = DeviceRegistry::from_records(records).unwrap();
    Fleet {
        enrolled,
        revoked,
        stranger,
        registry,
    }
}

pub fn report_for<R: Rng>(rng: &mut R, device: &str, timestamp: i64) -> IncidentReport {
    let frame = GeoFrame::default();
    IncidentReport {
        report_id: Uuid::from_u128(rng.gen()),
        device_key_id: device.to_owned(),
        timestamp,
        location: frame.to_geo(rng.gen_range(0.0..12.0), rng.gen_range(0.0..10.0)),
        confidence: rng.gen_range(0.0..=1.0),
        description: [
            "sparking insulator",
            "tree on line",
            "Überlastung am Mast",
            "",
        ]
        .choose(rng)
        .unwrap()
        .to_string(),
        attachments: vec![],
        nonce: random_nonce(rng),
    }
}

fn sign_raw(report: &IncidentReport, key: &DeviceKey, envelope_id: &str) -> SignedEnvelope {
    let payload = canonical_bytes(report).unwrap();
    let sig = key.signing_key().unwrap().sign(&payload);
    SignedEnvelope::from_parts(&payload, &sig.to_bytes(), envelope_id)
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub total: usize,
    pub fresh: usize,
    pub false_accepts: usize,
    pub false_rejects: usize,
    pub by_kind: BTreeMap<&'static str, usize>,
}

/// Runs `n` envelopes through `ingest` against `store`.
pub fn run(n: usize, seed: u64, store: &ReportStore) -> FuzzOutcome {
    let mut rng = StdRng::seed_from_u64(seed);
    let fl = fleet(&mut rng);
    let spec: GridSpec = seven_bus();
    let settings = IngestSettings::default();
    let mut accepted: Vec<SignedEnvelope> = Vec::new();
    let mut out = FuzzOutcome::default();
    let w = TIMESTAMP_WINDOW_MS;

    for i in 0..n {
        let now = START_MS + i as i64 * 37;
        let dev = fl.enrolled.choose(&mut rng).unwrap();
        let skew = rng.gen_range(-w / 2..w / 2);
        let mut report = report_for(&mut rng, &dev.device_key_id, now + skew);
        let kind = if accepted.is_empty() {
            0
        } else {
            rng.gen_range(0..14)
        };
        let (name, env, expect_accept): (&'static str, SignedEnvelope, bool) = match kind {
            0 | 1 => ("fresh", sign(&report, dev).unwrap(), true),
            2 => {
                report.timestamp = now + if rng.gen_bool(0.5) { w } else { -w };
                ("window_edge", sign(&report, dev).unwrap(), true)
            }
            3 => ("replay", accepted.choose(&mut rng).unwrap().clone(), false),
            4 => {
                let mut e = sign(&report, dev).unwrap();
                let mut p = B64.decode(&e.payload_b64).unwrap();
                let at = rng.gen_range(0..p.len());
                p[at] ^= 1 << rng.gen_range(0..8);
                e.payload_b64 = B64.encode(p);
                ("payload_bitflip", e, false)
            }
            5 => {
                let mut e = sign(&report, dev).unwrap();
                let mut s = B64.decode(&e.signature_b64).unwrap();
                let at = rng.gen_range(0..s.len());
                s[at] ^= 1 << rng.gen_range(0..8);
                e.signature_b64 = B64.encode(s);
                ("signature_bitflip", e, false)
            }
            6 => {
                let mut e = sign(&report, dev).unwrap();
                let other = fl
                    .enrolled
                    .iter()
                    .find(|k| k.device_key_id != dev.device_key_id)
                    .unwrap();
                e.device_key_id = other.device_key_id.clone();
                ("envelope_id_swap", e, false)
            }
            7 => {
                report.device_key_id = fl.stranger.device_key_id.clone();
                ("unknown_key", sign(&report, &fl.stranger).unwrap(), false)
            }
            8 => {
                report.device_key_id = fl.revoked.device_key_id.clone();
                ("revoked", sign(&report, &fl.revoked).unwrap(), false)
            }
            9 => {
                report.timestamp = now - w - rng.gen_range(1..10 * w);
                ("stale", sign(&report, dev).unwrap(), false)
            }
            10 => {
                report.timestamp = now + w + rng.gen_range(1..10 * w);
                ("future", sign(&report, dev).unwrap(), false)
            }
            11 => {
                let mut e = sign(&report, dev).unwrap();
                match rng.gen_range(0..3) {
                    0 => e.payload_b64.insert(3, '*'),
                    1 => e.signature_b64.truncate(20),
                    _ => e.payload_b64 = B64.encode(b"{\"not\":\"a report\"}"),
                }
                ("garbled", e, false)
            }
            12 => {
                // signed by one enrolled device, claiming to be another
                let other = fl
                    .enrolled
                    .iter()
                    .find(|k| k.device_key_id != dev.device_key_id)
                    .unwrap();
                report.device_key_id = other.device_key_id.clone();
                (
                    "payload_device_mismatch",
                    sign_raw(&report, dev, &dev.device_key_id),
                    false,
                )
            }
            _ => {
                report.confidence = 1.0 + rng.gen_range(0.01..5.0);
                (
                    "invalid_content",
                    sign_raw(&report, dev, &dev.device_key_id),
                    false,
                )
            }
        };

        let result = ingest(&env, &fl.registry, store, &spec, &settings, now);
        out.total += 1;
        *out.by_kind.entry(name).or_default() += 1;
        if expect_accept {
            out.fresh += 1;
        }
        match (result.is_ok(), expect_accept) {
            (true, false) => out.false_accepts += 1,
            (false, true) => out.false_rejects += 1,
            (true, true) => accepted.push(env),
            (false, false) => {}
        }
    }
    out
}
