//! Deterministic synthetic flow data with labeled attack episodes.
//!
//! Day 1 is benign only and serves as the clean baseline. Later days mix
//! benign traffic with the configured episodes:
//!
//! * `rare_token_burst`: TCP/443 flows whose byte sizes fall in buckets no
//!   benign service ever produces,
//! * `port_sweep`: one small TCP flow per destination port over a range,
//! * `low_and_slow`: a trickle of ordinary-looking web requests from an
//!   outside host.

use std::collections::HashMap;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FlowRecord, InternalNetworks, Ipv4Net, Schema};
use crate::tokenize::Protocol;

pub const BENIGN: &str = "BENIGN";

const INTERNAL_BASE: [u8; 3] = [192, 168, 10];
const EXTERNAL_BASE: [u8; 3] = [198, 51, 100];
const ATTACKER_BASE: [u8; 3] = [203, 0, 113];
const FIRST_HOST: u8 = 10;
const TCP: u8 = 6;
const SWEEP_BUCKET: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    RareTokenBurst,
    PortSweep,
    LowAndSlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub attack_name: String,
    /// 1-based day index; must be at least 2.
    pub day: u32,
    pub hour: u32,
    pub kind: EpisodeKind,
    /// Flow count for bursts and trickles (sweeps use `ports`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<usize>,
    /// Inclusive destination port range of a sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ports: Option<[u16; 2]>,
}

impl Episode {
    fn flow_count(&self) -> usize {
        match self.kind {
            EpisodeKind::RareTokenBurst => self.flows.unwrap_or(40),
            EpisodeKind::LowAndSlow => self.flows.unwrap_or(30),
            EpisodeKind::PortSweep => {
                let [lo, hi] = self.port_range();
                usize::from(hi - lo) + 1
            }
        }
    }

    fn port_range(&self) -> [u16; 2] {
        self.ports.unwrap_or([1, 1024])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hosts {
    pub internal: usize,
    /// The first `internal_servers` internal hosts accept connections.
    pub internal_servers: usize,
    pub external: usize,
}

impl Default for Hosts {
    fn default() -> Self {
        Self {
            internal: 10,
            internal_servers: 3,
            external: 8,
        }
    }
}

/// A service with its share of a role's traffic and its byte-bucket
/// distribution as `[bucket, weight]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub protocol: u8,
    pub port: u16,
    pub weight: f64,
    pub buckets: Vec<(u32, f64)>,
}

impl Service {
    fn new(protocol: u8, port: u16, weight: f64, buckets: &[(u32, f64)]) -> Self {
        Self {
            protocol,
            port,
            weight,
            buckets: buckets.to_vec(),
        }
    }
}

/// Traffic for one direction of client/server relationship.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Role {
    pub weight: f64,
    pub services: Vec<Service>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenignProfile {
    /// Internal clients to external servers.
    pub outbound: Role,
    /// Internal clients to internal servers.
    pub lateral: Role,
    /// External clients to internal servers.
    pub inbound: Role,
}

impl Default for BenignProfile {
    fn default() -> Self {
        const UDP: u8 = 17;
        Self {
            outbound: Role {
                weight: 0.6,
                services: vec![
                    Service::new(TCP, 443, 0.45, &[(9, 0.1), (10, 0.2), (11, 0.25), (12, 0.2), (13, 0.15), (14, 0.1)]),
                    Service::new(TCP, 80, 0.25, &[(8, 0.2), (9, 0.3), (10, 0.3), (11, 0.2)]),
                    Service::new(UDP, 53, 0.2, &[(6, 0.5), (7, 0.5)]),
                    Service::new(UDP, 123, 0.1, &[(6, 1.0)]),
                ],
            },
            lateral: Role {
                weight: 0.25,
                services: vec![
                    Service::new(TCP, 445, 0.5, &[(10, 0.3), (11, 0.4), (12, 0.3)]),
                    Service::new(TCP, 22, 0.2, &[(6, 0.3), (7, 0.4), (8, 0.3)]),
                    Service::new(UDP, 137, 0.3, &[(6, 0.6), (7, 0.4)]),
                ],
            },
            inbound: Role {
                weight: 0.15,
                services: vec![
                    Service::new(TCP, 80, 0.6, &[(8, 0.3), (9, 0.4), (10, 0.3)]),
                    Service::new(TCP, 443, 0.4, &[(10, 0.5), (11, 0.5)]),
                ],
            },
        }
    }
}

impl BenignProfile {
    fn roles(&self) -> [&Role; 3] {
        [&self.outbound, &self.lateral, &self.inbound]
    }

    fn max_bucket(&self, protocol: u8) -> Option<u32> {
        self.roles()
            .iter()
            .flat_map(|r| &r.services)
            .filter(|s| s.protocol == protocol)
            .flat_map(|s| s.buckets.iter().map(|b| b.0))
            .max()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_days: u32,
    pub start_date: NaiveDate,
    /// Benign traffic runs from `first_hour` through `last_hour` inclusive.
    pub first_hour: u32,
    pub last_hour: u32,
    pub flows_per_hour: usize,
    /// Chance a client repeats its previous (service, server) choice.
    pub stickiness: f64,
    pub hosts: Hosts,
    pub benign_profile: BenignProfile,
    pub episodes: Vec<Episode>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let ep = |attack_name: &str, day, hour, kind| Episode {
            attack_name: attack_name.into(),
            day,
            hour,
            kind,
            flows: None,
            ports: None,
        };
        Self {
            seed: 7,
            n_days: 3,
            start_date: NaiveDate::from_ymd_opt(2017, 7, 3).expect("valid date"),
            first_hour: 8,
            last_hour: 17,
            flows_per_hour: 250,
            stickiness: 0.6,
            hosts: Hosts::default(),
            benign_profile: BenignProfile::default(),
            episodes: vec![
                ep("RareTokenBurst", 2, 10, EpisodeKind::RareTokenBurst),
                ep("PortSweep", 2, 14, EpisodeKind::PortSweep),
                ep("LowAndSlow", 3, 11, EpisodeKind::LowAndSlow),
                ep("RareTokenBurst", 3, 15, EpisodeKind::RareTokenBurst),
            ],
        }
    }
}

fn check_distribution(what: &str, weights: impl Iterator<Item = f64>) -> Result<()> {
    let w: Vec<f64> = weights.collect();
    if w.is_empty() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config(format!("synth: {what} needs non-negative weights")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("synth: {what} weights sum to {sum}, not 1")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synth config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_days == 0 {
            return bad("n_days must be positive".into());
        }
        if self.first_hour > self.last_hour || self.last_hour > 23 {
            return bad(format!("bad hour range {}..={}", self.first_hour, self.last_hour));
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return bad("stickiness must lie in [0, 1]".into());
        }
        let h = &self.hosts;
        if h.internal_servers == 0 || h.internal_servers > h.internal || h.external == 0 {
            return bad("need at least one internal server and one external host".into());
        }
        if h.internal + usize::from(FIRST_HOST) > 255 || h.external + usize::from(FIRST_HOST) > 255 {
            return bad("host counts exceed a /24".into());
        }
        let p = &self.benign_profile;
        check_distribution("role", p.roles().iter().map(|r| r.weight))?;
        for (name, role) in ["outbound", "lateral", "inbound"].iter().zip(p.roles()) {
            check_distribution(&format!("{name} services"), role.services.iter().map(|s| s.weight))?;
            for s in &role.services {
                check_distribution(
                    &format!("{name} {}/{} buckets", Protocol(s.protocol), s.port),
                    s.buckets.iter().map(|b| b.1),
                )?;
                if s.buckets.iter().any(|b| b.0 > 40) {
                    return bad("byte buckets above 40 are not representable".into());
                }
            }
        }
        if p.max_bucket(TCP).is_some_and(|b| b > 36) {
            return bad("benign TCP buckets leave no room for rare-token bursts".into());
        }
        for e in &self.episodes {
            if e.day == 1 {
                return bad(format!("episode `{}` is on day 1, the clean baseline", e.attack_name));
            }
            if e.day > self.n_days || e.hour > 23 {
                return bad(format!("episode `{}` falls outside the generated days", e.attack_name));
            }
            if e.attack_name.trim().is_empty() || e.attack_name.eq_ignore_ascii_case(BENIGN) {
                return bad("episodes need a non-benign attack_name".into());
            }
            if let Some([lo, hi]) = e.ports {
                if lo == 0 || lo > hi || hi > 10_000 {
                    return bad(format!("sweep range {lo}-{hi} must lie within 1-10000"));
                }
            }
            if e.flow_count() == 0 {
                return bad(format!("episode `{}` has no flows", e.attack_name));
            }
        }
        Ok(())
    }

    /// Networks to treat as internal when ingesting the generated data.
    pub fn internal_networks(&self) -> InternalNetworks {
        let [a, b, c] = INTERNAL_BASE;
        InternalNetworks::new(vec![Ipv4Net::new(Ipv4Addr::new(a, b, c, 0), 24).expect("valid prefix")])
    }
}

fn host(base: [u8; 3], i: usize) -> Ipv4Addr {
    Ipv4Addr::new(base[0], base[1], base[2], FIRST_HOST + i as u8)
}

fn bytes_in_bucket(rng: &mut impl Rng, bucket: u32) -> u64 {
    if bucket == 0 {
        rng.gen_range(0..=1)
    } else {
        rng.gen_range(1u64 << bucket..1u64 << (bucket + 1))
    }
}

struct Sampler<'a> {
    role_index: WeightedIndex<f64>,
    roles: [&'a Role; 3],
    service_index: Vec<WeightedIndex<f64>>,
    bucket_index: Vec<Vec<WeightedIndex<f64>>>,
}

impl<'a> Sampler<'a> {
    fn new(profile: &'a BenignProfile) -> Result<Self> {
        let wi = |w: Vec<f64>| WeightedIndex::new(w).map_err(|e| Error::Config(format!("synth: {e}")));
        let roles = profile.roles();
        let mut service_index = Vec::new();
        let mut bucket_index = Vec::new();
        for r in roles {
            service_index.push(wi(r.services.iter().map(|s| s.weight).collect())?);
            bucket_index.push(
                r.services
                    .iter()
                    .map(|s| wi(s.buckets.iter().map(|b| b.1).collect()))
                    .collect::<Result<_>>()?,
            );
        }
        Ok(Self {
            role_index: wi(roles.iter().map(|r| r.weight).collect())?,
            roles,
            service_index,
            bucket_index,
        })
    }

    fn bucket(&self, rng: &mut impl Rng, role: usize, service: usize) -> u32 {
        let s = &self.roles[role].services[service];
        s.buckets[self.bucket_index[role][service].sample(rng)].0
    }
}

struct Flow {
    timestamp: NaiveDateTime,
    src: Ipv4Addr,
    src_port: u16,
    dst: Ipv4Addr,
    dst_port: u16,
    protocol: u8,
    bytes: u64,
    label: String,
}

/// Generates the flows, sorted by time, with row ids in output order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<FlowRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = Sampler::new(&cfg.benign_profile)?;
    let h = &cfg.hosts;
    let internal: Vec<Ipv4Addr> = (0..h.internal).map(|i| host(INTERNAL_BASE, i)).collect();
    let external: Vec<Ipv4Addr> = (0..h.external).map(|i| host(EXTERNAL_BASE, i)).collect();
    let servers = &internal[..h.internal_servers];

    // Each client remembers its last (role, service, server) per role.
    let mut last_choice: HashMap<(Ipv4Addr, usize), (usize, Ipv4Addr)> = HashMap::new();
    let mut flows = Vec::new();
    for day in 0..cfg.n_days {
        let date = cfg.start_date + Duration::days(i64::from(day));
        for hour in cfg.first_hour..=cfg.last_hour {
            let start = date.and_hms_opt(hour, 0, 0).expect("valid hour");
            for _ in 0..cfg.flows_per_hour {
                let role = sampler.role_index.sample(&mut rng);
                let (clients, server_pool) = match role {
                    0 => (&internal[..], &external[..]),
                    1 => (&internal[..], servers),
                    _ => (&external[..], servers),
                };
                let client = clients[rng.gen_range(0..clients.len())];
                let previous = last_choice.get(&(client, role)).copied();
                let (service, server) = match previous {
                    Some(prev) if rng.gen_bool(cfg.stickiness) => prev,
                    _ => loop {
                        let s = sampler.service_index[role].sample(&mut rng);
                        let srv = server_pool[rng.gen_range(0..server_pool.len())];
                        if srv != client {
                            break (s, srv);
                        }
                    },
                };
                last_choice.insert((client, role), (service, server));
                let svc = &sampler.roles[role].services[service];
                let bucket = sampler.bucket(&mut rng, role, service);
                flows.push(Flow {
                    timestamp: start + Duration::seconds(rng.gen_range(0..3600)),
                    src: client,
                    src_port: rng.gen_range(49152..=65535),
                    dst: server,
                    dst_port: svc.port,
                    protocol: svc.protocol,
                    bytes: bytes_in_bucket(&mut rng, bucket),
                    label: BENIGN.into(),
                });
            }
        }
    }

    let burst_bucket = cfg.benign_profile.max_bucket(TCP).map_or(20, |b| b + 2);
    for (i, ep) in cfg.episodes.iter().enumerate() {
        let date = cfg.start_date + Duration::days(i64::from(ep.day - 1));
        let start = date.and_hms_opt(ep.hour, 0, 0).expect("valid hour");
        let attacker = host(ATTACKER_BASE, i % 200);
        let target = servers[rng.gen_range(0..servers.len())];
        let n = ep.flow_count();
        match ep.kind {
            EpisodeKind::RareTokenBurst => {
                let victim = internal[rng.gen_range(0..internal.len())];
                let offset = rng.gen_range(0..3000);
                for k in 0..n {
                    flows.push(Flow {
                        timestamp: start + Duration::seconds(offset + rng.gen_range(0..600)),
                        src: victim,
                        src_port: rng.gen_range(49152..=65535),
                        dst: attacker,
                        dst_port: 443,
                        protocol: TCP,
                        bytes: bytes_in_bucket(&mut rng, burst_bucket + (k % 3) as u32),
                        label: ep.attack_name.clone(),
                    });
                }
            }
            EpisodeKind::PortSweep => {
                let [lo, _] = ep.port_range();
                let offset = rng.gen_range(0..1800);
                for k in 0..n {
                    flows.push(Flow {
                        timestamp: start + Duration::seconds(offset + (k as i64 * 1800) / n as i64),
                        src: attacker,
                        src_port: rng.gen_range(40000..=60000),
                        dst: target,
                        dst_port: lo + k as u16,
                        protocol: TCP,
                        bytes: bytes_in_bucket(&mut rng, SWEEP_BUCKET),
                        label: ep.attack_name.clone(),
                    });
                }
            }
            EpisodeKind::LowAndSlow => {
                let web = &cfg.benign_profile.inbound;
                let (sidx, svc) = web
                    .services
                    .iter()
                    .enumerate()
                    .find(|(_, s)| s.protocol == TCP && s.port == 80)
                    .unwrap_or((0, &web.services[0]));
                for k in 0..n {
                    let bucket = sampler.bucket(&mut rng, 2, sidx);
                    flows.push(Flow {
                        timestamp: start + Duration::seconds((k as i64 * 3600) / n as i64),
                        src: attacker,
                        src_port: rng.gen_range(49152..=65535),
                        dst: target,
                        dst_port: svc.port,
                        protocol: svc.protocol,
                        bytes: bytes_in_bucket(&mut rng, bucket),
                        label: ep.attack_name.clone(),
                    });
                }
            }
        }
    }

    flows.sort_by_key(|f| f.timestamp);
    Ok(flows
        .into_iter()
        .enumerate()
        .map(|(i, f)| FlowRecord {
            row_id: i as u64,
            timestamp: f.timestamp,
            src_ip: f.src,
            dst_ip: f.dst,
            src_port: f.src_port,
            dst_port: f.dst_port,
            protocol: f.protocol,
            byte_count: f.bytes,
            label: f.label,
        })
        .collect())
}

/// Writes flows in the default ingest CSV layout, splitting each byte count
/// between the forward and backward columns.
pub fn write_csv<W: Write>(records: &[FlowRecord], sink: W) -> Result<()> {
    let schema = Schema::default();
    let fmt = &schema.timestamp_formats[0];
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        schema.timestamp.as_str(),
        &schema.src_ip,
        &schema.src_port,
        &schema.dst_ip,
        &schema.dst_port,
        &schema.protocol,
        &schema.byte_columns[0],
        &schema.byte_columns[1],
        &schema.label,
    ])?;
    for r in records {
        let fwd = r.byte_count * 2 / 5;
        w.write_record([
            r.timestamp.format(fmt).to_string(),
            r.src_ip.to_string(),
            r.src_port.to_string(),
            r.dst_ip.to_string(),
            r.dst_port.to_string(),
            r.protocol.to_string(),
            fwd.to_string(),
            (r.byte_count - fwd).to_string(),
            r.label.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<synth csv>", e))?;
    Ok(())
}

/// Generates data for `cfg` and writes `flows.csv` and `internal.txt` into
/// `dir`.
pub fn write_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<FlowRecord>> {
    let records = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("flows.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(&records, std::io::BufWriter::new(file))?;
    let net_path = dir.join("internal.txt");
    std::fs::write(&net_path, cfg.internal_networks().to_text()).map_err(|e| Error::io(&net_path, e))?;
    Ok(records)
}
