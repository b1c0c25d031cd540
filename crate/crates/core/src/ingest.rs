//! Flow CSV ingestion, cleaning and the train/test day split.
//!
//! Column names are not hardcoded: a [`Schema`] maps each [`FlowRecord`]
//! field onto a CSV header. The default schema matches the labelled flow
//! exports of CICIDS2017 (leading/trailing whitespace in headers is ignored).
//!
//! Any row with a missing or unparseable required field is dropped and
//! reported; nothing is imputed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable back-reference from tokens and scores to an input row.
pub type RowId = u64;

/// One cleaned flow row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub row_id: RowId,
    pub timestamp: NaiveDateTime,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    pub byte_count: u64,
    pub label: String,
}

impl FlowRecord {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    pub fn hour(&self) -> u32 {
        self.timestamp.hour()
    }
}

/// Maps CSV headers onto [`FlowRecord`] fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub timestamp: String,
    pub src_ip: String,
    pub dst_ip: String,
    pub src_port: String,
    pub dst_port: String,
    pub protocol: String,
    /// Summed into `byte_count`.
    pub byte_columns: Vec<String>,
    pub label: String,
    /// Tried in order; the first that parses wins.
    pub timestamp_formats: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            timestamp: "Timestamp".into(),
            src_ip: "Source IP".into(),
            dst_ip: "Destination IP".into(),
            src_port: "Source Port".into(),
            dst_port: "Destination Port".into(),
            protocol: "Protocol".into(),
            byte_columns: vec![
                "Total Length of Fwd Packets".into(),
                "Total Length of Bwd Packets".into(),
            ],
            label: "Label".into(),
            timestamp_formats: vec!["%d/%m/%Y %H:%M:%S".into(), "%d/%m/%Y %H:%M".into()],
        }
    }
}

/// Why a row was dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    Incomplete,
    InvalidTimestamp,
    InvalidIp,
    InvalidPort,
    InvalidProtocol,
    InvalidBytes,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Incomplete => "incomplete",
            RejectReason::InvalidTimestamp => "invalid_timestamp",
            RejectReason::InvalidIp => "invalid_ip",
            RejectReason::InvalidPort => "invalid_port",
            RejectReason::InvalidProtocol => "invalid_protocol",
            RejectReason::InvalidBytes => "invalid_bytes",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number in the source file (the header is line 1).
    pub line: u64,
    pub reason: RejectReason,
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    /// Sorted by `(timestamp, row_id)`.
    pub records: Vec<FlowRecord>,
    pub rejected: Vec<RejectedRow>,
    /// Number of data rows seen; always `records.len() + rejected.len()`.
    pub rows_read: u64,
}

struct ColumnIndex {
    timestamp: usize,
    src_ip: usize,
    dst_ip: usize,
    src_port: usize,
    dst_port: usize,
    protocol: usize,
    bytes: Vec<usize>,
    label: usize,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, schema: &Schema) -> Result<Self> {
        let positions: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let find = |name: &str| {
            positions
                .get(name.trim())
                .copied()
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
        };
        if schema.byte_columns.is_empty() {
            return Err(Error::Schema("no byte columns configured".into()));
        }
        Ok(Self {
            timestamp: find(&schema.timestamp)?,
            src_ip: find(&schema.src_ip)?,
            dst_ip: find(&schema.dst_ip)?,
            src_port: find(&schema.src_port)?,
            dst_port: find(&schema.dst_port)?,
            protocol: find(&schema.protocol)?,
            bytes: schema
                .byte_columns
                .iter()
                .map(|c| find(c))
                .collect::<Result<_>>()?,
            label: find(&schema.label)?,
        })
    }
}

/// Parses a header-bearing flow CSV.
///
/// Missing configured columns are fatal. Malformed rows are skipped and
/// listed in [`ParseOutcome::rejected`]. Row ids are the 0-based data row
/// index, so they stay unique and refer back to the input file.
pub fn parse_flow_csv<R: Read>(source: R, schema: &Schema) -> Result<ParseOutcome> {
    if schema.timestamp_formats.is_empty() {
        return Err(Error::Schema("no timestamp formats configured".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(source);
    // Some exports carry cp1252 bytes in labels; decode lossily rather than
    // rejecting those rows.
    let headers = csv::StringRecord::from_byte_record_lossy(reader.byte_headers()?.clone());
    let columns = ColumnIndex::resolve(&headers, schema)?;

    let mut outcome = ParseOutcome::default();
    let mut raw = csv::ByteRecord::new();
    let mut row_id: RowId = 0;
    loop {
        let line = reader.position().line() + 1;
        match reader.read_byte_record(&mut raw) {
            Ok(true) => {}
            Ok(false) => break,
            Err(err) if err.is_io_error() => return Err(err.into()),
            Err(_) => {
                outcome.rejected.push(RejectedRow {
                    line,
                    reason: RejectReason::Incomplete,
                });
                outcome.rows_read += 1;
                row_id += 1;
                continue;
            }
        }
        let line = raw.position().map_or(line, |p| p.line());
        let row = csv::StringRecord::from_byte_record_lossy(raw.clone());
        match parse_row(&row, &columns, schema, row_id) {
            Ok(record) => outcome.records.push(record),
            Err(reason) => outcome.rejected.push(RejectedRow { line, reason }),
        }
        outcome.rows_read += 1;
        row_id += 1;
    }
    outcome.records.sort_by_key(|r| (r.timestamp, r.row_id));
    Ok(outcome)
}

fn parse_row(
    row: &csv::StringRecord,
    columns: &ColumnIndex,
    schema: &Schema,
    row_id: RowId,
) -> std::result::Result<FlowRecord, RejectReason> {
    let field = |idx: usize| -> std::result::Result<&str, RejectReason> {
        match row.get(idx).map(str::trim) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(RejectReason::Incomplete),
        }
    };

    // Presence is checked for every field before any parsing, so a row with
    // a missing field is always reported as incomplete.
    let raw_ts = field(columns.timestamp)?;
    let raw_src = field(columns.src_ip)?;
    let raw_dst = field(columns.dst_ip)?;
    let raw_sport = field(columns.src_port)?;
    let raw_dport = field(columns.dst_port)?;
    let raw_proto = field(columns.protocol)?;
    let raw_bytes = columns
        .bytes
        .iter()
        .map(|&i| field(i))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let label = field(columns.label)?;

    let timestamp = schema
        .timestamp_formats
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw_ts, fmt).ok())
        .ok_or(RejectReason::InvalidTimestamp)?;
    let src_ip = Ipv4Addr::from_str(raw_src).map_err(|_| RejectReason::InvalidIp)?;
    let dst_ip = Ipv4Addr::from_str(raw_dst).map_err(|_| RejectReason::InvalidIp)?;
    let src_port = raw_sport.parse().map_err(|_| RejectReason::InvalidPort)?;
    let dst_port = raw_dport.parse().map_err(|_| RejectReason::InvalidPort)?;
    let protocol = raw_proto
        .parse()
        .map_err(|_| RejectReason::InvalidProtocol)?;
    let mut byte_count: u64 = 0;
    for raw in raw_bytes {
        let b: u64 = raw.parse().map_err(|_| RejectReason::InvalidBytes)?;
        byte_count = byte_count
            .checked_add(b)
            .ok_or(RejectReason::InvalidBytes)?;
    }

    Ok(FlowRecord {
        row_id,
        timestamp,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        byte_count,
        label: label.to_string(),
    })
}

/// Writes the rejected-row report as `line_number,reason`.
pub fn write_rejected_report<W: Write>(rejected: &[RejectedRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["line_number", "reason"])?;
    for r in rejected {
        w.write_record([r.line.to_string(), r.reason.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<rejected report>", e))?;
    Ok(())
}

/// An IPv4 CIDR block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ipv4Net {
    network: u32,
    prefix: u8,
}

impl Ipv4Net {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Result<Self> {
        if prefix > 32 {
            return Err(Error::Config(format!("invalid prefix length /{prefix}")));
        }
        let network = u32::from(addr) & Self::mask(prefix);
        Ok(Self { network, prefix })
    }

    fn mask(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & Self::mask(self.prefix) == self.network
    }
}

impl FromStr for Ipv4Net {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid address or CIDR block `{s}`"));
        match s.split_once('/') {
            Some((addr, prefix)) => {
                let addr = addr.trim().parse().map_err(|_| bad())?;
                let prefix = prefix.trim().parse().map_err(|_| bad())?;
                Ipv4Net::new(addr, prefix)
            }
            None => Ipv4Net::new(s.trim().parse().map_err(|_| bad())?, 32),
        }
    }
}

impl fmt::Display for Ipv4Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", Ipv4Addr::from(self.network), self.prefix)
    }
}

/// The set of addresses considered inside the monitored network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InternalNetworks {
    nets: Vec<Ipv4Net>,
}

impl InternalNetworks {
    pub fn new(nets: Vec<Ipv4Net>) -> Self {
        Self { nets }
    }

    /// Parses one address or CIDR block per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut nets = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                nets.push(line.parse()?);
            }
        }
        Ok(Self { nets })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        self.nets.iter().any(|n| n.contains(addr))
    }

    pub fn networks(&self) -> &[Ipv4Net] {
        &self.nets
    }

    pub fn to_text(&self) -> String {
        self.nets.iter().map(|n| format!("{n}\n")).collect()
    }
}

/// Keeps records with at least one internal endpoint, preserving order.
pub fn clean(records: Vec<FlowRecord>, internal: &InternalNetworks) -> Result<Vec<FlowRecord>> {
    if internal.is_empty() {
        return Err(Error::Config("internal IP set is empty".into()));
    }
    Ok(records
        .into_iter()
        .filter(|r| internal.contains(r.src_ip) || internal.contains(r.dst_ip))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_day: Option<NaiveDate>,
    pub train: Vec<FlowRecord>,
    pub test: Vec<FlowRecord>,
}

/// Partitions records into the training day and all later days.
///
/// A record dated before `train_day` is an error: it would break the
/// assumption that the model only ever sees earlier, attack-free traffic.
pub fn split_by_day(records: Vec<FlowRecord>, train_day: NaiveDate) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let date = r.date();
        if date < train_day {
            return Err(Error::RecordBeforeTrainDay {
                row_id: r.row_id,
                date,
                train_day,
            });
        } else if date == train_day {
            train.push(r);
        } else {
            test.push(r);
        }
    }
    if train.is_empty() {
        return Err(Error::TrainDayMissing(train_day));
    }
    if test.is_empty() {
        log::warn!("every record falls on the training day {train_day}; test set is empty");
    }
    Ok(DatasetSplit {
        train_day: Some(train_day),
        train,
        test,
    })
}

/// Record counts per calendar day, for eyeballing timestamp problems.
pub fn day_histogram(records: &[FlowRecord]) -> BTreeMap<NaiveDate, usize> {
    let mut days = BTreeMap::new();
    for r in records {
        *days.entry(r.date()).or_insert(0) += 1;
    }
    days
}

const STAGED_TS_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Serialize, Deserialize)]
struct StagedRow {
    row_id: RowId,
    timestamp: String,
    src_ip: Ipv4Addr,
    src_port: u16,
    dst_ip: Ipv4Addr,
    dst_port: u16,
    protocol: u8,
    byte_count: u64,
    label: String,
}

/// Writes cleaned records in the pipeline's own staging format, which keeps
/// row ids and the summed byte count.
pub fn write_staged_flows<W: Write>(records: &[FlowRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(StagedRow {
            row_id: r.row_id,
            timestamp: r.timestamp.format(STAGED_TS_FORMAT).to_string(),
            src_ip: r.src_ip,
            src_port: r.src_port,
            dst_ip: r.dst_ip,
            dst_port: r.dst_port,
            protocol: r.protocol,
            byte_count: r.byte_count,
            label: r.label.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<staged flows>", e))?;
    Ok(())
}

pub fn read_staged_flows<R: Read>(source: R) -> Result<Vec<FlowRecord>> {
    let mut reader = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<StagedRow>().enumerate() {
        let row = row?;
        let timestamp = NaiveDateTime::parse_from_str(&row.timestamp, STAGED_TS_FORMAT)
            .map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
        out.push(FlowRecord {
            row_id: row.row_id,
            timestamp,
            src_ip: row.src_ip,
            dst_ip: row.dst_ip,
            src_port: row.src_port,
            dst_port: row.dst_port,
            protocol: row.protocol,
            byte_count: row.byte_count,
            label: row.label,
        });
    }
    Ok(out)
}
