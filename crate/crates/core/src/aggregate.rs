//! Aggregation rules, per-hour sequence assembly and context windows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FlowRecord, InternalNetworks, RowId};
use crate::tokenize::{Feature, TokenIndex, Vocabulary, PAD};

/// Number of preceding tokens a prediction conditions on.
pub const WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationRule {
    Source,
    Destination,
    Dyad,
    Internal,
    External,
}

impl AggregationRule {
    pub const ALL: [AggregationRule; 5] = [
        AggregationRule::Source,
        AggregationRule::Destination,
        AggregationRule::Dyad,
        AggregationRule::Internal,
        AggregationRule::External,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationRule::Source => "source",
            AggregationRule::Destination => "destination",
            AggregationRule::Dyad => "dyad",
            AggregationRule::Internal => "internal",
            AggregationRule::External => "external",
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AggregationRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation rule `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Host(Ipv4Addr),
    /// Ordered (source, destination).
    Pair(Ipv4Addr, Ipv4Addr),
}

/// Identifies one sequence: the rule's IP(s) plus date and hour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub endpoint: Endpoint,
    pub date: NaiveDate,
    pub hour: u32,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.endpoint {
            Endpoint::Host(ip) => write!(f, "{ip}")?,
            Endpoint::Pair(a, b) => write!(f, "{a}>{b}")?,
        }
        write!(f, "|{}|{:02}", self.date, self.hour)
    }
}

/// The groups a record belongs to under `rule`.
///
/// Internal-to-internal flows belong to both endpoints' internal groups and
/// to no external group.
pub fn keys_for(
    record: &FlowRecord,
    rule: AggregationRule,
    internal: &InternalNetworks,
) -> Vec<GroupKey> {
    let date = record.date();
    let hour = record.hour();
    let key = |endpoint| GroupKey {
        endpoint,
        date,
        hour,
    };
    let endpoints = [record.src_ip, record.dst_ip];
    match rule {
        AggregationRule::Source => vec![key(Endpoint::Host(record.src_ip))],
        AggregationRule::Destination => vec![key(Endpoint::Host(record.dst_ip))],
        AggregationRule::Dyad => vec![key(Endpoint::Pair(record.src_ip, record.dst_ip))],
        AggregationRule::Internal => endpoints
            .into_iter()
            .filter(|ip| internal.contains(*ip))
            .map(|ip| key(Endpoint::Host(ip)))
            .collect(),
        AggregationRule::External => endpoints
            .into_iter()
            .filter(|ip| !internal.contains(*ip))
            .map(|ip| key(Endpoint::Host(ip)))
            .collect(),
    }
}

/// One group's time-ordered tokens, with the row each token came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceUnit {
    pub key: GroupKey,
    pub tokens: Vec<TokenIndex>,
    pub refs: Vec<RowId>,
}

impl SequenceUnit {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Groups records under `rule` and encodes their tokens.
///
/// Units come back in key order; tokens within a unit are ordered by
/// `(timestamp, row_id)`.
pub fn build_sequences(
    records: &[FlowRecord],
    rule: AggregationRule,
    vocab: &Vocabulary,
    feature: Feature,
    internal: &InternalNetworks,
) -> Vec<SequenceUnit> {
    let mut groups: BTreeMap<GroupKey, Vec<(&FlowRecord, TokenIndex)>> = BTreeMap::new();
    for record in records {
        let keys = keys_for(record, rule, internal);
        if keys.is_empty() {
            continue;
        }
        let token = vocab.encode(&feature.token(record));
        for key in keys {
            groups.entry(key).or_default().push((record, token));
        }
    }
    groups
        .into_iter()
        .map(|(key, mut members)| {
            members.sort_by_key(|(r, _)| (r.timestamp, r.row_id));
            SequenceUnit {
                key,
                tokens: members.iter().map(|(_, t)| *t).collect(),
                refs: members.iter().map(|(r, _)| r.row_id).collect(),
            }
        })
        .collect()
}

/// A left-padded context and the token that follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowedExample {
    pub context: [TokenIndex; WINDOW],
    pub target: TokenIndex,
    pub target_ref: RowId,
}

impl WindowedExample {
    /// Number of leading PAD entries.
    pub fn pad_len(&self) -> usize {
        self.context.iter().take_while(|&&t| t == PAD).count()
    }
}

/// Expands a unit into windows targeting positions `0, stride, 2*stride, ...`.
///
/// # Panics
///
/// If `stride` is zero.
pub fn windows(unit: &SequenceUnit, stride: usize) -> Vec<WindowedExample> {
    assert!(stride >= 1, "window stride must be at least 1");
    (0..unit.tokens.len())
        .step_by(stride)
        .map(|i| {
            let mut context = [PAD; WINDOW];
            let history = &unit.tokens[i.saturating_sub(WINDOW)..i];
            context[WINDOW - history.len()..].copy_from_slice(history);
            WindowedExample {
                context,
                target: unit.tokens[i],
                target_ref: unit.refs[i],
            }
        })
        .collect()
}

/// Windows for every unit, in unit order.
pub fn windows_for_all(units: &[SequenceUnit], stride: usize) -> Vec<WindowedExample> {
    units.iter().flat_map(|u| windows(u, stride)).collect()
}

/// Inverse-frequency loss weights, `N / (K * count)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassWeights {
    weights: HashMap<TokenIndex, f64>,
}

impl ClassWeights {
    /// Uniform weights.
    pub fn uniform() -> Self {
        Self::default()
    }

    /// Weight for `class`; classes not seen when fitting get 1.
    pub fn get(&self, class: TokenIndex) -> f64 {
        self.weights.get(&class).copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn class_weights<I>(targets: I) -> Result<ClassWeights>
where
    I: IntoIterator<Item = TokenIndex>,
{
    let mut counts: HashMap<TokenIndex, u64> = HashMap::new();
    let mut total = 0u64;
    for t in targets {
        *counts.entry(t).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyInput("class-weight targets"));
    }
    let k = counts.len() as f64;
    let n = total as f64;
    Ok(ClassWeights {
        weights: counts
            .into_iter()
            .map(|(c, count)| (c, n / (k * count as f64)))
            .collect(),
    })
}

/// Debug dump: `key<TAB>tok|tok|tok`, one unit per line.
pub fn dump_sequences<W: Write>(units: &[SequenceUnit], vocab: &Vocabulary, mut sink: W) -> Result<()> {
    for unit in units {
        let tokens: Vec<&str> = unit
            .tokens
            .iter()
            .map(|&t| vocab.decode(t).unwrap_or("?"))
            .collect();
        writeln!(sink, "{}\t{}", unit.key, tokens.join("|")).map_err(|e| Error::io("<sequence dump>", e))?;
    }
    Ok(())
}
