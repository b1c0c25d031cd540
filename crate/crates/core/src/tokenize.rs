//! Protobyte and service-port tokens, and the training vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FlowRecord;

/// Index into a [`Vocabulary`].
pub type TokenIndex = u32;

pub const PAD: TokenIndex = 0;
pub const UNK: TokenIndex = 1;
const PAD_TOKEN: &str = "<PAD>";
const UNK_TOKEN: &str = "<UNK>";

/// Service ports above this are clamped.
pub const SERVICE_PORT_CAP: u16 = 10_000;

/// IANA protocol number, rendered by name where one is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Protocol(pub u8);

impl Protocol {
    pub const TCP: Protocol = Protocol(6);
    pub const UDP: Protocol = Protocol(17);
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            6 => f.write_str("TCP"),
            17 => f.write_str("UDP"),
            n => write!(f, "P{n}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TCP" | "tcp" => Ok(Protocol::TCP),
            "UDP" | "udp" => Ok(Protocol::UDP),
            other => other
                .strip_prefix('P')
                .unwrap_or(other)
                .parse()
                .map(Protocol)
                .map_err(|_| Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

/// `floor(log2(bytes))`, with 0 and 1 byte both in bucket 0.
pub fn byte_bucket(byte_count: u64) -> u32 {
    if byte_count < 2 {
        0
    } else {
        63 - byte_count.leading_zeros()
    }
}

/// `PROTO:bucket`, bucket as two zero-padded digits, e.g. `UDP:04`.
pub fn protobyte_token(protocol: Protocol, byte_count: u64) -> String {
    format!("{protocol}:{:02}", byte_bucket(byte_count))
}

/// The likely service port of a flow: the smaller of the two ports, with
/// both first capped at 10000.
pub fn service_port(src_port: u16, dst_port: u16) -> u16 {
    src_port
        .min(SERVICE_PORT_CAP)
        .min(dst_port.min(SERVICE_PORT_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Protobytes,
    Ports,
}

impl Feature {
    pub const ALL: [Feature; 2] = [Feature::Protobytes, Feature::Ports];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Protobytes => "protobytes",
            Feature::Ports => "ports",
        }
    }

    pub fn token(self, record: &FlowRecord) -> String {
        match self {
            Feature::Protobytes => protobyte_token(Protocol(record.protocol), record.byte_count),
            Feature::Ports => service_port(record.src_port, record.dst_port).to_string(),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protobytes" => Ok(Feature::Protobytes),
            "ports" => Ok(Feature::Ports),
            _ => Err(Error::Config(format!("unknown feature set `{s}`"))),
        }
    }
}

/// Token string <-> index map built from training data.
///
/// Index 0 is padding and index 1 stands for every token not seen in
/// training; learned tokens start at 2 in first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, TokenIndex>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    fn reserved() -> Self {
        Self {
            token_to_index: HashMap::new(),
            index_to_token: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }

    fn push(&mut self, token: &str) {
        if token == PAD_TOKEN || token == UNK_TOKEN || self.token_to_index.contains_key(token) {
            return;
        }
        let idx = self.index_to_token.len() as TokenIndex;
        self.token_to_index.insert(token.to_string(), idx);
        self.index_to_token.push(token.to_string());
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    /// Always false: the reserved entries are present in every vocabulary.
    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn encode(&self, token: &str) -> TokenIndex {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, index: TokenIndex) -> Option<&str> {
        self.index_to_token.get(index as usize).map(String::as_str)
    }

    /// `(index, token)` pairs in index order, reserved entries included.
    pub fn iter(&self) -> impl Iterator<Item = (TokenIndex, &str)> {
        self.index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (i as TokenIndex, t.as_str()))
    }

    /// Two tab-separated columns: index, token.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<()> {
        for (i, t) in self.iter() {
            writeln!(sink, "{i}\t{t}").map_err(|e| Error::io("<vocabulary>", e))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(source: R) -> Result<Self> {
        let mut vocab = Vocabulary::reserved();
        for (n, line) in source.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<vocabulary>", e))?;
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: n + 1,
                message,
            };
            let (idx, token) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `index<TAB>token`".into()))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index `{idx}`")))?;
            if idx < 2 {
                if vocab.index_to_token[idx] != token {
                    return Err(bad(format!("reserved index {idx} must be `{}`", vocab.index_to_token[idx])));
                }
                continue;
            }
            if idx != vocab.len() {
                return Err(bad(format!("indices must be contiguous, expected {}", vocab.len())));
            }
            let before = vocab.len();
            vocab.push(token);
            if vocab.len() == before {
                return Err(bad(format!("duplicate or reserved token `{token}`")));
            }
        }
        Ok(vocab)
    }
}

/// Builds a vocabulary from training tokens.
pub fn build_vocab<I, S>(tokens: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut vocab = Vocabulary::reserved();
    let mut seen = 0usize;
    for t in tokens {
        vocab.push(t.as_ref());
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::EmptyInput("training token stream"));
    }
    Ok(vocab)
}

/// Free-function form of [`Vocabulary::encode`].
pub fn encode(token: &str, vocab: &Vocabulary) -> TokenIndex {
    vocab.encode(token)
}
