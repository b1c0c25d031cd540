//! Unigram baseline: a token's outlier score is minus its relative
//! frequency in the training set.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tokenize::{TokenIndex, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyModel {
    counts: BTreeMap<TokenIndex, u64>,
    n: u64,
}

impl FrequencyModel {
    pub fn fit<I>(train_tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = TokenIndex>,
    {
        let mut counts = BTreeMap::new();
        let mut n = 0u64;
        for t in train_tokens {
            *counts.entry(t).or_insert(0) += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptyInput("frequency-model training tokens"));
        }
        Ok(Self { counts, n })
    }

    pub fn count(&self, token: TokenIndex) -> u64 {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> &BTreeMap<TokenIndex, u64> {
        &self.counts
    }

    /// `-count / n`, in `[-1, 0]`. Unseen tokens score 0.
    pub fn score(&self, token: TokenIndex) -> f64 {
        -(self.count(token) as f64) / self.n as f64
    }

    /// CSV of `token,count` preceded by a `# n=<total>` line.
    pub fn write_csv<W: Write>(&self, vocab: &Vocabulary, mut sink: W) -> Result<()> {
        writeln!(sink, "# n={}", self.n).map_err(|e| Error::io("<frequency model>", e))?;
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["token", "count"])?;
        for (&idx, &count) in &self.counts {
            let token = vocab.decode(idx).ok_or(Error::TokenOutOfRange {
                index: idx,
                vocab_size: vocab.len(),
            })?;
            w.write_record([token, &count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<frequency model>", e))?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(vocab: &Vocabulary, mut source: R) -> Result<Self> {
        let mut first = String::new();
        source
            .read_line(&mut first)
            .map_err(|e| Error::io("<frequency model>", e))?;
        let n: u64 = first
            .trim()
            .strip_prefix("# n=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected `# n=<total>`".into(),
            })?;
        let mut reader = csv::Reader::from_reader(source);
        let mut counts = BTreeMap::new();
        for row in reader.deserialize::<(String, u64)>() {
            let (token, count) = row?;
            *counts.entry(vocab.encode(&token)).or_insert(0) += count;
        }
        if counts.values().sum::<u64>() != n || n == 0 {
            return Err(Error::Parse {
                line: 1,
                message: format!("counts do not sum to n={n}"),
            });
        }
        Ok(Self { counts, n })
    }
}
