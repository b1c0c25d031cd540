//! Plain-text parameter checkpoints.
//!
//! ```text
//! flowseq-checkpoint 1
//! config <vocab> <embedding> <hidden1> <hidden2> <dense>
//! tensor embedding <rows> <cols>
//! <one line of space-separated values per row>
//! tensor lstm1_fwd.w <rows> <cols>
//! ...
//! ```
//!
//! Values are written in Rust's shortest round-trip float notation, so a
//! reload is bit-exact.

use std::io::{BufRead, Write};

use super::model::{ModelConfig, ModelParams, DENSE_PARAM_NAMES};
use crate::error::{Error, Result};

const MAGIC: &str = "flowseq-checkpoint";
const VERSION: u32 = 1;

fn tensor_shapes(params: &ModelParams) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for cell in [&params.lstm1_fwd, &params.lstm1_bwd, &params.lstm2_fwd, &params.lstm2_bwd] {
        shapes.push(cell.w.shape());
        shapes.push(cell.u.shape());
        shapes.push((1, cell.b.len()));
    }
    for d in [&params.dense_hidden, &params.dense_out] {
        shapes.push(d.w.shape());
        shapes.push((1, d.b.len()));
    }
    shapes
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut sink: W) -> Result<()> {
    let io = |e| Error::io("<checkpoint>", e);
    let c = &params.config;
    writeln!(sink, "{MAGIC} {VERSION}").map_err(io)?;
    writeln!(
        sink,
        "config {} {} {} {} {}",
        c.vocab_size, c.embedding_dim, c.hidden1, c.hidden2, c.dense
    )
    .map_err(io)?;
    let mut tensors: Vec<(&str, (usize, usize), &[f64])> =
        vec![("embedding", params.embedding.shape(), params.embedding.data())];
    for ((name, shape), data) in DENSE_PARAM_NAMES
        .iter()
        .zip(tensor_shapes(params))
        .zip(params.dense_slices())
    {
        tensors.push((name, shape, data));
    }
    for (name, (rows, cols), data) in tensors {
        writeln!(sink, "tensor {name} {rows} {cols}").map_err(io)?;
        for row in data.chunks(cols.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(sink, "{}", line.join(" ")).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(source: R) -> Result<ModelParams> {
    let mut lines = source.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((_, Err(e))) => Err(Error::io("<checkpoint>", e)),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };
    let bad = |line: usize, message: String| Error::Parse { line, message };

    let (n, header) = next("header")?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(bad(n, format!("unsupported checkpoint header `{header}`")));
    }
    let (n, cfg) = next("config")?;
    let dims: Vec<usize> = cfg
        .strip_prefix("config ")
        .ok_or_else(|| bad(n, "expected `config` line".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad(n, format!("bad dimension `{s}`"))))
        .collect::<Result<_>>()?;
    let [vocab_size, embedding_dim, hidden1, hidden2, dense] = dims[..] else {
        return Err(bad(n, "config needs five dimensions".into()));
    };
    let config = ModelConfig {
        vocab_size,
        embedding_dim,
        hidden1,
        hidden2,
        dense,
    };
    let mut params = ModelParams::init(config, 0);
    let shapes = tensor_shapes(&params);

    let mut read_tensor = |expected_name: &str, (rows, cols): (usize, usize), out: &mut [f64]| -> Result<()> {
        let (n, head) = next("tensor header")?;
        let want = format!("tensor {expected_name} {rows} {cols}");
        if head != want {
            return Err(bad(n, format!("expected `{want}`, found `{head}`")));
        }
        for r in 0..rows {
            let (n, line) = next("tensor row")?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| bad(n, format!("bad value `{s}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != cols {
                return Err(bad(n, format!("expected {cols} values, found {}", vals.len())));
            }
            out[r * cols..(r + 1) * cols].copy_from_slice(&vals);
        }
        Ok(())
    };

    let emb_shape = params.embedding.shape();
    read_tensor("embedding", emb_shape, params.embedding.data_mut())?;
    for ((name, shape), slot) in DENSE_PARAM_NAMES
        .iter()
        .zip(shapes)
        .zip(params.dense_slices_mut())
    {
        read_tensor(name, shape, slot)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_round_trip() {
        let config = ModelConfig {
            vocab_size: 9,
            embedding_dim: 5,
            hidden1: 3,
            hidden2: 4,
            dense: 2,
        };
        let mut params = ModelParams::init(config, 17);
        params.dense_out.b[1] = 1e-300;
        params.dense_out.b[0] = -0.1 - 0.2;
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, params);
        for (a, b) in back.dense_slices().iter().zip(params.dense_slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        assert!(read_checkpoint("flowseq-checkpoint 2\n".as_bytes()).is_err());
        let params = ModelParams::init(ModelConfig::new(4), 0);
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
