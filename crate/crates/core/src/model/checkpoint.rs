//! Plain-text model checkpoint.
//!
//! ```text
//! gruae-model 1
//! input_dim 6
//! ...
//! tensor encoder.w_z 32 38
//! <one matrix row per line, space separated>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &str = "gruae-model";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check_shapes(cfg)?;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {VERSION}");
    let _ = writeln!(s, "input_dim {}", cfg.input_dim);
    let _ = writeln!(s, "seq_len {}", cfg.seq_len);
    let _ = writeln!(s, "hidden_dim {}", cfg.hidden_dim);
    let _ = writeln!(s, "embed_dim {}", cfg.embed_dim);
    let _ = writeln!(s, "heads {}", cfg.heads);
    let _ = writeln!(s, "head_dim {}", cfg.head_dim);
    let _ = writeln!(s, "head_hidden {}", cfg.head_hidden);
    let _ = writeln!(s, "attention_enabled {}", cfg.attention_enabled);
    let _ = writeln!(s, "outcome_head_enabled {}", cfg.outcome_head_enabled);
    let _ = writeln!(s, "dropout_rate {}", cfg.dropout_rate);
    for (name, _, m) in params.tensors() {
        let _ = writeln!(s, "tensor {name} {} {}", m.rows(), m.cols());
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s.push_str("end\n");
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(ModelConfig, ModelParams)> {
    let mut lines = BufReader::new(r).lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = || -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(Error::Format("checkpoint ends early".into())),
        }
    };

    let (n, header) = next()?;
    let mut it = header.split_whitespace();
    if it.next() != Some(MAGIC) || it.next().and_then(|v| v.parse::<u32>().ok()) != Some(VERSION) {
        return Err(Error::Parse {
            line: n,
            msg: format!("expected '{MAGIC} {VERSION}'"),
        });
    }

    let mut cfg = ModelConfig::default();
    let (mut n, mut line);
    loop {
        (n, line) = next()?;
        let mut kv = line.split_whitespace();
        let key = kv.next().unwrap_or("");
        if key == "tensor" || key == "end" {
            break;
        }
        let val = kv.next().ok_or_else(|| Error::Parse {
            line: n,
            msg: format!("missing value for {key}"),
        })?;
        let bad = |_| Error::Parse {
            line: n,
            msg: format!("bad value for {key}: {val}"),
        };
        let bad_b = |_| Error::Parse {
            line: n,
            msg: format!("bad value for {key}: {val}"),
        };
        match key {
            "input_dim" => cfg.input_dim = val.parse().map_err(bad)?,
            "seq_len" => cfg.seq_len = val.parse().map_err(bad)?,
            "hidden_dim" => cfg.hidden_dim = val.parse().map_err(bad)?,
            "embed_dim" => cfg.embed_dim = val.parse().map_err(bad)?,
            "heads" => cfg.heads = val.parse().map_err(bad)?,
            "head_dim" => cfg.head_dim = val.parse().map_err(bad)?,
            "head_hidden" => cfg.head_hidden = val.parse().map_err(bad)?,
            "attention_enabled" => cfg.attention_enabled = val.parse().map_err(bad_b)?,
            "outcome_head_enabled" => cfg.outcome_head_enabled = val.parse().map_err(bad_b)?,
            "dropout_rate" => {
                cfg.dropout_rate = val.parse().map_err(|_| Error::Parse {
                    line: n,
                    msg: format!("bad value for dropout_rate: {val}"),
                })?
            }
            other => {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("unknown config key {other}"),
                })
            }
        }
    }
    cfg.validate()?;

    let mut params = ModelParams::zeros(&cfg);
    let expected: Vec<(String, (usize, usize))> = params
        .tensors()
        .into_iter()
        .map(|(name, _, m)| (name, m.shape()))
        .collect();
    let mut slots = params.tensors_mut();
    for (idx, (name, shape)) in expected.iter().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected tensor {name}"),
            });
        }
        let got_name = parts.next().unwrap_or("");
        let rows: Option<usize> = parts.next().and_then(|v| v.parse().ok());
        let cols: Option<usize> = parts.next().and_then(|v| v.parse().ok());
        if got_name != name || rows != Some(shape.0) || cols != Some(shape.1) {
            return Err(Error::Parse {
                line: n,
                msg: format!(
                    "expected tensor {name} {} {}, found '{line}'",
                    shape.0, shape.1
                ),
            });
        }
        let target = slots[idx].2.as_mut_slice();
        for r in 0..shape.0 {
            let (rn, row) = next()?;
            let vals: std::result::Result<Vec<f64>, _> =
                row.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: rn,
                msg: format!("bad number in {name}: {e}"),
            })?;
            if vals.len() != shape.1 {
                return Err(Error::Parse {
                    line: rn,
                    msg: format!("{name} row has {} values, expected {}", vals.len(), shape.1),
                });
            }
            target[r * shape.1..(r + 1) * shape.1].copy_from_slice(&vals);
        }
        (n, line) = next()?;
    }
    if line.trim() != "end" {
        return Err(Error::Parse {
            line: n,
            msg: format!("expected end of checkpoint, found '{line}'"),
        });
    }
    drop(slots);
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), cfg, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        for attention in [true, false] {
            for head in [true, false] {
                let cfg = ModelConfig {
                    hidden_dim: 5,
                    embed_dim: 4,
                    head_dim: 3,
                    seq_len: 6,
                    attention_enabled: attention,
                    outcome_head_enabled: head,
                    ..ModelConfig::default()
                };
                let params = ModelParams::init(&cfg, &mut Rng::new(9)).unwrap();
                let mut buf = Vec::new();
                write_checkpoint(&mut buf, &cfg, &params).unwrap();
                let (cfg2, params2) = read_checkpoint(&buf[..]).unwrap();
                assert_eq!(cfg, cfg2);
                let a: Vec<u64> = params.flatten().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = params2.flatten().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
                let text = String::from_utf8(buf).unwrap();
                assert_eq!(text.contains("attention.0.w_q"), attention);
                assert_eq!(text.contains("head.w1"), head);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig {
            hidden_dim: 2,
            embed_dim: 2,
            head_dim: 2,
            seq_len: 3,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &params).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(read_checkpoint(text.replace("gruae-model 1", "gruae-model 2").as_bytes()).is_err());
        assert!(read_checkpoint(text.replace("\nend\n", "\n").as_bytes()).is_err());
        assert!(read_checkpoint(text.replace("tensor pool.w", "tensor pool.x").as_bytes()).is_err());
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
    }
}
