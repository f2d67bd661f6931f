//! Plain-text critic checkpoints.
//!
//! ```text
//! neural-stein-checkpoint 1
//! dim 2
//! width 64
//! activation swish
//! lambda 5.0000000000000003e-2
//! interval 12
//! monitor -1.2345678901234567e-1
//! seed_lineage 7 2
//! centered 0
//! w1 128
//! <128 values>
//! ...
//! ```
//!
//! Layers follow the packing order `w1 b1 w2 b2 w3 b3`; a centered critic
//! repeats them with a `ref_` prefix for the frozen reference. Every float is
//! written with 17 significant digits, which round-trips `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::critic::MlpCritic;

pub const MAGIC: &str = "neural-stein-checkpoint";
pub const VERSION: u32 = 1;
pub const ACTIVATION: &str = "swish";

const LAYER_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub critic: MlpCritic,
    pub lambda: f64,
    pub interval: usize,
    pub monitor: f64,
    /// Master seed followed by the stream indices that led to this critic.
    pub seed_lineage: Vec<u64>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_layers(out: &mut String, prefix: &str, c: &MlpCritic) {
    for (name, values) in LAYER_NAMES.iter().zip(c.layers()) {
        let _ = writeln!(out, "{prefix}{name} {}", values.len());
        let row: Vec<String> = values.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let c = &self.critic;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "dim {}", c.dim());
        let _ = writeln!(out, "width {}", c.width());
        let _ = writeln!(out, "activation {ACTIVATION}");
        let _ = writeln!(out, "lambda {}", fmt_f64(self.lambda));
        let _ = writeln!(out, "interval {}", self.interval);
        let _ = writeln!(out, "monitor {}", fmt_f64(self.monitor));
        let lineage: Vec<String> = self.seed_lineage.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seed_lineage {}", lineage.join(" "));
        let _ = writeln!(out, "centered {}", c.is_centered() as u8);
        push_layers(&mut out, "", c);
        if let Some(r) = c.reference() {
            push_layers(&mut out, "ref_", r);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let mut p = Parser {
            lines: text.lines().enumerate(),
            line: 0,
        };
        let magic = p.next_line()?;
        if magic != format!("{MAGIC} {VERSION}") {
            return Err(p.err(format!("expected '{MAGIC} {VERSION}', found '{magic}'")));
        }
        let dim: usize = p.field("dim")?;
        let width: usize = p.field("width")?;
        let act: String = p.field("activation")?;
        if act != ACTIVATION {
            return Err(p.err(format!("unsupported activation '{act}'")));
        }
        let lambda: f64 = p.field("lambda")?;
        let interval: usize = p.field("interval")?;
        let monitor: f64 = p.field("monitor")?;
        let lineage_text = p.raw_field("seed_lineage")?;
        let seed_lineage = lineage_text
            .split_whitespace()
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|e| p.err(format!("seed_lineage: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let centered: u8 = p.field("centered")?;
        if centered > 1 {
            return Err(p.err("centered must be 0 or 1".into()));
        }
        let mut critic = p.layers("", dim, width)?;
        if centered == 1 {
            critic.set_reference(Some(p.layers("ref_", dim, width)?));
        }
        if let Some((i, extra)) = p.lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(CheckpointError::Parse {
                line: i + 1,
                msg: format!("trailing content '{extra}'"),
            });
        }
        Ok(Checkpoint {
            critic,
            lambda,
            interval,
            monitor,
            seed_lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Parser<'a, I: Iterator<Item = (usize, &'a str)>> {
    lines: I,
    line: usize,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> Parser<'a, I> {
    fn err(&self, msg: String) -> CheckpointError {
        CheckpointError::Parse {
            line: self.line,
            msg,
        }
    }

    fn next_line(&mut self) -> Result<&'a str, CheckpointError> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(CheckpointError::Parse {
                line: self.line + 1,
                msg: "unexpected end of file".into(),
            }),
        }
    }

    fn raw_field(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let l = self.next_line()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            None if l == key => Ok(""),
            _ => Err(self.err(format!("expected '{key} ...', found '{l}'"))),
        }
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw_field(key)?;
        v.trim()
            .parse()
            .map_err(|e| self.err(format!("{key}: {e}")))
    }

    fn values(&mut self, key: &str, expected: usize) -> Result<Vec<f64>, CheckpointError> {
        let len: usize = self.field(key)?;
        if len != expected {
            return Err(self.err(format!("{key} has {len} entries, expected {expected}")));
        }
        let l = self.next_line()?;
        let v = l
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| self.err(format!("{key}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != expected {
            return Err(self.err(format!(
                "{key}: read {} values, expected {expected}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn layers(&mut self, prefix: &str, d: usize, h: usize) -> Result<MlpCritic, CheckpointError> {
        let shapes = [(h, d), (h, 1), (h, h), (h, 1), (d, h), (d, 1)];
        let mut arrays = Vec::with_capacity(6);
        for (name, (r, c)) in LAYER_NAMES.iter().zip(shapes) {
            arrays.push(self.values(&format!("{prefix}{name}"), r * c)?);
        }
        let mat = |v: Vec<f64>, r: usize, c: usize| {
            Array2::from_shape_vec((r, c), v).expect("length checked")
        };
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("six layers");
        let w1 = mat(next(), h, d);
        let b1 = Array1::from(next());
        let w2 = mat(next(), h, h);
        let b2 = Array1::from(next());
        let w3 = mat(next(), d, h);
        let b3 = Array1::from(next());
        MlpCritic::from_layers(w1, b1, w2, b2, w3, b3).map_err(|e| self.err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn sample(centered: bool) -> Checkpoint {
        let mut critic = MlpCritic::init(3, 5, &mut seeded(4));
        if centered {
            critic.center_at_current();
            let dir = crate::critic::ParamVector(vec![1e-3; critic.param_count()]);
            critic.add_scaled(&dir, 1.0);
        }
        Checkpoint {
            critic,
            lambda: 0.05,
            interval: 7,
            monitor: -0.123_456_789_012_345_67,
            seed_lineage: vec![11, 2],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for centered in [false, true] {
            let ck = sample(centered);
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            assert_eq!(back, ck);
            let x = [0.3, -1.1, 2.0];
            let (a, b) = (ck.critic.forward(&x), back.critic.forward(&x));
            assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
            assert_eq!(back.to_text(), ck.to_text());
        }
    }

    #[test]
    fn header_layout() {
        let text = sample(false).to_text();
        let head: Vec<&str> = text.lines().take(10).collect();
        assert_eq!(head[0], "neural-stein-checkpoint 1");
        assert_eq!(head[1], "dim 3");
        assert_eq!(head[2], "width 5");
        assert_eq!(head[3], "activation swish");
        assert_eq!(head[4], "lambda 5.0000000000000003e-2");
        assert_eq!(head[7], "seed_lineage 11 2");
        assert_eq!(head[9], "w1 15");
    }

    #[test]
    fn rejects_corruption() {
        let text = sample(false).to_text();
        assert!(Checkpoint::from_text(&text.replace("swish", "relu")).is_err());
        assert!(Checkpoint::from_text(&text.replace("w2 25", "w2 24")).is_err());
        let truncated: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
        assert!(Checkpoint::from_text(&format!("{text}junk\n")).is_err());
    }

    proptest! {
        #[test]
        fn any_double_survives(v in proptest::num::f64::ANY) {
            let back: f64 = fmt_f64(v).parse().unwrap();
            if v.is_nan() {
                prop_assert!(back.is_nan());
            } else {
                prop_assert_eq!(back.to_bits(), v.to_bits());
            }
        }
    }
}
