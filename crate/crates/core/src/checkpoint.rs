//! Plain-text tensor checkpoints.
//!
//! ```text
//! CSGNN-CKPT v1
//! <name> <rows> <cols>
//! <row-major values, one matrix row per line>
//! ...
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const HEADER: &str = "CSGNN-CKPT v1";

/// Upper bound on the number of values one tensor may declare.
const MAX_TENSOR_LEN: usize = 1 << 28;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, m: Matrix) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        if self.get(name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        m.ensure_finite(name)?;
        self.tensors.push((name.to_string(), m));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        for (name, m) in &self.tensors {
            let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
            for i in 0..m.rows() {
                let row = m.row(i);
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        s.push(' ');
                    }
                    let _ = write!(s, "{v:.16e}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        const SRC: &str = "checkpoint";
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == HEADER => {}
            _ => return Err(Error::parse(SRC, 1, format!("expected header {HEADER:?}"))),
        }
        let mut tokens = lines.flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)));
        let mut ckpt = Checkpoint::new();
        while let Some((line, name)) = tokens.next() {
            let mut dim = |what: &str| -> Result<usize> {
                let (l, t) = tokens
                    .next()
                    .ok_or_else(|| Error::parse(SRC, line, format!("tensor {name:?} is missing its {what}")))?;
                t.parse::<usize>()
                    .map_err(|_| Error::parse(SRC, l, format!("invalid {what} {t:?}")))
            };
            let rows = dim("row count")?;
            let cols = dim("column count")?;
            let len = rows
                .checked_mul(cols)
                .filter(|&n| n <= MAX_TENSOR_LEN)
                .ok_or_else(|| Error::parse(SRC, line, format!("tensor {name:?} is too large")))?;
            let mut values = Vec::new();
            for _ in 0..len {
                let (l, t) = tokens
                    .next()
                    .ok_or_else(|| Error::parse(SRC, line, format!("tensor {name:?} is truncated")))?;
                let v: f64 = t
                    .parse()
                    .map_err(|_| Error::parse(SRC, l, format!("invalid value {t:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(SRC, l, format!("non-finite value {t:?}")));
                }
                values.push(v);
            }
            ckpt.insert(name, Matrix::from_vec(rows, cols, values)?)?;
        }
        Ok(ckpt)
    }
}
