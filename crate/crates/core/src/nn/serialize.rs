//! Versioned text dump of one or more networks.
//!
//! ```text
//! MBRv1
//! networks <count>
//! network <name> <output-activation> <group> <layers>
//! layer <outputs> <inputs>
//! <row-major weights, space separated>
//! <bias, space separated>
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is bit exact.

use std::io::{BufRead, Write};

use super::{Dense, DenseNetwork, OutputActivation};
use crate::error::{Error, Result};

pub const MAGIC: &str = "MBRv1";

fn activation_tag(act: OutputActivation) -> (&'static str, usize) {
    match act {
        OutputActivation::None => ("none", 0),
        OutputActivation::SoftmaxRows { group } => ("softmax-rows", group),
        OutputActivation::SoftmaxVector => ("softmax-vector", 0),
    }
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_networks<W: Write>(w: &mut W, nets: &[(&str, &DenseNetwork)]) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "networks {}", nets.len())?;
    for (name, net) in nets {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid network name {name:?}")));
        }
        let (tag, group) = activation_tag(net.output_activation());
        writeln!(w, "network {name} {tag} {group} {}", net.layers().len())?;
        for layer in net.layers() {
            writeln!(w, "layer {} {}", layer.outputs(), layer.inputs())?;
            writeln!(w, "{}", join(layer.weights()))?;
            writeln!(w, "{}", join(layer.bias()))?;
        }
    }
    Ok(())
}

struct Lines<R> {
    inner: R,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        let mut buf = String::new();
        self.line += 1;
        if self.inner.read_line(&mut buf)? == 0 {
            return Err(Error::Parse {
                line: self.line,
                message: "unexpected end of file".into(),
            });
        }
        Ok(buf.trim_end_matches(['\n', '\r']).to_string())
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn header(&mut self, keyword: &str, fields: usize) -> Result<Vec<String>> {
        let line = self.next()?;
        let parts: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if parts.first().map(String::as_str) != Some(keyword) || parts.len() != fields + 1 {
            return Err(self.err(format!("expected `{keyword}` with {fields} fields, got {line:?}")));
        }
        Ok(parts[1..].to_vec())
    }

    fn usize_field(&self, s: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(format!("invalid integer {s:?}")))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| self.err(format!("invalid number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected {
            return Err(self.err(format!("expected {expected} values, got {}", values.len())));
        }
        Ok(values)
    }
}

pub fn read_networks<R: BufRead>(r: R) -> Result<Vec<(String, DenseNetwork)>> {
    let mut lines = Lines { inner: r, line: 0 };
    let magic = lines.next()?;
    if magic.trim() != MAGIC {
        return Err(Error::Format(format!("missing {MAGIC} header, found {magic:?}")));
    }
    let count_field = lines.header("networks", 1)?;
    let count = lines.usize_field(&count_field[0])?;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let f = lines.header("network", 4)?;
        let group = lines.usize_field(&f[2])?;
        let output = match f[1].as_str() {
            "none" => OutputActivation::None,
            "softmax-rows" => OutputActivation::SoftmaxRows { group },
            "softmax-vector" => OutputActivation::SoftmaxVector,
            other => return Err(lines.err(format!("unknown output activation {other:?}"))),
        };
        let depth = lines.usize_field(&f[3])?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let dims = lines.header("layer", 2)?;
            let outputs = lines.usize_field(&dims[0])?;
            let inputs = lines.usize_field(&dims[1])?;
            let weights = lines.floats(outputs * inputs)?;
            let bias = lines.floats(outputs)?;
            layers.push(Dense::from_parts(inputs, outputs, weights, bias)?);
        }
        nets.push((f[0].clone(), DenseNetwork::new(layers, output)?));
    }
    Ok(nets)
}
