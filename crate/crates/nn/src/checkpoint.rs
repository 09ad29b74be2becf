//! Plain-text parameter checkpoints.
//!
//! ```text
//! safediff-params <version>
//! <count>
//! <name>\t<d0,d1,...>\t<values>\t<shadow values>
//! ```
//! Values are space separated in shortest round-trip decimal form.

use std::fmt::Write as _;

use crate::params::ParamStore;
use crate::NnError;

pub const CHECKPOINT_MAGIC: &str = "safediff-params";
pub const CHECKPOINT_VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:?}").unwrap();
    }
    s
}

fn parse_values(field: &str, line: usize) -> Result<Vec<f64>, NnError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| NnError::Checkpoint(format!("line {line}: bad number {x:?}")))
        })
        .collect()
}

pub fn encode(store: &ParamStore) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n", store.len());
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            p.name,
            dims.join(","),
            join(p.value.data()),
            join(p.shadow.data())
        )
        .unwrap();
    }
    out
}

/// Loads values and shadows into `store`, which must already hold exactly
/// the same names and shapes in the same order.
pub fn decode_into(text: &str, store: &mut ParamStore) -> Result<(), NnError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut parts = header.split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(NnError::Checkpoint("missing checkpoint header".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NnError::Checkpoint("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count: usize = lines
        .next()
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| NnError::Checkpoint("missing parameter count".into()))?;
    if count != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            store.len()
        )));
    }
    for (i, p) in store.iter_mut().enumerate() {
        let lineno = i + 3;
        let line = lines
            .next()
            .ok_or_else(|| NnError::Checkpoint(format!("truncated at line {lineno}")))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(NnError::Checkpoint(format!("line {lineno}: expected 4 fields")));
        }
        if fields[0] != p.name {
            return Err(NnError::Checkpoint(format!(
                "line {lineno}: parameter {:?} where {:?} expected",
                fields[0], p.name
            )));
        }
        let dims: Vec<usize> = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split(',')
                .map(|d| d.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| NnError::Checkpoint(format!("line {lineno}: bad shape")))?
        };
        if dims != p.value.shape() {
            return Err(NnError::Checkpoint(format!(
                "line {lineno}: {} has shape {:?}, model expects {:?}",
                p.name,
                dims,
                p.value.shape()
            )));
        }
        let values = parse_values(fields[2], lineno)?;
        let shadow = parse_values(fields[3], lineno)?;
        if values.len() != p.value.len() || shadow.len() != p.value.len() {
            return Err(NnError::Checkpoint(format!("line {lineno}: wrong value count")));
        }
        p.value.data_mut().copy_from_slice(&values);
        p.shadow.data_mut().copy_from_slice(&shadow);
    }
    Ok(())
}
