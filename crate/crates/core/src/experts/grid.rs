//! Architecture grid: one row per task, one cell per block.

use serde::{Deserialize, Serialize};

use super::{GrowOp, PathSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Row {
    task: usize,
    ops: Vec<GrowOp>,
}

/// One JSON record per line, in task order.
pub fn to_jsonl(paths: &[PathSpec]) -> String {
    let mut out = String::new();
    for p in paths {
        let row = Row { task: p.task, ops: p.ops.clone() };
        out += &serde_json::to_string(&row).expect("serializable");
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<PathSpec>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let row: Row =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("grid line {}: {e}", i + 1)))?;
            Ok(PathSpec { task: row.task, ops: row.ops })
        })
        .collect()
}

pub fn cell(op: &GrowOp) -> String {
    match op {
        GrowOp::Skip => "S".into(),
        GrowOp::Reuse { target } => format!("R({target})"),
        GrowOp::Adapt { target, .. } => format!("A({target})"),
        GrowOp::New { .. } => "N".into(),
    }
}

/// Aligned text grid. Rows and columns are numbered from 1.
pub fn to_ascii(paths: &[PathSpec]) -> String {
    let depth = paths.iter().map(|p| p.ops.len()).max().unwrap_or(0);
    let cells: Vec<Vec<String>> = paths.iter().map(|p| p.ops.iter().map(cell).collect()).collect();
    let mut width = vec![0; depth];
    for (l, w) in width.iter_mut().enumerate() {
        *w = cells
            .iter()
            .filter_map(|r| r.get(l).map(String::len))
            .chain([format!("B{}", l + 1).len()])
            .max()
            .unwrap_or(1);
    }
    let label = paths.iter().map(|p| format!("T{}", p.task + 1).len()).max().unwrap_or(1).max(4);
    let mut out = format!("{:<label$}", "task");
    for (l, w) in width.iter().enumerate() {
        out += &format!(" | {:<w$}", format!("B{}", l + 1));
    }
    out += "\n";
    for (p, row) in paths.iter().zip(&cells) {
        out += &format!("{:<label$}", format!("T{}", p.task + 1));
        for (c, w) in row.iter().zip(&width) {
            out += &format!(" | {c:<w$}");
        }
        out += "\n";
    }
    out
}
