//! Propagation trace records and JSON-lines output.

use std::io::{self, Write};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub turn: u64,
    pub node: u64,
    pub deployment: u64,
    pub priority: Vec<u32>,
    pub label: String,
    /// False for nodes dequeued without running because their deployment went away.
    pub executed: bool,
    pub old: Value,
    pub new: Value,
}

impl TraceRecord {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "turn": self.turn,
            "node": self.node,
            "deployment": self.deployment,
            "priority": self.priority,
            "label": self.label,
            "executed": self.executed,
            "old": self.old.to_json(),
            "new": self.new.to_json(),
        })
    }
}

pub fn write_json_lines<'a>(
    out: &mut impl Write,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json())?;
    }
    Ok(())
}
