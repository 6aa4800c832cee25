use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::time::SimTime;

/// One line of the replayable event trace.
///
/// `(time, seq)` is the strict total order in which the kernel processed
/// work; diffing two trace exports line by line is the replay check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub actor: String,
    pub event_kind: String,
    pub payload_summary: String,
}

/// Newline-delimited JSON export of a trace.
pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // Times are rendered with the fixed-point formatter rather than
        // serde's float encoding so the byte layout is pinned.
        let _ = write!(
            out,
            "{{\"time\":{},\"seq\":{},\"actor\":{},\"event_kind\":{},\"payload_summary\":{}}}\n",
            r.time,
            r.seq,
            serde_json::to_string(&r.actor).unwrap(),
            serde_json::to_string(&r.event_kind).unwrap(),
            serde_json::to_string(&r.payload_summary).unwrap(),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_layout_is_fixed_point() {
        let rec = TraceRecord {
            time: SimTime::from_secs(1.5).unwrap(),
            seq: 3,
            actor: "env/0".into(),
            event_kind: "reset_done".into(),
            payload_summary: "ok".into(),
        };
        assert_eq!(
            to_jsonl(&[rec]),
            "{\"time\":1.500000000,\"seq\":3,\"actor\":\"env/0\",\"event_kind\":\"reset_done\",\"payload_summary\":\"ok\"}\n"
        );
    }
}
