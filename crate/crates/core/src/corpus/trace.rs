//! Engagement trace CSV: header `t,v`, one sample per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::EngagementTrace;
use crate::error::{Error, Result};

pub fn parse_trace(text: &str, speed_factor: f64, path: &Path) -> Result<EngagementTrace> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "t,v" => {}
        _ => return Err(Error::malformed(path, 1, "expected header `t,v`")),
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| Error::malformed(path, line_no, "expected two columns `t,v`"))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| Error::malformed(path, line_no, format!("bad time `{t}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::malformed(path, line_no, format!("bad value `{v}`")))?;
        if !t.is_finite() || !v.is_finite() {
            return Err(Error::malformed(path, line_no, "non-finite sample"));
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::malformed(path, line_no, format!("time {t} not after {prev}")));
            }
        }
        times.push(t);
        values.push(v);
    }
    EngagementTrace::new(times, values, speed_factor)
}

pub fn read_trace(path: &Path, speed_factor: f64) -> Result<EngagementTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, speed_factor, path)
}

pub fn write_trace(trace: &EngagementTrace, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(trace.len() * 24 + 4);
    out.push_str("t,v\n");
    for (t, v) in trace.times.iter().zip(&trace.values) {
        let _ = writeln!(out, "{t},{v}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_bad_rows() {
        let p = Path::new("trace.csv");
        let tr = parse_trace("t,v\n0,5\n10,15\n", 2.0, p).unwrap();
        assert_eq!(tr.values, vec![5.0, 15.0]);
        assert!(matches!(parse_trace("time,value\n0,1\n", 1.0, p), Err(Error::Malformed { line: 1, .. })));
        assert!(matches!(parse_trace("t,v\n0,1\n1,x\n", 1.0, p), Err(Error::Malformed { line: 3, .. })));
        assert!(matches!(parse_trace("t,v\n0,1\n0,2\n", 1.0, p), Err(Error::Malformed { line: 3, .. })));
    }
}
