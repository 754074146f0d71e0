//! Gamepad log: one poll per line, `t<TAB>action1+action2+...`, with the
//! literal `nokey` standing for a poll where nothing was held.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ActionVocabulary, GamepadEvent, MAX_COMBO};
use crate::error::{Error, Result};

const NO_KEY: &str = "nokey";

pub fn parse_gamepad_log(text: &str, vocab: &ActionVocabulary, path: &Path) -> Result<Vec<GamepadEvent>> {
    let mut events: Vec<GamepadEvent> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (t_str, actions) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(path, line_no, "expected `t<TAB>actions`"))?;
        let t: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| Error::malformed(path, line_no, format!("bad timestamp `{t_str}`")))?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::malformed(path, line_no, format!("timestamp {t} must be non-negative")));
        }
        if let Some(prev) = events.last() {
            if t < prev.t {
                return Err(Error::malformed(
                    path,
                    line_no,
                    format!("timestamp {t} decreases (previous {})", prev.t),
                ));
            }
        }

        let actions = actions.trim();
        let mut pressed = Vec::new();
        if actions != NO_KEY {
            for name in actions.split('+') {
                let idx = vocab.index_of(name).ok_or_else(|| Error::UnknownAction {
                    path: path.to_path_buf(),
                    line: line_no,
                    action: name.to_string(),
                })?;
                if pressed.contains(&idx) {
                    return Err(Error::malformed(path, line_no, format!("action `{name}` repeated")));
                }
                pressed.push(idx);
            }
            if pressed.len() > MAX_COMBO {
                return Err(Error::malformed(
                    path,
                    line_no,
                    format!("{} simultaneous actions exceeds {MAX_COMBO}", pressed.len()),
                ));
            }
        }
        events.push(GamepadEvent::new(t, pressed));
    }
    Ok(events)
}

pub fn format_gamepad_log(events: &[GamepadEvent], vocab: &ActionVocabulary) -> String {
    let mut out = String::with_capacity(events.len() * 16);
    for event in events {
        let _ = write!(out, "{}\t", event.t);
        if event.pressed.is_empty() {
            out.push_str(NO_KEY);
        } else {
            for (k, &idx) in event.pressed.iter().enumerate() {
                if k > 0 {
                    out.push('+');
                }
                out.push_str(vocab.name(idx));
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_gamepad_log(path: &Path, vocab: &ActionVocabulary) -> Result<Vec<GamepadEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gamepad_log(&text, vocab, path)
}

pub fn write_gamepad_log(events: &[GamepadEvent], vocab: &ActionVocabulary, path: &Path) -> Result<()> {
    fs::write(path, format_gamepad_log(events, vocab)).map_err(|e| Error::io(path, e))
}
