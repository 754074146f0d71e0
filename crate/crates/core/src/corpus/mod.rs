//! Session data model and the on-disk corpus formats.
//!
//! A corpus is a directory of sessions. Each session lives in its own
//! directory and is described by a `session.manifest` key-value file that
//! points at three payload files:
//!
//! * a gamepad log (`t<TAB>action+action...`, `nokey` for empty polls),
//! * an `ENGFEAT1` frame-feature container (see [`features`]),
//! * an engagement trace CSV with a `t,v` header.

mod features;
mod gamepad;
mod manifest;
mod trace;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub use features::{read_feature_file, write_feature_file, FrameFeatureStream, FrameLayout, FEATURE_MAGIC};
pub use gamepad::{format_gamepad_log, parse_gamepad_log, read_gamepad_log, write_gamepad_log};
pub use manifest::{parse_key_values, read_session, write_session, SessionManifest, MANIFEST_FILE};
pub use trace::{parse_trace, read_trace, write_trace};

use crate::error::{Error, Result};

pub const ACTION_COUNT: usize = 25;
pub const MAX_COMBO: usize = 6;

/// Session durations observed in the real corpus, in seconds.
pub const EXPECTED_DURATION_S: (f64, f64) = (53.0 * 60.0, 65.0 * 60.0);

const STANDARD_ACTIONS: [&str; ACTION_COUNT] = [
    "btn_a",
    "btn_b",
    "btn_x",
    "btn_y",
    "lb",
    "rb",
    "lt",
    "rt",
    "back",
    "start",
    "lstick_click",
    "rstick_click",
    "dpad_up",
    "dpad_down",
    "dpad_left",
    "dpad_right",
    "lstick_up",
    "lstick_down",
    "lstick_left",
    "lstick_right",
    "rstick_up",
    "rstick_down",
    "rstick_left",
    "rstick_right",
    "guide",
];

/// The ordered set of gamepad actions. Position defines feature index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    names: Vec<String>,
    index: HashMap<String, u8>,
}

impl ActionVocabulary {
    pub fn standard() -> Self {
        Self::new(STANDARD_ACTIONS.iter().map(|s| s.to_string()).collect())
            .expect("standard vocabulary is valid")
    }

    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() != ACTION_COUNT {
            return Err(Error::Config(format!(
                "action vocabulary needs exactly {ACTION_COUNT} entries, got {}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(ACTION_COUNT);
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(['+', '\t', '\n']) || name == "nokey" {
                return Err(Error::Config(format!("invalid action name `{name}`")));
            }
            if index.insert(name.clone(), i as u8).is_some() {
                return Err(Error::Config(format!("duplicate action name `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: u8) -> &str {
        &self.names[index as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl Default for ActionVocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

/// One poll of the gamepad logger. `pressed` holds vocabulary indices in
/// ascending order; an empty list is a "no key" tick.
#[derive(Debug, Clone, PartialEq)]
pub struct GamepadEvent {
    pub t: f64,
    pub pressed: Vec<u8>,
}

impl GamepadEvent {
    pub fn new(t: f64, mut pressed: Vec<u8>) -> Self {
        pressed.sort_unstable();
        Self { t, pressed }
    }

    pub fn no_key(t: f64) -> Self {
        Self { t, pressed: Vec::new() }
    }
}

/// Raw, unbounded annotation trace in annotation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Playback speed used while annotating (2.0 = double speed).
    pub speed_factor: f64,
}

impl EngagementTrace {
    pub fn new(times: Vec<f64>, values: Vec<f64>, speed_factor: f64) -> Result<Self> {
        let trace = Self {
            times,
            values,
            speed_factor,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Data("trace times and values differ in length".into()));
        }
        if self.times.len() < 2 {
            return Err(Error::Data("trace needs at least 2 samples".into()));
        }
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return Err(Error::Data(format!("annotation speed {} must be positive", self.speed_factor)));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("trace timestamps must be strictly increasing".into()));
        }
        if self.values.iter().chain(&self.times).any(|v| !v.is_finite()) {
            return Err(Error::Data("trace contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub participant_id: String,
    pub duration_s: f64,
    pub events: Vec<GamepadEvent>,
    pub features: FrameFeatureStream,
    pub trace: EngagementTrace,
}

/// Non-fatal findings produced while reading a session.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    DurationOutsideCorpusRange { duration_s: f64 },
    FrameCountMismatch { expected: f64, found: usize },
    AnnotationSpeedMismatch { trace_span_s: f64, speed_factor: f64, duration_s: f64 },
    EventsBeyondDuration { last_t: f64, duration_s: f64 },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::DurationOutsideCorpusRange { duration_s } => write!(
                f,
                "duration {duration_s} s outside the expected corpus range [{}, {}] s",
                EXPECTED_DURATION_S.0, EXPECTED_DURATION_S.1
            ),
            Warning::FrameCountMismatch { expected, found } => {
                write!(f, "expected about {expected:.1} frames from fps x duration, found {found}")
            }
            Warning::AnnotationSpeedMismatch {
                trace_span_s,
                speed_factor,
                duration_s,
            } => write!(
                f,
                "trace spans {trace_span_s} s at speed {speed_factor}, which does not match duration {duration_s} s"
            ),
            Warning::EventsBeyondDuration { last_t, duration_s } => {
                write!(f, "gamepad events run to {last_t} s, past duration {duration_s} s")
            }
        }
    }
}

impl Session {
    /// Checks the hard invariants and returns soft findings as warnings.
    pub fn check(&self) -> Result<Vec<Warning>> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Data(format!("duration {} must be positive", self.duration_s)));
        }
        if self.participant_id.is_empty() || self.participant_id.contains(char::is_whitespace) {
            return Err(Error::Data(format!("invalid participant id `{}`", self.participant_id)));
        }
        self.trace.validate()?;
        self.features.validate()?;
        for pair in self.events.windows(2) {
            if pair[1].t < pair[0].t {
                return Err(Error::Data(format!("gamepad timestamps decrease at t = {}", pair[1].t)));
            }
        }

        let mut warnings = Vec::new();
        let (lo, hi) = EXPECTED_DURATION_S;
        if self.duration_s < lo || self.duration_s > hi {
            warnings.push(Warning::DurationOutsideCorpusRange {
                duration_s: self.duration_s,
            });
        }
        let expected = self.features.fps * self.duration_s;
        if (self.features.frame_count() as f64 - expected).abs() > 1.0 {
            warnings.push(Warning::FrameCountMismatch {
                expected,
                found: self.features.frame_count(),
            });
        }
        let span = self.trace.times[self.trace.len() - 1] - self.trace.times[0];
        if ((span * self.trace.speed_factor) - self.duration_s).abs() > 0.01 * self.duration_s {
            warnings.push(Warning::AnnotationSpeedMismatch {
                trace_span_s: span,
                speed_factor: self.trace.speed_factor,
                duration_s: self.duration_s,
            });
        }
        if let Some(last) = self.events.last() {
            if last.t > self.duration_s {
                warnings.push(Warning::EventsBeyondDuration {
                    last_t: last.t,
                    duration_s: self.duration_s,
                });
            }
        }
        Ok(warnings)
    }
}

/// Lists every `session.manifest` one level below `corpus_dir`, sorted by path.
pub fn discover_sessions(corpus_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(corpus_dir).map_err(|e| Error::io(corpus_dir, e))?;
    let mut manifests = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(corpus_dir, e))?;
        let candidate = entry.path().join(MANIFEST_FILE);
        if candidate.is_file() {
            manifests.push(candidate);
        }
    }
    manifests.sort();
    Ok(manifests)
}
