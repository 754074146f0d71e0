//! Turns sessions into labelled 10 s windows.
//!
//! Each window has two time ranges: the annotation range `[t, t + window)`
//! supplies the label, and the stimulus range, shifted earlier by the
//! reaction delay, supplies gamepad and frame features.

use std::fmt;

use crate::corpus::{FrameFeatureStream, GamepadEvent, Session, ACTION_COUNT, MAX_COMBO};
use crate::error::{Error, Result};

pub const GAMEPAD_FEATURES: usize = 31;
pub const NO_KEY_INDEX: usize = ACTION_COUNT;
const COMBO_BASE: usize = ACTION_COUNT + 1;

/// Seconds per conditioning time block.
pub const TIME_BLOCK_S: f64 = 20.0 * 60.0;

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub window_s: f64,
    pub stride_s: f64,
    pub stimulus_shift_s: f64,
    pub frame_fps: f64,
    pub trace_hz: f64,
    pub epsilon: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_s: 10.0,
            stride_s: 1.5,
            stimulus_shift_s: 1.0,
            frame_fps: 3.0,
            trace_hz: 30.0,
            epsilon: 0.05,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window_s", self.window_s),
            ("stride_s", self.stride_s),
            ("stimulus_shift_s", self.stimulus_shift_s),
            ("frame_fps", self.frame_fps),
            ("trace_hz", self.trace_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.stimulus_shift_s >= self.window_s {
            return Err(Error::Config("stimulus shift must be shorter than the window".into()));
        }
        if !(0.0..=0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 0.5], got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Reads `key = value` lines; absent keys keep their defaults.
    pub fn parse(text: &str, path: &std::path::Path) -> Result<Self> {
        let mut spec = Self::default();
        for (key, raw) in crate::corpus::parse_key_values(text, path)? {
            let value: f64 = raw
                .parse()
                .map_err(|_| Error::Config(format!("{}: `{key}` is not a number: `{raw}`", path.display())))?;
            match key.as_str() {
                "window_s" => spec.window_s = value,
                "stride_s" => spec.stride_s = value,
                "stimulus_shift_s" => spec.stimulus_shift_s = value,
                "frame_fps" => spec.frame_fps = value,
                "trace_hz" => spec.trace_hz = value,
                "epsilon" => spec.epsilon = value,
                _ => return Err(Error::Config(format!("{}: unknown key `{key}`", path.display()))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        format!(
            "window_s = {}\nstride_s = {}\nstimulus_shift_s = {}\nframe_fps = {}\ntrace_hz = {}\nepsilon = {}\n",
            self.window_s, self.stride_s, self.stimulus_shift_s, self.frame_fps, self.trace_hz, self.epsilon
        )
    }

    /// Frame records per window (30 at the defaults).
    pub fn frames_per_window(&self) -> usize {
        (self.window_s * self.frame_fps).round() as usize
    }
}

/// Half-open time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowBounds {
    pub annotation: Interval,
    pub stimulus: Interval,
}

/// `ceil(x)`, except values within rounding noise of an integer snap to it.
fn snap_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn snap_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

/// Min-max normalised trace on a uniform grid: sample `k` sits at `k / hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrace {
    pub hz: f64,
    pub values: Vec<f64>,
}

impl NormalizedTrace {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn duration(&self) -> f64 {
        (self.values.len() - 1) as f64 / self.hz
    }

    /// Index range of grid samples falling in `window`.
    fn sample_range(&self, window: Interval) -> Result<std::ops::Range<usize>> {
        let lo = snap_ceil(window.start * self.hz);
        let hi = snap_ceil(window.end * self.hz);
        if lo < 0.0 || hi > self.values.len() as f64 || hi <= lo {
            return Err(Error::Data(format!(
                "window [{}, {}) outside trace support [0, {}]",
                window.start,
                window.end,
                self.duration()
            )));
        }
        Ok(lo as usize..hi as usize)
    }

    pub fn window_mean(&self, window: Interval) -> Result<f64> {
        let range = self.sample_range(window)?;
        let n = range.len() as f64;
        Ok(self.values[range].iter().sum::<f64>() / n)
    }
}

/// Stretches the annotation trace onto `[0, duration_s]`, resamples it
/// linearly at `hz` and min-max normalises the result to `[0, 1]`.
pub fn normalize_and_rescale_trace(
    trace: &crate::corpus::EngagementTrace,
    duration_s: f64,
    hz: f64,
) -> Result<NormalizedTrace> {
    trace.validate()?;
    if !(duration_s > 0.0 && hz > 0.0) {
        return Err(Error::Config("duration and trace rate must be positive".into()));
    }
    let t0 = trace.times[0];
    let span = trace.times[trace.len() - 1] - t0;
    let scale = duration_s / span;
    let n = snap_floor(duration_s * hz) as usize + 1;

    let mut values = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        // Map the grid time back onto the annotation axis.
        let t = t0 + (k as f64 / hz) / scale;
        while seg + 2 < trace.len() && trace.times[seg + 1] <= t {
            seg += 1;
        }
        let (ta, tb) = (trace.times[seg], trace.times[seg + 1]);
        let (va, vb) = (trace.values[seg], trace.values[seg + 1]);
        let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        values.push(va + frac * (vb - va));
    }

    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max <= min {
        return Err(Error::FlatTrace);
    }
    let range = max - min;
    for v in &mut values {
        *v = (*v - min) / range;
    }
    Ok(NormalizedTrace { hz, values })
}

/// Closed-form window count for a session of `duration_s` seconds.
pub fn window_count(duration_s: f64, spec: &WindowSpec) -> usize {
    let room = duration_s - spec.window_s - spec.stimulus_shift_s;
    if room < -SNAP {
        return 0;
    }
    snap_floor(room.max(0.0) / spec.stride_s) as usize + 1
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreprocessWarning {
    SessionTooShort { duration_s: f64, needed_s: f64 },
    NearlyEmpty { kept: usize, total: usize },
}

impl fmt::Display for PreprocessWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreprocessWarning::SessionTooShort { duration_s, needed_s } => {
                write!(f, "session of {duration_s} s is shorter than one window ({needed_s} s)")
            }
            PreprocessWarning::NearlyEmpty { kept, total } => {
                write!(f, "only {kept} of {total} windows survived the ambiguity filter")
            }
        }
    }
}

/// Sliding windows; annotation starts at `shift, shift + stride, ...`.
pub fn segment_windows(duration_s: f64, spec: &WindowSpec) -> (Vec<WindowBounds>, Option<PreprocessWarning>) {
    let count = window_count(duration_s, spec);
    if count == 0 {
        let warning = PreprocessWarning::SessionTooShort {
            duration_s,
            needed_s: spec.window_s + spec.stimulus_shift_s,
        };
        return (Vec::new(), Some(warning));
    }
    let windows = (0..count)
        .map(|k| {
            let t = spec.stimulus_shift_s + k as f64 * spec.stride_s;
            WindowBounds {
                annotation: Interval::new(t, t + spec.window_s),
                stimulus: Interval::new(t - spec.stimulus_shift_s, t - spec.stimulus_shift_s + spec.window_s),
            }
        })
        .collect();
    (windows, None)
}

/// 31 input frequencies in Hz: 25 per-action, one no-key, combos of 2..=6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GamepadFeatures(pub [f64; GAMEPAD_FEATURES]);

impl GamepadFeatures {
    pub fn combo(&self, size: usize) -> f64 {
        self.0[COMBO_BASE + size - 2]
    }

    pub fn no_key(&self) -> f64 {
        self.0[NO_KEY_INDEX]
    }
}

pub fn gamepad_features(events: &[GamepadEvent], stimulus: Interval, spec: &WindowSpec) -> GamepadFeatures {
    let lo = events.partition_point(|e| e.t < stimulus.start);
    let hi = events.partition_point(|e| e.t < stimulus.end);
    let mut counts = [0u32; GAMEPAD_FEATURES];
    for event in &events[lo..hi] {
        match event.pressed.len() {
            0 => counts[NO_KEY_INDEX] += 1,
            n => {
                for &a in &event.pressed {
                    counts[a as usize] += 1;
                }
                if n >= 2 {
                    counts[COMBO_BASE + n.min(MAX_COMBO) - 2] += 1;
                }
            }
        }
    }
    GamepadFeatures(counts.map(|c| c as f64 / spec.window_s))
}

/// The frame records backing one window: `count` consecutive in-window
/// frames starting at `offset`, padded or truncated to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameWindow {
    pub offset: usize,
    pub count: usize,
    pub target: usize,
}

impl FrameWindow {
    /// Short windows repeat their last frame; long ones keep the first `target`.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let last = self.offset + self.count - 1;
        (0..self.target).map(move |k| (self.offset + k).min(last))
    }

    /// Row-major `target x record_len` tensor.
    pub fn gather(&self, stream: &FrameFeatureStream) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.target * stream.record_len());
        for i in self.indices() {
            out.extend_from_slice(stream.frame(i));
        }
        out
    }
}

pub fn frame_window(stream: &FrameFeatureStream, stimulus: Interval, spec: &WindowSpec) -> Result<FrameWindow> {
    let total = stream.frame_count();
    let lo = snap_ceil(stimulus.start * stream.fps).max(0.0) as usize;
    let hi = (snap_ceil(stimulus.end * stream.fps).max(0.0) as usize).min(total);
    if hi <= lo {
        return Err(Error::Data(format!(
            "frame stream ({total} frames at {} fps) does not overlap window [{}, {})",
            stream.fps, stimulus.start, stimulus.end
        )));
    }
    Ok(FrameWindow {
        offset: lo,
        count: hi - lo,
        target: spec.frames_per_window(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Low,
    High,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Low => 0,
            Label::High => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Low
        } else {
            Label::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Low => "low",
            Label::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowClass {
    Low,
    High,
    Ambiguous,
}

impl WindowClass {
    pub fn label(self) -> Option<Label> {
        match self {
            WindowClass::Low => Some(Label::Low),
            WindowClass::High => Some(Label::High),
            WindowClass::Ambiguous => None,
        }
    }
}

/// High above `mu + eps`, low below `mu - eps`, ambiguous in between.
pub fn classify(e_mean: f64, mu: f64, epsilon: f64) -> WindowClass {
    if e_mean > mu + epsilon {
        WindowClass::High
    } else if e_mean < mu - epsilon {
        WindowClass::Low
    } else {
        WindowClass::Ambiguous
    }
}

/// Returns the class and the window's mean engagement.
pub fn label_window(
    trace: &NormalizedTrace,
    annotation: Interval,
    mu: f64,
    epsilon: f64,
) -> Result<(WindowClass, f64)> {
    let e_mean = trace.window_mean(annotation)?;
    Ok((classify(e_mean, mu, epsilon), e_mean))
}

/// Coarse session time level: 1 for [0, 20) min, 2 for [20, 40), 3 after.
pub fn t_level(t_start: f64) -> u8 {
    if t_start < TIME_BLOCK_S {
        1
    } else if t_start < 2.0 * TIME_BLOCK_S {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub participant_id: String,
    pub t_start: f64,
    pub gamepad: GamepadFeatures,
    pub frames: FrameWindow,
    pub label: Label,
    pub t_level: u8,
    pub e_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionWindows {
    pub participant_id: String,
    /// Mean of the whole normalised trace.
    pub mu: f64,
    pub windows: Vec<LabeledWindow>,
    pub generated: usize,
    pub ambiguous: usize,
    pub warnings: Vec<PreprocessWarning>,
}

impl SessionWindows {
    pub fn count(&self, label: Label) -> usize {
        self.windows.iter().filter(|w| w.label == label).count()
    }
}

pub fn preprocess_session(session: &Session, spec: &WindowSpec) -> Result<SessionWindows> {
    spec.validate()?;
    let trace = normalize_and_rescale_trace(&session.trace, session.duration_s, spec.trace_hz)?;
    let mu = trace.mean();
    let (bounds, warning) = segment_windows(session.duration_s, spec);
    let mut out = SessionWindows {
        participant_id: session.participant_id.clone(),
        mu,
        windows: Vec::with_capacity(bounds.len()),
        generated: bounds.len(),
        ambiguous: 0,
        warnings: warning.into_iter().collect(),
    };
    for b in &bounds {
        let (class, e_mean) = label_window(&trace, b.annotation, mu, spec.epsilon)?;
        let Some(label) = class.label() else {
            out.ambiguous += 1;
            continue;
        };
        out.windows.push(LabeledWindow {
            participant_id: session.participant_id.clone(),
            t_start: b.annotation.start,
            gamepad: gamepad_features(&session.events, b.stimulus, spec),
            frames: frame_window(&session.features, b.stimulus, spec)?,
            label,
            t_level: t_level(b.annotation.start),
            e_mean,
        });
    }
    if out.generated > 0 && out.windows.len() * 10 < out.generated {
        out.warnings.push(PreprocessWarning::NearlyEmpty {
            kept: out.windows.len(),
            total: out.generated,
        });
    }
    Ok(out)
}
