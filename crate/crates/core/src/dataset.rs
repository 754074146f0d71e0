//! Windowing a whole corpus, the windows file, and the pooled in-memory
//! dataset that training consumes.
//!
//! Windows file: tab-separated, one labelled window per row, preceded by
//! `#` header lines naming the frames-per-window target and each
//! participant's feature file.
//!
//! ```text
//! # engage-windows 1
//! # frames_per_window 30
//! # features p01 /corpus/p01/frames.engfeat
//! participant_id  t_start  label  t_level  e_mean  frame_offset  frame_count  g0 .. g30
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use crate::corpus::{discover_sessions, read_feature_file, read_session, ActionVocabulary, Warning};
use crate::error::{Error, Result};
use crate::models::{pool_frame_window, FRAME_CHANNELS};
use crate::preprocess::{
    preprocess_session, FrameWindow, GamepadFeatures, Label, LabeledWindow, PreprocessWarning, WindowSpec,
    GAMEPAD_FEATURES,
};

const WINDOWS_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct WindowsFile {
    pub frames_per_window: usize,
    pub features: BTreeMap<String, PathBuf>,
    pub windows: Vec<LabeledWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub participant_id: String,
    pub mu: f64,
    pub generated: usize,
    pub ambiguous: usize,
    pub high: usize,
    pub low: usize,
    pub corpus_warnings: Vec<Warning>,
    pub warnings: Vec<PreprocessWarning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedCorpus {
    pub file: WindowsFile,
    pub sessions: Vec<SessionSummary>,
    /// Sessions dropped because their trace is flat: `(manifest, reason)`.
    pub skipped: Vec<(PathBuf, String)>,
}

impl WindowedCorpus {
    pub fn count(&self, label: Label) -> usize {
        self.file.windows.iter().filter(|w| w.label == label).count()
    }

    pub fn ambiguous(&self) -> usize {
        self.sessions.iter().map(|s| s.ambiguous).sum()
    }

    /// Human-readable summary: per-session counts and `mu`, then totals.
    pub fn render_summary(&self) -> String {
        let mut out = String::from("participant\tmu\twindows\thigh\tlow\tambiguous\n");
        for s in &self.sessions {
            out.push_str(&format!(
                "{}\t{:.4}\t{}\t{}\t{}\t{}\n",
                s.participant_id, s.mu, s.generated, s.high, s.low, s.ambiguous
            ));
            for w in &s.corpus_warnings {
                out.push_str(&format!("# warning {}: {w}\n", s.participant_id));
            }
            for w in &s.warnings {
                out.push_str(&format!("# warning {}: {w}\n", s.participant_id));
            }
        }
        for (path, reason) in &self.skipped {
            out.push_str(&format!("# skipped {}: {reason}\n", path.display()));
        }
        out.push_str(&format!(
            "total\t-\t{}\t{}\t{}\t{}\n",
            self.sessions.iter().map(|s| s.generated).sum::<usize>(),
            self.count(Label::High),
            self.count(Label::Low),
            self.ambiguous()
        ));
        out
    }
}

/// Reads every session under `corpus_dir` and labels its windows. Sessions
/// with flat traces are skipped and listed.
pub fn window_corpus(corpus_dir: &Path, spec: &WindowSpec, vocab: &ActionVocabulary) -> Result<WindowedCorpus> {
    spec.validate()?;
    let manifests = discover_sessions(corpus_dir)?;
    if manifests.is_empty() {
        return Err(Error::Data(format!("no sessions found under {}", corpus_dir.display())));
    }
    let mut out = WindowedCorpus {
        file: WindowsFile {
            frames_per_window: spec.frames_per_window(),
            features: BTreeMap::new(),
            windows: Vec::new(),
        },
        sessions: Vec::new(),
        skipped: Vec::new(),
    };
    for manifest in manifests {
        let (session, corpus_warnings) = read_session(&manifest, vocab)?;
        let windows = match preprocess_session(&session, spec) {
            Ok(w) => w,
            Err(Error::FlatTrace) => {
                out.skipped.push((manifest, Error::FlatTrace.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let features = crate::corpus::SessionManifest::read(&manifest)?.features;
        let features = fs::canonicalize(&features).unwrap_or(features);
        if out.file.features.insert(session.participant_id.clone(), features).is_some() {
            return Err(Error::Data(format!("participant `{}` appears in two sessions", session.participant_id)));
        }
        out.sessions.push(SessionSummary {
            participant_id: windows.participant_id.clone(),
            mu: windows.mu,
            generated: windows.generated,
            ambiguous: windows.ambiguous,
            high: windows.count(Label::High),
            low: windows.count(Label::Low),
            corpus_warnings,
            warnings: windows.warnings.clone(),
        });
        out.file.windows.extend(windows.windows);
    }
    Ok(out)
}

pub fn write_windows_file(file: &WindowsFile, path: &Path) -> Result<()> {
    let mut text = format!("# engage-windows {WINDOWS_VERSION}\n# frames_per_window {}\n", file.frames_per_window);
    for (pid, features) in &file.features {
        text.push_str(&format!("# features {pid} {}\n", features.display()));
    }
    let mut writer = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    let mut header: Vec<String> = [
        "participant_id",
        "t_start",
        "label",
        "t_level",
        "e_mean",
        "frame_offset",
        "frame_count",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..GAMEPAD_FEATURES).map(|i| format!("g{i}")));
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    writer.write_record(&header).map_err(csv_err)?;
    for w in &file.windows {
        let mut row = vec![
            w.participant_id.clone(),
            w.t_start.to_string(),
            w.label.as_str().to_string(),
            w.t_level.to_string(),
            w.e_mean.to_string(),
            w.frames.offset.to_string(),
            w.frames.count.to_string(),
        ];
        row.extend(w.gamepad.0.iter().map(f64::to_string));
        writer.write_record(&row).map_err(csv_err)?;
    }
    let body = writer.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_windows_file(path: &Path) -> Result<WindowsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut frames_per_window = None;
    let mut features = BTreeMap::new();
    let mut version_seen = false;
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix('#') else { continue };
        let mut parts = rest.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("engage-windows"), Some(v)) if v == WINDOWS_VERSION => version_seen = true,
            (Some("engage-windows"), Some(v)) => {
                return Err(Error::malformed(path, i + 1, format!("unsupported windows file version {v}")))
            }
            (Some("frames_per_window"), Some(n)) => {
                frames_per_window = Some(n.parse().map_err(|_| Error::malformed(path, i + 1, "bad frame count"))?)
            }
            (Some("features"), Some(pid)) => {
                let raw = rest.trim_start()["features".len()..].trim_start()[pid.len()..].trim();
                if raw.is_empty() {
                    return Err(Error::malformed(path, i + 1, "features line without a path"));
                }
                features.insert(pid.to_string(), PathBuf::from(raw));
            }
            _ => {}
        }
    }
    if !version_seen {
        return Err(Error::malformed(path, 1, "missing `# engage-windows` header"));
    }
    let frames_per_window =
        frames_per_window.ok_or_else(|| Error::malformed(path, 1, "missing `# frames_per_window` header"))?;

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut windows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = record.as_ref().ok().and_then(|r| r.position()).map(|p| p.line() as usize).unwrap_or(i + 2);
        let record = record.map_err(|e| Error::malformed(path, line, e.to_string()))?;
        if record.len() != 7 + GAMEPAD_FEATURES {
            return Err(Error::malformed(path, line, format!("expected {} columns", 7 + GAMEPAD_FEATURES)));
        }
        let num = |k: usize| -> Result<f64> {
            record[k]
                .parse()
                .map_err(|_| Error::malformed(path, line, format!("column {k} is not a number: `{}`", &record[k])))
        };
        let int = |k: usize| -> Result<usize> {
            record[k]
                .parse()
                .map_err(|_| Error::malformed(path, line, format!("column {k} is not an integer: `{}`", &record[k])))
        };
        let label = match &record[2] {
            "high" => Label::High,
            "low" => Label::Low,
            other => return Err(Error::malformed(path, line, format!("unknown label `{other}`"))),
        };
        let t_level = int(3)?;
        if !(1..=3).contains(&t_level) {
            return Err(Error::malformed(path, line, format!("time level {t_level} outside 1..=3")));
        }
        let count = int(6)?;
        if count == 0 {
            return Err(Error::malformed(path, line, "window has no frames"));
        }
        let mut gamepad = [0.0; GAMEPAD_FEATURES];
        for (j, g) in gamepad.iter_mut().enumerate() {
            *g = num(7 + j)?;
        }
        let participant_id = record[0].to_string();
        if !features.contains_key(&participant_id) {
            return Err(Error::malformed(path, line, format!("no feature file listed for `{participant_id}`")));
        }
        windows.push(LabeledWindow {
            participant_id,
            t_start: num(1)?,
            gamepad: GamepadFeatures(gamepad),
            frames: FrameWindow {
                offset: int(5)?,
                count,
                target: frames_per_window,
            },
            label,
            t_level: t_level as u8,
            e_mean: num(4)?,
        });
    }
    Ok(WindowsFile {
        frames_per_window,
        features,
        windows,
    })
}

/// Model-ready windows: gamepad frequencies, pooled frame vectors, labels
/// and time levels, one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub gamepad: Array2<f64>,
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
    pub levels: Vec<u8>,
    pub participants: Vec<String>,
    pub t_start: Vec<f64>,
}

impl Dataset {
    pub fn new(
        gamepad: Array2<f64>,
        frames: Array2<f64>,
        labels: Vec<usize>,
        levels: Vec<u8>,
        participants: Vec<String>,
        t_start: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if gamepad.dim() != (n, GAMEPAD_FEATURES)
            || frames.dim() != (n, FRAME_CHANNELS)
            || levels.len() != n
            || participants.len() != n
            || t_start.len() != n
        {
            return Err(Error::Shape(format!("dataset columns disagree on the window count {n}")));
        }
        if labels.iter().any(|&l| l > 1) || levels.iter().any(|&t| !(1..=3).contains(&t)) {
            return Err(Error::Data("labels must be 0/1 and time levels 1..=3".into()));
        }
        Ok(Self {
            gamepad,
            frames,
            labels,
            levels,
            participants,
            t_start,
        })
    }

    /// Reads each participant's feature file once and pools every window.
    pub fn load(file: &WindowsFile) -> Result<Self> {
        let n = file.windows.len();
        let mut gamepad = Array2::zeros((n, GAMEPAD_FEATURES));
        let mut frames = Array2::zeros((n, FRAME_CHANNELS));
        let mut by_participant: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, w) in file.windows.iter().enumerate() {
            by_participant.entry(&w.participant_id).or_default().push(i);
            gamepad.row_mut(i).assign(&ndarray::ArrayView1::from(&w.gamepad.0));
        }
        for (pid, rows) in by_participant {
            let path = &file.features[pid];
            let stream = read_feature_file(path)?;
            for i in rows {
                let fw = &file.windows[i].frames;
                if fw.offset + fw.count > stream.frame_count() {
                    return Err(Error::Data(format!(
                        "{}: window at t={} needs frames {}..{} but the file holds {}",
                        path.display(),
                        file.windows[i].t_start,
                        fw.offset,
                        fw.offset + fw.count,
                        stream.frame_count()
                    )));
                }
                let records = fw.gather(&stream);
                let pooled = pool_frame_window(&records, fw.target, stream.channels, stream.height, stream.width)?;
                frames.row_mut(i).assign(&pooled);
            }
        }
        Self::new(
            gamepad,
            frames,
            file.windows.iter().map(|w| w.label.class_index()).collect(),
            file.windows.iter().map(|w| w.t_level).collect(),
            file.windows.iter().map(|w| w.participant_id.clone()).collect(),
            file.windows.iter().map(|w| w.t_start).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct participant ids.
    pub fn participant_ids(&self) -> Vec<String> {
        self.participants.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Row indices of windows belonging to any of `ids`, in dataset order.
    pub fn rows_for(&self, ids: &[String]) -> Vec<usize> {
        let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        (0..self.len()).filter(|&i| ids.contains(self.participants[i].as_str())).collect()
    }

    /// Copies the given rows into a new dataset.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            gamepad: self.gamepad.select(Axis(0), rows),
            frames: self.frames.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            levels: rows.iter().map(|&i| self.levels[i]).collect(),
            participants: rows.iter().map(|&i| self.participants[i].clone()).collect(),
            t_start: rows.iter().map(|&i| self.t_start[i]).collect(),
        }
    }

    /// `[low, high]` window counts.
    pub fn class_counts(&self) -> [usize; 2] {
        let high = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - high, high]
    }
}
