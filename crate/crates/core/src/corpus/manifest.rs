use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    read_feature_file, read_gamepad_log, read_trace, write_feature_file, write_gamepad_log, write_trace,
    ActionVocabulary, Session, Warning,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "session.manifest";

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(path, i + 1, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::malformed(path, i + 1, "empty key"));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::malformed(path, i + 1, format!("duplicate key `{key}`")));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionManifest {
    pub participant_id: String,
    pub duration_s: f64,
    pub annotation_speed: f64,
    pub gamepad: PathBuf,
    pub features: PathBuf,
    pub trace: PathBuf,
}

impl SessionManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map = parse_key_values(&text, path)?;
        let get = |key: &str| {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::malformed(path, 0, format!("missing key `{key}`")))
        };
        let number = |key: &str| -> Result<f64> {
            let raw = get(key)?;
            raw.parse()
                .map_err(|_| Error::malformed(path, 0, format!("`{key}` is not a number: `{raw}`")))
        };
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            participant_id: get("participant_id")?,
            duration_s: number("duration_s")?,
            annotation_speed: number("annotation_speed")?,
            gamepad: base.join(get("gamepad")?),
            features: base.join(get("features")?),
            trace: base.join(get("trace")?),
        })
    }

    fn render(&self) -> String {
        let file_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        format!(
            "participant_id = {}\nduration_s = {}\nannotation_speed = {}\ngamepad = {}\nfeatures = {}\ntrace = {}\n",
            self.participant_id,
            self.duration_s,
            self.annotation_speed,
            file_name(&self.gamepad),
            file_name(&self.features),
            file_name(&self.trace),
        )
    }
}

/// Reads a session from its manifest. The trace is returned raw.
pub fn read_session(manifest_path: &Path, vocab: &ActionVocabulary) -> Result<(Session, Vec<Warning>)> {
    let manifest = SessionManifest::read(manifest_path)?;
    for file in [&manifest.gamepad, &manifest.features, &manifest.trace] {
        if !file.is_file() {
            return Err(Error::io(
                file.clone(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest but missing"),
            ));
        }
    }
    let session = Session {
        participant_id: manifest.participant_id.clone(),
        duration_s: manifest.duration_s,
        events: read_gamepad_log(&manifest.gamepad, vocab)?,
        features: read_feature_file(&manifest.features)?,
        trace: read_trace(&manifest.trace, manifest.annotation_speed)?,
    };
    let warnings = session.check()?;
    Ok((session, warnings))
}

/// Writes `session` into `dir` (created if needed) and returns the manifest path.
pub fn write_session(session: &Session, dir: &Path, vocab: &ActionVocabulary) -> Result<PathBuf> {
    session.check()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SessionManifest {
        participant_id: session.participant_id.clone(),
        duration_s: session.duration_s,
        annotation_speed: session.trace.speed_factor,
        gamepad: dir.join("gamepad.tsv"),
        features: dir.join("frames.engfeat"),
        trace: dir.join("trace.csv"),
    };
    write_gamepad_log(&session.events, vocab, &manifest.gamepad)?;
    write_feature_file(&session.features, &manifest.features)?;
    write_trace(&session.trace, &manifest.trace)?;
    let path = dir.join(super::MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EngagementTrace, FrameFeatureStream, GamepadEvent};

    fn toy_session() -> Session {
        Session {
            participant_id: "p01".into(),
            duration_s: 1.0,
            events: vec![
                GamepadEvent::new(0.0, vec![0]),
                GamepadEvent::no_key(0.4),
                GamepadEvent::new(0.8, vec![0, 5]),
            ],
            features: FrameFeatureStream::vectors(4, 3.0, (0..12).map(|v| v as f32 * 0.5).collect()).unwrap(),
            trace: EngagementTrace::new(vec![0.0, 0.1, 0.3, 0.5], vec![1.0, -2.5, 3.25, 0.1], 2.0).unwrap(),
        }
    }

    #[test]
    fn toy_session_round_trips() {
        let vocab = ActionVocabulary::standard();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_session(&toy_session(), &dir.path().join("p01"), &vocab).unwrap();
        let (back, warnings) = read_session(&manifest, &vocab).unwrap();
        assert_eq!(back, toy_session());
        assert_eq!(back.events.len(), 3);
        assert_eq!(back.features.frame_count(), 3);
        assert_eq!(back.trace.len(), 4);
        assert!(warnings.contains(&Warning::DurationOutsideCorpusRange { duration_s: 1.0 }));
    }

    #[test]
    fn missing_payload_file_is_an_error() {
        let vocab = ActionVocabulary::standard();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_session(&toy_session(), dir.path(), &vocab).unwrap();
        fs::remove_file(dir.path().join("trace.csv")).unwrap();
        assert!(matches!(read_session(&manifest, &vocab), Err(Error::Io { .. })));
    }

    #[test]
    fn frame_count_drift_is_a_warning() {
        let vocab = ActionVocabulary::standard();
        let mut session = toy_session();
        session.features = FrameFeatureStream::vectors(4, 3.0, vec![0.0; 4 * 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_session(&session, dir.path(), &vocab).unwrap();
        let (_, warnings) = read_session(&manifest, &vocab).unwrap();
        assert!(warnings
            .iter()
            .any(|w| matches!(w, Warning::FrameCountMismatch { found: 6, .. })));
    }

    #[test]
    fn key_values_reject_duplicates() {
        let p = Path::new("m");
        assert!(parse_key_values("a = 1\n# note\nb=2\n", p).is_ok());
        assert!(parse_key_values("a = 1\na = 2\n", p).is_err());
        assert!(parse_key_values("just text\n", p).is_err());
    }
}
