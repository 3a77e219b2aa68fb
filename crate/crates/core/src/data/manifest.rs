//! JSONL dataset manifests. One entry per line; each names its input as
//! either an audio file or a precomputed feature file, never both.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl ManifestEntry {
    pub fn text(&self) -> &str {
        self.text.as_deref().unwrap_or("")
    }
}

/// Parse a manifest, preserving line order. `require_text` enforces the
/// training-entry rule that every line carries a non-empty transcript.
/// Errors name the offending 1-based line.
pub fn read_manifest(path: &Path, require_text: bool) -> Result<Vec<ManifestEntry>> {
    let content = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Manifest { line: lineno, detail: e.to_string() })?;
        if entry.utterance_id.is_empty() {
            return Err(Error::Manifest { line: lineno, detail: "empty utterance_id".into() });
        }
        match (&entry.audio_path, &entry.features_path) {
            (Some(_), Some(_)) => {
                return Err(Error::Manifest {
                    line: lineno,
                    detail: "both audio_path and features_path present".into(),
                })
            }
            (None, None) => {
                return Err(Error::Manifest {
                    line: lineno,
                    detail: "neither audio_path nor features_path present".into(),
                })
            }
            _ => {}
        }
        if require_text && entry.text().trim().is_empty() {
            return Err(Error::Manifest {
                line: lineno,
                detail: "training entry has no transcript text".into(),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Serialize entries back to JSONL.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(
            &serde_json::to_string(e).map_err(|err| Error::Config(format!("manifest encode: {err}")))?,
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(dir: &tempfile::TempDir, lines: &str) -> std::path::PathBuf {
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, lines).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(&dir, "");
        assert!(read_manifest(&p, true).unwrap().is_empty());
    }

    #[test]
    fn order_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            &dir,
            r#"{"utterance_id":"u1","audio_path":"a.wav","text":"one"}
{"utterance_id":"u2","features_path":"b.feat","text":"two"}
{"utterance_id":"u3","audio_path":"c.wav","text":"three"}
"#,
        );
        let entries = read_manifest(&p, true).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].utterance_id, "u1");
        assert_eq!(entries[2].utterance_id, "u3");
        assert_eq!(entries[1].features_path.as_deref(), Some("b.feat"));
    }

    #[test]
    fn missing_text_fails_training_read_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            &dir,
            r#"{"utterance_id":"u1","audio_path":"a.wav","text":"one"}
{"utterance_id":"u2","audio_path":"b.wav"}
"#,
        );
        match read_manifest(&p, true).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
        // The same file reads fine when transcripts are optional.
        assert_eq!(read_manifest(&p, false).unwrap().len(), 2);
    }

    #[test]
    fn exactly_one_input_path() {
        let dir = tempfile::tempdir().unwrap();
        let both = write_lines(
            &dir,
            r#"{"utterance_id":"u","audio_path":"a.wav","features_path":"b.feat","text":"x"}"#,
        );
        assert!(matches!(read_manifest(&both, false), Err(Error::Manifest { line: 1, .. })));
        let neither = write_lines(&dir, r#"{"utterance_id":"u","text":"x"}"#);
        assert!(matches!(read_manifest(&neither, false), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn malformed_json_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            &dir,
            r#"{"utterance_id":"u1","audio_path":"a.wav","text":"one"}
{not json}
"#,
        );
        assert!(matches!(read_manifest(&p, false), Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                utterance_id: "u1".into(),
                audio_path: None,
                features_path: Some("f.feat".into()),
                text: Some("hello world".into()),
            },
        ];
        let p = dir.path().join("w.jsonl");
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p, true).unwrap(), entries);
    }
}
