//! Dataset manifests: TSV rows `utt_id\tpath\tlabel\tattack_subtype`.
//!
//! Relative paths resolve against the manifest's directory. Lines starting
//! with `#` and blank lines are ignored.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{load_audio, LoadOptions, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Class index used by the classifier: bonafide 0, spoof 1.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Bonafide => Label::Spoof,
            Label::Spoof => Label::Bonafide,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bonafide" | "bona-fide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            _ => Err(format!("unknown label `{s}` (expected bonafide or spoof)")),
        }
    }
}

/// Spoofing attack family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtype {
    #[serde(rename = "TTS")]
    Tts,
    #[serde(rename = "VC")]
    Vc,
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subtype::Tts => "TTS",
            Subtype::Vc => "VC",
        })
    }
}

impl FromStr for Subtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "TTS" => Ok(Subtype::Tts),
            "VC" => Ok(Subtype::Vc),
            _ => Err(format!("unknown attack subtype `{s}` (expected TTS, VC or -)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub subtype: Option<Subtype>,
}

impl ManifestEntry {
    pub fn new(utt_id: impl Into<String>, path: impl Into<PathBuf>, label: Label, subtype: Option<Subtype>) -> Result<Self> {
        let e = ManifestEntry {
            utt_id: utt_id.into(),
            path: path.into(),
            label,
            subtype,
        };
        match (label, subtype) {
            (Label::Spoof, None) => Err(Error::InvalidArgument(format!("spoof entry `{}` needs a subtype", e.utt_id))),
            (Label::Bonafide, Some(_)) => Err(Error::InvalidArgument(format!(
                "bonafide entry `{}` must not carry a subtype",
                e.utt_id
            ))),
            _ => Ok(e),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| Error::Parse {
                path: source.to_path_buf(),
                line: line_no,
                message,
            };
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = trimmed.split('\t').collect();
            let [id, path, label, subtype] = cols[..] else {
                return Err(err(format!("expected 4 tab-separated columns, found {}", cols.len())));
            };
            let label: Label = label.parse().map_err(err)?;
            let subtype = match subtype {
                "-" | "" => None,
                s => Some(s.parse::<Subtype>().map_err(err)?),
            };
            let path = Path::new(path);
            let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
            let entry = ManifestEntry::new(id, path, label, subtype).map_err(|e| err(e.to_string()))?;
            if !seen.insert(entry.utt_id.clone()) {
                return Err(err(format!("duplicate utt_id `{id}`")));
            }
            entries.push(entry);
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, base, path)
    }

    /// Writes the manifest with paths relative to `base` where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            let sub = e.subtype.map_or("-".to_string(), |s| s.to_string());
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.utt_id, p.display(), e.label, sub));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A manifest with every waveform loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub waves: Vec<Waveform>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, opts: LoadOptions) -> Result<Self> {
        let waves = manifest
            .entries
            .iter()
            .map(|e| load_audio(&e.path, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            entries: manifest.entries.clone(),
            waves,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("/data"), Path::new("m.tsv"))
    }

    #[test]
    fn parses_rows_and_resolves_paths() {
        let m = parse("# comment\na\twav/a.wav\tbonafide\t-\nb\t/abs/b.wav\tspoof\tTTS\n\nc\tc.wav\tspoof\tvc\n").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].path, Path::new("/data/wav/a.wav"));
        assert_eq!(m.entries[1].path, Path::new("/abs/b.wav"));
        assert_eq!(m.entries[2].subtype, Some(Subtype::Vc));
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let cases = [
            "a\tx.wav\tbonafide\n",
            "a\tx.wav\tspoof\t-\n",
            "a\tx.wav\tbonafide\tTTS\n",
            "a\tx.wav\tfake\t-\n",
            "a\tx.wav\tspoof\tXX\n",
            "a\tx.wav\tbonafide\t-\na\ty.wav\tbonafide\t-\n",
        ];
        for text in cases {
            match parse(text) {
                Err(Error::Parse { line, .. }) => assert!(line >= 1),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
        assert!(matches!(parse("x\n\nbad"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn save_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = Manifest {
            entries: vec![
                ManifestEntry::new("u1", dir.path().join("w/u1.wav"), Label::Bonafide, None).unwrap(),
                ManifestEntry::new("u2", dir.path().join("w/u2.wav"), Label::Spoof, Some(Subtype::Tts)).unwrap(),
            ],
        };
        m.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("u1\tw/u1.wav\tbonafide\t-\n"));
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }
}
