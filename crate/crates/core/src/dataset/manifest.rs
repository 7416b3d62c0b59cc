use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{validate_id, BlurSample, ReviewState};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

/// Parses JSON-lines text. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<BlurSample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let s: BlurSample = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        validate_id(&s.id).map_err(|e| Error::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        if let Some(f) = s.blur_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Manifest {
                    line: line_no,
                    reason: format!("blur_fraction {f} outside [0,1]"),
                });
            }
        }
        if !seen.insert(s.id.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                reason: format!("duplicate id `{}`", s.id),
            });
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that sample paths are relative to.
    pub root: PathBuf,
    pub samples: Vec<BlurSample>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, samples: Vec<BlurSample>) -> Self {
        Self {
            root: root.into(),
            samples,
        }
    }

    /// Loads and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let samples = parse_manifest(&text)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, samples };
        for (i, s) in m.samples.iter().enumerate() {
            for p in [&s.hr_path, &s.mask_path] {
                if !m.resolve(p).is_file() {
                    return Err(Error::Manifest {
                        line: i + 1,
                        reason: format!("`{p}` does not exist"),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl().as_bytes())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&BlurSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut BlurSample> {
        self.samples.iter_mut().find(|s| s.id == id)
    }

    pub fn hr_path(&self, s: &BlurSample) -> PathBuf {
        self.resolve(&s.hr_path)
    }

    pub fn mask_path(&self, s: &BlurSample) -> PathBuf {
        self.resolve(&s.mask_path)
    }

    /// Samples usable for training: everything not rejected.
    pub fn training_samples(&self) -> impl Iterator<Item = &BlurSample> {
        self.samples
            .iter()
            .filter(|s| s.review_state != ReviewState::Rejected)
    }

    /// Counts by blur type, size category, intensity and review state,
    /// recomputed from the records on every call.
    pub fn stats(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut bump = |group: &str, key: &str| {
            *out.entry(group.into()).or_default().entry(key.into()).or_default() += 1;
        };
        for s in &self.samples {
            bump("blur_type", s.blur_type.as_str());
            bump(
                "size_category",
                s.size_category().map_or("unknown", |c| c.as_str()),
            );
            bump("intensity", s.intensity.as_str());
            bump("review_state", s.review_state.as_str());
        }
        out.insert("total".into(), BTreeMap::from([("samples".to_string(), self.samples.len())]));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","hr_path":"hr/a.png","mask_path":"mask/a.png","blur_type":"defocus","intensity":"unlabeled","source":"synthetic","review_state":"auto","revision":0}"#;

    #[test]
    fn parse_and_reserialize() {
        let v = parse_manifest(&format!("{LINE}\n\n")).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(serde_json::to_string(&v[0]).unwrap(), LINE);
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = format!("{LINE}\n{LINE}\n");
        assert!(matches!(parse_manifest(&text), Err(Error::Manifest { line: 2, .. })));
        assert!(matches!(parse_manifest("{}\n"), Err(Error::Manifest { line: 1, .. })));
        let bad = LINE.replace("defocus", "smudge");
        assert!(parse_manifest(&bad).is_err());
        let unknown = LINE.replace("\"revision\":0", "\"revision\":0,\"x\":1");
        assert!(parse_manifest(&unknown).is_err());
        let bad_id = LINE.replace("\"id\":\"a\"", "\"id\":\"../a\"");
        assert!(parse_manifest(&bad_id).is_err());
    }

    #[test]
    fn load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, LINE).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Manifest { line: 1, .. })));
    }
}
