//! Text manifests listing one dataset per line:
//! `name, domain_id, images_path, labels_path, transform_spec`.
//!
//! Blank lines and `#` comments are ignored. The transform spec is the rest of
//! the line (it may be empty for identity). Relative paths resolve against the
//! manifest's directory.

use std::path::{Path, PathBuf};

use super::{load_idx, normalize_32rgb, synth_domain, Dataset, DomainKind, DomainTransformSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub domain_id: usize,
    pub images_path: PathBuf,
    pub labels_path: PathBuf,
    pub transform: DomainTransformSpec,
}

impl ManifestEntry {
    /// Load the IDX pair, normalize to 32×32 RGB and apply the transform.
    pub fn load(&self) -> Result<Dataset> {
        let base = normalize_32rgb(&load_idx(&self.images_path, &self.labels_path)?);
        Ok(synth_domain(&base, &self.transform, self.domain_id)?.with_name(self.name.clone(), self.domain_id))
    }
}

pub fn parse_manifest(text: &str, base_dir: &Path, path_for_errors: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Format { path: path_for_errors.display().to_string(), line: i + 1, message };
        let fields: Vec<&str> = line.splitn(5, ',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(err(format!("expected at least 4 comma-separated fields, got {}", fields.len())));
        }
        let domain_id = fields[1].parse().map_err(|e| err(format!("domain_id {:?}: {}", fields[1], e)))?;
        let spec_text = fields.get(4).copied().unwrap_or("");
        let transform = if spec_text.is_empty() {
            DomainTransformSpec::new(DomainKind::Identity, 0)
        } else {
            spec_text.parse().map_err(|e: Error| err(e.to_string()))?
        };
        if out.iter().any(|e: &ManifestEntry| e.name == fields[0]) {
            return Err(err(format!("duplicate dataset name {:?}", fields[0])));
        }
        out.push(ManifestEntry {
            name: fields[0].to_string(),
            domain_id,
            images_path: base_dir.join(fields[2]),
            labels_path: base_dir.join(fields[3]),
            transform,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries() {
        let text = "# sources\nmnist, 0, a.idx, a.lbl,\n inv ,1, a.idx, a.lbl, kind=invert seed=2\n\ncp,2,/abs/i,/abs/l,kind=channel-permute;perm=1/2/0\n";
        let e = parse_manifest(text, Path::new("/data"), Path::new("m.txt")).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].transform.kind, DomainKind::Identity);
        assert_eq!(e[1].name, "inv");
        assert_eq!(e[1].images_path, PathBuf::from("/data/a.idx"));
        assert_eq!(e[2].images_path, PathBuf::from("/abs/i"));
        assert_eq!(e[2].transform.kind, DomainKind::ChannelPermute { perm: [1, 2, 0] });
    }

    #[test]
    fn reports_line_numbers() {
        let bad = ["a, x, i, l", "a, 0, i", "a, 0, i, l, kind=sepia", "a,0,i,l\na,1,i,l"];
        let lines = [1, 1, 1, 2];
        for (text, line) in bad.iter().zip(lines) {
            match parse_manifest(text, Path::new("."), Path::new("m")) {
                Err(Error::Format { line: l, .. }) => assert_eq!(l, line, "{}", text),
                other => panic!("{:?}", other),
            }
        }
    }
}
