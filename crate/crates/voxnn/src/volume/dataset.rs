use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{peek_volume_shape, Shape4};

/// Subject class of a labeled volume.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Label {
    Ad,
    Mci,
    Nc,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Ad, Label::Mci, Label::Nc];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Ad => "AD",
            Label::Mci => "MCI",
            Label::Nc => "NC",
        }
    }

    pub fn parse(token: &str) -> Option<Label> {
        match token {
            "AD" => Some(Label::Ad),
            "MCI" => Some(Label::Mci),
            "NC" => Some(Label::Nc),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the five classification tasks: four binary label mappings plus the
/// ternary one. Class indices are contiguous from 0; the first-named group is
/// always class 0 (and the positive class for binary scoring).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Task {
    AdVsNc,
    AdMciVsNc,
    AdVsMci,
    MciVsNc,
    Ternary,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::AdVsNc,
        Task::AdMciVsNc,
        Task::AdVsMci,
        Task::MciVsNc,
        Task::Ternary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::AdVsNc => "ad_nc",
            Task::AdMciVsNc => "admci_nc",
            Task::AdVsMci => "ad_mci",
            Task::MciVsNc => "mci_nc",
            Task::Ternary => "ternary",
        }
    }

    pub fn parse(token: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == token)
    }

    /// Class index for a label, or `None` when the task excludes it.
    pub fn class_of(self, label: Label) -> Option<usize> {
        match self {
            Task::AdVsNc => match label {
                Label::Ad => Some(0),
                Label::Nc => Some(1),
                Label::Mci => None,
            },
            Task::AdMciVsNc => match label {
                Label::Ad | Label::Mci => Some(0),
                Label::Nc => Some(1),
            },
            Task::AdVsMci => match label {
                Label::Ad => Some(0),
                Label::Mci => Some(1),
                Label::Nc => None,
            },
            Task::MciVsNc => match label {
                Label::Mci => Some(0),
                Label::Nc => Some(1),
                Label::Ad => None,
            },
            Task::Ternary => match label {
                Label::Ad => Some(0),
                Label::Mci => Some(1),
                Label::Nc => Some(2),
            },
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Task::Ternary => 3,
            _ => 2,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Task::AdVsNc => vec!["AD", "NC"],
            Task::AdMciVsNc => vec!["AD+MCI", "NC"],
            Task::AdVsMci => vec!["AD", "MCI"],
            Task::MciVsNc => vec!["MCI", "NC"],
            Task::Ternary => vec!["AD", "MCI", "NC"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a manifest describes the pretraining (source) or the
/// classification (target) domain.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Domain {
    Source,
    #[default]
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    /// Volume path, resolved relative to the manifest location.
    pub path: PathBuf,
    pub label: Label,
    pub subject: String,
}

/// Labeled sample index binding volume files to subject classes.
///
/// All referenced volumes are required to share one shape, checked against
/// each file's header at load time.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub domain: Domain,
    pub shape: Shape4,
}

impl DatasetManifest {
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for e in &self.entries {
            match e.label {
                Label::Ad => counts[0] += 1,
                Label::Mci => counts[1] += 1,
                Label::Nc => counts[2] += 1,
            }
        }
        counts
    }
}

/// Parses a CSV manifest: one `path,label,subject_id` record per line.
///
/// An optional `path,label,subject_id` header and `#` comment lines are
/// skipped; a `# domain: source` comment sets the provenance tag. Relative
/// volume paths resolve against the manifest's directory, and every
/// referenced file's VOL3 header is read to enforce the common shape.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut entries = Vec::new();
    let mut domain = Domain::Target;
    let mut seen = HashSet::new();
    let mut shape: Option<Shape4> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(value) = comment.trim().strip_prefix("domain:") {
                domain = match value.trim() {
                    "source" => Domain::Source,
                    "target" => Domain::Target,
                    other => {
                        return Err(Error::Manifest {
                            line: line_no,
                            msg: format!("unknown domain {other:?}"),
                        })
                    }
                };
            }
            continue;
        }
        if line == "path,label,subject_id" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("expected 3 comma-separated fields, found {}", fields.len()),
            });
        }
        let label = Label::parse(fields[1]).ok_or_else(|| Error::UnknownLabel {
            line: line_no,
            token: fields[1].to_string(),
        })?;
        let rel = PathBuf::from(fields[0]);
        let resolved = if rel.is_absolute() {
            rel
        } else {
            base.join(rel)
        };
        if !seen.insert(resolved.clone()) {
            return Err(Error::DuplicatePath {
                line: line_no,
                path: resolved,
            });
        }
        let file_shape = peek_volume_shape(&resolved)?;
        match shape {
            None => shape = Some(file_shape),
            Some(expected) if expected != file_shape => {
                return Err(Error::ShapeMismatch {
                    expected,
                    found: file_shape,
                })
            }
            _ => {}
        }
        entries.push(ManifestEntry {
            path: resolved,
            label,
            subject: fields[2].to_string(),
        });
    }

    let shape = shape.ok_or(Error::EmptyDataset)?;
    Ok(DatasetManifest {
        entries,
        domain,
        shape,
    })
}

/// Writes a manifest as CSV with a header line and a domain comment.
/// Paths under `dir` are written relative to it.
pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = String::new();
    out.push_str(&format!("# domain: {}\n", m.domain.as_str()));
    out.push_str("path,label,subject_id\n");
    for e in &m.entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        out.push_str(&format!(
            "{},{},{}\n",
            rel.display(),
            e.label.as_str(),
            e.subject
        ));
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Maps manifest entries through a task: excluded labels are dropped, the
/// rest get contiguous class indices, order is preserved.
pub fn apply_task(m: &DatasetManifest, task: Task) -> Result<Vec<(PathBuf, usize)>> {
    let mapped: Vec<(PathBuf, usize)> = m
        .entries
        .iter()
        .filter_map(|e| task.class_of(e.label).map(|c| (e.path.clone(), c)))
        .collect();
    if mapped.is_empty() {
        return Err(Error::EmptyTask {
            task: task.name().to_string(),
        });
    }
    Ok(mapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{save_volume, Volume};
    use std::fs;
    use tempfile::tempdir;

    fn write_volumes(dir: &Path, labels: &[(Label, usize)]) -> String {
        let shape = Shape4::new(1, 2, 2, 2).unwrap();
        let mut lines = vec!["path,label,subject_id".to_string()];
        for (label, count) in labels {
            for i in 0..*count {
                let name = format!("{}_{i}.vol3", label.as_str().to_lowercase());
                let v = Volume::from_vec(shape, vec![0.5; 8]).unwrap();
                save_volume(&v, &dir.join(&name)).unwrap();
                lines.push(format!("{name},{label},s{label}{i}"));
            }
        }
        lines.join("\n")
    }

    #[test]
    fn three_line_manifest_parses() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(dir.path(), &[(Label::Ad, 1), (Label::Mci, 1), (Label::Nc, 1)]);
        let path = dir.path().join("m.csv");
        fs::write(&path, csv).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.domain, Domain::Target);
    }

    #[test]
    fn unknown_label_names_line() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(dir.path(), &[(Label::Ad, 1)]);
        let path = dir.path().join("m.csv");
        fs::write(&path, format!("{csv}\nad_0.vol3,ADX,s9")).unwrap();
        match load_manifest(&path) {
            Err(Error::UnknownLabel { line, token }) => {
                assert_eq!(line, 3);
                assert_eq!(token, "ADX");
            }
            other => panic!("expected unknown-label error, got {other:?}"),
        }
    }

    #[test]
    fn balanced_manifest_counts_per_class() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(
            dir.path(),
            &[(Label::Ad, 70), (Label::Mci, 70), (Label::Nc, 70)],
        );
        let path = dir.path().join("m.csv");
        fs::write(&path, csv).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 210);
        assert_eq!(m.class_counts(), [70, 70, 70]);
    }

    #[test]
    fn duplicate_path_is_rejected() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(dir.path(), &[(Label::Ad, 1)]);
        let path = dir.path().join("m.csv");
        fs::write(&path, format!("{csv}\nad_0.vol3,NC,s9")).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::DuplicatePath { line: 3, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(dir.path(), &[(Label::Ad, 1)]);
        let other = Volume::from_vec(Shape4::new(1, 1, 1, 1).unwrap(), vec![0.0]).unwrap();
        save_volume(&other, &dir.path().join("odd.vol3")).unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, format!("{csv}\nodd.vol3,NC,s9")).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn domain_comment_is_parsed() {
        let dir = tempdir().unwrap();
        let csv = write_volumes(dir.path(), &[(Label::Nc, 1)]);
        let path = dir.path().join("m.csv");
        fs::write(&path, format!("# domain: source\n{csv}")).unwrap();
        assert_eq!(load_manifest(&path).unwrap().domain, Domain::Source);
    }

    fn balanced_manifest(dir: &Path) -> DatasetManifest {
        let csv = write_volumes(dir, &[(Label::Ad, 70), (Label::Mci, 70), (Label::Nc, 70)]);
        let path = dir.join("m.csv");
        fs::write(&path, csv).unwrap();
        load_manifest(&path).unwrap()
    }

    #[test]
    fn ad_vs_nc_drops_mci() {
        let dir = tempdir().unwrap();
        let m = balanced_manifest(dir.path());
        let mapped = apply_task(&m, Task::AdVsNc).unwrap();
        assert_eq!(mapped.len(), 140);
        let classes: HashSet<usize> = mapped.iter().map(|(_, c)| *c).collect();
        assert_eq!(classes, HashSet::from([0, 1]));
    }

    #[test]
    fn merge_task_maps_140_to_class_0() {
        let dir = tempdir().unwrap();
        let m = balanced_manifest(dir.path());
        let mapped = apply_task(&m, Task::AdMciVsNc).unwrap();
        assert_eq!(mapped.len(), 210);
        assert_eq!(mapped.iter().filter(|(_, c)| *c == 0).count(), 140);
        assert_eq!(mapped.iter().filter(|(_, c)| *c == 1).count(), 70);
    }

    #[test]
    fn ternary_task_keeps_everything() {
        let dir = tempdir().unwrap();
        let m = balanced_manifest(dir.path());
        let mapped = apply_task(&m, Task::Ternary).unwrap();
        assert_eq!(mapped.len(), 210);
        for (entry, (_, class)) in m.entries.iter().zip(&mapped) {
            assert_eq!(Task::Ternary.class_of(entry.label), Some(*class));
        }
    }

    #[test]
    fn task_order_is_preserved_and_size_accounts_for_exclusions() {
        let dir = tempdir().unwrap();
        let m = balanced_manifest(dir.path());
        for task in Task::ALL {
            let mapped = apply_task(&m, task).unwrap();
            let excluded = m
                .entries
                .iter()
                .filter(|e| task.class_of(e.label).is_none())
                .count();
            assert_eq!(mapped.len(), m.entries.len() - excluded);
            // Contiguous class range from 0.
            let max = mapped.iter().map(|(_, c)| *c).max().unwrap();
            assert_eq!(max + 1, task.class_count());
            for c in 0..task.class_count() {
                assert!(mapped.iter().any(|(_, x)| *x == c));
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let m = balanced_manifest(dir.path());
        let copy = dir.path().join("copy.csv");
        save_manifest(&m, &copy).unwrap();
        let back = load_manifest(&copy).unwrap();
        assert_eq!(back.entries.len(), m.entries.len());
        assert_eq!(back.class_counts(), m.class_counts());
        assert_eq!(back.shape, m.shape);
    }
}
