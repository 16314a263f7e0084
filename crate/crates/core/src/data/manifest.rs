use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's data root.
    pub path: PathBuf,
    pub label: String,
    pub label_id: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Label strings indexed by id.
    pub vocab: Vec<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    /// Entries of one split; entries without a split belong to every split.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split.is_none_or(|s| s == split))
    }

    pub fn has_splits(&self) -> bool {
        self.entries.iter().any(|e| e.split.is_some())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_rows(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => DataError::Csv {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let rows = rdr.records().collect::<Result<Vec<_>, _>>().map_err(|e| csv_err(path, e))?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, path: &Path, name: &str) -> Result<usize, DataError> {
    header.iter().position(|h| h.trim() == name).ok_or_else(|| DataError::MissingColumn {
        path: path.to_path_buf(),
        column: name.to_string(),
    })
}

fn build(
    path: &Path,
    root: &Path,
    rows: Vec<(String, String, Option<Split>)>,
    vocab: Option<&[String]>,
) -> Result<Manifest, DataError> {
    let vocab: Vec<String> = match vocab {
        Some(v) => v.to_vec(),
        None => rows
            .iter()
            .map(|r| r.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let entries = rows
        .into_iter()
        .enumerate()
        .map(|(i, (p, label, split))| {
            let label_id = vocab.iter().position(|v| *v == label).ok_or_else(|| DataError::UnknownLabel {
                path: path.to_path_buf(),
                row: i + 1,
                label: label.clone(),
            })?;
            Ok(ManifestEntry {
                path: root.join(p),
                label,
                label_id,
                split,
            })
        })
        .collect::<Result<_, DataError>>()?;
    Ok(Manifest { entries, vocab })
}

/// Reads a `path,label[,split]` manifest. Without `vocab` the vocabulary is
/// the sorted set of labels present.
pub fn load_csv_manifest(path: impl AsRef<Path>, root: impl AsRef<Path>, vocab: Option<&[String]>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let (header, records) = read_rows(path)?;
    let pc = column(&header, path, "path")?;
    let lc = column(&header, path, "label")?;
    let sc = header.iter().position(|h| h.trim() == "split");
    let mut rows = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let split = match sc {
            Some(c) => Some(Split::parse(r[c].trim()).ok_or_else(|| DataError::UnknownSplit {
                path: path.to_path_buf(),
                row: i + 1,
                split: r[c].to_string(),
            })?),
            None => None,
        };
        rows.push((r[pc].trim().to_string(), r[lc].trim().to_string(), split));
    }
    build(path, root.as_ref(), rows, vocab)
}

/// Reads a Fluent Speech Commands CSV: the label of each row is its
/// `action|object|location` triple.
pub fn load_fluent_manifest(path: impl AsRef<Path>, root: impl AsRef<Path>, vocab: Option<&[String]>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let (header, records) = read_rows(path)?;
    let cols: Vec<usize> = ["path", "action", "object", "location"]
        .iter()
        .map(|c| column(&header, path, c))
        .collect::<Result<_, _>>()?;
    let rows = records
        .iter()
        .map(|r| {
            let label = format!("{}|{}|{}", r[cols[1]].trim(), r[cols[2]].trim(), r[cols[3]].trim());
            (r[cols[0]].trim().to_string(), label, None)
        })
        .collect();
    build(path, root.as_ref(), rows, vocab)
}

/// Picks the format from the header: Fluent files carry action/object/location
/// columns and paths relative to the dataset root (the CSV's grandparent
/// directory); other manifests resolve paths against their own directory.
pub fn load_manifest(path: impl AsRef<Path>, vocab: Option<&[String]>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let (header, _) = read_rows(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if header.iter().any(|h| h.trim() == "action") {
        let root = dir.parent().unwrap_or(dir);
        load_fluent_manifest(path, root, vocab)
    } else {
        load_csv_manifest(path, dir, vocab)
    }
}

/// Writes `path,label,split` rows; paths are written as given.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, String, Split)]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["path", "label", "split"]).map_err(|e| csv_err(path, e))?;
    for (p, l, s) in rows {
        w.write_record([p.as_str(), l.as_str(), s.as_str()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
