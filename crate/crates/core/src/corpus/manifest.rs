//! Corpus manifests: the CSV table tying generated region files to their
//! geometry, quality score, label, and split.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    pub fn parse(s: &str) -> Result<Option<Split>> {
        match s {
            "" => Ok(None),
            "train" => Ok(Some(Split::Train)),
            "val" => Ok(Some(Split::Val)),
            "test" => Ok(Some(Split::Test)),
            other => Err(Error::Corpus(format!("unknown split tag '{other}'"))),
        }
    }
}

/// One region record. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub slide: String,
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub cv: f64,
    pub label: Option<String>,
    pub split: Option<Split>,
}

/// The manifest: ordered rows plus the directory paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

const HEADER: [&str; 9] = ["id", "path", "slide", "x", "y", "side", "cv", "label", "split"];

impl CorpusManifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.id.as_str()) {
                return Err(Error::Corpus(format!("duplicate region id '{}'", row.id)));
            }
        }
        Ok(CorpusManifest { rows, base_dir })
    }

    /// Absolute path of a row's image file.
    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }

    /// Writes the manifest as UTF-8 CSV with LF line endings; null label and
    /// split serialize as empty fields.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let as_csv = |e: csv::Error| Error::csv(path, e);
        w.write_record(HEADER).map_err(as_csv)?;
        for row in &self.rows {
            w.write_record([
                row.id.as_str(),
                row.path.as_str(),
                row.slide.as_str(),
                &row.x.to_string(),
                &row.y.to_string(),
                &row.side.to_string(),
                &format_cv(row.cv),
                row.label.as_deref().unwrap_or(""),
                row.split.map(Split::as_str).unwrap_or(""),
            ])
            .map_err(as_csv)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let as_csv = |e: csv::Error| Error::csv(path, e);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(as_csv)?;
        let headers = r.headers().map_err(as_csv)?.clone();
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Corpus(format!(
                "manifest {} has header {:?}, expected {:?}",
                path.display(),
                headers.iter().collect::<Vec<_>>(),
                HEADER
            )));
        }
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record.map_err(as_csv)?;
            if record.len() != HEADER.len() {
                return Err(Error::Corpus(format!(
                    "manifest row has {} fields, expected {}",
                    record.len(),
                    HEADER.len()
                )));
            }
            let field = |i: usize| record.get(i).unwrap_or("");
            let parse_usize = |i: usize, what: &str| -> Result<usize> {
                field(i).parse().map_err(|_| {
                    Error::Corpus(format!("bad {what} '{}' in row '{}'", field(i), field(0)))
                })
            };
            rows.push(ManifestRow {
                id: field(0).to_string(),
                path: field(1).to_string(),
                slide: field(2).to_string(),
                x: parse_usize(3, "x")?,
                y: parse_usize(4, "y")?,
                side: parse_usize(5, "side")?,
                cv: parse_cv(field(6), field(0))?,
                label: match field(7) {
                    "" => None,
                    s => Some(s.to_string()),
                },
                split: Split::parse(field(8))?,
            });
        }
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        CorpusManifest::new(rows, base_dir)
    }

    /// Rows carrying a label.
    pub fn labeled_rows(&self) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(|r| r.label.is_some())
    }
}

fn format_cv(cv: f64) -> String {
    if cv.is_infinite() {
        "inf".to_string()
    } else {
        // Rust's shortest-roundtrip formatting: stable and re-parsable.
        format!("{cv}")
    }
}

fn parse_cv(s: &str, id: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::Corpus(format!("bad cv '{s}' in row '{id}'"))),
    }
}
