//! Loading the taxonomy files and notes from disk.

use std::path::{Path, PathBuf};

use clh_core::pipeline::ClinicalNote;
use clh_core::taxonomy::{
    GuidelineRecord, Guidelines, Hierarchy, IndexEntry, IndexRecord, TabularRecord,
};
use clh_core::{CodeId, Taxonomy, TaxonomyError};
use serde::Serialize;
use thiserror::Error;

use crate::io::{read_jsonl_numbered, IoError};

pub const TABULAR_FILE: &str = "tabular.jsonl";
pub const ALPHA_INDEX_FILE: &str = "alpha_index.jsonl";
pub const GUIDELINES_FILE: &str = "guidelines.jsonl";
pub const NOTES_FILE: &str = "notes.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}:{line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: TaxonomyError,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: TaxonomyError,
    },
    #[error("{path}:{line}: {message}")]
    Note {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyPaths {
    pub tabular: PathBuf,
    pub alpha_index: PathBuf,
    pub guidelines: PathBuf,
}

impl TaxonomyPaths {
    /// The three standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            tabular: dir.join(TABULAR_FILE),
            alpha_index: dir.join(ALPHA_INDEX_FILE),
            guidelines: dir.join(GUIDELINES_FILE),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub tabular_records: usize,
    pub index_entries: usize,
    pub guideline_docs: usize,
    pub warnings: Vec<String>,
}

pub fn load_tabular(path: &Path) -> Result<(Hierarchy, usize), DataError> {
    let records: Vec<(usize, TabularRecord)> = read_jsonl_numbered(path)?;
    let n = records.len();
    let hierarchy =
        Hierarchy::from_records(records.into_iter().map(|(_, r)| r)).map_err(|source| {
            DataError::File {
                path: path.to_path_buf(),
                source,
            }
        })?;
    Ok((hierarchy, n))
}

/// Index entries get ids in file order.
pub fn load_alpha_index(path: &Path) -> Result<Vec<IndexEntry>, DataError> {
    let records: Vec<(usize, IndexRecord)> = read_jsonl_numbered(path)?;
    let mut index = Vec::with_capacity(records.len());
    for (line, r) in records {
        let record_err = |source| DataError::Record {
            path: path.to_path_buf(),
            line,
            source,
        };
        let code = CodeId::parse(&r.code).map_err(|e| record_err(e.into()))?;
        index.push(IndexEntry::new(index.len() as u32, r.term_path, code).map_err(record_err)?);
    }
    Ok(index)
}

pub fn load_guidelines(path: &Path) -> Result<(Guidelines, usize), DataError> {
    let records: Vec<(usize, GuidelineRecord)> = read_jsonl_numbered(path)?;
    let n = records.len();
    let guidelines =
        Guidelines::from_records(records.into_iter().map(|(_, r)| r)).map_err(|source| {
            DataError::File {
                path: path.to_path_buf(),
                source,
            }
        })?;
    Ok((guidelines, n))
}

/// Parses and validates all three files. A missing guidelines file is a
/// warning, not an error.
pub fn load_taxonomy(paths: &TaxonomyPaths) -> Result<(Taxonomy, LoadReport), DataError> {
    let mut report = LoadReport::default();
    let (hierarchy, n) = load_tabular(&paths.tabular)?;
    report.tabular_records = n;
    let index = load_alpha_index(&paths.alpha_index)?;
    report.index_entries = index.len();

    let guidelines = if paths.guidelines.exists() {
        let (g, n) = load_guidelines(&paths.guidelines)?;
        report.guideline_docs = n;
        g
    } else {
        report.warnings.push(format!(
            "{}: not found; continuing without guidelines",
            paths.guidelines.display()
        ));
        Guidelines::default()
    };

    for entry in &index {
        if hierarchy.get(entry.code.as_str()).is_none() {
            report.warnings.push(format!(
                "index entry `{}` points to {} which is not in the tabular list",
                entry.display, entry.code
            ));
        }
    }
    Ok((Taxonomy::new(hierarchy, index, guidelines), report))
}

/// Reads and validates `notes.jsonl`; note ids must be unique.
pub fn load_notes(path: &Path) -> Result<Vec<ClinicalNote>, DataError> {
    let records: Vec<(usize, ClinicalNote)> = read_jsonl_numbered(path)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut notes = Vec::with_capacity(records.len());
    for (line, note) in records {
        let fail = |message: String| DataError::Note {
            path: path.to_path_buf(),
            line,
            message,
        };
        note.validate().map_err(|e| fail(e.to_string()))?;
        if !seen.insert(note.id.clone()) {
            return Err(fail(format!("duplicate note id `{}`", note.id)));
        }
        notes.push(note);
    }
    Ok(notes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn malformed_index_code_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            TABULAR_FILE,
            "{\"code\":\"A00-B99\",\"description\":\"x\"}\n",
        );
        write(
            dir.path(),
            ALPHA_INDEX_FILE,
            "{\"term_path\":[\"Anthrax\"],\"code\":\"A22\"}\n{\"term_path\":[\"Bad\"],\"code\":\"22A.7\"}\n",
        );
        let err = load_taxonomy(&TaxonomyPaths::in_dir(dir.path())).unwrap_err();
        assert!(matches!(err, DataError::Record { line: 2, .. }), "{err}");
    }

    #[test]
    fn guidelines_are_optional() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TABULAR_FILE, "");
        write(dir.path(), ALPHA_INDEX_FILE, "");
        let (tax, report) = load_taxonomy(&TaxonomyPaths::in_dir(dir.path())).unwrap();
        assert!(tax.hierarchy.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn duplicate_note_ids() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            NOTES_FILE,
            "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n",
        );
        let err = load_notes(&dir.path().join(NOTES_FILE)).unwrap_err();
        assert!(matches!(err, DataError::Note { line: 2, .. }));
    }
}
