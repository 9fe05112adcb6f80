use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, ImageSample, Result, Split};
use crate::label::Label;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    path: PathBuf,
    label: Label,
    split: Option<Split>,
    fold: Option<usize>,
}

/// Writes one CSV record per sample (`id,path,label,split,fold`); the fold
/// column is empty for test rows.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in manifest.samples() {
        writer
            .serialize(Row {
                id: s.id.clone(),
                path: s.path.clone(),
                label: s.label,
                split: manifest.split_of(&s.id),
                fold: manifest.fold_of(&s.id),
            })
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| DataError::io(path, e))
}

/// Reads a manifest written by [`write_manifest`]. The seed is not part of
/// the file and is supplied by the caller.
pub fn read_manifest(path: &Path, seed: u64) -> Result<DatasetManifest> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut samples = Vec::new();
    let mut split = BTreeMap::new();
    let mut fold = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if let Some(s) = row.split {
            split.insert(row.id.clone(), s);
        }
        if let Some(f) = row.fold {
            fold.insert(row.id.clone(), f);
        }
        samples.push(ImageSample { id: row.id, path: row.path, label: row.label });
    }
    let manifest = DatasetManifest::new(samples)?;
    if !split.is_empty() && split.len() != manifest.len() {
        return Err(DataError::Manifest { path: path.into(), reason: "split column is only partially filled".into() });
    }
    manifest
        .with_assignments(split, fold, seed)
        .map_err(|e| DataError::Manifest { path: path.into(), reason: e.to_string() })
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    DataError::Manifest { path: path.into(), reason: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::manifest;
    use crate::data::{make_folds, split_train_test};

    #[test]
    fn round_trip_preserves_assignments() {
        let m = split_train_test(&manifest(12, 8), 0.8, 5, true).unwrap();
        let plan = make_folds(&m, 4, 5, true).unwrap();
        let m = m.with_folds(&plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,path,label,split,fold\n"));
        let test_row = text.lines().find(|l| l.contains(",test,")).unwrap();
        assert!(test_row.ends_with(",test,"), "{test_row}");
        assert_eq!(read_manifest(&path, 5).unwrap(), m);
    }

    #[test]
    fn unsplit_manifest_round_trips() {
        let m = manifest(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&m, &path).unwrap();
        assert_eq!(read_manifest(&path, 0).unwrap(), m);
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "id,path,label,split,fold\na,a.png,maybe,train,0\n").unwrap();
        assert!(matches!(read_manifest(&path, 0), Err(DataError::Manifest { .. })));
        std::fs::write(&path, "id,path,label,split,fold\na,a.png,fertile,test,1\n").unwrap();
        assert!(matches!(read_manifest(&path, 0), Err(DataError::Manifest { .. })));
    }
}
