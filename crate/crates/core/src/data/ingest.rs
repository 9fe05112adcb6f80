use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decode, DataError, DatasetManifest, ImageSample, Result};
use crate::label::Label;

/// Name of the label table consulted in [`Labeling::ByManifestFile`] mode.
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    /// `<root>/fertile/...` and `<root>/infertile/...`.
    #[default]
    BySubdirectory,
    /// `<root>/labels.csv` with `path,label` columns, paths relative to root.
    ByManifestFile,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let path = entry.path();
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let ty = entry.file_type().map_err(|e| DataError::io(&path, e))?;
        if ty.is_dir() {
            collect_files(&path, out)?;
        } else if ty.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_id(rel: &Path) -> String {
    let stem = rel.with_extension("");
    stem.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

fn read_label_table(root: &Path) -> Result<BTreeMap<PathBuf, Label>> {
    let path = root.join(LABELS_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| DataError::LabelError {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut table = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::LabelError { path: path.clone(), reason: e.to_string() })?;
        let (Some(file), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(DataError::LabelError { path: path.clone(), reason: "expected `path,label` rows".into() });
        };
        let label = label
            .parse::<Label>()
            .map_err(|e| DataError::LabelError { path: root.join(file), reason: e.to_string() })?;
        table.insert(PathBuf::from(file.trim()), label);
    }
    Ok(table)
}

/// Registers every image under `root`. Samples come back ordered by path with
/// no split or fold assigned; every file is decoded once to validate it.
pub fn ingest_directory(root: &Path, labeling: Labeling) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DataError::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory")));
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();

    let table = match labeling {
        Labeling::ByManifestFile => Some(read_label_table(root)?),
        Labeling::BySubdirectory => None,
    };

    let mut samples = Vec::with_capacity(files.len());
    for path in files {
        let rel = path.strip_prefix(root).expect("walked under root").to_path_buf();
        if table.is_some() && rel == Path::new(LABELS_FILE) {
            continue;
        }
        let label = match &table {
            Some(t) => *t.get(&rel).ok_or_else(|| DataError::LabelError {
                path: path.clone(),
                reason: format!("not listed in {LABELS_FILE}"),
            })?,
            None => {
                let mut comps = rel.components();
                let first = comps.next();
                if comps.next().is_none() {
                    return Err(DataError::LabelError {
                        path: path.clone(),
                        reason: "file is not inside a class subdirectory".into(),
                    });
                }
                let dir = first.map(|c| c.as_os_str().to_string_lossy().into_owned()).unwrap_or_default();
                dir.parse::<Label>()
                    .map_err(|e| DataError::LabelError { path: path.clone(), reason: e.to_string() })?
            }
        };
        samples.push(ImageSample { id: relative_id(&rel), path, label });
    }
    if samples.is_empty() {
        return Err(DataError::NoSamples(root.to_path_buf()));
    }
    samples.par_iter().try_for_each(|s| decode(&s.path).map(drop))?;
    DatasetManifest::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(4, 4, Rgb([10, 20, 30])).save(path).unwrap();
    }

    #[test]
    fn labels_from_subdirectories_in_path_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["infertile/b.png", "fertile/z.png", "fertile/a.png"] {
            write_png(&dir.path().join(name));
        }
        let m = ingest_directory(dir.path(), Labeling::BySubdirectory).unwrap();
        let ids: Vec<_> = m.samples().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["fertile/a", "fertile/z", "infertile/b"]);
        assert_eq!(m.class_counts()[&Label::Fertile], 2);
        assert_eq!(m.class_counts()[&Label::Infertile], 1);
        assert!(!m.is_split());
    }

    #[test]
    fn empty_directory_has_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest_directory(dir.path(), Labeling::BySubdirectory), Err(DataError::NoSamples(_))));
    }

    #[test]
    fn stray_file_is_a_label_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("fertile/a.png"));
        write_png(&dir.path().join("stray.png"));
        match ingest_directory(dir.path(), Labeling::BySubdirectory) {
            Err(DataError::LabelError { path, .. }) => assert!(path.ends_with("stray.png")),
            other => panic!("expected LabelError, got {other:?}"),
        }
        write_png(&dir.path().join("maybe/x.png"));
        fs::remove_file(dir.path().join("stray.png")).unwrap();
        assert!(matches!(ingest_directory(dir.path(), Labeling::BySubdirectory), Err(DataError::LabelError { .. })));
    }

    #[test]
    fn undecodable_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("fertile")).unwrap();
        fs::write(dir.path().join("fertile/broken.png"), b"not a png").unwrap();
        assert!(matches!(ingest_directory(dir.path(), Labeling::BySubdirectory), Err(DataError::DecodeError { .. })));
    }

    #[test]
    fn labels_from_table() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("imgs/1.png"));
        write_png(&dir.path().join("imgs/2.png"));
        fs::write(dir.path().join(LABELS_FILE), "path,label\nimgs/1.png,fertile\nimgs/2.png,Infertile\n").unwrap();
        let m = ingest_directory(dir.path(), Labeling::ByManifestFile).unwrap();
        assert_eq!(m.sample("imgs/1").unwrap().label, Label::Fertile);
        assert_eq!(m.sample("imgs/2").unwrap().label, Label::Infertile);

        write_png(&dir.path().join("imgs/3.png"));
        assert!(matches!(ingest_directory(dir.path(), Labeling::ByManifestFile), Err(DataError::LabelError { .. })));
    }
}
