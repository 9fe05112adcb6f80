use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, Result, Split};
use crate::label::Label;
use crate::seed;

/// Assignment of every training id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub stratified: bool,
}

impl FoldPlan {
    /// Ids validated on in fold `i`, in id order.
    pub fn fold_ids(&self, i: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f == i).map(|(id, _)| id.clone()).collect()
    }

    /// Ids trained on when fold `i` is held out.
    pub fn training_ids(&self, i: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f != i).map(|(id, _)| id.clone()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Partitions ids (already in sample order) into shuffle groups.
fn groups<'a>(
    manifest: &'a DatasetManifest,
    ids: impl Iterator<Item = &'a str>,
    stratified: bool,
) -> Vec<Vec<&'a str>> {
    let ids: Vec<&str> = ids.collect();
    if !stratified {
        return vec![ids];
    }
    Label::ALL
        .iter()
        .map(|&l| ids.iter().copied().filter(|id| manifest.sample(id).map(|s| s.label) == Some(l)).collect())
        .collect()
}

/// Seeded train/test split. With stratification each class contributes
/// `round(n_class * train_fraction)` training samples.
pub fn split_train_test(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut rng = seed::rng(seed);
    let mut split = BTreeMap::new();
    for mut group in groups(manifest, manifest.samples().iter().map(|s| s.id.as_str()), stratified) {
        group.shuffle(&mut rng);
        let n_train = (group.len() as f64 * train_fraction).round() as usize;
        for (i, id) in group.into_iter().enumerate() {
            split.insert(id.to_string(), if i < n_train { Split::Train } else { Split::Test });
        }
    }
    let n_train = split.values().filter(|&&s| s == Split::Train).count();
    if n_train == 0 || n_train == split.len() {
        return Err(DataError::InvalidSplit(format!(
            "fraction {train_fraction} of {} samples leaves an empty train or test set",
            split.len()
        )));
    }
    manifest.clone().with_assignments(split, BTreeMap::new(), seed)
}

/// Seeded k-fold plan over the training split. Shuffled groups are
/// concatenated and dealt round-robin, so fold sizes (and, when stratified,
/// per-class fold sizes) differ by at most one.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan> {
    let n_train = manifest.ids_in(Split::Train).count();
    if n_train == 0 {
        return Err(DataError::InvalidSplit("manifest has no training split".into()));
    }
    if k < 2 || k > n_train {
        return Err(DataError::InvalidFoldCount { k, train: n_train });
    }
    let mut rng = seed::rng(seed);
    let mut order = Vec::with_capacity(n_train);
    for mut group in groups(manifest, manifest.ids_in(Split::Train), stratified) {
        group.shuffle(&mut rng);
        order.extend(group);
    }
    let assignments = order.into_iter().enumerate().map(|(i, id)| (id.to_string(), i % k)).collect();
    Ok(FoldPlan { k, assignments, stratified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::manifest;

    #[test]
    fn eighty_percent_of_two_hundred() {
        let m = split_train_test(&manifest(100, 100), 0.8, 1, false).unwrap();
        assert_eq!(m.ids_in(Split::Train).count(), 160);
        assert_eq!(m.ids_in(Split::Test).count(), 40);
    }

    #[test]
    fn stratified_test_set_is_balanced() {
        let m = split_train_test(&manifest(100, 100), 0.8, 3, true).unwrap();
        let test: Vec<_> = m.ids_in(Split::Test).collect();
        let fertile = test.iter().filter(|id| id.starts_with("fertile")).count();
        assert_eq!((fertile, test.len() - fertile), (20, 20));
    }

    #[test]
    fn split_is_deterministic() {
        let base = manifest(30, 20);
        let a = split_train_test(&base, 0.8, 9, true).unwrap();
        let b = split_train_test(&base, 0.8, 9, true).unwrap();
        assert_eq!(a.split_map(), b.split_map());
        let c = split_train_test(&base, 0.8, 10, true).unwrap();
        assert_ne!(a.split_map(), c.split_map());
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let base = manifest(2, 1);
        assert!(matches!(split_train_test(&base, 0.0, 0, false), Err(DataError::InvalidSplit(_))));
        assert!(matches!(split_train_test(&base, 1.0, 0, false), Err(DataError::InvalidSplit(_))));
        assert!(matches!(split_train_test(&base, 0.01, 0, false), Err(DataError::InvalidSplit(_))));
    }

    fn all_train(n: usize) -> DatasetManifest {
        let m = manifest(n / 2, n - n / 2);
        let split = m.samples().iter().map(|s| (s.id.clone(), Split::Train)).collect();
        m.with_assignments(split, BTreeMap::new(), 0).unwrap()
    }

    #[test]
    fn five_folds_of_forty() {
        let plan = make_folds(&all_train(200), 5, 4, true).unwrap();
        assert_eq!(plan.fold_sizes(), vec![40; 5]);
    }

    #[test]
    fn folds_partition_training_ids() {
        let m = split_train_test(&manifest(37, 23), 0.8, 2, true).unwrap();
        let plan = make_folds(&m, 4, 2, true).unwrap();
        let mut union: Vec<String> = (0..4).flat_map(|i| plan.fold_ids(i)).collect();
        let n = union.len();
        union.sort();
        union.dedup();
        assert_eq!(union.len(), n, "folds overlap");
        let mut train: Vec<String> = m.ids_in(Split::Train).map(str::to_string).collect();
        train.sort();
        assert_eq!(union, train);
    }

    #[test]
    fn fold_count_bounds() {
        let m = all_train(10);
        assert!(matches!(make_folds(&m, 1, 0, true), Err(DataError::InvalidFoldCount { k: 1, .. })));
        assert!(matches!(make_folds(&m, 11, 0, true), Err(DataError::InvalidFoldCount { k: 11, .. })));
        assert!(make_folds(&m, 10, 0, true).is_ok());
    }

    #[test]
    fn folds_attach_to_manifest() {
        let m = split_train_test(&manifest(10, 10), 0.8, 1, true).unwrap();
        let plan = make_folds(&m, 4, 1, true).unwrap();
        let with = m.clone().with_folds(&plan).unwrap();
        for id in with.ids_in(Split::Test) {
            assert_eq!(with.fold_of(id), None);
        }
        assert_eq!(with.fold_plan(true).unwrap(), plan);
        let other = make_folds(&split_train_test(&manifest(10, 10), 0.8, 2, true).unwrap(), 4, 1, true).unwrap();
        assert!(m.with_folds(&other).is_err());
    }
}
