use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::volume_io::CohortManifest;

/// Age bins used for stratification.
pub const STRATA: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FoldError {
    #[error("{subjects} subjects cannot fill {folds} folds")]
    TooFewSubjects { subjects: usize, folds: usize },
    #[error("fold count must be at least 2")]
    FoldCount,
}

/// Fold index of every subject, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Sorts subjects by age, cuts the order into five contiguous bins,
/// shuffles each bin with its own seeded stream and deals the concatenation
/// round-robin. Fold sizes therefore differ by at most one.
pub fn assign_folds(ages: &[f64], k: usize, seed: u64) -> Result<FoldAssignment, FoldError> {
    let n = ages.len();
    if k < 2 {
        return Err(FoldError::FoldCount);
    }
    if n < k {
        return Err(FoldError::TooFewSubjects {
            subjects: n,
            folds: k,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ages[a].total_cmp(&ages[b]).then(a.cmp(&b)));
    let mut dealt = Vec::with_capacity(n);
    for bin in 0..STRATA {
        let (lo, hi) = (bin * n / STRATA, (bin + 1) * n / STRATA);
        let mut members = order[lo..hi].to_vec();
        members.shuffle(&mut rng::stream(seed, rng::tag("folds") ^ bin as u64));
        dealt.extend(members);
    }
    let mut fold_of = vec![0; n];
    for (pos, &i) in dealt.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k, seed })
}

pub fn make_folds(
    manifest: &CohortManifest,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, FoldError> {
    assign_folds(&manifest.ages(), k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::SubjectRecord;

    fn cohort(n: usize) -> CohortManifest {
        CohortManifest {
            records: (0..n)
                .map(|i| SubjectRecord {
                    subject_id: format!("sub-{i:04}"),
                    age_years: 8.0 + (i * 7919 % 1000) as f64 / 1000.0 * 14.0,
                    volume_path: String::new(),
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn balanced_sizes_for_983() {
        let f = make_folds(&cohort(983), 5, 1).unwrap();
        let mut s = f.sizes();
        s.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(s, vec![197, 197, 197, 196, 196]);
    }

    #[test]
    fn five_subjects_one_each() {
        assert_eq!(make_folds(&cohort(5), 5, 3).unwrap().sizes(), vec![1; 5]);
        assert!(make_folds(&cohort(4), 5, 3).is_err());
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let c = cohort(100);
        assert_eq!(make_folds(&c, 5, 7).unwrap(), make_folds(&c, 5, 7).unwrap());
        assert_ne!(make_folds(&c, 5, 7).unwrap(), make_folds(&c, 5, 8).unwrap());
    }

    #[test]
    fn each_fold_spans_the_age_range() {
        let c = cohort(200);
        let ages = c.ages();
        let f = make_folds(&c, 5, 2).unwrap();
        for fold in 0..5 {
            let t: Vec<f64> = f.test_indices(fold).iter().map(|&i| ages[i]).collect();
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            assert!((mean - 15.0).abs() < 1.5, "fold {fold} mean {mean}");
        }
    }

    #[test]
    fn train_and_test_partition() {
        let f = make_folds(&cohort(23), 5, 0).unwrap();
        for fold in 0..5 {
            let mut all = f.train_indices(fold);
            all.extend(f.test_indices(fold));
            all.sort_unstable();
            assert_eq!(all, (0..23).collect::<Vec<_>>());
        }
    }
}
