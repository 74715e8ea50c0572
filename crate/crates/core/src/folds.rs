//! Stratified k-fold partitions and validation slices.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold of each example.
    pub assignment: Vec<usize>,
    /// Classes with fewer than `k` examples; some folds lack them.
    pub sparse_classes: Vec<String>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

fn by_class(labels: &[usize], indices: impl Iterator<Item = usize>, classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); classes];
    for i in indices {
        groups[labels[i]].push(i);
    }
    groups
}

/// Shuffles each class with its own seeded stream and deals it round-robin
/// across folds. The `n mod k` leftover examples of every class are placed
/// by [`remainder_folds`] so that fold sizes differ by at most one and each
/// fold's class proportion stays within `1 / fold size` of the global one.
pub fn stratified_kfold(labels: &[usize], class_names: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let classes = class_names.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label index {bad} outside {classes} classes")));
    }
    let mut groups = by_class(labels, 0..labels.len(), classes);
    let sparse: Vec<usize> = (0..classes).filter(|&c| groups[c].len() < k).collect();
    if sparse.len() == classes {
        let detail: Vec<String> = sparse
            .iter()
            .map(|&c| format!("'{}' has {}", class_names[c], groups[c].len()))
            .collect();
        return Err(Error::Data(format!(
            "no class has k = {k} examples ({})",
            detail.join(", ")
        )));
    }
    let counts: Vec<usize> = groups.iter().map(Vec::len).collect();
    let extras = remainder_folds(&counts, k);
    let mut assignment = vec![0; labels.len()];
    for (c, g) in groups.iter_mut().enumerate() {
        g.shuffle(&mut rng_for(seed, &format!("kfold/class{c}")));
        let full = g.len() / k * k;
        for (j, &i) in g.iter().enumerate() {
            assignment[i] = if j < full { j % k } else { extras[c][j - full] };
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
        sparse_classes: sparse.iter().map(|&c| class_names[c].clone()).collect(),
    })
}

/// Folds receiving the `counts[c] mod k` leftover examples of each class.
///
/// With `R` leftovers in total, `R mod k` "big" folds take one more than the
/// rest. A class whose leftover lands in a small fold drifts above its share
/// by `(1 - r/k) + p·(R mod k)/k`, and one that misses a big fold drifts below
/// by `r/k + p·(1 - (R mod k)/k)` (`r` its leftover count, `p` its global
/// proportion, both in units of one example). Classes for which the first
/// would exceed one example place leftovers in big folds only; classes for
/// which the second would, cover every big fold. The placement itself is a
/// bipartite matching of leftovers to fold capacity.
pub fn remainder_folds(counts: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n: usize = counts.iter().sum();
    let rem: Vec<usize> = counts.iter().map(|&c| c % k).collect();
    let total: usize = rem.iter().sum();
    let big = total % k;
    let room: Vec<usize> = (0..k).map(|f| total / k + usize::from(f < big)).collect();
    let (kf, b) = (k as f64, big as f64);
    let mut forced = vec![Vec::new(); counts.len()];
    let mut allowed = vec![vec![true; k]; counts.len()];
    for c in 0..counts.len() {
        let (r, p) = (rem[c] as f64, counts[c] as f64 / n.max(1) as f64);
        if big == 0 || rem[c] == 0 {
            continue;
        }
        if r / kf + p * (1.0 - b / kf) > 1.0 {
            forced[c] = (0..big).collect();
        } else if (1.0 - r / kf) + p * b / kf > 1.0 {
            allowed[c][big..].iter_mut().for_each(|a| *a = false);
        }
    }
    match_leftovers(&rem, &room, &forced, &allowed)
        .or_else(|| {
            match_leftovers(
                &rem,
                &room,
                &vec![Vec::new(); counts.len()],
                &vec![vec![true; k]; counts.len()],
            )
        })
        .expect("leftovers always fit balanced folds")
}

fn match_leftovers(
    rem: &[usize],
    room: &[usize],
    forced: &[Vec<usize>],
    allowed: &[Vec<bool>],
) -> Option<Vec<Vec<usize>>> {
    let (classes, k) = (rem.len(), room.len());
    let mut x = vec![vec![false; k]; classes];
    let mut load = vec![0usize; k];
    for (c, fs) in forced.iter().enumerate() {
        for &f in fs {
            x[c][f] = true;
            load[f] += 1;
        }
    }
    if (0..k).any(|f| load[f] > room[f]) {
        return None;
    }
    for c in 0..classes {
        let have = forced[c].len();
        for _ in have..rem[c] {
            if !augment(c, &mut x, &mut load, room, forced, allowed) {
                return None;
            }
        }
    }
    Some(x.iter().map(|row| (0..k).filter(|&f| row[f]).collect()).collect())
}

/// One more leftover of class `start`, possibly moving other classes'
/// leftovers to make room. Breadth-first, so the result is deterministic.
fn augment(
    start: usize,
    x: &mut [Vec<bool>],
    load: &mut [usize],
    room: &[usize],
    forced: &[Vec<usize>],
    allowed: &[Vec<bool>],
) -> bool {
    let (classes, k) = (x.len(), room.len());
    // parent of fold f: the class that would move into it
    let mut fold_parent: Vec<Option<usize>> = vec![None; k];
    // parent of class c (other than start): the fold it would leave
    let mut class_parent: Vec<Option<usize>> = vec![None; classes];
    let mut seen_class = vec![false; classes];
    seen_class[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        for f in 0..k {
            if x[c][f] || !allowed[c][f] || fold_parent[f].is_some() {
                continue;
            }
            fold_parent[f] = Some(c);
            if load[f] < room[f] {
                // walk back: c enters f, and each displaced class leaves its fold
                let mut fold = f;
                let mut class = c;
                load[f] += 1;
                loop {
                    x[class][fold] = true;
                    match class_parent[class] {
                        None => return true,
                        Some(left) => {
                            x[class][left] = false;
                            fold = left;
                            class = fold_parent[left].expect("visited fold has a parent");
                        }
                    }
                }
            }
            for c2 in 0..classes {
                if x[c2][f] && !seen_class[c2] && !forced[c2].contains(&f) {
                    seen_class[c2] = true;
                    class_parent[c2] = Some(f);
                    queue.push_back(c2);
                }
            }
        }
    }
    false
}

/// Splits `indices` into (train, validation) with about `fraction` of each
/// class held out. Classes with a single example stay in training.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, mut g) in by_class(labels, indices.iter().copied(), classes)
        .into_iter()
        .enumerate()
    {
        g.shuffle(&mut rng_for(seed, &format!("holdout/class{c}")));
        let take = if g.len() < 2 {
            0
        } else {
            ((g.len() as f64 * fraction).round() as usize).clamp(1, g.len() - 1)
        };
        val.extend_from_slice(&g[..take]);
        train.extend_from_slice(&g[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn ten_examples_six_four() {
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let plan = stratified_kfold(&labels, &names(2), 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        for f in 0..5 {
            let minority = plan.test_indices(f).iter().filter(|&&i| labels[i] == 1).count();
            assert!(minority <= 1, "fold {f}");
        }
    }

    #[test]
    fn sparse_classes_warn_or_reject() {
        let labels = [0, 0, 0, 0, 0, 1, 1];
        let plan = stratified_kfold(&labels, &["none".into(), "hate".into()], 5, 0).unwrap();
        assert_eq!(plan.sparse_classes, vec!["hate".to_string()]);
        let err = stratified_kfold(&[0, 0, 1, 1], &["none".into(), "hate".into()], 5, 0).unwrap_err();
        assert!(err.to_string().contains("'hate' has 2"), "{err}");
    }

    #[test]
    fn same_seed_same_plan() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = stratified_kfold(&labels, &names(3), 5, 11).unwrap();
        let b = stratified_kfold(&labels, &names(3), 5, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, stratified_kfold(&labels, &names(3), 5, 12).unwrap());
    }

    #[test]
    fn holdout_partitions() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let idx: Vec<usize> = (0..40).collect();
        let (t, v) = stratified_holdout(&idx, &labels, 2, 0.1, 1);
        assert_eq!(v.len(), 4);
        assert_eq!(t.len() + v.len(), 40);
        assert_eq!(v.iter().filter(|&&i| labels[i] == 0).count(), 2);
    }

    fn check_plan(counts: &[usize], k: usize, seed: u64) -> std::result::Result<(), String> {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        let plan = stratified_kfold(&labels, &names(counts.len()), k, seed).map_err(|e| e.to_string())?;
        let sizes = plan.fold_sizes();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        if hi - lo > 1 {
            return Err(format!("fold sizes {sizes:?}"));
        }
        let n = labels.len() as f64;
        for f in 0..k {
            let idx = plan.test_indices(f);
            for (c, &nc) in counts.iter().enumerate() {
                let got = idx.iter().filter(|&&i| labels[i] == c).count();
                if got * k + k <= nc || got * k >= nc + k {
                    return Err(format!("fold {f} class {c}: {got} of {nc}"));
                }
                let dev = (got as f64 / idx.len() as f64 - nc as f64 / n).abs();
                if dev > 1.0 / idx.len() as f64 + 1e-12 {
                    return Err(format!("fold {f} class {c}: deviation {dev} over 1/{}", idx.len()));
                }
            }
        }
        Ok(())
    }

    #[test]
    fn d1_counts() {
        let mut labels = vec![0usize; 1097];
        labels.extend(std::iter::repeat_n(1, 8571));
        let plan = stratified_kfold(&labels, &names(2), 5, 1).unwrap();
        for f in 0..5 {
            let n = plan.test_indices(f).iter().filter(|&&i| labels[i] == 0).count();
            assert!(n == 219 || n == 220, "fold {f}: {n}");
        }
        check_plan(&[1097, 8571], 5, 1).unwrap();
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(3000))]
        #[test]
        fn folds_stay_proportional(
            k in 2usize..12,
            counts in proptest::collection::vec(1usize..200, 2..7),
            seed in 0u64..1000,
        ) {
            let mut counts = counts;
            counts[0] = counts[0].max(k);
            if let Err(e) = check_plan(&counts, k, seed) {
                return Err(proptest::test_runner::TestCaseError::fail(format!("{counts:?} k={k}: {e}")));
            }
        }
    }
}
