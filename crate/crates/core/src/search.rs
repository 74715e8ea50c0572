//! Seeded random search over learning rate, filter count and window sizes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{fold_plans, fold_splits, run_protocol, Prepared};
use crate::metrics::{compute_metrics, ConfusionMatrix};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: Vec<f64>,
    pub filters: Vec<usize>,
    /// Window sizes; each draw takes a non-empty subset.
    pub windows: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: vec![1e-2, 1e-3, 1e-4],
            filters: vec![64, 100, 128],
            windows: vec![2, 3, 4, 5],
        }
    }
}

impl SearchSpace {
    pub fn size(&self) -> usize {
        self.lr.len() * self.filters.len() * ((1usize << self.windows.len()) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub lr: f64,
    pub filters: usize,
    pub windows: Vec<usize>,
}

impl Draw {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.adam.lr = self.lr;
        c.word.filters = self.filters;
        c.word.windows = self.windows.clone();
        c
    }
}

/// The first `n` draws for `seed`. Longer sequences extend shorter ones.
pub fn draws(space: &SearchSpace, n: usize, seed: u64) -> Vec<Draw> {
    let mut rng = rng_for(seed, "search");
    let k = space.windows.len();
    (0..n)
        .map(|_| {
            let lr = *space.lr.choose(&mut rng).unwrap();
            let filters = *space.filters.choose(&mut rng).unwrap();
            let mask: u32 = rng.gen_range(1..(1u32 << k));
            let windows = (0..k)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| space.windows[i])
                .collect();
            Draw { lr, filters, windows }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub draw: Draw,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    /// Index into `trials`; ties go to the earlier draw.
    pub best: usize,
}

impl SearchResult {
    pub fn best(&self) -> &Trial {
        &self.trials[self.best]
    }
}

pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut objective: impl FnMut(&Draw) -> Result<f64>,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    if space.lr.is_empty() || space.filters.is_empty() || space.windows.is_empty() {
        return Err(Error::Config("search space has an empty dimension".into()));
    }
    let mut trials = Vec::with_capacity(budget);
    let mut best = 0;
    for draw in draws(space, budget, seed) {
        let score = objective(&draw)?;
        if !score.is_finite() {
            return Err(Error::Numerical(format!(
                "search objective returned {score} for {draw:?}"
            )));
        }
        if score > trials.get(best).map_or(f64::NEG_INFINITY, |t: &Trial| t.score) {
            best = trials.len();
        }
        trials.push(Trial { draw, score });
    }
    Ok(SearchResult { trials, best })
}

/// Mean macro-F over the reported tasks, trained on the fold-0 training
/// portion and scored on its validation slice.
pub fn validation_objective(cfg: &RunConfig, prep: &Prepared) -> Result<f64> {
    let plans = fold_plans(cfg, prep)?;
    let mut splits = fold_splits(cfg, prep, &plans, 0);
    for s in &mut splits {
        s.eval = s.val.clone();
    }
    let out = run_protocol(cfg, prep, &splits, derive_seed(cfg.seed, "search/trial"), false)?;
    let scores: Vec<f64> = out
        .confusions
        .iter()
        .flatten()
        .map(|cm: &ConfusionMatrix| compute_metrics(cm).map(|m| m.macro_f1))
        .collect::<Result<_>>()?;
    if scores.is_empty() {
        return Err(Error::Data("no validation examples to score the search on".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Random search for `cfg`, with the network rebuilt for every draw. The
/// prepared data is shared; only the net shape and learning rate change.
pub fn search_config(cfg: &RunConfig, prep: &Prepared, space: &SearchSpace) -> Result<SearchResult> {
    random_search(space, cfg.search_budget, cfg.seed, |d| {
        let c = d.apply(cfg);
        let mut p = prep.clone();
        p.net = c.net_config(prep.net.seq_len.max(d.windows.iter().copied().max().unwrap_or(1)));
        validation_objective(&c, &p)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_one_returns_its_draw() {
        let space = SearchSpace::default();
        let r = random_search(&space, 1, 9, |_| Ok(0.3)).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best().draw, draws(&space, 1, 9)[0]);
    }

    #[test]
    fn draws_are_seeded_prefixes() {
        let space = SearchSpace::default();
        let long = draws(&space, 20, 4);
        assert_eq!(draws(&space, 20, 4), long);
        assert_eq!(draws(&space, 7, 4), long[..7]);
        assert_ne!(draws(&space, 20, 5), long);
        for d in &long {
            assert!(!d.windows.is_empty());
            assert!(d.windows.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn ties_go_to_the_earlier_draw() {
        let r = random_search(&SearchSpace::default(), 5, 1, |_| Ok(0.5)).unwrap();
        assert_eq!(r.best, 0);
        let mut i = 0;
        let r = random_search(&SearchSpace::default(), 5, 1, |_| {
            i += 1;
            Ok(if i >= 3 { 0.9 } else { 0.1 })
        })
        .unwrap();
        assert_eq!(r.best, 2);
    }

    #[test]
    fn best_is_monotone_in_budget() {
        let space = SearchSpace::default();
        let score = |d: &Draw| Ok(d.lr.log10() * -0.1 + d.filters as f64 / 1000.0 + d.windows.len() as f64 * 0.01);
        let mut prev = f64::NEG_INFINITY;
        for n in 1..=15 {
            let best = random_search(&space, n, 12, score).unwrap().best().score;
            assert!(best >= prev);
            prev = best;
        }
    }

    #[test]
    fn space_size() {
        assert_eq!(SearchSpace::default().size(), 3 * 3 * 15);
    }
}
