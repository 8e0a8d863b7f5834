use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::Segment;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const MIN_SPLIT_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Relative sizes of train, validation and test.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [8.0, 1.0, 1.0],
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn check(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("split ratios {:?} must be positive", self.ratios)));
        }
        Ok(())
    }

    fn normalized(&self) -> [f64; 3] {
        let total: f64 = self.ratios.iter().sum();
        self.ratios.map(|r| r / total)
    }
}

/// Indices into the split dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

fn label_of(segment: &Segment) -> Result<usize> {
    segment
        .label
        .ok_or_else(|| Error::Dataset(format!("segment of run `{}` has no label", segment.run_id)))
}

/// Runs of each stratum in first-appearance order; each run is the list of
/// its segment indices.
fn group_runs(dataset: &[Segment], stratified: bool) -> Result<BTreeMap<usize, Vec<Vec<usize>>>> {
    let mut run_slot: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut strata: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (i, seg) in dataset.iter().enumerate() {
        let label = label_of(seg)?;
        let stratum = if stratified { label } else { 0 };
        match run_slot.get(seg.run_id.as_str()) {
            Some(&(s, r)) => {
                if s != stratum {
                    return Err(Error::Dataset(format!("run `{}` mixes labels", seg.run_id)));
                }
                strata.get_mut(&s).expect("stratum exists")[r].push(i);
            }
            None => {
                let runs = strata.entry(stratum).or_default();
                run_slot.insert(&seg.run_id, (stratum, runs.len()));
                runs.push(vec![i]);
            }
        }
    }
    Ok(strata)
}

/// Splits into `[train, val, test]` counts for each stratum so that every
/// stratum's counts sum to its size and the column totals follow the
/// largest-remainder apportionment of the grand total.
fn apportion(sizes: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let grand: usize = sizes.iter().sum();
    let mut target = [0usize; 3];
    let quotas = ratios.map(|r| r * grand as f64);
    for (t, q) in target.iter_mut().zip(quotas) {
        *t = q.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = grand - target.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        target[k] += 1;
    }

    let floors: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| ratios.map(|r| (r * n as f64).floor() as usize))
        .collect();
    // units each column still needs once every stratum has its floors
    let mut need = [0isize; 3];
    for k in 0..3 {
        need[k] = target[k] as isize - floors.iter().map(|f| f[k] as isize).sum::<isize>();
    }
    let mut out = Vec::with_capacity(sizes.len());
    for (&n, mut counts) in sizes.iter().zip(floors) {
        let rem = ratios.map(|r| r * n as f64 - (r * n as f64).floor());
        let mut extra = [false; 3];
        for _ in 0..n - counts.iter().sum::<usize>() {
            let k = (0..3)
                .filter(|&k| !extra[k])
                .max_by(|&a, &b| {
                    (need[a] > 0)
                        .cmp(&(need[b] > 0))
                        .then(rem[a].total_cmp(&rem[b]))
                        .then(need[a].cmp(&need[b]))
                        .then(b.cmp(&a))
                })
                .expect("a stratum has fewer leftover units than splits");
            extra[k] = true;
            counts[k] += 1;
            need[k] -= 1;
        }
        out.push(counts);
    }
    out
}

/// Assigns whole runs to train, validation and test. Within each class the
/// runs are shuffled with the split seed and cut by apportioned counts; a
/// class with at least three runs gets one in every split.
pub fn split_indices(dataset: &[Segment], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.check()?;
    if dataset.len() < MIN_SPLIT_SIZE {
        return Err(Error::TooSmall(dataset.len()));
    }
    let strata = group_runs(dataset, spec.stratified)?;
    let sizes: Vec<usize> = strata.values().map(|r| r.len()).collect();
    let counts = apportion(&sizes, spec.normalized());
    let mut out = SplitIndices::default();
    for ((&stratum, runs), mut c) in strata.iter().zip(counts) {
        if spec.stratified && runs.len() < 3 {
            return Err(Error::ClassUnsplittable(stratum));
        }
        for k in 0..3 {
            if c[k] == 0 && runs.len() >= 3 {
                let donor = (0..3).max_by_key(|&j| (c[j], std::cmp::Reverse(j))).expect("three splits");
                c[donor] -= 1;
                c[k] += 1;
            }
        }
        let mut order: Vec<usize> = (0..runs.len()).collect();
        order.shuffle(&mut stream(spec.seed, "split", &[stratum as u64]));
        let mut cursor = order.into_iter();
        for (k, dst) in [&mut out.train, &mut out.val, &mut out.test].into_iter().enumerate() {
            for r in cursor.by_ref().take(c[k]) {
                dst.extend(&runs[r]);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn split_dataset(dataset: &[Segment], spec: &SplitSpec) -> Result<Split> {
    let idx = split_indices(dataset, spec)?;
    let pick = |v: &[usize]| v.iter().map(|&i| dataset[i].clone()).collect();
    Ok(Split {
        train: pick(&idx.train),
        val: pick(&idx.val),
        test: pick(&idx.test),
    })
}

/// Indices of the labeled subset. Samples are ranked once per seed (one
/// sample of every class first, then the classes interleaved in proportion
/// to their size) and the first `max(round(ratio * n), classes)` ranks are
/// kept, so subsets for smaller ratios nest inside larger ones.
pub fn subsample_indices(train: &[Segment], ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, seg) in train.iter().enumerate() {
        by_class.entry(label_of(seg)?).or_default().push(i);
    }
    for (&c, members) in by_class.iter_mut() {
        members.shuffle(&mut stream(seed, "subsample", &[c as u64]));
    }
    let mut ranking: Vec<usize> = by_class.values().map(|m| m[0]).collect();
    let mut taken: Vec<usize> = vec![1; by_class.len()];
    let sizes: Vec<usize> = by_class.values().map(|m| m.len()).collect();
    let members: Vec<&Vec<usize>> = by_class.values().collect();
    while ranking.len() < train.len() {
        // class furthest below its proportional share of the next slot
        let c = (0..sizes.len())
            .filter(|&c| taken[c] < sizes[c])
            .min_by(|&a, &b| {
                let ka = (taken[a] as f64 + 0.5) / sizes[a] as f64;
                let kb = (taken[b] as f64 + 0.5) / sizes[b] as f64;
                ka.total_cmp(&kb).then(a.cmp(&b))
            })
            .expect("samples remain");
        ranking.push(members[c][taken[c]]);
        taken[c] += 1;
    }
    let keep = ((ratio * train.len() as f64).round() as usize).max(sizes.len());
    let mut out: Vec<usize> = ranking.into_iter().take(keep).collect();
    out.sort_unstable();
    Ok(out)
}

pub fn subsample_labels(train: &[Segment], ratio: f64, seed: u64) -> Result<Vec<Segment>> {
    Ok(subsample_indices(train, ratio, seed)?
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DomainTag, Signals};
    use proptest::prelude::*;

    pub(crate) fn fake(labels: &[usize], runs: &[usize]) -> Vec<Segment> {
        labels
            .iter()
            .zip(runs)
            .map(|(&l, &r)| Segment {
                signals: Signals::new(),
                label: Some(l),
                domain: DomainTag::SynthA,
                run_id: format!("run{r}"),
                start_time_s: 0.0,
            })
            .collect()
    }

    fn uniform(n: usize, k: usize) -> Vec<Segment> {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let runs: Vec<usize> = (0..n).collect();
        fake(&labels, &runs)
    }

    #[test]
    fn hundred_samples_split_eighty_ten_ten() {
        let idx = split_indices(&uniform(100, 4), &SplitSpec::default()).unwrap();
        assert_eq!((idx.train.len(), idx.val.len(), idx.test.len()), (80, 10, 10));
    }

    #[test]
    fn small_inputs_are_rejected() {
        assert_eq!(split_indices(&uniform(9, 3), &SplitSpec::default()).unwrap_err().code(), "TOO_SMALL");
        let mut data = uniform(20, 2);
        data.push(fake(&[2], &[99]).remove(0));
        assert_eq!(split_indices(&data, &SplitSpec::default()).unwrap_err().code(), "CLASS_UNSPLITTABLE");
    }

    #[test]
    fn runs_never_straddle_splits() {
        let labels: Vec<usize> = (0..120).map(|i| (i / 10) % 4).collect();
        let runs: Vec<usize> = (0..120).map(|i| i / 5).collect();
        let data = fake(&labels, &runs);
        let idx = split_indices(&data, &SplitSpec::default()).unwrap();
        let run_of = |v: &[usize]| v.iter().map(|&i| data[i].run_id.clone()).collect::<std::collections::BTreeSet<_>>();
        let (a, b, c) = (run_of(&idx.train), run_of(&idx.val), run_of(&idx.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        for part in [&idx.train, &idx.val, &idx.test] {
            let classes: std::collections::BTreeSet<_> = part.iter().map(|&i| data[i].label).collect();
            assert_eq!(classes.len(), 4);
        }
    }

    #[test]
    fn tiny_subset_keeps_one_per_class() {
        let data = uniform(400, 4);
        let sub = subsample_indices(&data, 0.01, 3).unwrap();
        assert_eq!(sub.len(), 4);
        let classes: std::collections::BTreeSet<_> = sub.iter().map(|&i| data[i].label).collect();
        assert_eq!(classes.len(), 4);
        assert_eq!(subsample_indices(&data, 1.0, 3).unwrap(), (0..400).collect::<Vec<_>>());
        assert_eq!(subsample_indices(&data, 0.0, 3).unwrap_err().code(), "RATIO_OUT_OF_RANGE");
        assert_eq!(subsample_indices(&data, 1.5, 3).unwrap_err().code(), "RATIO_OUT_OF_RANGE");
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(
            labels in proptest::collection::vec(0usize..4, 12..150),
            run_len in 1usize..6,
            seed in any::<u64>(),
        ) {
            let runs: Vec<usize> = (0..labels.len()).map(|i| i / run_len).collect();
            // a run carries a single label
            let labels: Vec<usize> = runs.iter().map(|&r| labels[r * run_len]).collect();
            let data = fake(&labels, &runs);
            let spec = SplitSpec { seed, stratified: false, ..SplitSpec::default() };
            let idx = split_indices(&data, &spec).unwrap();
            let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
            prop_assert_eq!(split_indices(&data, &spec).unwrap(), idx);
        }

        #[test]
        fn label_subsets_nest(
            labels in proptest::collection::vec(0usize..5, 5..300),
            seed in any::<u64>(),
        ) {
            let runs: Vec<usize> = (0..labels.len()).collect();
            let data = fake(&labels, &runs);
            let classes = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
            let mut previous: Option<Vec<usize>> = None;
            for ratio in [0.01, 0.1, 0.5, 1.0] {
                let sub = subsample_indices(&data, ratio, seed).unwrap();
                let expected = ((ratio * data.len() as f64).round() as usize).max(classes);
                prop_assert_eq!(sub.len(), expected);
                if let Some(prev) = &previous {
                    prop_assert!(prev.iter().all(|i| sub.binary_search(i).is_ok()));
                }
                previous = Some(sub);
            }
        }
    }
}
