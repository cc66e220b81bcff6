//! Train/val/test partitioning with class-balance verification.
//!
//! Balance is measured as the Jensen–Shannon divergence (natural log) between
//! pixel-level class distributions of the training split and each held-out
//! split.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMask;
use crate::util::stable_hash;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassHistogram {
    counts: Vec<u64>,
}

impl ClassHistogram {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![0; classes],
        }
    }

    /// Pixel counts of `mask`; ignore-label pixels are skipped and labels
    /// outside `[0, classes)` are an error.
    pub fn from_mask(mask: &LabelMask, classes: usize, ignore_label: u16) -> Result<Self> {
        let mut counts = vec![0; classes];
        for &l in mask.data() {
            if l == ignore_label {
                continue;
            }
            let slot = counts
                .get_mut(usize::from(l))
                .ok_or(Error::LabelOutOfRange { label: l, classes })?;
            *slot += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &ClassHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn normalize(&self) -> Result<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("empty class histogram"));
        }
        Ok(self
            .counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect())
    }
}

/// Jensen–Shannon divergence in nats; symmetric and within `[0, ln 2]`.
pub fn jsd(p: &ClassHistogram, q: &ClassHistogram) -> Result<f64> {
    if p.classes() != q.classes() {
        return Err(Error::Shape(format!(
            "histograms over {} and {} classes",
            p.classes(),
            q.classes()
        )));
    }
    jsd_probs(&p.normalize()?, &q.normalize()?)
}

/// JSD between two probability vectors of equal length.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape("probability vectors differ in length".into()));
    }
    let kl_term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_term(a, m) + kl_term(b, m));
    }
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitHistograms {
    pub train: ClassHistogram,
    pub val: ClassHistogram,
    pub test: ClassHistogram,
}

impl SplitHistograms {
    pub fn get(&self, s: Split) -> &ClassHistogram {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    /// Target fractions for train, val, test.
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, Split>,
    pub histograms: SplitHistograms,
    pub jsd_train_val: f64,
    pub jsd_train_test: f64,
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::invalid("ratios must lie in [0, 1]"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios must sum to 1"));
    }
    Ok(())
}

/// Sample counts per split: held-out sizes are rounded, train takes the rest.
pub fn target_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let val = (ratios[1] * n as f64).round() as usize;
    let test = ((ratios[2] * n as f64).round() as usize).min(n - val);
    [n - val - test, val, test]
}

impl SplitManifest {
    /// Builds a manifest (histograms and divergences) from explicit
    /// assignments. Every sample must be assigned.
    pub fn from_assignments(
        samples: &[(String, ClassHistogram)],
        assignments: BTreeMap<String, Split>,
        ratios: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        let classes = samples.first().map_or(0, |(_, h)| h.classes());
        let mut per_split = [
            ClassHistogram::zeros(classes),
            ClassHistogram::zeros(classes),
            ClassHistogram::zeros(classes),
        ];
        if assignments.len() != samples.len() {
            return Err(Error::invalid(format!(
                "{} assignments for {} samples",
                assignments.len(),
                samples.len()
            )));
        }
        for (id, h) in samples {
            let s = assignments
                .get(id)
                .ok_or_else(|| Error::invalid(format!("sample {id} is not assigned")))?;
            per_split[s.index()].add(h);
        }
        for (s, h) in Split::ALL.iter().zip(&per_split) {
            if h.total() == 0 {
                return Err(Error::invalid(format!("split {s} has no labeled pixels")));
            }
        }
        let [train, val, test] = per_split;
        Ok(Self {
            version: MANIFEST_VERSION,
            seed,
            ratios,
            jsd_train_val: jsd(&train, &val)?,
            jsd_train_test: jsd(&train, &test)?,
            histograms: SplitHistograms { train, val, test },
            assignments,
        })
    }

    /// Reproduces a published partition from its id lists.
    pub fn from_index_lists(
        samples: &[(String, ClassHistogram)],
        lists: [&[String]; 3],
    ) -> Result<Self> {
        let mut assignments = BTreeMap::new();
        for (split, ids) in Split::ALL.iter().zip(lists) {
            for id in ids {
                if assignments.insert(id.clone(), *split).is_some() {
                    return Err(Error::invalid(format!("sample {id} listed twice")));
                }
            }
        }
        let n = assignments.len().max(1) as f64;
        let ratios = [
            lists[0].len() as f64 / n,
            lists[1].len() as f64 / n,
            lists[2].len() as f64 / n,
        ];
        Self::from_assignments(samples, assignments, ratios, 0)
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_samples(samples: &[(String, ClassHistogram)], ratios: [f64; 3]) -> Result<usize> {
    validate_ratios(ratios)?;
    if samples.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 samples, got {}",
            samples.len()
        )));
    }
    let classes = samples[0].1.classes();
    let mut seen = std::collections::BTreeSet::new();
    for (id, h) in samples {
        if h.classes() != classes {
            return Err(Error::Shape(format!(
                "sample {id} has {} classes",
                h.classes()
            )));
        }
        if h.total() == 0 {
            return Err(Error::invalid(format!(
                "sample {id} has an empty histogram"
            )));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate sample id {id}")));
        }
    }
    Ok(classes)
}

/// Rarity-first greedy stratification.
///
/// Samples are visited in descending order of their rarity score, the largest
/// ratio between a class's share of the sample and its share of the corpus.
/// Each goes to the split (with capacity left) whose relative deficit for the
/// sample's rarest class is largest. Exact ties in rarity are ordered by a
/// seeded hash of the sample id.
pub fn stratified_split(
    samples: &[(String, ClassHistogram)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    let classes = check_samples(samples, ratios)?;
    let mut global = ClassHistogram::zeros(classes);
    for (_, h) in samples {
        global.add(h);
    }
    let global_frac = global.normalize()?;

    struct Visit {
        index: usize,
        rarity: f64,
        class: usize,
        key: u64,
    }
    let seed_bytes = seed.to_le_bytes();
    let mut order: Vec<Visit> = samples
        .iter()
        .enumerate()
        .map(|(index, (id, h))| {
            let total = h.total() as f64;
            let (class, rarity) = h
                .counts()
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(c, &n)| (c, n as f64 / total / global_frac[c]))
                .fold((0, f64::NEG_INFINITY), |best, cur| {
                    if cur.1 > best.1 {
                        cur
                    } else {
                        best
                    }
                });
            Visit {
                index,
                rarity,
                class,
                key: stable_hash(&[&seed_bytes, id.as_bytes()]),
            }
        })
        .collect();
    order.sort_by(|a, b| b.rarity.total_cmp(&a.rarity).then(a.key.cmp(&b.key)));

    let capacity = target_counts(samples.len(), ratios);
    let mut filled = [0usize; 3];
    let mut current = [
        vec![0u64; classes],
        vec![0u64; classes],
        vec![0u64; classes],
    ];
    let mut assignments = BTreeMap::new();
    for v in &order {
        let c = v.class;
        let mut best: Option<(usize, f64)> = None;
        for s in 0..3 {
            if filled[s] >= capacity[s] {
                continue;
            }
            let target = ratios[s] * global.counts()[c] as f64;
            let deficit = if target > 0.0 {
                (target - current[s][c] as f64) / target
            } else {
                f64::NEG_INFINITY
            };
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((s, deficit));
            }
        }
        let (s, _) = best.expect("capacities sum to the sample count");
        filled[s] += 1;
        let (id, h) = &samples[v.index];
        for (acc, &n) in current[s].iter_mut().zip(h.counts()) {
            *acc += n;
        }
        assignments.insert(id.clone(), Split::ALL[s]);
    }
    SplitManifest::from_assignments(samples, assignments, ratios, seed)
}

/// Uniformly random partition with the same target sizes; the baseline the
/// stratified split is judged against.
pub fn random_split(
    samples: &[(String, ClassHistogram)],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    check_samples(samples, ratios)?;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = target_counts(samples.len(), ratios);
    let assignments = idx
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let s = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (samples[i].0.clone(), s)
        })
        .collect();
    SplitManifest::from_assignments(samples, assignments, ratios, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub threshold: f64,
    pub jsd_train_val: Option<f64>,
    pub jsd_train_test: Option<f64>,
    /// Splits whose recomputed histogram differs from the stored one.
    pub histogram_mismatches: Vec<Split>,
    pub jsd_mismatch: bool,
    /// Samples whose masks could not be read.
    pub missing: Vec<String>,
}

/// Recomputes per-split histograms from the masks behind `lookup` and checks
/// them (and the derived divergences) against the stored values. Passes iff
/// everything matches exactly and both divergences are within `threshold`.
pub fn verify_split(
    manifest: &SplitManifest,
    lookup: impl Fn(&str) -> Option<ClassHistogram>,
    threshold: f64,
) -> VerifyReport {
    let classes = manifest.histograms.train.classes();
    let mut per_split = [
        ClassHistogram::zeros(classes),
        ClassHistogram::zeros(classes),
        ClassHistogram::zeros(classes),
    ];
    let mut missing = Vec::new();
    for (id, split) in &manifest.assignments {
        match lookup(id) {
            Some(h) if h.classes() == classes => per_split[split.index()].add(&h),
            _ => missing.push(id.clone()),
        }
    }
    let histogram_mismatches: Vec<Split> = Split::ALL
        .iter()
        .copied()
        .filter(|&s| &per_split[s.index()] != manifest.histograms.get(s))
        .collect();
    let jsd_tv = jsd(&per_split[0], &per_split[1]).ok();
    let jsd_tt = jsd(&per_split[0], &per_split[2]).ok();
    let jsd_mismatch =
        jsd_tv != Some(manifest.jsd_train_val) || jsd_tt != Some(manifest.jsd_train_test);
    let within = |v: Option<f64>| v.is_some_and(|v| v <= threshold);
    VerifyReport {
        passed: histogram_mismatches.is_empty()
            && !jsd_mismatch
            && missing.is_empty()
            && within(jsd_tv)
            && within(jsd_tt),
        threshold,
        jsd_train_val: jsd_tv,
        jsd_train_test: jsd_tt,
        histogram_mismatches,
        jsd_mismatch,
        missing,
    }
}
