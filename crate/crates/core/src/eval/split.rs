//! Seeded stratified splits over sample indices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::EvalError;

/// Disjoint fold index lists covering all samples.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
    /// Best-effort notes, e.g. classes with fewer samples than folds.
    pub warnings: Vec<String>,
}

impl FoldSplit {
    /// Train indices for one held-out fold: every other fold, in order.
    pub fn train_indices(&self, held_out: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (f, fold) in self.folds.iter().enumerate() {
            if f != held_out {
                out.extend_from_slice(fold);
            }
        }
        out
    }
}

/// Split samples into `k` folds with a seeded shuffle.
///
/// Stratified assignment deals each class round-robin, rotating the
/// starting fold across classes so per-fold class counts stay within one
/// of proportional and fold sizes within one overall. With `groups`,
/// whole groups (all leads of one report) land in a single fold.
pub fn kfold_split(
    labels: &[usize],
    k: usize,
    seed: u64,
    stratified: bool,
    groups: Option<&[String]>,
) -> Result<FoldSplit, EvalError> {
    if k < 2 {
        return Err(EvalError::KTooSmall(k));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();

    // Units are either single samples or whole groups.
    let (unit_members, unit_labels) = match groups {
        None => (
            (0..labels.len()).map(|i| vec![i]).collect::<Vec<_>>(),
            labels.to_vec(),
        ),
        Some(groups) => {
            if groups.len() != labels.len() {
                return Err(EvalError::GroupLengthMismatch {
                    groups: groups.len(),
                    labels: labels.len(),
                });
            }
            let mut order: Vec<&str> = Vec::new();
            let mut members: Vec<Vec<usize>> = Vec::new();
            let mut glabels: Vec<usize> = Vec::new();
            for (i, g) in groups.iter().enumerate() {
                match order.iter().position(|o| o == g) {
                    Some(pos) => members[pos].push(i),
                    None => {
                        order.push(g);
                        members.push(vec![i]);
                        glabels.push(labels[i]);
                    }
                }
            }
            (members, glabels)
        }
    };

    let n_units = unit_members.len();
    if n_units < k {
        return Err(EvalError::TooFewSamples { n: n_units, k });
    }

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut assign = |units: &mut Vec<usize>, start: usize, rng: &mut ChaCha20Rng| -> usize {
        units.shuffle(rng);
        for (i, &u) in units.iter().enumerate() {
            folds[(start + i) % k].extend_from_slice(&unit_members[u]);
        }
        (start + units.len()) % k
    };

    if stratified {
        let classes = unit_labels.iter().copied().max().unwrap_or(0) + 1;
        let mut start = 0;
        for class in 0..classes {
            let mut units: Vec<usize> = (0..n_units).filter(|&u| unit_labels[u] == class).collect();
            if units.is_empty() {
                continue;
            }
            if units.len() < k {
                warnings.push(format!(
                    "class {class} has {} units, fewer than {k} folds; best-effort assignment",
                    units.len()
                ));
            }
            start = assign(&mut units, start, &mut rng);
        }
    } else {
        let mut units: Vec<usize> = (0..n_units).collect();
        assign(&mut units, 0, &mut rng);
    }

    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(FoldSplit { folds, warnings })
}

/// Index lists of a train/validation/test split.
#[derive(Debug, Clone)]
pub struct HoldoutIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded holdout split with `floor(ratio·n)` validation and test sizes;
/// the remainder goes to train.
pub fn holdout_split(
    labels: &[usize],
    ratios: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<HoldoutIndices, EvalError> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadRatios(ratios));
    }
    let n = labels.len();
    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    if r_val > 0.0 && n_val == 0 {
        return Err(EvalError::DegenerateSplit { name: "validation", ratio: r_val, n });
    }
    if r_test > 0.0 && n_test == 0 {
        return Err(EvalError::DegenerateSplit { name: "test", ratio: r_test, n });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    let mut train = Vec::new();

    if stratified {
        let classes = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            per_class[l].push(i);
        }
        for indices in &mut per_class {
            indices.shuffle(&mut rng);
        }
        // largest-remainder quotas per class reach the global floor sizes
        let quotas = |target: usize, rng_order: &[Vec<usize>]| -> Vec<usize> {
            let mut base: Vec<usize> = Vec::with_capacity(classes);
            let mut fractions: Vec<(usize, f64)> = Vec::new();
            let mut assigned = 0;
            for (c, members) in rng_order.iter().enumerate() {
                let exact = target as f64 * members.len() as f64 / n as f64;
                let b = exact.floor() as usize;
                base.push(b);
                assigned += b;
                fractions.push((c, exact - b as f64));
            }
            fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(c, _) in fractions.iter().take(target.saturating_sub(assigned)) {
                base[c] += 1;
            }
            base
        };
        let test_quota = quotas(n_test, &per_class);
        let val_quota = quotas(n_val, &per_class);
        for (c, members) in per_class.iter().enumerate() {
            let t = test_quota[c].min(members.len());
            let v = val_quota[c].min(members.len() - t);
            test.extend_from_slice(&members[..t]);
            val.extend_from_slice(&members[t..t + v]);
            train.extend_from_slice(&members[t + v..]);
        }
        // rounding drift lands in train; move samples to hit exact floors
        balance(&mut train, &mut test, n_test);
        balance(&mut train, &mut val, n_val);
    } else {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        test.extend_from_slice(&indices[..n_test]);
        val.extend_from_slice(&indices[n_test..n_test + n_val]);
        train.extend_from_slice(&indices[n_test + n_val..]);
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(HoldoutIndices { train, val, test })
}

fn balance(train: &mut Vec<usize>, bucket: &mut Vec<usize>, target: usize) {
    while bucket.len() < target {
        bucket.push(train.pop().expect("train nonempty while balancing"));
    }
    while bucket.len() > target {
        train.push(bucket.pop().expect("bucket nonempty while balancing"));
    }
}
