use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, SesSet, Shard};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, StreamRng};

const MAX_PARTITION_ATTEMPTS: u64 = 10;

/// Per-class keep counts: class `j` keeps `⌈n_max · ratio^(−j/(J−1))⌉`,
/// capped at what it has.
pub fn keep_counts(hist: &[usize], ratio: f64) -> Result<Vec<usize>> {
    if !(ratio >= 1.0) {
        return Err(Error::Data(format!("imbalance ratio must be ≥ 1, got {ratio}")));
    }
    let j = hist.len();
    let n_max = hist.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(j);
    for (c, &have) in hist.iter().enumerate() {
        let frac = if j > 1 { c as f64 / (j - 1) as f64 } else { 0.0 };
        let keep = (n_max as f64 * ratio.powf(-frac)).ceil() as usize;
        let keep = keep.min(have);
        if keep < 1 {
            return Err(Error::Data(format!("class {c} would keep no samples")));
        }
        out.push(keep);
    }
    Ok(out)
}

/// Randomly drops samples so class counts decay geometrically from class 0
/// down to `1/ratio` of it at the last class. Surviving samples keep their
/// relative order.
pub fn induce_imbalance(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    let keep = keep_counts(&ds.histogram(), ratio)?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for (class, &k) in keep.iter().enumerate() {
        let mut idx = ds.class_indices(class);
        idx.shuffle(&mut rng);
        kept.extend_from_slice(&idx[..k]);
    }
    kept.sort_unstable();
    Ok(ds.subset(&kept))
}

/// Splits `n` items by `props` with largest-remainder rounding; ties go to
/// the lower index.
fn largest_remainder(n: usize, props: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_sample(k: usize, alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Allocates every sample to one of `k` clients: each class is split by
/// proportions drawn from `Dirichlet(alpha·1_k)`. A draw leaving some client
/// empty is retried with a fresh sub-seed, up to 10 attempts.
pub fn dirichlet_partition(ds: &Dataset, k: usize, alpha: f64, seed: u64) -> Result<Vec<Shard>> {
    if k == 0 {
        return Err(Error::Data("need at least one client".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Data(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = StreamRng::seed_from_u64(derive_seed(seed, &[attempt]));
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
        for class in 0..ds.num_classes {
            let mut idx = ds.class_indices(class);
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let props = if k == 1 { vec![1.0] } else { dirichlet_sample(k, alpha, &mut rng) };
            let counts = largest_remainder(idx.len(), &props);
            let mut start = 0;
            for (client, &c) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if assigned.iter().any(Vec::is_empty) {
            continue;
        }
        return Ok(assigned
            .into_iter()
            .enumerate()
            .map(|(client_id, mut idx)| {
                idx.sort_unstable();
                let dataset = ds.subset(&idx);
                let dis = dataset.histogram();
                Shard { client_id, dataset, dis }
            })
            .collect());
    }
    Err(Error::Data(format!("a client stayed empty after {MAX_PARTITION_ATTEMPTS} partition attempts")))
}

/// Draws `m_per_class` random samples of every class into the monitoring
/// set; returns it with the remaining samples.
pub fn reserve_ses(ds: &Dataset, m_per_class: usize, seed: u64) -> Result<(SesSet, Dataset)> {
    let hist = ds.histogram();
    if let Some((class, have)) = hist.iter().enumerate().find(|(_, &h)| h <= m_per_class) {
        return Err(Error::Data(format!(
            "class {class} has {have} samples, needs more than {m_per_class} to reserve"
        )));
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for class in 0..ds.num_classes {
        let mut idx = ds.class_indices(class);
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..m_per_class]);
    }
    chosen.sort_unstable();
    let mut taken = vec![false; ds.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..ds.len()).filter(|&i| !taken[i]).collect();
    Ok((SesSet { dataset: ds.subset(&chosen), per_class: m_per_class }, ds.subset(&rest)))
}

/// Stratified holdout: `round(fraction · n_c)` samples of each class go to
/// the test split.
pub fn split_holdout(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut test = Vec::new();
    for class in 0..ds.num_classes {
        let mut idx = ds.class_indices(class);
        let n_test = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test.min(idx.len())]);
    }
    test.sort_unstable();
    let mut is_test = vec![false; ds.len()];
    for &i in &test {
        is_test[i] = true;
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !is_test[i]).collect();
    (ds.subset(&train), ds.subset(&test))
}
