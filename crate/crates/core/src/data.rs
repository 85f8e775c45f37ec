//! Datasets: IDX ingestion, synthetic Gaussian blobs, and client partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Number of samples of each class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn distinct_labels(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parse an IDX image file (`0x00000803`) and label file (`0x00000801`) from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let count = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;
    let features = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != count * features {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes, found {}",
            count * features,
            pixels.len()
        )));
    }

    let magic = read_be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = read_be_u32(labels, 4, "labels")? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(Error::Format(format!(
            "labels: expected {label_count} entries, found {}",
            label_bytes.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let samples = Array2::from_shape_vec(
        (count, features),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("pixel count checked above");
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(samples, labels, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// Gaussian blobs with unit noise, one per class, and minimum pairwise distance
/// `separation` between class means. When `dims >= classes` the means lie along
/// random orthonormal directions, so every pair is exactly `separation` apart;
/// otherwise they sit on a circle in the first two dimensions.
/// Features are then mapped affinely (one global scale) into `[0, 1]`.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    dims: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes == 0 || dims == 0 {
        return Err(Error::Data("need at least one class and one dimension".into()));
    }
    if n < classes {
        return Err(Error::Data(format!("{n} samples cannot cover {classes} classes")));
    }
    if classes > dims && dims < 2 {
        return Err(Error::Data("more classes than dimensions needs dims >= 2".into()));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let means: Vec<Vec<f64>> = if classes == 1 {
        vec![vec![0.0; dims]]
    } else if dims >= classes {
        orthonormal_directions(classes, dims, &mut rng)
            .into_iter()
            .map(|u| u.into_iter().map(|x| x * separation / std::f64::consts::SQRT_2).collect())
            .collect()
    } else {
        let r = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
        (0..classes)
            .map(|c| {
                let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                let mut m = vec![0.0; dims];
                m[0] = r * a.cos();
                m[1] = r * a.sin();
                m
            })
            .collect()
    };

    // Every class appears at least once; the rest are drawn uniformly.
    let mut labels: Vec<usize> = (0..classes).collect();
    labels.extend((classes..n).map(|_| rng.random_range(0..classes)));
    labels.shuffle(&mut rng);
    let mut samples = Array2::zeros((n, dims));
    for (mut row, &y) in samples.axis_iter_mut(Axis(0)).zip(&labels) {
        for (v, &mu) in row.iter_mut().zip(&means[y]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = mu + z;
        }
    }
    let lo = samples.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = samples.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = if hi > lo { hi - lo } else { 1.0 };
    samples.mapv_inplace(|v| (v - lo) / span);
    Dataset::new(samples, labels, classes)
}

/// Gram-Schmidt on Gaussian vectors; `k <= dims`.
fn orthonormal_directions<R: Rng + ?Sized>(k: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Shuffle and split into `clients` shards whose sizes differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(ds: &Dataset, clients: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if clients == 0 || clients > ds.len() {
        return Err(Error::Partition(format!(
            "cannot split {} samples across {clients} clients",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let base = ds.len() / clients;
    let extra = ds.len() % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let size = base + usize::from(k < extra);
        shards.push(ds.subset(&order[start..start + size]));
        start += size;
    }
    Ok(shards)
}

/// Shard indices and sizing information of a non-IID split.
#[derive(Debug, Clone)]
pub struct NonIidPlan {
    /// Raw size draws `j_n ∈ {10, ..., 100}`.
    pub draws: Vec<u32>,
    /// Classes assigned to each client.
    pub classes: Vec<Vec<usize>>,
    /// Sample indices of each client's shard.
    pub indices: Vec<Vec<usize>>,
}

const MAX_ASSIGNMENT_ATTEMPTS: usize = 64;

/// Unbalanced, label-skewed split.
///
/// Each client draws `j_n` uniformly from `{10, ..., 100}` and `c_max` distinct
/// classes. Shard sizes are proportional to `j_n`; a client's quota is spread
/// evenly over its classes. The total is the largest budget every class can
/// serve, so some samples may stay unused.
pub fn plan_noniid<R: Rng + ?Sized>(
    ds: &Dataset,
    clients: usize,
    c_max: usize,
    rng: &mut R,
) -> Result<NonIidPlan> {
    if clients == 0 || clients > ds.len() {
        return Err(Error::Partition(format!(
            "cannot split {} samples across {clients} clients",
            ds.len()
        )));
    }
    if c_max == 0 || c_max > ds.num_classes() {
        return Err(Error::Partition(format!(
            "c_max must be in 1..={}, got {c_max}",
            ds.num_classes()
        )));
    }
    let draws: Vec<u32> = (0..clients).map(|_| rng.random_range(10..=100)).collect();
    let total_draw: u32 = draws.iter().sum();
    let fractions: Vec<f64> = draws.iter().map(|&j| j as f64 / total_draw as f64).collect();
    let largest = (0..clients)
        .max_by(|&a, &b| draws[a].cmp(&draws[b]).then(b.cmp(&a)))
        .expect("at least one client");

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }

    for _ in 0..MAX_ASSIGNMENT_ATTEMPTS {
        let classes: Vec<Vec<usize>> = (0..clients)
            .map(|_| {
                let mut c = index::sample(rng, ds.num_classes(), c_max).into_vec();
                c.sort_unstable();
                c
            })
            .collect();
        let mut demand = vec![0.0; ds.num_classes()];
        for (cls, &p) in classes.iter().zip(&fractions) {
            for &c in cls {
                demand[c] += p / cls.len() as f64;
            }
        }
        if demand.contains(&0.0) {
            continue;
        }
        let mut budget = demand
            .iter()
            .zip(&pools)
            .map(|(&dem, pool)| pool.len() as f64 / dem)
            .fold(ds.len() as f64, f64::min)
            .floor() as usize;
        while budget >= clients {
            if let Some(indices) = allocate(&pools, &classes, &fractions, largest, budget) {
                return Ok(NonIidPlan {
                    draws,
                    classes,
                    indices,
                });
            }
            budget -= 1;
        }
    }
    Err(Error::Partition(format!(
        "no feasible class assignment for {clients} clients with c_max = {c_max} after {MAX_ASSIGNMENT_ATTEMPTS} attempts"
    )))
}

/// Carve `budget` samples out of the class pools, or `None` if some class runs short.
fn allocate(
    pools: &[Vec<usize>],
    classes: &[Vec<usize>],
    fractions: &[f64],
    largest: usize,
    budget: usize,
) -> Option<Vec<Vec<usize>>> {
    let mut sizes: Vec<usize> = fractions.iter().map(|&p| (p * budget as f64).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    sizes[largest] += budget - assigned;
    if sizes.contains(&0) {
        return None;
    }
    let mut cursor = vec![0usize; pools.len()];
    let mut shards = Vec::with_capacity(classes.len());
    for (cls, &size) in classes.iter().zip(&sizes) {
        let base = size / cls.len();
        let extra = size % cls.len();
        let mut shard = Vec::with_capacity(size);
        for (i, &c) in cls.iter().enumerate() {
            let take = base + usize::from(i < extra);
            let start = cursor[c];
            let chunk = pools[c].get(start..start + take)?;
            shard.extend_from_slice(chunk);
            cursor[c] += take;
        }
        shards.push(shard);
    }
    Some(shards)
}

pub fn partition_noniid<R: Rng + ?Sized>(
    ds: &Dataset,
    clients: usize,
    c_max: usize,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    let plan = plan_noniid(ds, clients, c_max, rng)?;
    Ok(plan.indices.iter().map(|idx| ds.subset(idx)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_errors() {
        let imgs = idx_images(3, 2, 2, 255);
        let ds = parse_idx(&imgs, &idx_labels(&[0, 1, 2])).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.samples().iter().all(|&v| v == 1.0));

        let mut bad = idx_labels(&[0, 1, 2]);
        bad[3] = 0x03;
        assert!(matches!(parse_idx(&imgs, &bad), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&imgs, &idx_labels(&[0, 1])), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&imgs[..imgs.len() - 1], &idx_labels(&[0, 1, 2])), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&imgs[..10], &idx_labels(&[0])), Err(Error::Format(_))));
    }

    #[test]
    fn synth_is_deterministic_and_covers_classes() {
        let a = synth_dataset(5, 200, 4, 3, 6.0).unwrap();
        assert_eq!(a, synth_dataset(5, 200, 4, 3, 6.0).unwrap());
        assert_ne!(a, synth_dataset(6, 200, 4, 3, 6.0).unwrap());
        assert!(a.samples().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let tiny = synth_dataset(1, 4, 8, 4, 3.0).unwrap();
        let mut h = tiny.class_histogram();
        h.sort();
        assert_eq!(h, vec![1, 1, 1, 1]);
    }

    #[test]
    fn iid_even_split() {
        let ds = synth_dataset(1, 103, 3, 3, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shards = partition_iid(&ds, 10, &mut rng).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().all(|&s| s == 10 || s == 11));
        assert!(matches!(partition_iid(&ds, 104, &mut rng), Err(Error::Partition(_))));
    }

    #[test]
    fn noniid_respects_c_max() {
        let ds = synth_dataset(2, 5000, 10, 10, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = plan_noniid(&ds, 10, 2, &mut rng).unwrap();
        let mut seen = BTreeSet::new();
        for (idx, cls) in plan.indices.iter().zip(&plan.classes) {
            let shard = ds.subset(idx);
            assert!(shard.distinct_labels() <= 2);
            assert!(shard.labels().iter().all(|y| cls.contains(y)));
            seen.extend(idx.iter().copied());
        }
        let used: usize = plan.indices.iter().map(Vec::len).sum();
        assert_eq!(seen.len(), used, "shards overlap");
        assert!(matches!(plan_noniid(&ds, 10, 11, &mut rng), Err(Error::Partition(_))));
    }
}
