//! Datasets, synthetic generation and client partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Dense labelled samples, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Shape("dataset needs at least one sample".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} features for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Shape(format!("label {y} outside 0..{classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.dim, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Gaussian class-conditional clusters with unit within-class variance.
///
/// Class means sit on scaled coordinate axes when there are no more classes
/// than features (pairwise distance exactly `separation`), and on random
/// directions of the same radius otherwise.
pub fn synthesize_classification<R: Rng + ?Sized>(
    num_samples: usize,
    feature_dim: usize,
    num_classes: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if num_samples == 0 || feature_dim == 0 || num_classes == 0 {
        return Err(invalid("synthetic", "sample, feature and class counts must be >= 1"));
    }
    if !(separation >= 0.0) {
        return Err(invalid("separation", format!("{separation} must be >= 0")));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means = vec![0.0; num_classes * feature_dim];
    for k in 0..num_classes {
        let mean = &mut means[k * feature_dim..(k + 1) * feature_dim];
        if num_classes <= feature_dim {
            mean[k] = radius;
        } else {
            let dir: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (m, d) in mean.iter_mut().zip(dir) {
                *m = radius * d / norm;
            }
        }
    }
    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(num_samples * feature_dim);
    for &y in &labels {
        for j in 0..feature_dim {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(means[y * feature_dim + j] + noise);
        }
    }
    Dataset::new(features, labels, feature_dim, num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet(f64),
    /// One size per client, or one size per equally sized group of clients.
    PresetSizes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
}

impl PartitionSpec {
    fn client_sizes(&self, total: usize) -> Result<Vec<usize>> {
        let u = self.num_clients;
        if u == 0 {
            return Err(Error::Partition("at least one client is required".into()));
        }
        match &self.mode {
            PartitionMode::Iid | PartitionMode::Dirichlet(_) => {
                if let PartitionMode::Dirichlet(c) = self.mode {
                    if !(c > 0.0) {
                        return Err(Error::Partition(format!("concentration {c} must be > 0")));
                    }
                }
                let each = total / u;
                if each == 0 {
                    return Err(Error::Partition(format!("{total} samples cannot feed {u} clients")));
                }
                Ok(vec![each; u])
            }
            PartitionMode::PresetSizes(sizes) => {
                if sizes.is_empty() || !u.is_multiple_of(sizes.len()) {
                    return Err(Error::Partition(format!(
                        "{} preset sizes do not divide {u} clients",
                        sizes.len()
                    )));
                }
                let per_group = u / sizes.len();
                let expanded: Vec<usize> = sizes.iter().flat_map(|&s| std::iter::repeat_n(s, per_group)).collect();
                let need: usize = expanded.iter().sum();
                if expanded.contains(&0) {
                    return Err(Error::Partition("preset sizes must be positive".into()));
                }
                if need > total {
                    return Err(Error::Partition(format!(
                        "preset sizes need {need} samples but only {total} exist"
                    )));
                }
                Ok(expanded)
            }
        }
    }
}

/// Splits `data` into disjoint client datasets.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, spec: &PartitionSpec, rng: &mut R) -> Result<Vec<Dataset>> {
    let sizes = spec.client_sizes(data.len())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let parts: Vec<Vec<usize>> = match spec.mode {
        PartitionMode::Dirichlet(conc) => dirichlet_indices(data, &order, &sizes, conc, rng)?,
        _ => {
            let mut start = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = order[start..start + s].to_vec();
                    start += s;
                    part
                })
                .collect()
        }
    };
    parts.iter().map(|idx| data.subset(idx)).collect()
}

fn dirichlet_indices<R: Rng + ?Sized>(
    data: &Dataset,
    order: &[usize],
    sizes: &[usize],
    conc: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let k = data.classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in order {
        pools[data.label(i)].push(i);
    }
    let gamma = Gamma::new(conc, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let mut parts = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props = vec![0.0; k];
            props[rng.random_range(0..k)] = 1.0;
        }
        let mut part = Vec::with_capacity(size);
        for _ in 0..size {
            let open: f64 = (0..k).filter(|&c| !pools[c].is_empty()).map(|c| props[c]).sum();
            let class = if open > 0.0 {
                let mut u = rng.random::<f64>() * open;
                let mut pick = None;
                for c in (0..k).filter(|&c| !pools[c].is_empty()) {
                    pick = Some(c);
                    if u < props[c] {
                        break;
                    }
                    u -= props[c];
                }
                pick
            } else {
                let open: Vec<usize> = (0..k).filter(|&c| !pools[c].is_empty()).collect();
                open.get(rng.random_range(0..open.len().max(1))).copied()
            };
            let class = class.ok_or_else(|| Error::Partition("ran out of samples".into()))?;
            part.push(pools[class].pop().expect("pool checked non-empty"));
        }
        parts.push(part);
    }
    Ok(parts)
}
