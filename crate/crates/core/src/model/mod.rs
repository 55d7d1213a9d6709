//! Learnable models with closed-form per-sample gradients.
//!
//! Two variants share one flat parameter vector:
//!
//! * softmax regression, laid out as `W (K x d)` then `b (K)`;
//! * a one-hidden-layer perceptron with `tanh` units, laid out as
//!   `W1 (H x d)`, `b1 (H)`, `W2 (K x H)`, `b2 (K)`.
//!
//! Both are trained with the mean cross-entropy loss.

pub mod data;
pub mod idx;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
pub use data::{partition, synthesize_classification, Dataset, PartitionMode, PartitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelShape {
    Softmax {
        input: usize,
        classes: usize,
    },
    Mlp {
        input: usize,
        hidden: usize,
        classes: usize,
    },
}

impl ModelShape {
    pub fn dim(&self) -> usize {
        match *self {
            ModelShape::Softmax { input, classes } => classes * input + classes,
            ModelShape::Mlp { input, hidden, classes } => hidden * input + hidden + classes * hidden + classes,
        }
    }

    pub fn input(&self) -> usize {
        match *self {
            ModelShape::Softmax { input, .. } | ModelShape::Mlp { input, .. } => input,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelShape::Softmax { classes, .. } | ModelShape::Mlp { classes, .. } => classes,
        }
    }
}

/// Flat parameters plus the shape that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    shape: ModelShape,
    params: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            params: vec![0.0; shape.dim()],
        }
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.dim() {
            return Err(Error::Shape(format!(
                "{} parameters for a model of dimension {}",
                params.len(),
                shape.dim()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(Self { shape, params })
    }

    /// Zero biases; Glorot-uniform weights for the perceptron, zeros for softmax.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Self {
        let mut w = Self::zeros(shape);
        if let ModelShape::Mlp { input, hidden, classes } = shape {
            let l1 = (6.0 / (input + hidden) as f64).sqrt();
            let l2 = (6.0 / (hidden + classes) as f64).sqrt();
            let u1 = Uniform::new_inclusive(-l1, l1).expect("finite bounds");
            let u2 = Uniform::new_inclusive(-l2, l2).expect("finite bounds");
            let (w1, rest) = w.params.split_at_mut(hidden * input);
            w1.iter_mut().for_each(|p| *p = u1.sample(rng));
            let w2 = &mut rest[hidden..hidden + classes * hidden];
            w2.iter_mut().for_each(|p| *p = u2.sample(rng));
        }
        w
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let peak = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - peak).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Scratch space reused across samples.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
}

fn forward(w: &ModelWeights, x: &[f64], ws: &mut Workspace) {
    let p = &w.params;
    match w.shape {
        ModelShape::Softmax { input, classes } => {
            ws.probs.clear();
            let bias = &p[classes * input..];
            for k in 0..classes {
                let row = &p[k * input..(k + 1) * input];
                ws.probs.push(dot(row, x) + bias[k]);
            }
        }
        ModelShape::Mlp { input, hidden, classes } => {
            let (w1, rest) = p.split_at(hidden * input);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            ws.hidden.clear();
            for h in 0..hidden {
                ws.hidden.push((dot(&w1[h * input..(h + 1) * input], x) + b1[h]).tanh());
            }
            ws.probs.clear();
            for k in 0..classes {
                ws.probs
                    .push(dot(&w2[k * hidden..(k + 1) * hidden], &ws.hidden) + b2[k]);
            }
        }
    }
    softmax_in_place(&mut ws.probs);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cross_entropy(probs: &[f64], y: usize) -> f64 {
    -probs[y].max(f64::MIN_POSITIVE).ln()
}

/// Loss of one sample; writes its gradient into `grad`.
pub fn sample_loss_grad(w: &ModelWeights, x: &[f64], y: usize, grad: &mut [f64], ws: &mut Workspace) -> f64 {
    forward(w, x, ws);
    let loss = cross_entropy(&ws.probs, y);
    match w.shape {
        ModelShape::Softmax { input, classes } => {
            for k in 0..classes {
                let e = ws.probs[k] - if k == y { 1.0 } else { 0.0 };
                let row = &mut grad[k * input..(k + 1) * input];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g = e * xi;
                }
                grad[classes * input + k] = e;
            }
        }
        ModelShape::Mlp { input, hidden, classes } => {
            let w2 = &w.params[hidden * input + hidden..hidden * input + hidden + classes * hidden];
            let (g1, rest) = grad.split_at_mut(hidden * input);
            let (gb1, rest) = rest.split_at_mut(hidden);
            let (g2, gb2) = rest.split_at_mut(classes * hidden);
            ws.delta.clear();
            ws.delta.resize(hidden, 0.0);
            for k in 0..classes {
                let e = ws.probs[k] - if k == y { 1.0 } else { 0.0 };
                gb2[k] = e;
                let wrow = &w2[k * hidden..(k + 1) * hidden];
                let grow = &mut g2[k * hidden..(k + 1) * hidden];
                for h in 0..hidden {
                    grow[h] = e * ws.hidden[h];
                    ws.delta[h] += e * wrow[h];
                }
            }
            for h in 0..hidden {
                let dz = ws.delta[h] * (1.0 - ws.hidden[h] * ws.hidden[h]);
                gb1[h] = dz;
                for (g, xi) in g1[h * input..(h + 1) * input].iter_mut().zip(x) {
                    *g = dz * xi;
                }
            }
        }
    }
    loss
}

/// Loss of one sample without its gradient.
pub fn sample_loss(w: &ModelWeights, x: &[f64], y: usize, ws: &mut Workspace) -> f64 {
    forward(w, x, ws);
    cross_entropy(&ws.probs, y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub mean_loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_shapes(w: &ModelWeights, data: &Dataset) -> Result<()> {
    if w.shape.input() != data.dim() || w.shape.classes() != data.classes() {
        return Err(Error::Shape(format!(
            "model expects {} features / {} classes, data has {} / {}",
            w.shape.input(),
            w.shape.classes(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Mean loss over `batch` and the exact gradient of each sample's loss.
pub fn per_sample_loss_grads(w: &ModelWeights, data: &Dataset, batch: &[usize]) -> Result<LossGrads> {
    check_shapes(w, data)?;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut ws = Workspace::default();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for &i in batch {
        let mut g = vec![0.0; w.dim()];
        total += sample_loss_grad(w, data.row(i), data.label(i), &mut g, &mut ws);
        grads.push(g);
    }
    Ok(LossGrads {
        mean_loss: total / batch.len() as f64,
        grads,
    })
}

/// Mean loss over the whole dataset.
pub fn mean_loss(w: &ModelWeights, data: &Dataset) -> Result<f64> {
    check_shapes(w, data)?;
    let mut ws = Workspace::default();
    let total: f64 = (0..data.len())
        .map(|i| sample_loss(w, data.row(i), data.label(i), &mut ws))
        .sum();
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy (ties go to the lowest class) and mean cross-entropy.
pub fn evaluate(w: &ModelWeights, test: &Dataset) -> Result<Evaluation> {
    check_shapes(w, test)?;
    let mut ws = Workspace::default();
    let mut correct = 0usize;
    let mut total = 0.0;
    for i in 0..test.len() {
        let y = test.label(i);
        forward(w, test.row(i), &mut ws);
        total += cross_entropy(&ws.probs, y);
        let mut best = 0;
        for k in 1..ws.probs.len() {
            if ws.probs[k] > ws.probs[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: total / test.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_instance(shape: ModelShape, n: usize, seed: u64) -> (ModelWeights, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..shape.dim())
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = ModelWeights::from_params(shape, params).unwrap();
        let features = (0..n * shape.input())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..shape.classes())).collect();
        let data = Dataset::new(features, labels, shape.input(), shape.classes()).unwrap();
        (w, data)
    }

    // Central differences, step 1e-6.
    fn numeric_grad(w: &ModelWeights, x: &[f64], y: usize) -> Vec<f64> {
        let mut ws = Workspace::default();
        let mut probe = w.clone();
        (0..w.dim())
            .map(|k| {
                let orig = probe.params[k];
                probe.params[k] = orig + 1e-6;
                let up = sample_loss(&probe, x, y, &mut ws);
                probe.params[k] = orig - 1e-6;
                let down = sample_loss(&probe, x, y, &mut ws);
                probe.params[k] = orig;
                (up - down) / 2e-6
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
        diff / scale
    }

    #[test]
    fn zero_softmax_has_log_k_loss() {
        let shape = ModelShape::Softmax { input: 4, classes: 7 };
        let (_, data) = random_instance(shape, 5, 1);
        let lg = per_sample_loss_grads(&ModelWeights::zeros(shape), &data, &[0, 1, 2, 3, 4]).unwrap();
        assert!((lg.mean_loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes = [
            ModelShape::Softmax { input: 5, classes: 4 },
            ModelShape::Mlp {
                input: 4,
                hidden: 6,
                classes: 3,
            },
        ];
        for shape in shapes {
            for seed in 0..5 {
                let (w, data) = random_instance(shape, 3, seed);
                let lg = per_sample_loss_grads(&w, &data, &[0, 1, 2]).unwrap();
                for (i, g) in lg.grads.iter().enumerate() {
                    let fd = numeric_grad(&w, data.row(i), data.label(i));
                    assert!(rel_err(g, &fd) < 1e-5, "{shape:?} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn mean_of_sample_grads_is_batch_grad() {
        let shape = ModelShape::Mlp {
            input: 3,
            hidden: 5,
            classes: 4,
        };
        let (w, data) = random_instance(shape, 6, 9);
        let batch: Vec<usize> = (0..6).collect();
        let lg = per_sample_loss_grads(&w, &data, &batch).unwrap();
        let mut mean = vec![0.0; w.dim()];
        for g in &lg.grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / 6.0;
            }
        }
        // Finite differences of the batch loss.
        let mut probe = w.clone();
        for k in 0..w.dim() {
            let orig = probe.params[k];
            probe.params[k] = orig + 1e-6;
            let up = per_sample_loss_grads(&probe, &data, &batch).unwrap().mean_loss;
            probe.params[k] = orig - 1e-6;
            let down = per_sample_loss_grads(&probe, &data, &batch).unwrap().mean_loss;
            probe.params[k] = orig;
            assert!((mean[k] - (up - down) / 2e-6).abs() < 1e-7);
        }
        assert!((lg.mean_loss - mean_loss(&w, &data).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (w, _) = random_instance(ModelShape::Softmax { input: 3, classes: 2 }, 1, 0);
        let (_, data) = random_instance(ModelShape::Softmax { input: 4, classes: 2 }, 2, 0);
        assert!(matches!(per_sample_loss_grads(&w, &data, &[0]), Err(Error::Shape(_))));
        assert!(matches!(per_sample_loss_grads(&w, &data, &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluation_matches_loss_and_memorizes() {
        let shape = ModelShape::Softmax { input: 3, classes: 3 };
        let features = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let data = Dataset::new(features, vec![0, 1, 2], 3, 3).unwrap();
        let mut w = ModelWeights::zeros(shape);
        let mut ws = Workspace::default();
        let mut g = vec![0.0; w.dim()];
        for _ in 0..500 {
            for i in 0..3 {
                sample_loss_grad(&w, data.row(i), data.label(i), &mut g, &mut ws);
                for (p, gi) in w.params_mut().iter_mut().zip(&g) {
                    *p -= 0.5 * gi;
                }
            }
        }
        let eval = evaluate(&w, &data).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert!((eval.loss - mean_loss(&w, &data).unwrap()).abs() < 1e-12);
    }
}
