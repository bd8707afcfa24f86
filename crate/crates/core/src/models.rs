//! Desk-scale learning tasks.
//!
//! Synthetic Gaussian-blob classification split evenly across nodes, and
//! two models with hand-derived per-sample gradients: logistic regression
//! (sigmoid for two classes, softmax otherwise) and a one-hidden-layer tanh
//! MLP with a softmax head. Both use cross-entropy loss.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::Task;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
}

/// Samples stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    d_in: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Partition {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        assert_eq!(x.len(), self.d_in);
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (
            &self.features[i * self.d_in..(i + 1) * self.d_in],
            self.labels[i],
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.d_in.max(1))
            .zip(self.labels.iter().copied())
    }
}

/// Class-conditional Gaussian blobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    /// Class `c` is centred at `separation · s·e_{c mod d_in}` with
    /// `s = −1` on the second pass around the axes.
    pub separation: f64,
    pub noise_std: f64,
    pub test_size: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            separation: 3.0,
            noise_std: 1.0,
            test_size: 1000,
        }
    }
}

impl BlobSpec {
    pub fn class_mean(&self, class: usize, d_in: usize) -> Vec<f64> {
        let mut mean = vec![0.0; d_in];
        if let Some(wrap) = class.checked_div(d_in) {
            let sign = if wrap % 2 == 0 { 1.0 } else { -1.0 };
            mean[class % d_in] = sign * self.separation;
        }
        mean
    }
}

/// Training data split evenly across nodes, plus a held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub classes: usize,
    pub seed: u64,
    pub partitions: Vec<Partition>,
    pub test: Partition,
}

impl Dataset {
    pub fn nodes(&self) -> usize {
        self.partitions.len()
    }

    pub fn local_size(&self) -> usize {
        self.partitions.first().map_or(0, Partition::len)
    }

    /// Writes `partition,label,x0..` rows; the test split uses partition `test`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        writeln!(
            out,
            "# seed={} classes={} d_in={}",
            self.seed, self.classes, self.d_in
        )?;
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["partition".to_string(), "label".to_string()];
        header.extend((0..self.d_in).map(|i| format!("x{i}")));
        writer.write_record(&header)?;
        let tagged = self
            .partitions
            .iter()
            .enumerate()
            .map(|(i, p)| (i.to_string(), p))
            .chain(std::iter::once(("test".to_string(), &self.test)));
        for (tag, part) in tagged {
            for (x, y) in part.iter() {
                let mut row = vec![tag.clone(), y.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                writer.write_record(&row)?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DatasetError> {
        let mut text = String::new();
        let mut input = input;
        input.read_to_string(&mut text)?;
        let meta = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| {
                DatasetError::Malformed("missing '# seed=.. classes=.. d_in=..' line".into())
            })?;
        let field = |key: &str| -> Result<u64, DatasetError> {
            meta.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| DatasetError::Malformed(format!("metadata lacks {key}")))
        };
        let seed = field("seed")?;
        let classes = field("classes")? as usize;
        let d_in = field("d_in")? as usize;

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut partitions: Vec<Partition> = Vec::new();
        let mut test = Partition::new(d_in);
        for record in reader.records() {
            let record = record?;
            if record.len() != d_in + 2 {
                return Err(DatasetError::Malformed(format!(
                    "expected {} fields, found {}",
                    d_in + 2,
                    record.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| DatasetError::Malformed(format!("{s:?}: {e}")))
            };
            let label: usize = record[1]
                .parse()
                .map_err(|_| DatasetError::Malformed(format!("bad label {:?}", &record[1])))?;
            let x = (2..d_in + 2)
                .map(|i| parse(&record[i]))
                .collect::<Result<Vec<_>, _>>()?;
            if &record[0] == "test" {
                test.push(&x, label);
            } else {
                let node: usize = record[0].parse().map_err(|_| {
                    DatasetError::Malformed(format!("bad partition {:?}", &record[0]))
                })?;
                while partitions.len() <= node {
                    partitions.push(Partition::new(d_in));
                }
                partitions[node].push(&x, label);
            }
        }
        Ok(Self {
            d_in,
            classes,
            seed,
            partitions,
            test,
        })
    }
}

/// Gaussian blobs with the default [`BlobSpec`].
pub fn synth_dataset(
    seed: u64,
    n: usize,
    local_size: usize,
    d_in: usize,
    classes: usize,
) -> Dataset {
    synth_dataset_with(seed, n, local_size, d_in, classes, &BlobSpec::default())
}

/// Draws `n·J` balanced training samples, shuffles them and deals them out
/// in contiguous blocks of `J`, then draws the test set from the same stream.
pub fn synth_dataset_with(
    seed: u64,
    n: usize,
    local_size: usize,
    d_in: usize,
    classes: usize,
    spec: &BlobSpec,
) -> Dataset {
    assert!(n >= 1 && local_size >= 1 && d_in >= 1 && classes >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes).map(|c| spec.class_mean(c, d_in)).collect();
    let draw = |label: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means[label]
            .iter()
            .map(|m| m + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let total = n * local_size;
    let mut labels: Vec<usize> = (0..total).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut partitions = vec![Partition::new(d_in); n];
    for (i, &label) in labels.iter().enumerate() {
        let x = draw(label, &mut rng);
        partitions[i / local_size].push(&x, label);
    }
    let mut test = Partition::new(d_in);
    for i in 0..spec.test_size {
        let label = i % classes;
        let x = draw(label, &mut rng);
        test.push(&x, label);
    }
    Dataset {
        d_in,
        classes,
        seed,
        partitions,
        test,
    }
}

/// Model architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Logistic {
        d_in: usize,
        classes: usize,
    },
    Mlp {
        d_in: usize,
        hidden: usize,
        classes: usize,
    },
}

/// MLP weights: `w1` is `hidden × d_in`, `w2` is `classes × hidden`, both
/// row-major. The flat layout is `[w1, b1, w2, b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

impl Model {
    pub fn dim(&self) -> usize {
        match *self {
            Model::Logistic { d_in, classes } if classes <= 2 => d_in + 1,
            Model::Logistic { d_in, classes } => classes * (d_in + 1),
            Model::Mlp {
                d_in,
                hidden,
                classes,
            } => hidden * d_in + hidden + classes * hidden + classes,
        }
    }

    pub fn d_in(&self) -> usize {
        match *self {
            Model::Logistic { d_in, .. } | Model::Mlp { d_in, .. } => d_in,
        }
    }

    pub fn unflatten_mlp(&self, params: &[f64]) -> Option<MlpParams> {
        let Model::Mlp {
            d_in,
            hidden,
            classes,
        } = *self
        else {
            return None;
        };
        if params.len() != self.dim() {
            return None;
        }
        let (w1, rest) = params.split_at(hidden * d_in);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(classes * hidden);
        Some(MlpParams {
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
        })
    }

    /// Zeros for logistic regression; for the MLP, hidden weights drawn
    /// uniformly from `±1/√d_in` and a zero output layer.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        match *self {
            Model::Logistic { .. } => vec![0.0; self.dim()],
            Model::Mlp { d_in, hidden, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bound = 1.0 / (d_in as f64).sqrt();
                let mut params = vec![0.0; self.dim()];
                for w in &mut params[..hidden * d_in] {
                    *w = rng.random_range(-bound..bound);
                }
                params
            }
        }
    }

    /// Exact gradient of the per-sample cross-entropy loss.
    pub fn per_sample_gradient(&self, params: &[f64], x: &[f64], label: usize) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        let mut scratch = Vec::new();
        self.accumulate(params, x, label, 1.0, &mut grad, &mut scratch);
        grad
    }

    pub fn loss(&self, params: &[f64], x: &[f64], label: usize) -> f64 {
        let mut scratch = Vec::new();
        self.forward(params, x, label, &mut scratch)
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let mut scratch = Vec::new();
        match *self {
            Model::Logistic { classes, .. } if classes <= 2 => {
                usize::from(logistic_margin(params, x) > 0.0)
            }
            _ => {
                self.logits(params, x, &mut scratch);
                argmax(self.logit_slice(&scratch))
            }
        }
    }

    /// Adds `scale · ∇loss` to `acc` and returns the loss.
    pub(crate) fn accumulate(
        &self,
        params: &[f64],
        x: &[f64],
        label: usize,
        scale: f64,
        acc: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> f64 {
        debug_assert_eq!(params.len(), self.dim());
        debug_assert_eq!(x.len(), self.d_in());
        match *self {
            Model::Logistic { d_in, classes } if classes <= 2 => {
                let z = logistic_margin(params, x);
                let y = if label == 1 { 1.0 } else { 0.0 };
                let residual = scale * (sigmoid(z) - y);
                for (a, xi) in acc[..d_in].iter_mut().zip(x) {
                    *a += residual * xi;
                }
                acc[d_in] += residual;
                softplus(z) - y * z
            }
            Model::Logistic { d_in, classes } => {
                self.logits(params, x, scratch);
                let loss = softmax_in_place(&mut scratch[..classes], label);
                let bias = classes * d_in;
                for c in 0..classes {
                    let r = scale * scratch[c];
                    for (a, xi) in acc[c * d_in..(c + 1) * d_in].iter_mut().zip(x) {
                        *a += r * xi;
                    }
                    acc[bias + c] += r;
                }
                loss
            }
            Model::Mlp {
                d_in,
                hidden,
                classes,
            } => {
                // scratch = [h (hidden), p (classes), dh (hidden)]
                self.logits(params, x, scratch);
                let (h, rest) = scratch.split_at_mut(hidden);
                let loss = softmax_in_place(&mut rest[..classes], label);
                let p = &rest[..classes];
                let o_w1 = 0;
                let o_b1 = hidden * d_in;
                let o_w2 = o_b1 + hidden;
                let o_b2 = o_w2 + classes * hidden;
                let w2 = &params[o_w2..o_b2];
                let mut dh = vec![0.0; hidden];
                for c in 0..classes {
                    let r = scale * p[c];
                    acc[o_b2 + c] += r;
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    for j in 0..hidden {
                        acc[o_w2 + c * hidden + j] += r * h[j];
                        dh[j] += r * row[j];
                    }
                }
                for j in 0..hidden {
                    let da = dh[j] * (1.0 - h[j] * h[j]);
                    acc[o_b1 + j] += da;
                    for (a, xi) in acc[o_w1 + j * d_in..o_w1 + (j + 1) * d_in]
                        .iter_mut()
                        .zip(x)
                    {
                        *a += da * xi;
                    }
                }
                loss
            }
        }
    }

    fn forward(&self, params: &[f64], x: &[f64], label: usize, scratch: &mut Vec<f64>) -> f64 {
        match *self {
            Model::Logistic { classes, .. } if classes <= 2 => {
                let z = logistic_margin(params, x);
                let y = if label == 1 { 1.0 } else { 0.0 };
                softplus(z) - y * z
            }
            _ => {
                self.logits(params, x, scratch);
                let logits = self.logit_slice(scratch);
                log_sum_exp(logits) - logits[label]
            }
        }
    }

    /// Fills `scratch` with the logits (MLP: hidden activations first).
    fn logits(&self, params: &[f64], x: &[f64], scratch: &mut Vec<f64>) {
        match *self {
            Model::Logistic { d_in, classes } => {
                scratch.clear();
                let bias = classes * d_in;
                scratch.extend(
                    (0..classes)
                        .map(|c| dot(&params[c * d_in..(c + 1) * d_in], x) + params[bias + c]),
                );
            }
            Model::Mlp {
                d_in,
                hidden,
                classes,
            } => {
                scratch.clear();
                let o_b1 = hidden * d_in;
                let o_w2 = o_b1 + hidden;
                let o_b2 = o_w2 + classes * hidden;
                scratch.extend((0..hidden).map(|j| {
                    (dot(&params[j * d_in..(j + 1) * d_in], x) + params[o_b1 + j]).tanh()
                }));
                for c in 0..classes {
                    let z = dot(
                        &params[o_w2 + c * hidden..o_w2 + (c + 1) * hidden],
                        &scratch[..hidden],
                    ) + params[o_b2 + c];
                    scratch.push(z);
                }
            }
        }
    }

    fn logit_slice<'a>(&self, scratch: &'a [f64]) -> &'a [f64] {
        match *self {
            Model::Logistic { .. } => scratch,
            Model::Mlp { hidden, .. } => &scratch[hidden..],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic_margin(params: &[f64], x: &[f64]) -> f64 {
    let d_in = x.len();
    dot(&params[..d_in], x) + params[d_in]
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Replaces logits by `softmax − onehot(label)`; returns the cross-entropy.
fn softmax_in_place(logits: &mut [f64], label: usize) -> f64 {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    for z in logits.iter_mut() {
        *z = (*z - lse).exp();
    }
    logits[label] -= 1.0;
    loss
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in v.iter().enumerate() {
        if z > v[best] {
            best = i;
        }
    }
    best
}

/// Global loss and gradient `f(x) = (1/n) Σ_i f_i(x)` with `f_i` the mean
/// over node `i`'s samples. Per-node terms are combined in node order, so
/// the result does not depend on the thread pool.
pub fn full_objective(model: &Model, dataset: &Dataset, params: &[f64]) -> (f64, Vec<f64>) {
    let dim = model.dim();
    let locals: Vec<(f64, Vec<f64>)> = dataset
        .partitions
        .par_iter()
        .map(|part| local_objective(model, part, params))
        .collect();
    let n = locals.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in &locals {
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / n;
        }
    }
    (loss, grad)
}

/// `f_i` and its gradient over one partition.
pub fn local_objective(model: &Model, part: &Partition, params: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.dim()];
    let mut scratch = Vec::new();
    let j = part.len() as f64;
    let mut loss = 0.0;
    for (x, y) in part.iter() {
        loss += model.accumulate(params, x, y, 1.0 / j, &mut grad, &mut scratch);
    }
    (loss / j, grad)
}

pub fn accuracy(model: &Model, part: &Partition, params: &[f64]) -> Option<f64> {
    if part.is_empty() {
        return None;
    }
    let correct = part
        .iter()
        .filter(|(x, y)| model.predict(params, x) == *y)
        .count();
    Some(correct as f64 / part.len() as f64)
}

/// Largest per-sample gradient norm over the training data, an empirical
/// stand-in for the per-sample gradient bound.
pub fn max_sample_gradient_norm(model: &Model, dataset: &Dataset, params: &[f64]) -> f64 {
    dataset
        .partitions
        .iter()
        .flat_map(|p| p.iter())
        .map(|(x, y)| norm(&model.per_sample_gradient(params, x, y)))
        .fold(0.0, f64::max)
}

/// Largest observed `‖∇f_i(a) − ∇f_i(b)‖ / ‖a − b‖` over random pairs
/// within `radius` of `center`, maximised over nodes. A lower bound on the
/// smoothness constant.
pub fn estimate_smoothness(
    model: &Model,
    dataset: &Dataset,
    center: &[f64],
    radius: f64,
    pairs: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let a: Vec<f64> = center
            .iter()
            .map(|c| c + radius * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = center
            .iter()
            .map(|c| c + radius * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let gap = norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        for part in &dataset.partitions {
            let (_, ga) = local_objective(model, part, &a);
            let (_, gb) = local_objective(model, part, &b);
            let diff: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
            best = best.max(norm(&diff) / gap);
        }
    }
    best
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A model trained on a partitioned dataset.
#[derive(Debug, Clone)]
pub struct SupervisedTask {
    pub model: Model,
    pub dataset: Dataset,
}

impl SupervisedTask {
    pub fn new(model: Model, dataset: Dataset) -> Self {
        assert_eq!(
            model.d_in(),
            dataset.d_in,
            "model input width must match the data"
        );
        Self { model, dataset }
    }
}

impl Task for SupervisedTask {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn nodes(&self) -> usize {
        self.dataset.nodes()
    }

    fn local_size(&self) -> usize {
        self.dataset.local_size()
    }

    fn sample_gradient(&self, node: usize, index: usize, params: &[f64], grad: &mut [f64]) {
        let (x, y) = self.dataset.partitions[node].sample(index);
        grad.fill(0.0);
        let mut scratch = Vec::new();
        self.model.accumulate(params, x, y, 1.0, grad, &mut scratch);
    }

    fn objective(&self, params: &[f64]) -> (f64, Vec<f64>) {
        full_objective(&self.model, &self.dataset, params)
    }

    fn accuracy(&self, params: &[f64]) -> Option<f64> {
        accuracy(&self.model, &self.dataset.test, params)
    }

    fn initial_params(&self, seed: u64) -> Vec<f64> {
        self.model.init_params(seed)
    }
}
