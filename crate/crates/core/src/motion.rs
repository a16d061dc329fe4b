//! Motion classification: a single-layer LSTM over pose windows with a
//! softmax readout, and a confusion channel that corrupts true labels at
//! configured true-positive rates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{MotionId, PlanLibrary};

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("expected {expected} input features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty window")]
    EmptyWindow,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset needs at least two classes, found {0}")]
    Degenerate(usize),
    #[error("label {0} is not one of the classifier's classes")]
    UnknownLabel(MotionId),
    #[error("true-positive rate {rate} for motion {motion} is outside [0, 1]")]
    RateOutOfRange { motion: MotionId, rate: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// One labelled pose window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub features: Vec<Vec<f64>>,
    pub label: MotionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 60,
            learning_rate: 0.01,
            epochs: 150,
            seed: 7,
        }
    }
}

/// Gradients (or any parameter-shaped quantity) of an [`Lstm`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Gate weights, rows `[input; forget; cell; output]`, columns `[x; h]`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Readout weights.
    pub wy: DMatrix<f64>,
    pub by: DVector<f64>,
}

impl LstmParams {
    fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        LstmParams {
            w: DMatrix::zeros(4 * hidden, input + hidden),
            b: DVector::zeros(4 * hidden),
            wy: DMatrix::zeros(classes, hidden),
            by: DVector::zeros(classes),
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [self.w.as_slice(), self.b.as_slice(), self.wy.as_slice(), self.by.as_slice()]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w.as_mut_slice(),
            self.b.as_mut_slice(),
            self.wy.as_mut_slice(),
            self.by.as_mut_slice(),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view in the order `w, b, wy, by` (column-major within tensors).
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }
}

struct StepCache {
    xh: DVector<f64>,
    c_prev: DVector<f64>,
    i: DVector<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
    o: DVector<f64>,
    c: DVector<f64>,
}

/// Single-layer LSTM classifier reading out from the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    input: usize,
    hidden: usize,
    classes: Vec<MotionId>,
    params: LstmParams,
    /// Per-feature standardization applied before the cell.
    mean: Vec<f64>,
    scale: Vec<f64>,
    final_loss: Option<f64>,
}

/// Per-step caches, final hidden state and class probabilities.
type Forward = (Vec<StepCache>, DVector<f64>, DVector<f64>);

impl Lstm {
    /// Uniform `±1/sqrt(hidden)` initialization, forget-gate bias 1.
    pub fn new(input: usize, hidden: usize, classes: Vec<MotionId>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (hidden as f64).sqrt();
        let mut params = LstmParams::zeros(input, hidden, classes.len());
        for t in params.slices_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-s..s);
            }
        }
        for k in hidden..2 * hidden {
            params.b[k] = 1.0;
        }
        params.by.fill(0.0);
        Lstm {
            input,
            hidden,
            classes,
            params,
            mean: vec![0.0; input],
            scale: vec![1.0; input],
            final_loss: None,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> &[MotionId] {
        &self.classes
    }

    pub fn params(&self) -> &LstmParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LstmParams {
        &mut self.params
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_loss
    }

    fn standardize(&self, x: &[f64]) -> Result<DVector<f64>, MotionError> {
        if x.len() != self.input {
            return Err(MotionError::Dimension {
                expected: self.input,
                got: x.len(),
            });
        }
        Ok(DVector::from_iterator(
            self.input,
            x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s),
        ))
    }

    fn forward(&self, window: &[Vec<f64>]) -> Result<Forward, MotionError> {
        if window.is_empty() {
            return Err(MotionError::EmptyWindow);
        }
        let h_n = self.hidden;
        let mut h = DVector::zeros(h_n);
        let mut c = DVector::zeros(h_n);
        let mut caches = Vec::with_capacity(window.len());
        for x in window {
            let x = self.standardize(x)?;
            let xh = DVector::from_iterator(self.input + h_n, x.iter().chain(h.iter()).copied());
            let z = &self.params.w * &xh + &self.params.b;
            let i = z.rows(0, h_n).map(sigmoid);
            let f = z.rows(h_n, h_n).map(sigmoid);
            let g = z.rows(2 * h_n, h_n).map(f64::tanh);
            let o = z.rows(3 * h_n, h_n).map(sigmoid);
            let c_new = f.component_mul(&c) + i.component_mul(&g);
            h = o.component_mul(&c_new.map(f64::tanh));
            caches.push(StepCache {
                xh,
                c_prev: c,
                i,
                f,
                g,
                o,
                c: c_new.clone(),
            });
            c = c_new;
        }
        let probs = softmax(&(&self.params.wy * &h + &self.params.by));
        Ok((caches, h, probs))
    }

    /// Class probabilities after the last sample of `window`.
    pub fn predict_proba(&self, window: &[Vec<f64>]) -> Result<Vec<f64>, MotionError> {
        Ok(self.forward(window)?.2.as_slice().to_vec())
    }

    /// Most probable motion and the full distribution.
    pub fn classify(&self, window: &[Vec<f64>]) -> Result<(MotionId, Vec<f64>), MotionError> {
        let p = self.predict_proba(window)?;
        let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        Ok((self.classes[best], p))
    }

    fn class_index(&self, label: MotionId) -> Result<usize, MotionError> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or(MotionError::UnknownLabel(label))
    }

    /// Cross-entropy of one window.
    pub fn loss(&self, window: &[Vec<f64>], label: MotionId) -> Result<f64, MotionError> {
        let k = self.class_index(label)?;
        let (_, _, p) = self.forward(window)?;
        Ok(-p[k].max(f64::MIN_POSITIVE).ln())
    }

    /// Cross-entropy and its gradient for one window, by backpropagation through time.
    pub fn loss_and_gradient(&self, window: &[Vec<f64>], label: MotionId) -> Result<(f64, LstmParams), MotionError> {
        let k = self.class_index(label)?;
        let (caches, h_last, p) = self.forward(window)?;
        let h_n = self.hidden;
        let mut grad = LstmParams::zeros(self.input, h_n, self.classes.len());
        let mut dlogits = p.clone();
        dlogits[k] -= 1.0;
        grad.wy = &dlogits * h_last.transpose();
        grad.by = dlogits.clone();
        let mut dh = self.params.wy.transpose() * &dlogits;
        let mut dc = DVector::zeros(h_n);
        for cache in caches.iter().rev() {
            let tc = cache.c.map(f64::tanh);
            let d_o = dh.component_mul(&tc);
            dc += dh.component_mul(&cache.o).component_mul(&tc.map(|t| 1.0 - t * t));
            let d_i = dc.component_mul(&cache.g);
            let d_g = dc.component_mul(&cache.i);
            let d_f = dc.component_mul(&cache.c_prev);
            let mut dz = DVector::zeros(4 * h_n);
            for j in 0..h_n {
                let (i, f, g, o) = (cache.i[j], cache.f[j], cache.g[j], cache.o[j]);
                dz[j] = d_i[j] * i * (1.0 - i);
                dz[h_n + j] = d_f[j] * f * (1.0 - f);
                dz[2 * h_n + j] = d_g[j] * (1.0 - g * g);
                dz[3 * h_n + j] = d_o[j] * o * (1.0 - o);
            }
            grad.w += &dz * cache.xh.transpose();
            grad.b += &dz;
            let dxh = self.params.w.transpose() * &dz;
            dh = dxh.rows(self.input, h_n).into_owned();
            dc = dc.component_mul(&cache.f);
        }
        Ok((-p[k].max(f64::MIN_POSITIVE).ln(), grad))
    }

    /// Mean loss and gradient over a dataset.
    pub fn batch_gradient(&self, data: &[LabeledWindow]) -> Result<(f64, LstmParams), MotionError> {
        let mut total = LstmParams::zeros(self.input, self.hidden, self.classes.len());
        let mut loss = 0.0;
        for item in data {
            let (l, g) = self.loss_and_gradient(&item.features, item.label)?;
            loss += l;
            for (t, s) in total.slices_mut().into_iter().zip(g.slices()) {
                for (a, b) in t.iter_mut().zip(s) {
                    *a += b;
                }
            }
        }
        let n = data.len() as f64;
        for t in total.slices_mut() {
            for v in t.iter_mut() {
                *v /= n;
            }
        }
        Ok((loss / n, total))
    }

    pub fn accuracy(&self, data: &[LabeledWindow]) -> Result<f64, MotionError> {
        if data.is_empty() {
            return Err(MotionError::EmptyDataset);
        }
        let mut correct = 0;
        for item in data {
            if self.classify(&item.features)?.0 == item.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Adam optimizer state over all parameter tensors.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut LstmParams, grad: &LstmParams) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
            for (w, &d) in p.iter_mut().zip(g) {
                self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * d;
                self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * d * d;
                *w -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
                k += 1;
            }
        }
    }
}

/// Result of offline training.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Lstm,
    /// Full-batch loss before each epoch's update, then the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch Adam training; deterministic for a given seed.
pub fn train_classifier(data: &[LabeledWindow], config: &TrainConfig) -> Result<TrainReport, MotionError> {
    let first = data.first().ok_or(MotionError::EmptyDataset)?;
    let input = first.features.first().ok_or(MotionError::EmptyWindow)?.len();
    let mut classes: Vec<MotionId> = data.iter().map(|d| d.label).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MotionError::Degenerate(classes.len()));
    }
    let mut model = Lstm::new(input, config.hidden, classes, config.seed);
    let (mean, scale) = feature_statistics(data, input)?;
    model.mean = mean;
    model.scale = scale;
    let mut adam = Adam::new(config.learning_rate, model.params.len());
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = model.batch_gradient(data)?;
        losses.push(loss);
        log::debug!("epoch {epoch}: loss {loss:.6}");
        adam.step(&mut model.params, &grad);
    }
    let (loss, _) = model.batch_gradient(data)?;
    losses.push(loss);
    model.final_loss = Some(loss);
    Ok(TrainReport { model, losses })
}

fn feature_statistics(data: &[LabeledWindow], input: usize) -> Result<(Vec<f64>, Vec<f64>), MotionError> {
    let mut sum = vec![0.0; input];
    let mut sq = vec![0.0; input];
    let mut n = 0.0;
    for x in data.iter().flat_map(|d| &d.features) {
        if x.len() != input {
            return Err(MotionError::Dimension {
                expected: input,
                got: x.len(),
            });
        }
        for (k, v) in x.iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
        n += 1.0;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, scale))
}

/// Named, shaped parameter array in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    /// `[rows, cols]`; vectors use `[len, 1]`.
    pub shape: [usize; 2],
    /// Column-major values.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: &str, m: &DMatrix<f64>) -> Self {
        Tensor {
            name: name.into(),
            shape: [m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn from_vector(name: &str, v: &[f64]) -> Self {
        Tensor {
            name: name.into(),
            shape: [v.len(), 1],
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, MotionError> {
        if self.shape[0] * self.shape[1] != self.data.len() {
            return Err(MotionError::Checkpoint(format!(
                "tensor {} has shape {:?} but {} values",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_column_slice(self.shape[0], self.shape[1], &self.data))
    }
}

/// Versioned JSON checkpoint of parameter arrays with shape metadata.
///
/// ```json
/// {"format": "hrc-checkpoint", "version": 1, "kind": "lstm-classifier",
///  "meta": {...}, "tensors": [{"name": "w", "shape": [r, c], "data": [...]}]}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "hrc-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(kind: &str, meta: serde_json::Value, tensors: Vec<Tensor>) -> Self {
        Checkpoint {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            kind: kind.into(),
            meta,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, MotionError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| MotionError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), MotionError> {
        if self.format != Self::FORMAT || self.version != Self::VERSION {
            return Err(MotionError::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        if self.kind != kind {
            return Err(MotionError::Checkpoint(format!("expected kind {kind}, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MotionError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| MotionError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| MotionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MotionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MotionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| MotionError::Checkpoint(e.to_string()))
    }
}

impl Lstm {
    pub const CHECKPOINT_KIND: &'static str = "lstm-classifier";

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "input": self.input,
            "hidden": self.hidden,
            "classes": self.classes,
            "final_loss": self.final_loss,
        });
        Checkpoint::new(
            Self::CHECKPOINT_KIND,
            meta,
            vec![
                Tensor::from_matrix("w", &self.params.w),
                Tensor::from_vector("b", self.params.b.as_slice()),
                Tensor::from_matrix("wy", &self.params.wy),
                Tensor::from_vector("by", self.params.by.as_slice()),
                Tensor::from_vector("mean", &self.mean),
                Tensor::from_vector("scale", &self.scale),
            ],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MotionError> {
        ck.expect_kind(Self::CHECKPOINT_KIND)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| MotionError::Checkpoint(format!("missing meta field {k}")))
        };
        let input: usize = parse_meta(field("input")?)?;
        let hidden: usize = parse_meta(field("hidden")?)?;
        let classes: Vec<MotionId> = parse_meta(field("classes")?)?;
        let final_loss: Option<f64> = parse_meta(field("final_loss")?)?;
        let params = LstmParams {
            w: ck.tensor("w")?.to_matrix()?,
            b: ck.tensor("b")?.to_matrix()?.column(0).into_owned(),
            wy: ck.tensor("wy")?.to_matrix()?,
            by: ck.tensor("by")?.to_matrix()?.column(0).into_owned(),
        };
        let expected = LstmParams::zeros(input, hidden, classes.len());
        let shapes = |p: &LstmParams| [p.w.shape(), p.b.shape(), p.wy.shape(), p.by.shape()];
        if shapes(&params) != shapes(&expected) {
            return Err(MotionError::Checkpoint("tensor shapes do not match metadata".into()));
        }
        Ok(Lstm {
            input,
            hidden,
            classes,
            params,
            mean: ck.tensor("mean")?.data.clone(),
            scale: ck.tensor("scale")?.data.clone(),
            final_loss,
        })
    }
}

pub(crate) fn parse_meta<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T, MotionError> {
    serde_json::from_value(v).map_err(|e| MotionError::Checkpoint(e.to_string()))
}

/// Noisy motion label source: reports the true motion with its
/// true-positive rate, otherwise a uniformly chosen different motion.
#[derive(Debug, Clone)]
pub struct ConfusionChannel {
    motions: Vec<MotionId>,
    rates: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Per-motion rates keyed by motion name.
pub const PAPER_RATES: [(&str, f64); 4] = [
    ("screwing", 0.834),
    ("fetching", 0.642),
    ("receiving", 0.591),
    ("taping", 0.842),
];

impl ConfusionChannel {
    pub fn new(motions: Vec<MotionId>, rates: Vec<f64>, seed: u64) -> Result<Self, MotionError> {
        assert_eq!(motions.len(), rates.len(), "one rate per motion");
        for (&motion, &rate) in motions.iter().zip(&rates) {
            if !(0.0..=1.0).contains(&rate) {
                return Err(MotionError::RateOutOfRange { motion, rate });
            }
        }
        Ok(ConfusionChannel {
            motions,
            rates,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Rates for the library's human motions from a name table, shifted by
    /// `delta` percentage points.
    pub fn rates_for(library: &PlanLibrary, table: &[(&str, f64)], delta: f64) -> Result<(Vec<MotionId>, Vec<f64>), MotionError> {
        let motions = library.human_motions();
        let mut rates = Vec::with_capacity(motions.len());
        for &m in &motions {
            let name = &library.motions()[m.0].name;
            let base = table.iter().find(|(n, _)| n == name).map(|(_, r)| *r).unwrap_or(1.0);
            let rate = base + delta / 100.0;
            if !(-1e-12..=1.0 + 1e-12).contains(&rate) {
                return Err(MotionError::RateOutOfRange { motion: m, rate });
            }
            rates.push(rate.clamp(0.0, 1.0));
        }
        Ok((motions, rates))
    }

    pub fn motions(&self) -> &[MotionId] {
        &self.motions
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Row-stochastic confusion matrix over `motions()`, rows = true motion.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let n = self.motions.len();
        self.rates
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            p
                        } else {
                            (1.0 - p) / (n - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Motions outside the channel's support pass through unchanged.
    pub fn corrupt(&mut self, truth: MotionId) -> MotionId {
        let Some(i) = self.motions.iter().position(|&m| m == truth) else {
            return truth;
        };
        let n = self.motions.len();
        if n == 1 || self.rng.random::<f64>() < self.rates[i] {
            return truth;
        }
        let mut j = self.rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        self.motions[j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_window(rng: &mut ChaCha8Rng, label: usize, len: usize) -> LabeledWindow {
        // Class = sign of the mean velocity of the first feature.
        let drift = if label == 0 { -0.2 } else { 0.2 };
        let features = (0..len)
            .map(|_| vec![drift + rng.random_range(-0.1..0.1), rng.random_range(-1.0..1.0)])
            .collect();
        LabeledWindow {
            features,
            label: MotionId(label),
        }
    }

    fn toy_dataset(seed: u64, n: usize) -> Vec<LabeledWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|k| toy_window(&mut rng, k % 2, 5)).collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut model = Lstm::new(2, 3, vec![MotionId(0), MotionId(1), MotionId(2)], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..model.params.len() {
            let v = model.params.get(k);
            model.params.set(k, v + rng.random_range(-0.3..0.3));
        }
        let window: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let label = MotionId(1);
        let (_, grad) = model.loss_and_gradient(&window, label).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..model.params.len() {
            let v = model.params.get(k);
            model.params.set(k, v + h);
            let up = model.loss(&window, label).unwrap();
            model.params.set(k, v - h);
            let down = model.loss(&window, label).unwrap();
            model.params.set(k, v);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.get(k);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Lstm::new(9, 60, (0..4).map(MotionId).collect(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let window: Vec<Vec<f64>> = (0..10).map(|_| (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let (label, p) = model.classify(&window).unwrap();
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(label.0 < 4);
        }
    }

    #[test]
    fn dimension_mismatch_and_empty_window() {
        let model = Lstm::new(3, 4, vec![MotionId(0), MotionId(1)], 1);
        assert!(matches!(model.classify(&[vec![1.0]]), Err(MotionError::Dimension { expected: 3, got: 1 })));
        assert!(matches!(model.classify(&[]), Err(MotionError::EmptyWindow)));
    }

    #[test]
    fn separable_toy_problem_reaches_full_accuracy() {
        let data = toy_dataset(5, 40);
        let config = TrainConfig {
            hidden: 8,
            learning_rate: 0.05,
            epochs: 200,
            seed: 2,
        };
        let report = train_classifier(&data, &config).unwrap();
        assert_eq!(report.model.accuracy(&data).unwrap(), 1.0);
        let first = report.losses[0];
        let last = *report.losses.last().unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn training_loss_is_non_increasing_up_to_tolerance() {
        let data = toy_dataset(8, 30);
        let config = TrainConfig {
            hidden: 6,
            learning_rate: 0.01,
            epochs: 100,
            seed: 4,
        };
        let report = train_classifier(&data, &config).unwrap();
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = toy_dataset(1, 20);
        let config = TrainConfig {
            hidden: 5,
            learning_rate: 0.02,
            epochs: 30,
            seed: 9,
        };
        let a = train_classifier(&data, &config).unwrap().model;
        let b = train_classifier(&data, &config).unwrap().model;
        assert_eq!(a.params.flatten(), b.params.flatten());
    }

    #[test]
    fn degenerate_datasets_are_rejected() {
        assert!(matches!(train_classifier(&[], &TrainConfig::default()), Err(MotionError::EmptyDataset)));
        let one_class: Vec<LabeledWindow> = toy_dataset(1, 10).into_iter().filter(|d| d.label.0 == 0).collect();
        assert!(matches!(train_classifier(&one_class, &TrainConfig::default()), Err(MotionError::Degenerate(1))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = toy_dataset(2, 10);
        let config = TrainConfig {
            hidden: 4,
            learning_rate: 0.02,
            epochs: 5,
            seed: 1,
        };
        let model = train_classifier(&data, &config).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lstm.json");
        model.to_checkpoint().save(&path).unwrap();
        let back = Lstm::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, model);
        let mut wrong = model.to_checkpoint();
        wrong.kind = "mlp".into();
        assert!(Lstm::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn identity_channel_never_corrupts() {
        let motions: Vec<MotionId> = (0..4).map(MotionId).collect();
        let mut ch = ConfusionChannel::new(motions.clone(), vec![1.0; 4], 3).unwrap();
        for k in 0..1000 {
            let m = motions[k % 4];
            assert_eq!(ch.corrupt(m), m);
        }
    }

    #[test]
    fn paper_rates_and_shift() {
        let lib = PlanLibrary::desktop();
        let (motions, rates) = ConfusionChannel::rates_for(&lib, &PAPER_RATES, 0.0).unwrap();
        let by_name = |name: &str| rates[motions.iter().position(|&m| lib.motions()[m.0].name == name).unwrap()];
        assert_eq!(by_name("screwing"), 0.834);
        let (motions, shifted) = ConfusionChannel::rates_for(&lib, &PAPER_RATES, -30.0).unwrap();
        let want = [("screwing", 0.534), ("fetching", 0.342), ("receiving", 0.291), ("taping", 0.542)];
        for (name, r) in want {
            let got = shifted[motions.iter().position(|&m| lib.motions()[m.0].name == name).unwrap()];
            assert!((got - r).abs() < 1e-12, "{name}: {got}");
        }
        assert!(ConfusionChannel::rates_for(&lib, &PAPER_RATES, -70.0).is_err());
    }

    #[test]
    fn empirical_rates_match_configuration() {
        let lib = PlanLibrary::desktop();
        let (motions, rates) = ConfusionChannel::rates_for(&lib, &PAPER_RATES, 0.0).unwrap();
        let mut ch = ConfusionChannel::new(motions.clone(), rates.clone(), 42).unwrap();
        let n = 10_000;
        for (i, &m) in motions.iter().enumerate() {
            let mut counts = vec![0usize; motions.len()];
            for _ in 0..n {
                let out = ch.corrupt(m);
                counts[motions.iter().position(|&x| x == out).unwrap()] += 1;
            }
            let tpr = counts[i] as f64 / n as f64;
            assert!((tpr - rates[i]).abs() < 0.02, "motion {m}: {tpr}");
            // Chi-square against the configured row, 3 degrees of freedom.
            let row = &ch.matrix()[i];
            let chi2: f64 = counts
                .iter()
                .zip(row)
                .map(|(&c, &p)| {
                    let e = p * n as f64;
                    (c as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < 16.27, "chi2 {chi2} (p < 0.001 cutoff)");
        }
        for row in ch.matrix() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_is_seed_deterministic() {
        let motions: Vec<MotionId> = (0..4).map(MotionId).collect();
        let run = |seed| {
            let mut ch = ConfusionChannel::new(motions.clone(), vec![0.5; 4], seed).unwrap();
            (0..200).map(|k| ch.corrupt(motions[k % 4])).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
