//! Human wrist trajectory prediction: a feedforward transition model maps
//! one second of past wrist positions and the current action label to the
//! next second of positions. Its hidden layers are trained offline; the
//! linear output layer is adapted online by recursive least squares with a
//! forgetting factor.
//!
//! Positions enter and leave the network relative to the latest sample and
//! scaled by [`POSITION_SCALE`].

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Action;
use crate::motion::{parse_meta, Checkpoint, MotionError, Tensor};

pub const POSITION_SCALE: f64 = 10.0;
pub const DEFAULT_FORGETTING: f64 = 0.98;
pub const DEFAULT_COVARIANCE_SCALE: f64 = 1e3;
const COVARIANCE_LIMIT: f64 = 1e12;

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("expected {expected} history samples, got {got}")]
    HistoryLength { expected: usize, got: usize },
    #[error("expected {expected} features, got {got}")]
    FeatureLength { expected: usize, got: usize },
    #[error("forgetting factor must lie in (0, 1], got {0}")]
    InvalidForgetting(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("least-squares system is singular")]
    Singular,
    #[error(transparent)]
    Checkpoint(#[from] MotionError),
}

/// Minimum-jerk position from `start` to `end` at normalized time `s` in [0, 1].
pub fn min_jerk(start: &[f64; 3], end: &[f64; 3], s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    let blend = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
    [
        start[0] + (end[0] - start[0]) * blend,
        start[1] + (end[1] - start[1]) * blend,
        start[2] + (end[2] - start[2]) * blend,
    ]
}

/// One training example: `history` then `future` wrist samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub history: Vec<[f64; 3]>,
    pub action: Action,
    pub future: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub history: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            history: 10,
            horizon: 10,
            hidden: vec![40, 40, 40],
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 64,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// Offline-trained transition model `x(k+1..k+M) = theta^T Phi(x(k-H+1..k), a_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    history: usize,
    horizon: usize,
    actions: Vec<Action>,
    layers: Vec<Layer>,
    /// Output layer, `features x outputs`; the last feature is the bias.
    theta: DMatrix<f64>,
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

impl TrajectoryModel {
    pub fn new(history: usize, horizon: usize, actions: Vec<Action>, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = 3 * history + actions.len();
        for &width in hidden {
            let s = (6.0 / (fan_in + width) as f64).sqrt();
            layers.push(Layer {
                w: DMatrix::from_fn(width, fan_in, |_, _| rng.random_range(-s..s)),
                b: DVector::zeros(width),
            });
            fan_in = width;
        }
        let s = (6.0 / (fan_in + 1 + 3 * horizon) as f64).sqrt();
        let theta = DMatrix::from_fn(fan_in + 1, 3 * horizon, |_, _| rng.random_range(-s..s));
        TrajectoryModel {
            history,
            horizon,
            actions,
            layers,
            theta,
        }
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Actions the one-hot encoding covers.
    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn n_features(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.theta.ncols()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    fn encode(&self, history: &[[f64; 3]], action: Action) -> Result<DVector<f64>, TrajectoryError> {
        if history.len() != self.history {
            return Err(TrajectoryError::HistoryLength {
                expected: self.history,
                got: history.len(),
            });
        }
        let last = history[history.len() - 1];
        let mut x = Vec::with_capacity(3 * self.history + self.actions.len());
        for p in history {
            x.extend((0..3).map(|d| (p[d] - last[d]) * POSITION_SCALE));
        }
        x.extend(self.actions.iter().map(|a| if *a == action { 1.0 } else { 0.0 }));
        Ok(DVector::from_vec(x))
    }

    fn encode_target(&self, last: &[f64; 3], future: &[[f64; 3]]) -> DVector<f64> {
        DVector::from_iterator(
            3 * future.len(),
            future.iter().flat_map(|p| (0..3).map(move |d| (p[d] - last[d]) * POSITION_SCALE)),
        )
    }

    fn decode(&self, last: &[f64; 3], y: &DVector<f64>) -> Vec<[f64; 3]> {
        (0..self.horizon)
            .map(|m| std::array::from_fn(|d| last[d] + y[3 * m + d] / POSITION_SCALE))
            .collect()
    }

    /// Hidden-layer activations for a batch of encoded inputs (columns),
    /// input first; the last entry is `Phi` without the bias row.
    fn activations(&self, x: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x];
        for layer in &self.layers {
            let mut z = &layer.w * acts.last().expect("non-empty");
            add_bias(&mut z, &layer.b);
            acts.push(z.map(f64::tanh));
        }
        acts
    }

    fn with_bias_row(h: &DMatrix<f64>) -> DMatrix<f64> {
        h.clone().insert_row(h.nrows(), 1.0)
    }

    /// Feature vector `Phi_k` (including the trailing bias 1).
    pub fn features(&self, history: &[[f64; 3]], action: Action) -> Result<DVector<f64>, TrajectoryError> {
        let x = self.encode(history, action)?;
        let acts = self.activations(DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        Ok(Self::with_bias_row(acts.last().expect("non-empty")).column(0).into_owned())
    }

    /// Predicted next `horizon` wrist positions using the model's own output layer.
    pub fn predict(&self, history: &[[f64; 3]], action: Action) -> Result<Vec<[f64; 3]>, TrajectoryError> {
        self.predict_with(&self.theta, history, action)
    }

    /// Prediction with an externally adapted output layer.
    pub fn predict_with(
        &self,
        theta: &DMatrix<f64>,
        history: &[[f64; 3]],
        action: Action,
    ) -> Result<Vec<[f64; 3]>, TrajectoryError> {
        let phi = self.features(history, action)?;
        let y = theta.transpose() * phi;
        Ok(self.decode(&history[history.len() - 1], &y))
    }

    /// Network target for a window, in model output coordinates.
    pub fn target(&self, history: &[[f64; 3]], future: &[[f64; 3]]) -> DVector<f64> {
        self.encode_target(&history[history.len() - 1], future)
    }

    fn batch(&self, data: &[&TrajectoryWindow]) -> Result<(DMatrix<f64>, DMatrix<f64>), TrajectoryError> {
        let d_in = 3 * self.history + self.actions.len();
        let mut x = DMatrix::zeros(d_in, data.len());
        let mut y = DMatrix::zeros(3 * self.horizon, data.len());
        for (c, w) in data.iter().enumerate() {
            x.set_column(c, &self.encode(&w.history, w.action)?);
            if w.future.len() != self.horizon {
                return Err(TrajectoryError::HistoryLength {
                    expected: self.horizon,
                    got: w.future.len(),
                });
            }
            y.set_column(c, &self.target(&w.history, &w.future));
        }
        Ok((x, y))
    }

    /// Mean squared error over outputs and its gradient for every layer
    /// (hidden layers in order, then `theta`).
    fn loss_and_gradient(&self, x: DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<Layer>, DMatrix<f64>) {
        let acts = self.activations(x);
        let phi = Self::with_bias_row(acts.last().expect("non-empty"));
        let pred = self.theta.transpose() * &phi;
        let diff = pred - y;
        let n = diff.len() as f64;
        let loss = diff.norm_squared() / n;
        let d_pred = diff * (2.0 / n);
        let d_theta = &phi * d_pred.transpose();
        let rows = self.theta.nrows() - 1;
        let mut d_act = self.theta.rows(0, rows) * &d_pred;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &acts[l + 1];
            let dz = d_act.component_mul(&a.map(|v| 1.0 - v * v));
            let dw = &dz * acts[l].transpose();
            let db = dz.column_sum();
            d_act = layer.w.transpose() * &dz;
            grads.push(Layer { w: dw, b: db });
        }
        grads.reverse();
        (loss, grads, d_theta)
    }

    /// Mean squared error in model output coordinates.
    pub fn mse(&self, data: &[TrajectoryWindow]) -> Result<f64, TrajectoryError> {
        if data.is_empty() {
            return Err(TrajectoryError::EmptyDataset);
        }
        let refs: Vec<&TrajectoryWindow> = data.iter().collect();
        let (x, y) = self.batch(&refs)?;
        Ok(self.loss_and_gradient(x, &y).0)
    }

    /// Refits `theta` by ridge-regularized least squares on the current features.
    pub fn fit_output_layer(&mut self, data: &[TrajectoryWindow], ridge: f64) -> Result<(), TrajectoryError> {
        if data.is_empty() {
            return Err(TrajectoryError::EmptyDataset);
        }
        let refs: Vec<&TrajectoryWindow> = data.iter().collect();
        let (x, y) = self.batch(&refs)?;
        let acts = self.activations(x);
        let phi = Self::with_bias_row(acts.last().expect("non-empty"));
        self.theta = least_squares(&phi.transpose(), &y.transpose(), ridge)?;
        Ok(())
    }
}

/// `argmin_theta |A theta - B|^2 + ridge |theta|^2` via Cholesky.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>, TrajectoryError> {
    let n = a.ncols();
    let gram = a.transpose() * a + DMatrix::identity(n, n) * ridge;
    let chol = Cholesky::new(gram).ok_or(TrajectoryError::Singular)?;
    Ok(chol.solve(&(a.transpose() * b)))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn update(&mut self, params: &mut [f64], grads: &[f64], offset: usize, lr: f64) {
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let i = offset + k;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryTrainReport {
    pub model: TrajectoryModel,
    /// Full-dataset MSE after each epoch.
    pub losses: Vec<f64>,
}

/// Mini-batch Adam on the whole network, then an exact least-squares refit
/// of the output layer. Deterministic for a given seed.
pub fn train_trajectory_model(
    data: &[TrajectoryWindow],
    actions: Vec<Action>,
    config: &TrajectoryConfig,
) -> Result<TrajectoryTrainReport, TrajectoryError> {
    if data.is_empty() {
        return Err(TrajectoryError::EmptyDataset);
    }
    let mut model = TrajectoryModel::new(config.history, config.horizon, actions, &config.hidden, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let n_params: usize = model.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + model.theta.len();
    let mut adam = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let refs: Vec<&TrajectoryWindow> = chunk.iter().map(|&i| &data[i]).collect();
            let (x, y) = model.batch(&refs)?;
            let (_, grads, d_theta) = model.loss_and_gradient(x, &y);
            adam.t += 1;
            let mut offset = 0;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                adam.update(layer.w.as_mut_slice(), g.w.as_slice(), offset, config.learning_rate);
                offset += layer.w.len();
                adam.update(layer.b.as_mut_slice(), g.b.as_slice(), offset, config.learning_rate);
                offset += layer.b.len();
            }
            adam.update(model.theta.as_mut_slice(), d_theta.as_slice(), offset, config.learning_rate);
        }
        let loss = model.mse(data)?;
        log::debug!("trajectory epoch {epoch}: mse {loss:.6}");
        losses.push(loss);
    }
    model.fit_output_layer(data, 1e-6)?;
    Ok(TrajectoryTrainReport { model, losses })
}

impl TrajectoryModel {
    pub const CHECKPOINT_KIND: &'static str = "trajectory-mlp";

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "history": self.history,
            "horizon": self.horizon,
            "actions": self.actions,
            "layers": self.layers.len(),
        });
        let mut tensors = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            tensors.push(Tensor::from_matrix(&format!("w{l}"), &layer.w));
            tensors.push(Tensor::from_vector(&format!("b{l}"), layer.b.as_slice()));
        }
        tensors.push(Tensor::from_matrix("theta", &self.theta));
        Checkpoint::new(Self::CHECKPOINT_KIND, meta, tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrajectoryError> {
        ck.expect_kind(Self::CHECKPOINT_KIND)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| MotionError::Checkpoint(format!("missing meta field {k}")))
        };
        let history: usize = parse_meta(field("history")?)?;
        let horizon: usize = parse_meta(field("horizon")?)?;
        let actions: Vec<Action> = parse_meta(field("actions")?)?;
        let n_layers: usize = parse_meta(field("layers")?)?;
        let mut layers = Vec::with_capacity(n_layers);
        let mut fan_in = 3 * history + actions.len();
        for l in 0..n_layers {
            let w = ck.tensor(&format!("w{l}"))?.to_matrix()?;
            let b = ck.tensor(&format!("b{l}"))?.to_matrix()?.column(0).into_owned();
            if w.ncols() != fan_in || b.len() != w.nrows() {
                return Err(MotionError::Checkpoint(format!("layer {l} shape mismatch")).into());
            }
            fan_in = w.nrows();
            layers.push(Layer { w, b });
        }
        let theta = ck.tensor("theta")?.to_matrix()?;
        if theta.shape() != (fan_in + 1, 3 * horizon) {
            return Err(MotionError::Checkpoint("theta shape mismatch".into()).into());
        }
        Ok(TrajectoryModel {
            history,
            horizon,
            actions,
            layers,
            theta,
        })
    }
}

/// Recursive least squares over a linear map `y = theta^T phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    theta: DMatrix<f64>,
    f: DMatrix<f64>,
    lambda: f64,
    init_scale: f64,
    resets: usize,
}

impl RlsState {
    /// Starts from `theta` with covariance `init_scale * I`.
    pub fn new(theta: DMatrix<f64>, lambda: f64, init_scale: f64) -> Result<Self, TrajectoryError> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(TrajectoryError::InvalidForgetting(lambda));
        }
        let n = theta.nrows();
        Ok(RlsState {
            theta,
            f: DMatrix::identity(n, n) * init_scale,
            lambda,
            init_scale,
            resets: 0,
        })
    }

    /// Exact least-squares state from a batch of rows (`phi` is samples x
    /// features); subsequent updates continue the same solution recursively.
    pub fn from_batch(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self, TrajectoryError> {
        let gram = phi.transpose() * phi;
        let f = Cholesky::new(gram).ok_or(TrajectoryError::Singular)?.inverse();
        let theta = &f * (phi.transpose() * y);
        let mut state = Self::new(theta, lambda, DEFAULT_COVARIANCE_SCALE)?;
        state.f = f;
        Ok(state)
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn predict(&self, phi: &DVector<f64>) -> DVector<f64> {
        self.theta.transpose() * phi
    }

    /// One update with features `phi` and observed output `y`; returns the
    /// a-priori residual norm.
    pub fn adapt(&mut self, phi: &DVector<f64>, y: &DVector<f64>) -> Result<f64, TrajectoryError> {
        if phi.len() != self.theta.nrows() {
            return Err(TrajectoryError::FeatureLength {
                expected: self.theta.nrows(),
                got: phi.len(),
            });
        }
        let residual = y - self.theta.transpose() * phi;
        let f_phi = &self.f * phi;
        let denom = self.lambda + phi.dot(&f_phi);
        let gain = &f_phi / denom;
        self.theta += &gain * residual.transpose();
        self.f = (&self.f - &gain * f_phi.transpose()) / self.lambda;
        self.f = (&self.f + self.f.transpose()) * 0.5;
        if self.f.norm() > COVARIANCE_LIMIT || !self.f.iter().all(|v| v.is_finite()) {
            log::warn!("RLS covariance blew up; resetting to {}*I", self.init_scale);
            let n = self.f.nrows();
            self.f = DMatrix::identity(n, n) * self.init_scale;
            self.resets += 1;
        }
        Ok(residual.norm())
    }

    pub fn is_positive_definite(&self) -> bool {
        Cholesky::new(self.f.clone()).is_some()
    }
}

/// Online predictor: a shared transition model plus an adapted output layer.
#[derive(Debug, Clone)]
pub struct TrajectoryPredictor {
    model: TrajectoryModel,
    rls: RlsState,
    /// Features of earlier windows waiting for their future to be observed.
    pending: Vec<(usize, DVector<f64>, [f64; 3])>,
}

impl TrajectoryPredictor {
    pub fn new(model: TrajectoryModel, lambda: f64) -> Result<Self, TrajectoryError> {
        let rls = RlsState::new(model.theta.clone(), lambda, DEFAULT_COVARIANCE_SCALE)?;
        Ok(TrajectoryPredictor {
            model,
            rls,
            pending: Vec::new(),
        })
    }

    pub fn model(&self) -> &TrajectoryModel {
        &self.model
    }

    pub fn rls(&self) -> &RlsState {
        &self.rls
    }

    pub fn predict(&self, history: &[[f64; 3]], action: Action) -> Result<Vec<[f64; 3]>, TrajectoryError> {
        self.model.predict_with(&self.rls.theta, history, action)
    }

    /// Feeds the full wrist track up to the current sample (index
    /// `track.len() - 1`). Adapts on every window whose future is now complete
    /// and returns the prediction from the latest window, if long enough.
    pub fn step(&mut self, track: &[[f64; 3]], action: Action) -> Result<Option<Vec<[f64; 3]>>, TrajectoryError> {
        let (h, m) = (self.model.history, self.model.horizon);
        let now = track.len();
        let mut still = Vec::new();
        for (end, phi, last) in std::mem::take(&mut self.pending) {
            if end + m <= now {
                let y = self.model.encode_target(&last, &track[end..end + m]);
                self.rls.adapt(&phi, &y)?;
            } else {
                still.push((end, phi, last));
            }
        }
        self.pending = still;
        if now < h {
            return Ok(None);
        }
        let history = &track[now - h..];
        let phi = self.model.features(history, action)?;
        self.pending.push((now, phi.clone(), history[h - 1]));
        let y = self.rls.predict(&phi);
        Ok(Some(self.model.decode(&history[h - 1], &y)))
    }
}
