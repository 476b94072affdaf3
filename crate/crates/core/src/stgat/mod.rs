//! The learnable detector: drift-aware embedding, residual temporal
//! self-attention, graph attention fusion, prediction heads, curvature
//! regularization, exact gradients and the training loop.

mod forward;
mod grad;
mod train;

pub use forward::{forward, predict_overflow_inputs, ForwardOutput};
pub use grad::{composite_loss, finite_difference_grad, grad, loss_only, LossBreakdown};
pub use train::{
    build_split_batches, build_training_batches, fit, fit_on_batches, load_checkpoint, save_checkpoint,
    score_window_tail, stream_scores, window_metrics, window_scores, Checkpoint, FitResult,
    StreamScore, WindowScore, CHECKPOINT_VERSION, INPUT_CLAMP, WINDOW_SCORE_RANK,
};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datagen::DeviceGraph;
use crate::rng::{global_stream, StreamKind};

#[derive(Debug, thiserror::Error)]
pub enum StgatError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("labels must be 0 or 1, found {0}")]
    BadLabel(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("split has no devices")]
    EmptySplit,
    #[error("window longer than trace: window {window}, trace {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error(transparent)]
    Datagen(#[from] crate::datagen::DatagenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Curvature target: the hinge penalizes curvature above this level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuK {
    /// Mean curvature over the current mini-batch's nominal-labeled steps,
    /// recomputed per batch and treated as a constant target.
    BatchNominalMean,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub d_model: usize,
    pub n_layers: usize,
    pub lambda_rec: f64,
    pub lambda_cls: f64,
    pub lambda_delta: f64,
    pub lambda_k: f64,
    pub mu_k: MuK,
    /// Weight of the auxiliary rollover-head loss.
    pub lambda_over: f64,
    /// Rollover auxiliary label horizon in steps.
    pub overflow_horizon: usize,
    /// Proximity margin in seconds for the rollover input flag.
    pub overflow_margin_s: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub use_drift_embedding: bool,
    pub use_graph_attention: bool,
    pub use_curvature_loss: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            lambda_rec: 1.0,
            lambda_cls: 1.0,
            lambda_delta: 0.1,
            lambda_k: 0.01,
            mu_k: MuK::BatchNominalMean,
            lambda_over: 0.1,
            overflow_horizon: 5,
            overflow_margin_s: 10.0,
            learning_rate: 1e-5,
            epochs: 60,
            seed: 1,
            use_drift_embedding: true,
            use_graph_attention: true,
            use_curvature_loss: true,
        }
    }
}

impl HyperParams {
    /// Training configuration tuned for the bundled synthetic benchmark.
    /// The classification weight is scaled up against the summed
    /// reconstruction term so the per-step mean cross-entropy trains at the
    /// same order of magnitude, and the curvature target is a fixed constant
    /// so the hinge is active.
    pub fn benchmark() -> Self {
        Self {
            lambda_rec: 0.02,
            lambda_cls: 500.0,
            lambda_over: 50.0,
            mu_k: MuK::Fixed(0.0),
            learning_rate: 1e-4,
            epochs: 150,
            ..Self::default()
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), StgatError> {
        if self.d_model < 4 || self.n_layers < 1 {
            return Err(StgatError::ShapeMismatch(format!(
                "need d_model >= 4 and n_layers >= 1, got {} and {}",
                self.d_model, self.n_layers
            )));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_cls", self.lambda_cls),
            ("lambda_delta", self.lambda_delta),
            ("lambda_k", self.lambda_k),
            ("lambda_over", self.lambda_over),
        ] {
            if !(v >= 0.0) {
                return Err(StgatError::ShapeMismatch(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if let MuK::Fixed(m) = self.mu_k {
            if !(m >= 0.0) {
                return Err(StgatError::ShapeMismatch(format!(
                    "mu_k must be >= 0, got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// One temporal self-attention layer's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Every learnable tensor of the detector. The prediction heads read the
/// concatenation of a per-step temporal state, its device's graph-fused
/// vector and the elementwise magnitude of the temporal state, so their
/// input dimension is `3 * d_model`. The magnitude component gives the
/// logistic readout an even term: sign-symmetric drift oscillation is
/// anomalous on both sides, which no purely linear readout of a
/// sign-carrying state can express.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n_features: usize,
    pub d_model: usize,
    /// Drift-input injection, `n_features x 4`.
    pub w_emb: Array2<f64>,
    /// Input projection, `d_model x n_features`.
    pub w_proj: Array2<f64>,
    pub layers: Vec<AttentionLayer>,
    /// Graph attention transform, `d_model x d_model`.
    pub gat_w: Array2<f64>,
    /// Graph attention logit vector, `2 * d_model`.
    pub gat_a: Array1<f64>,
    pub cls_w: Array1<f64>,
    pub cls_b: f64,
    pub drift_w: Array1<f64>,
    pub drift_b: f64,
    /// Reconstruction head, `n_features x 3 d_model`.
    pub rec_w: Array2<f64>,
    pub rec_b: Array1<f64>,
    /// Rollover head over [drift estimate, velocity, acceleration, flag].
    pub w_over: Array1<f64>,
}

impl ModelParams {
    /// Seeded uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(n_features: usize, hyper: &HyperParams) -> Self {
        type Rng = rand_chacha::ChaCha12Rng;
        fn uniform(rng: &mut Rng, bound: f64) -> f64 {
            (rand::Rng::random::<f64>(rng) * 2.0 - 1.0) * bound
        }
        fn mat(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || uniform(rng, b))
        }
        fn vec(rng: &mut Rng, len: usize, fan_in: usize) -> Array1<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            Array1::from_shape_simple_fn(len, || uniform(rng, b))
        }
        let d = hyper.d_model;
        let rng = &mut global_stream(hyper.seed, StreamKind::Init);
        let w_emb = mat(rng, n_features, 4, 4);
        let w_proj = mat(rng, d, n_features, n_features);
        let layers = (0..hyper.n_layers)
            .map(|_| AttentionLayer {
                wq: mat(rng, d, d, d),
                wk: mat(rng, d, d, d),
                wv: mat(rng, d, d, d),
            })
            .collect();
        let gat_w = mat(rng, d, d, d);
        let gat_a = vec(rng, 2 * d, 2 * d);
        let cls_w = vec(rng, 3 * d, 3 * d);
        let cls_b = uniform(rng, 1.0 / (3.0 * d as f64).sqrt());
        let drift_w = vec(rng, 3 * d, 3 * d);
        let drift_b = uniform(rng, 1.0 / (3.0 * d as f64).sqrt());
        let rec_w = mat(rng, n_features, 3 * d, 3 * d);
        let rec_b = vec(rng, n_features, 3 * d);
        let w_over = vec(rng, 4, 4);
        Self {
            n_features,
            d_model: d,
            w_emb,
            w_proj,
            layers,
            gat_w,
            gat_a,
            cls_w,
            cls_b,
            drift_w,
            drift_b,
            rec_w,
            rec_b,
            w_over,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.w_emb.fill(0.0);
        z.w_proj.fill(0.0);
        for layer in &mut z.layers {
            layer.wq.fill(0.0);
            layer.wk.fill(0.0);
            layer.wv.fill(0.0);
        }
        z.gat_w.fill(0.0);
        z.gat_a.fill(0.0);
        z.cls_w.fill(0.0);
        z.cls_b = 0.0;
        z.drift_w.fill(0.0);
        z.drift_b = 0.0;
        z.rec_w.fill(0.0);
        z.rec_b.fill(0.0);
        z.w_over.fill(0.0);
        z
    }

    /// Tensor names with flat offsets and lengths, in serialization order.
    pub fn tensor_layout(&self) -> Vec<(String, usize, usize)> {
        let mut layout = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, len: usize, offset: &mut usize| {
            layout.push((name, *offset, len));
            *offset += len;
        };
        push("w_emb".into(), self.w_emb.len(), &mut offset);
        push("w_proj".into(), self.w_proj.len(), &mut offset);
        for (i, layer) in self.layers.iter().enumerate() {
            push(format!("layer_{i}.wq"), layer.wq.len(), &mut offset);
            push(format!("layer_{i}.wk"), layer.wk.len(), &mut offset);
            push(format!("layer_{i}.wv"), layer.wv.len(), &mut offset);
        }
        push("gat_w".into(), self.gat_w.len(), &mut offset);
        push("gat_a".into(), self.gat_a.len(), &mut offset);
        push("cls_w".into(), self.cls_w.len(), &mut offset);
        push("cls_b".into(), 1, &mut offset);
        push("drift_w".into(), self.drift_w.len(), &mut offset);
        push("drift_b".into(), 1, &mut offset);
        push("rec_w".into(), self.rec_w.len(), &mut offset);
        push("rec_b".into(), self.rec_b.len(), &mut offset);
        push("w_over".into(), self.w_over.len(), &mut offset);
        layout
    }

    /// Flatten every tensor into one vector, matching [`Self::tensor_layout`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend(self.w_emb.iter());
        flat.extend(self.w_proj.iter());
        for layer in &self.layers {
            flat.extend(layer.wq.iter());
            flat.extend(layer.wk.iter());
            flat.extend(layer.wv.iter());
        }
        flat.extend(self.gat_w.iter());
        flat.extend(self.gat_a.iter());
        flat.extend(self.cls_w.iter());
        flat.push(self.cls_b);
        flat.extend(self.drift_w.iter());
        flat.push(self.drift_b);
        flat.extend(self.rec_w.iter());
        flat.extend(self.rec_b.iter());
        flat.extend(self.w_over.iter());
        flat
    }

    /// Overwrite every tensor from a flat vector produced by [`Self::to_flat`].
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let fill2 = |a: &mut Array2<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in a.iter_mut() {
                *v = it.next().expect("flat vector too short");
            }
        };
        fill2(&mut self.w_emb, &mut it);
        fill2(&mut self.w_proj, &mut it);
        for layer in &mut self.layers {
            fill2(&mut layer.wq, &mut it);
            fill2(&mut layer.wk, &mut it);
            fill2(&mut layer.wv, &mut it);
        }
        fill2(&mut self.gat_w, &mut it);
        for v in self.gat_a.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
        for v in self.cls_w.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
        self.cls_b = it.next().expect("flat vector too short");
        for v in self.drift_w.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
        self.drift_b = it.next().expect("flat vector too short");
        fill2(&mut self.rec_w, &mut it);
        for v in self.rec_b.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
        for v in self.w_over.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
        assert!(it.next().is_none(), "flat vector too long");
    }
}

/// One training batch: an aligned time window across the devices of a split,
/// with the subgraph over those devices.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Physical features, `N x T x F`, normalized.
    pub x: Array3<f64>,
    /// Drift inputs `[spacing, drift, offset, rollover]`, normalized except
    /// the binary flag.
    pub d: Array3<f64>,
    pub graph: DeviceGraph,
    /// Per-step labels in {0, 1}.
    pub labels: Array2<f64>,
    /// True drift in raw seconds, for the drift-consistency loss.
    pub delta_true: Array2<f64>,
    /// Reported timestamps in raw seconds (monotone internal view), for the
    /// rollover proximity flag and auxiliary labels.
    pub tau: Array2<f64>,
}

impl Batch {
    pub fn n_devices(&self) -> usize {
        self.x.shape()[0]
    }
    pub fn n_steps(&self) -> usize {
        self.x.shape()[1]
    }
    pub fn n_features(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn validate(&self, params: &ModelParams) -> Result<(), StgatError> {
        let (n, t, f) = (self.n_devices(), self.n_steps(), self.n_features());
        if f != params.n_features {
            return Err(StgatError::ShapeMismatch(format!(
                "batch has {f} features, model expects {}",
                params.n_features
            )));
        }
        if self.d.shape() != [n, t, 4] {
            return Err(StgatError::ShapeMismatch(format!(
                "drift inputs must be {n}x{t}x4, got {:?}",
                self.d.shape()
            )));
        }
        for arr in [&self.labels, &self.delta_true, &self.tau] {
            if arr.shape() != [n, t] {
                return Err(StgatError::ShapeMismatch(format!(
                    "per-step arrays must be {n}x{t}, got {:?}",
                    arr.shape()
                )));
            }
        }
        if self.graph.n_nodes != n {
            return Err(StgatError::ShapeMismatch(format!(
                "graph has {} nodes for {n} devices",
                self.graph.n_nodes
            )));
        }
        for &y in self.labels.iter() {
            if y != 0.0 && y != 1.0 {
                return Err(StgatError::BadLabel(y));
            }
        }
        Ok(())
    }
}
