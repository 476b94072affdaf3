//! Training loop (plain gradient descent over window batches), batch
//! assembly from datasets, window and streaming evaluation, and checkpoint
//! persistence.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{forward, grad, Batch, HyperParams, ModelParams, StgatError};
use crate::datagen::{normalize_apply, Dataset, DeviceGraph, NormStats, Split, TraceRow};
use crate::rng::{global_stream, StreamKind};
use crate::stats::{self, MetricReport};

/// Rank of the per-step posterior used as a window score: the k-th largest
/// posterior must clear the threshold, so isolated spikes cannot flip a
/// whole window.
pub const WINDOW_SCORE_RANK: usize = 3;

/// Bound on normalized model inputs. A rollover injects a reported-spacing
/// outlier hundreds of standard deviations out; unbounded, it blows up the
/// squared reconstruction term under a constant-step update. The clamp keeps
/// the step maximally distinctive without destabilizing training, and only
/// touches model inputs, never the raw values the detector consumes.
pub const INPUT_CLAMP: f64 = 8.0;

fn clamped(v: f64) -> f64 {
    v.clamp(-INPUT_CLAMP, INPUT_CLAMP)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Aligned window batches for every device of a split, with the device ids
/// in batch-row order.
pub fn build_split_batches(
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<Batch>, Vec<usize>), StgatError> {
    let devices = dataset.devices_in(split);
    if devices.is_empty() {
        return Err(StgatError::EmptySplit);
    }
    let manifest = &dataset.manifest;
    let window = manifest.window;
    if manifest.trace_length < window {
        return Err(StgatError::WindowTooLong {
            window,
            len: manifest.trace_length,
        });
    }
    let graph = dataset.graph().subgraph(&devices);
    let normalized: Vec<Vec<TraceRow>> = devices
        .iter()
        .map(|&dev| normalize_apply(&dataset.traces[dev].rows, &manifest.normalization))
        .collect();

    let starts: Vec<usize> = (0..=(manifest.trace_length - window))
        .step_by(manifest.stride)
        .collect();
    let n = devices.len();
    let f = manifest.normalization.names.len() - 7;

    let mut batches = Vec::with_capacity(starts.len());
    for &start in &starts {
        batches.push(assemble_batch(
            dataset,
            &devices,
            &normalized,
            &graph,
            start,
            window,
            f,
        ));
    }
    Ok((batches, devices))
}

fn assemble_batch(
    dataset: &Dataset,
    devices: &[usize],
    normalized: &[Vec<TraceRow>],
    graph: &DeviceGraph,
    start: usize,
    window: usize,
    f: usize,
) -> Batch {
    let n = devices.len();
    let mut x = Array3::zeros((n, window, f));
    let mut d = Array3::zeros((n, window, 4));
    let mut labels = Array2::zeros((n, window));
    let mut delta_true = Array2::zeros((n, window));
    let mut tau = Array2::zeros((n, window));
    for (row_idx, &dev) in devices.iter().enumerate() {
        let raw = &dataset.traces[dev].rows;
        let norm = &normalized[row_idx];
        for t in 0..window {
            let rn = &norm[start + t];
            let rr = &raw[start + t];
            for c in 0..f {
                x[(row_idx, t, c)] = clamped(rn.x[c]);
            }
            for c in 0..3 {
                d[(row_idx, t, c)] = clamped(rn.d[c]);
            }
            d[(row_idx, t, 3)] = rn.d[3];
            labels[(row_idx, t)] = f64::from(rr.label);
            delta_true[(row_idx, t)] = rr.d[1];
            tau[(row_idx, t)] = rr.tau;
        }
    }
    Batch {
        x,
        d,
        graph: graph.clone(),
        labels,
        delta_true,
        tau,
    }
}

/// Training batches: the aligned multi-device windows plus coarser-stride
/// single-device windows. Online scoring runs each device alone on a
/// single-node graph, so the model must also train on that structure; the
/// singles double as device dropout against memorizing fleet context.
pub fn build_training_batches(
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<Batch>, StgatError> {
    let (mut batches, devices) = build_split_batches(dataset, split)?;
    let manifest = &dataset.manifest;
    let window = manifest.window;
    let f = manifest.normalization.names.len() - 7;
    let single_graph = DeviceGraph {
        n_nodes: 1,
        edges: vec![],
        symmetric: true,
    };
    let singles_stride = manifest.stride * 2;
    let normalized: Vec<Vec<TraceRow>> = devices
        .iter()
        .map(|&dev| normalize_apply(&dataset.traces[dev].rows, &manifest.normalization))
        .collect();
    for (idx, &dev) in devices.iter().enumerate() {
        let mut start = 0;
        while start + window <= manifest.trace_length {
            batches.push(assemble_batch(
                dataset,
                &[dev],
                &normalized[idx..=idx],
                &single_graph,
                start,
                window,
                f,
            ));
            start += singles_stride;
        }
    }
    Ok(batches)
}

/// Mini-batch gradient descent with a constant step over shuffled window
/// batches. Single-threaded and bit-reproducible for a fixed seed.
pub fn fit_on_batches(
    batches: &[Batch],
    n_features: usize,
    hyper: &HyperParams,
) -> Result<FitResult, StgatError> {
    hyper.validate()?;
    if batches.is_empty() {
        return Err(StgatError::EmptySplit);
    }
    let mut params = ModelParams::init(n_features, hyper);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut shuffle_rng = global_stream(hyper.seed, StreamKind::Shuffle);
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    let mut flat = params.to_flat();
    for epoch in 0..hyper.epochs {
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for &b in &order {
            let (loss, grads) = grad(&batches[b], &params, hyper).map_err(|e| match e {
                StgatError::Diverged { loss, .. } => StgatError::Diverged { epoch, loss },
                other => other,
            })?;
            epoch_loss += loss.total;
            let g = grads.to_flat();
            for (p, gi) in flat.iter_mut().zip(&g) {
                *p -= hyper.learning_rate * gi;
            }
            params.set_from_flat(&flat);
        }
        epoch_loss /= batches.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(StgatError::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(FitResult {
        params,
        epoch_losses,
    })
}

/// Train on a dataset's training split.
pub fn fit(dataset: &Dataset, hyper: &HyperParams) -> Result<FitResult, StgatError> {
    let batches = build_training_batches(dataset, Split::Train)?;
    let f = dataset.manifest.normalization.names.len() - 7;
    fit_on_batches(&batches, f, hyper)
}

/// Score of one (device, window) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub device: usize,
    pub start: usize,
    pub label: u8,
    /// k-th largest per-step posterior within the window.
    pub score: f64,
}

fn rank_score(mut posteriors: Vec<f64>) -> f64 {
    posteriors.sort_by(|a, b| b.partial_cmp(a).expect("finite posterior"));
    let k = WINDOW_SCORE_RANK.min(posteriors.len());
    posteriors[k - 1]
}

/// Window-level scores over a split: forward passes over aligned windows,
/// ranked per-step posteriors per device, any-step labels.
pub fn window_scores(
    dataset: &Dataset,
    split: Split,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<Vec<WindowScore>, StgatError> {
    let (batches, devices) = build_split_batches(dataset, split)?;
    let manifest = &dataset.manifest;
    let starts: Vec<usize> = (0..=(manifest.trace_length - manifest.window))
        .step_by(manifest.stride)
        .collect();
    let mut out = Vec::with_capacity(batches.len() * devices.len());
    for (b, batch) in batches.iter().enumerate() {
        let fwd = forward(batch, params, hyper)?;
        for (row_idx, &dev) in devices.iter().enumerate() {
            let posteriors: Vec<f64> = (0..batch.n_steps())
                .map(|t| fwd.p_hat[(row_idx, t)])
                .collect();
            let label = u8::from((0..batch.n_steps()).any(|t| batch.labels[(row_idx, t)] > 0.5));
            out.push(WindowScore {
                device: dev,
                start: starts[b],
                label,
                score: rank_score(posteriors),
            });
        }
    }
    Ok(out)
}

/// Classification metrics over window scores at a decision threshold, with
/// the rank-based AUC attached.
pub fn window_metrics(scores: &[WindowScore], threshold: f64) -> Result<MetricReport, StgatError> {
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let preds: Vec<u8> = scores
        .iter()
        .map(|s| u8::from(s.score > threshold))
        .collect();
    let mut report = stats::classification_metrics(&labels, &preds)
        .map_err(|e| StgatError::ShapeMismatch(e.to_string()))?;
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    report.auc = stats::roc_auc(&labels, &raw).ok();
    Ok(report)
}

/// Per-step model outputs for an online stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamScore {
    pub step: usize,
    pub p_hat: f64,
    pub delta_hat: f64,
    /// Raw reported timestamp at this step.
    pub tau: f64,
}

/// Forward one device's window alone on a single-node graph and return the
/// last step's (posterior, drift estimate). This is the unit of online
/// scoring: a streaming decision depends only on the device's own data.
pub fn score_window_tail(
    window_rows: &[TraceRow],
    stats: &NormStats,
    params: &ModelParams,
    hyper: &HyperParams,
) -> Result<(f64, f64), StgatError> {
    let window = window_rows.len();
    if window == 0 {
        return Err(StgatError::EmptySplit);
    }
    let normalized = normalize_apply(window_rows, stats);
    let f = stats.names.len() - 7;
    let graph = DeviceGraph {
        n_nodes: 1,
        edges: vec![],
        symmetric: true,
    };
    let mut x = Array3::zeros((1, window, f));
    let mut d = Array3::zeros((1, window, 4));
    let mut labels = Array2::zeros((1, window));
    let mut delta_true = Array2::zeros((1, window));
    let mut tau = Array2::zeros((1, window));
    for t in 0..window {
        let rn = &normalized[t];
        let rr = &window_rows[t];
        for c in 0..f {
            x[(0, t, c)] = clamped(rn.x[c]);
        }
        for c in 0..3 {
            d[(0, t, c)] = clamped(rn.d[c]);
        }
        d[(0, t, 3)] = rn.d[3];
        labels[(0, t)] = f64::from(rr.label);
        delta_true[(0, t)] = rr.d[1];
        tau[(0, t)] = rr.tau;
    }
    let batch = Batch {
        x,
        d,
        graph,
        labels,
        delta_true,
        tau,
    };
    let fwd = forward(&batch, params, hyper)?;
    let last = window - 1;
    Ok((fwd.p_hat[(0, last)], fwd.delta_hat[(0, last)]))
}

/// Replay one device's rows through a sliding window, emitting the last
/// step's outputs once the window has filled.
pub fn stream_scores(
    raw_rows: &[TraceRow],
    stats: &NormStats,
    params: &ModelParams,
    hyper: &HyperParams,
    window: usize,
) -> Result<Vec<StreamScore>, StgatError> {
    if raw_rows.len() < window {
        return Err(StgatError::WindowTooLong {
            window,
            len: raw_rows.len(),
        });
    }
    let mut out = Vec::with_capacity(raw_rows.len() - window + 1);
    for end in window..=raw_rows.len() {
        let (p_hat, delta_hat) =
            score_window_tail(&raw_rows[end - window..end], stats, params, hyper)?;
        out.push(StreamScore {
            step: end - 1,
            p_hat,
            delta_hat,
            tau: raw_rows[end - 1].tau,
        });
    }
    Ok(out)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-contained trained model: parameters, hyper-parameters and the
/// normalization needed to run online inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub hyper: HyperParams,
    pub params: ModelParams,
    pub normalization: NormStats,
    pub window: usize,
    pub dt: f64,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), StgatError> {
    let text = serde_json::to_string(checkpoint)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StgatError> {
    let text = std::fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(StgatError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: checkpoint.version,
        });
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clockdyn::{ClockParams, TimeConstants};
    use crate::datagen::{
        build_device_trace, diagnostic_matrix, normalize_fit, GenerateConfig, GraphTopology,
        ScenarioKind, ScenarioSpec,
    };

    fn tiny_dataset(seed: u64) -> Dataset {
        let config = GenerateConfig {
            seed,
            n_devices: 4,
            trace_length: 150,
            window: 30,
            stride: 15,
            graph: GraphTopology::Ring,
            ..Default::default()
        };
        crate::datagen::generate_dataset(&config).unwrap()
    }

    fn quick_hyper() -> HyperParams {
        HyperParams {
            d_model: 8,
            n_layers: 1,
            epochs: 3,
            learning_rate: 1e-4,
            seed: 2,
            ..Default::default()
        }
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let dataset = tiny_dataset(3);
        let h = quick_hyper();
        let a = fit(&dataset, &h).unwrap();
        let b = fit(&dataset, &h).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let mut h2 = h;
        h2.seed = 3;
        let c = fit(&dataset, &h2).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn epoch_losses_are_finite() {
        let dataset = tiny_dataset(5);
        let result = fit(&dataset, &quick_hyper()).unwrap();
        assert_eq!(result.epoch_losses.len(), 3);
        assert!(result.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn overfit_probe_reaches_perfect_training_f1() {
        // One device, 200 steps, a single offset shock.
        let constants = TimeConstants::default();
        let clock = ClockParams::default();
        let scenario = ScenarioSpec {
            kind: ScenarioKind::OffsetShock,
            onset: 100,
            magnitude: 5.0,
            eps_t: 0.001,
            eps_d: 0.001,
        };
        let phys =
            crate::datagen::synth_physical(&Default::default(), 200, 3, 0).unwrap();
        let w_diag = diagnostic_matrix(5, 3);
        let trace =
            build_device_trace(&phys, &clock, &scenario, &constants, 3, 0, &w_diag).unwrap();
        let refs: Vec<&TraceRow> = trace.rows.iter().collect();
        let stats = normalize_fit(&refs, 5);
        let normalized = normalize_apply(&trace.rows, &stats);

        let window = 60;
        let stride = 10;
        let graph = DeviceGraph {
            n_nodes: 1,
            edges: vec![],
            symmetric: true,
        };
        let mut batches = Vec::new();
        let mut start = 0;
        while start + window <= 200 {
            let mut x = Array3::zeros((1, window, 5));
            let mut d = Array3::zeros((1, window, 4));
            let mut labels = Array2::zeros((1, window));
            let mut delta_true = Array2::zeros((1, window));
            let mut tau = Array2::zeros((1, window));
            for t in 0..window {
                let rn = &normalized[start + t];
                let rr = &trace.rows[start + t];
                for c in 0..5 {
                    x[(0, t, c)] = rn.x[c];
                }
                for c in 0..4 {
                    d[(0, t, c)] = rn.d[c];
                }
                labels[(0, t)] = f64::from(rr.label);
                delta_true[(0, t)] = rr.d[1];
                tau[(0, t)] = rr.tau;
            }
            batches.push(Batch {
                x,
                d,
                graph: graph.clone(),
                labels,
                delta_true,
                tau,
            });
            start += stride;
        }

        let h = HyperParams {
            d_model: 8,
            n_layers: 1,
            epochs: 500,
            learning_rate: 1e-3,
            seed: 4,
            ..Default::default()
        };
        let result = fit_on_batches(&batches, 5, &h).unwrap();

        // Training-set window F1 must reach 1.0.
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for batch in &batches {
            let fwd = forward(batch, &result.params, &h).unwrap();
            let posteriors: Vec<f64> = (0..window).map(|t| fwd.p_hat[(0, t)]).collect();
            let label = u8::from((0..window).any(|t| batch.labels[(0, t)] > 0.5));
            labels.push(label);
            preds.push(u8::from(rank_score(posteriors) > 0.5));
        }
        let report = crate::stats::classification_metrics(&labels, &preds).unwrap();
        assert_eq!(report.f1, 1.0, "training F1 {}", report.f1);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dataset = tiny_dataset(7);
        let h = quick_hyper();
        let result = fit(&dataset, &h).unwrap();
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            hyper: h,
            params: result.params,
            normalization: dataset.manifest.normalization.clone(),
            window: dataset.manifest.window,
            dt: dataset.manifest.dt,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &checkpoint).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint, loaded);

        // Version mismatch is rejected.
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("\"version\":1", "\"version\":2")).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(StgatError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn stream_scores_align_with_window_tail() {
        let dataset = tiny_dataset(9);
        let h = quick_hyper();
        let result = fit(&dataset, &h).unwrap();
        let trace = &dataset.traces[0];
        let scores = stream_scores(
            &trace.rows,
            &dataset.manifest.normalization,
            &result.params,
            &h,
            dataset.manifest.window,
        )
        .unwrap();
        assert_eq!(scores.len(), 150 - 30 + 1);
        assert_eq!(scores[0].step, 29);
        assert_eq!(scores.last().unwrap().step, 149);
        assert!(scores.iter().all(|s| s.p_hat > 0.0 && s.p_hat < 1.0));
        // Replay determinism.
        let again = stream_scores(
            &trace.rows,
            &dataset.manifest.normalization,
            &result.params,
            &h,
            dataset.manifest.window,
        )
        .unwrap();
        assert_eq!(scores, again);
    }

    #[test]
    fn window_scores_cover_every_device_window() {
        let dataset = tiny_dataset(11);
        let h = quick_hyper();
        let result = fit(&dataset, &h).unwrap();
        let scores = window_scores(&dataset, Split::Train, &result.params, &h).unwrap();
        let train_devices = dataset.devices_in(Split::Train);
        let n_windows = (150 - 30) / 15 + 1;
        assert_eq!(scores.len(), train_devices.len() * n_windows);
        let report = window_metrics(&scores, 0.5).unwrap();
        let total = report.true_pos + report.false_pos + report.true_neg + report.false_neg;
        assert_eq!(total as usize, scores.len());
    }
}
