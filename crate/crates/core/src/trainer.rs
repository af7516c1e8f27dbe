//! Mini-batch SGD with momentum and global-norm clipping, plus the binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "MTRL"            4 bytes magic
//! version           u32
//! header_len        u64
//! header            header_len bytes of UTF-8 JSON (CheckpointHeader)
//! parameters        f64 × param_count, JointParams::tensors() order
//! velocities        f64 × param_count, same order
//! ```
//!
//! Tensor order is: content tower fields, speaker tower fields (each in
//! `CELL_FIELD_NAMES` order, matrices row-major), then cross matrices sorted
//! by (direction, sink, source).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::CellDims;
use crate::data::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::eval::{frame_error_rate, speaker_id_accuracy};
use crate::joint::{init_joint_model, sequence_gradient, CrossWeights, FeedbackConfig, JointModel, JointParams};
use crate::numerics::{derive_seed, SplitMix64};

pub const SEED_MODEL_INIT: u64 = 1;
pub const SEED_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
            epochs: 15,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Hidden sizes of one tower; input and output sizes come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerShape {
    pub cell: usize,
    pub rec_proj: usize,
    pub nonrec_proj: usize,
}

impl TowerShape {
    pub fn dims(&self, input: usize, output: usize) -> CellDims {
        CellDims::new(input, self.cell, self.rec_proj, self.nonrec_proj, output)
    }
}

/// Everything needed to instantiate a joint model for a dataset except the
/// feedback configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub asr: TowerShape,
    pub sre: TowerShape,
    pub asr_delay: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            asr: TowerShape {
                cell: 32,
                rec_proj: 16,
                nonrec_proj: 16,
            },
            sre: TowerShape {
                cell: 32,
                rec_proj: 16,
                nonrec_proj: 16,
            },
            asr_delay: 5,
        }
    }
}

impl ModelSpec {
    /// Tower weights depend only on `seed` and the shapes, never on
    /// `config`, so every configuration starts from the same towers.
    pub fn build(&self, dataset: &Dataset, config: FeedbackConfig, seed: u64) -> Result<JointModel> {
        let input = dataset.input_dim();
        let mut rng = SplitMix64::new(derive_seed(seed, SEED_MODEL_INIT));
        init_joint_model(
            self.asr.dims(input, dataset.n_phones()),
            self.sre.dims(input, dataset.n_speakers()),
            config,
            self.asr_delay,
            &mut rng,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-utterance joint loss over the epoch's batches.
    pub train_loss: f64,
    pub heldout_frame_error: f64,
    pub heldout_id_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: JointModel,
    pub velocity: JointParams,
    pub epoch: usize,
    pub optim: OptimConfig,
    pub history: Vec<EpochRecord>,
    /// Free-form run description stored verbatim in checkpoints.
    pub provenance: Option<serde_json::Value>,
}

impl TrainState {
    pub fn new(model: JointModel, optim: OptimConfig) -> Self {
        let velocity = JointParams::zeros_like(&model.params);
        TrainState {
            model,
            velocity,
            epoch: 0,
            optim,
            history: Vec::new(),
            provenance: None,
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut JointParams, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// `v ← μ·v + g;  θ ← θ − η·v`.
pub fn sgd_step(params: &mut JointParams, velocity: &mut JointParams, grads: &JointParams, lr: f64, momentum: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(Error::dim(
            "sgd_step",
            format!("{} parameters", params.param_count()),
            format!("{} gradients / {} velocities", grads.param_count(), velocity.param_count()),
        ));
    }
    for ((p, v), g) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads.tensors()) {
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

fn check_labels(model: &JointModel, utts: &[Utterance]) -> Result<()> {
    let (n_ph, n_spk) = (model.asr_dims().output, model.sre_dims().output);
    for u in utts {
        if u.speaker >= n_spk {
            return Err(Error::LabelOutOfRange {
                label: u.speaker,
                classes: n_spk,
            });
        }
        if let Some(&l) = u.phone_labels.iter().find(|&&l| l as usize >= n_ph) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: n_ph,
            });
        }
    }
    Ok(())
}

/// Mean per-utterance joint loss of `model` over `utts`.
pub fn dataset_loss(model: &JointModel, utts: &[Utterance]) -> Result<f64> {
    let losses: Vec<f64> = utts
        .par_iter()
        .map(|u| {
            let (out, _) = crate::joint::forward_sequence(model, &u.frames)?;
            Ok(crate::joint::joint_loss(&out.asr_logits, &out.sre_logits, &u.phone_labels, u.speaker, model.asr_delay)?.loss)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

pub fn train(model: JointModel, train_set: &[Utterance], heldout: &[Utterance], optim: &OptimConfig) -> Result<TrainState> {
    train_with(TrainState::new(model, optim.clone()), train_set, heldout, |_| {})
}

/// Continues training `state` for `state.optim.epochs` more epochs,
/// reporting each finished epoch to `on_epoch`.
pub fn train_with(
    mut state: TrainState,
    train_set: &[Utterance],
    heldout: &[Utterance],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    let optim = state.optim.clone();
    optim.validate()?;
    if optim.epochs == 0 {
        return Ok(state);
    }
    if train_set.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("training needs non-empty training and held-out sets"));
    }
    check_labels(&state.model, train_set)?;
    check_labels(&state.model, heldout)?;

    // one shuffle stream per (seed, starting epoch), so resumed runs differ
    // from restarting but stay reproducible
    let mut rng = SplitMix64::new(derive_seed(optim.seed ^ state.epoch as u64, SEED_SHUFFLE));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..optim.epochs {
        let epoch = state.epoch;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(optim.batch_size).enumerate() {
            let model = &state.model;
            let results: Vec<(f64, JointParams)> = batch
                .par_iter()
                .map(|&i| {
                    let u = &train_set[i];
                    let (loss, grads) = sequence_gradient(model, &u.frames, &u.phone_labels, u.speaker)?;
                    Ok((loss.loss, grads))
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("chunks are non-empty");
            let mut batch_loss = first_loss;
            for (l, g) in iter {
                batch_loss += l;
                grads.add_assign(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += batch_loss;
            clip_global_norm(&mut grads, optim.clip_norm);
            sgd_step(&mut state.model.params, &mut state.velocity, &grads, optim.learning_rate, optim.momentum)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            heldout_frame_error: frame_error_rate(&state.model, heldout)?,
            heldout_id_accuracy: speaker_id_accuracy(&state.model, heldout)?,
        };
        on_epoch(&record);
        state.history.push(record);
        state.epoch += 1;
    }
    Ok(state)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTRL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub asr_dims: CellDims,
    pub sre_dims: CellDims,
    pub feedback: FeedbackConfig,
    pub asr_delay: usize,
    pub epoch: usize,
    pub optim: OptimConfig,
    pub param_count: usize,
    pub history: Vec<EpochRecord>,
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let m = &state.model;
    let header = CheckpointHeader {
        asr_dims: m.asr_dims(),
        sre_dims: m.sre_dims(),
        feedback: m.config.clone(),
        asr_delay: m.asr_delay,
        epoch: state.epoch,
        optim: state.optim.clone(),
        param_count: m.params.param_count(),
        history: state.history.clone(),
        provenance: state.provenance.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 16 * header.param_count);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in m.params.tensors().into_iter().chain(state.velocity.tensors()) {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |cause: String| Error::format("checkpoint", cause);
    if bytes.len() < 16 {
        return Err(bad(format!("truncated: {} bytes is shorter than the fixed preamble", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"MTRL\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body_start = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflows".into()))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("truncated: header claims {header_len} bytes")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(format!("header: {e}")))?;
    header.asr_dims.validate()?;
    header.sre_dims.validate()?;

    let cross = CrossWeights::zeros(&header.feedback, &header.asr_dims, &header.sre_dims);
    let mut params = JointParams {
        asr: crate::cell::CellParams::zeros(header.asr_dims),
        sre: crate::cell::CellParams::zeros(header.sre_dims),
        cross,
    };
    let count = params.param_count();
    if count != header.param_count {
        return Err(bad(format!("header records {} parameters, shapes imply {count}", header.param_count)));
    }
    let body = &bytes[body_start..];
    if body.len() != 16 * count {
        return Err(bad(format!(
            "{}: payload has {} bytes, expected {}",
            if body.len() < 16 * count { "truncated" } else { "trailing data" },
            body.len(),
            16 * count
        )));
    }
    let mut values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let mut fill = |p: &mut JointParams| {
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
    };
    fill(&mut params);
    let mut velocity = JointParams::zeros_like(&params);
    fill(&mut velocity);

    Ok(TrainState {
        model: JointModel {
            params,
            config: header.feedback,
            asr_delay: header.asr_delay,
        },
        velocity,
        epoch: header.epoch,
        optim: header.optim,
        history: header.history,
        provenance: header.provenance,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joint::{Source};
    use crate::cell::Sink;

    fn model(cfg: FeedbackConfig) -> JointModel {
        init_joint_model(
            CellDims::new(3, 4, 2, 2, 3),
            CellDims::new(3, 4, 2, 2, 2),
            cfg,
            1,
            &mut SplitMix64::new(1),
        )
        .unwrap()
    }

    fn filled(p: &JointParams, f: impl Fn(usize) -> f64) -> JointParams {
        let mut g = JointParams::zeros_like(p);
        let mut k = 0;
        for t in g.tensors_mut() {
            for v in t.iter_mut() {
                *v = f(k);
                k += 1;
            }
        }
        g
    }

    #[test]
    fn clipping_examples() {
        let m = model(FeedbackConfig::baseline());
        // single non-zero pair (3, 4)
        let mut g = filled(&m.params, |k| match k {
            0 => 3.0,
            1 => 4.0,
            _ => 0.0,
        });
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.tensors()[0][0] - 0.6).abs() < 1e-15 && (g.tensors()[0][1] - 0.8).abs() < 1e-15);

        let mut g = filled(&m.params, |k| if k == 5 { 1.0 } else { 0.0 });
        let before = g.clone();
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g, before);

        let mut rng = SplitMix64::new(3);
        for _ in 0..20 {
            let mut g = filled(&m.params, |_| 0.0);
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|v| *v = rng.uniform(-0.2, 0.2).unwrap());
            }
            let pre = g.global_norm();
            clip_global_norm(&mut g, 2.0);
            assert!((g.global_norm() - pre.min(2.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn sgd_examples() {
        let m = model(FeedbackConfig::new(&[Source::R], &[Sink::G]).unwrap());
        let g = filled(&m.params, |k| (k % 7) as f64 - 3.0);

        let mut p = m.params.clone();
        let mut v = JointParams::zeros_like(&p);
        sgd_step(&mut p, &mut v, &g, 0.0, 0.9).unwrap();
        assert_eq!(p, m.params);

        let mut p = m.params.clone();
        let mut v = JointParams::zeros_like(&p);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0).unwrap();
        for ((a, b), gg) in p.tensors().iter().zip(m.params.tensors()).zip(g.tensors()) {
            for ((a, b), gg) in a.iter().zip(b).zip(gg) {
                assert_eq!(*a, b - 0.1 * gg);
            }
        }

        // v1 = g, v2 = 0.9g + g; total displacement = -(1 + 1.9)g
        let mut p = m.params.clone();
        let mut v = JointParams::zeros_like(&p);
        sgd_step(&mut p, &mut v, &g, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &mut v, &g, 1.0, 0.9).unwrap();
        for ((a, b), gg) in p.tensors().iter().zip(m.params.tensors()).zip(g.tensors()) {
            for ((a, b), gg) in a.iter().zip(b).zip(gg) {
                assert!((a - (b - 2.9 * gg)).abs() < 1e-12);
            }
        }

        let other = model(FeedbackConfig::baseline());
        let mut p = m.params.clone();
        let mut v = JointParams::zeros_like(&p);
        assert!(sgd_step(&mut p, &mut v, &other.params, 0.1, 0.0).is_err());
    }

    #[test]
    fn optim_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { clip_norm: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let m = model(FeedbackConfig::new(&[Source::R, Source::P], &[Sink::I, Sink::O]).unwrap());
        let mut state = TrainState::new(m, OptimConfig::default());
        state.velocity = filled(&state.model.params, |k| k as f64 * 1e-3);
        state.epoch = 3;
        state.provenance = Some(serde_json::json!({"note": "x"}));
        let bytes = checkpoint_bytes(&state).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(parse_checkpoint(&bad).unwrap_err().to_string().contains("version"));
        let err = parse_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(parse_checkpoint(&long).unwrap_err().to_string().contains("trailing"));
        assert!(parse_checkpoint(&bytes[..10]).unwrap_err().to_string().contains("truncated"));
    }
}
