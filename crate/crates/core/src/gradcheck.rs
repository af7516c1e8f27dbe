//! Central finite-difference check of the full-sequence BPTT gradient.
//!
//! The numerical side touches only `forward_sequence` and `joint_loss`, so
//! it is independent of every backward routine it checks.

use serde::{Deserialize, Serialize};

use crate::cell::CellDims;
use crate::error::Result;
use crate::joint::{forward_sequence, init_joint_model, joint_loss, sequence_gradient, FeedbackConfig, JointModel};
use crate::numerics::SplitMix64;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub input: usize,
    pub asr_cell: usize,
    pub asr_rec_proj: usize,
    pub asr_nonrec_proj: usize,
    pub sre_cell: usize,
    pub sre_rec_proj: usize,
    pub sre_nonrec_proj: usize,
    pub phones: usize,
    pub speakers: usize,
    pub frames: usize,
    pub delay: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            input: 4,
            asr_cell: 6,
            asr_rec_proj: 3,
            asr_nonrec_proj: 3,
            sre_cell: 6,
            sre_rec_proj: 3,
            sre_nonrec_proj: 3,
            phones: 3,
            speakers: 2,
            frames: 6,
            delay: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub config: FeedbackConfig,
    pub n_params: usize,
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// A model with every parameter random (cross links and biases included)
/// plus a random labelled sequence.
pub struct Problem {
    pub model: JointModel,
    pub frames: Vec<Vec<f64>>,
    pub phones: Vec<u16>,
    pub speaker: usize,
}

pub fn random_problem(dims: &GradCheckDims, config: FeedbackConfig, seed: u64) -> Result<Problem> {
    let mut rng = SplitMix64::new(seed);
    let mut model = init_joint_model(
        CellDims::new(dims.input, dims.asr_cell, dims.asr_rec_proj, dims.asr_nonrec_proj, dims.phones),
        CellDims::new(dims.input, dims.sre_cell, dims.sre_rec_proj, dims.sre_nonrec_proj, dims.speakers),
        config,
        dims.delay,
        &mut rng,
    )?;
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.uniform(-0.5, 0.5)?;
        }
    }
    let frames = (0..dims.frames)
        .map(|_| (0..dims.input).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let phones = (0..dims.frames).map(|_| rng.below(dims.phones) as u16).collect();
    let speaker = rng.below(dims.speakers);
    Ok(Problem {
        model,
        frames,
        phones,
        speaker,
    })
}

fn loss(p: &Problem) -> Result<f64> {
    let (out, _) = forward_sequence(&p.model, &p.frames)?;
    Ok(joint_loss(&out.asr_logits, &out.sre_logits, &p.phones, p.speaker, p.model.asr_delay)?.loss)
}

/// Compares every parameter's BPTT gradient with a central difference of
/// step `eps`.
pub fn check_problem(problem: &mut Problem, eps: f64) -> Result<GradCheckReport> {
    let (_, grads) = sequence_gradient(&problem.model, &problem.frames, &problem.phones, problem.speaker)?;
    let names = grads.tensor_names();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst = (0.0, (String::new(), 0));
    for (ti, tensor) in analytic.iter().enumerate() {
        for (e, &a) in tensor.iter().enumerate() {
            let orig = problem.model.params.tensors()[ti][e];
            problem.model.params.tensors_mut()[ti][e] = orig + eps;
            let hi = loss(problem)?;
            problem.model.params.tensors_mut()[ti][e] = orig - eps;
            let lo = loss(problem)?;
            problem.model.params.tensors_mut()[ti][e] = orig;
            let rel = relative_error(a, (hi - lo) / (2.0 * eps));
            if rel > worst.0 || worst.1 .0.is_empty() {
                worst = (rel, (names[ti].clone(), e));
            }
        }
    }
    Ok(GradCheckReport {
        config: problem.model.config.clone(),
        n_params: problem.model.params.param_count(),
        max_rel_err: worst.0,
        worst: worst.1,
    })
}

pub fn check_config(dims: &GradCheckDims, config: FeedbackConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut p = random_problem(dims, config, seed)?;
    check_problem(&mut p, eps)
}
