//! Task metrics and the configuration sweep.
//!
//! Speaker verification uses r-vectors: the frame-average of the speaker
//! tower's recurrent and non-recurrent projections, concatenated. A
//! speaker's enrollment model is the mean r-vector of its training
//! utterances, and trials are scored with the cosine kernel.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::data::{build_trials, Dataset, Utterance};
use crate::error::{Error, Result};
use crate::joint::{forward_sequence, FeedbackConfig, GridRow, JointModel};
use crate::numerics::{argmax, dot, l2_norm, softmax};
use crate::trainer::{train, ModelSpec, OptimConfig};

/// Utterance-level speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RVector(pub Vec<f64>);

pub fn extract_rvector(model: &JointModel, frames: &[Vec<f64>]) -> Result<RVector> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot extract an r-vector from an empty utterance"));
    }
    let (_, cache) = forward_sequence(model, frames)?;
    let d = model.sre_dims();
    let mut v = vec![0.0; d.rec_proj + d.nonrec_proj];
    for step in &cache.sre {
        for (acc, x) in v.iter_mut().zip(step.r.iter().chain(&step.p)) {
            *acc += x;
        }
    }
    let n = frames.len() as f64;
    v.iter_mut().for_each(|x| *x /= n);
    Ok(RVector(v))
}

/// Cosine similarity; 0 when either operand is the zero vector.
pub fn cosine_score(a: &RVector, b: &RVector) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::dim("cosine_score", a.0.len(), b.0.len()));
    }
    let na = l2_norm(&a.0);
    let nb = l2_norm(&b.0);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Equal error rate.
///
/// The ROC is traced by thresholding at every distinct score and at +∞,
/// with FAR(t) = P(non-target ≥ t) and FRR(t) = P(target < t). The result
/// is read at the first point where FAR ≤ FRR, interpolating linearly from
/// the previous point when the two rates do not coincide there.
pub fn compute_eer(target: &[f64], nontarget: &[f64]) -> Result<f64> {
    if target.is_empty() || nontarget.is_empty() {
        return Err(Error::invalid("EER needs at least one target and one non-target score"));
    }
    if target.iter().chain(nontarget).any(|s| !s.is_finite()) {
        return Err(Error::invalid("EER scores must be finite"));
    }
    let mut scored: Vec<(f64, bool)> = target
        .iter()
        .map(|&s| (s, true))
        .chain(nontarget.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (nt, nn) = (target.len() as f64, nontarget.len() as f64);
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    let mut i = 0;
    loop {
        let (far, frr) = if i < scored.len() {
            (
                (nontarget.len() - nontargets_below) as f64 / nn,
                targets_below as f64 / nt,
            )
        } else {
            (0.0, 1.0)
        };
        if let Some(eer) = crossing(prev, far, frr) {
            return Ok(eer);
        }
        prev = Some((far, frr));
        // advance past every score equal to the current threshold
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
}

fn crossing(prev: Option<(f64, f64)>, far: f64, frr: f64) -> Option<f64> {
    let diff = far - frr;
    if diff > 0.0 {
        return None;
    }
    if diff == 0.0 {
        return Some(far);
    }
    // the first ROC point always has FAR = 1, FRR = 0, so prev exists here
    let (pfar, pfrr) = prev.expect("first ROC point has FAR > FRR");
    let pdiff = pfar - pfrr;
    let alpha = pdiff / (pdiff - diff);
    Some(pfar + alpha * (far - pfar))
}

/// Per-frame argmax error of the content tower against delayed labels,
/// pooled over all utterances.
pub fn frame_error_rate(model: &JointModel, utts: &[Utterance]) -> Result<f64> {
    let delay = model.asr_delay;
    let counts: Vec<(usize, usize)> = utts
        .par_iter()
        .map(|u| -> Result<(usize, usize)> {
            if u.phone_labels.len() != u.len() {
                return Err(Error::dim("frame_error_rate labels", u.len(), u.phone_labels.len()));
            }
            if u.len() <= delay {
                return Ok((0, 0));
            }
            let (out, _) = forward_sequence(model, &u.frames)?;
            let errors = (delay..u.len())
                .filter(|&t| argmax(&out.asr_logits[t]) != u.phone_labels[t - delay] as usize)
                .count();
            Ok((errors, u.len() - delay))
        })
        .collect::<Result<_>>()?;
    let (errors, scored) = counts.iter().fold((0, 0), |(e, s), (de, ds)| (e + de, s + ds));
    if scored == 0 {
        return Err(Error::invalid(format!("target delay {delay} masks every frame")));
    }
    Ok(errors as f64 / scored as f64)
}

/// Closed-set identification: argmax of the frame-averaged speaker
/// posteriors, ties to the lowest index.
pub fn speaker_id_accuracy(model: &JointModel, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::invalid("speaker_id_accuracy needs at least one utterance"));
    }
    let n_spk = model.sre_dims().output;
    let hits: Vec<bool> = utts
        .par_iter()
        .map(|u| -> Result<bool> {
            if u.speaker >= n_spk {
                return Err(Error::LabelOutOfRange {
                    label: u.speaker,
                    classes: n_spk,
                });
            }
            let (out, _) = forward_sequence(model, &u.frames)?;
            let mut mean = vec![0.0; n_spk];
            for logits in &out.sre_logits {
                for (m, p) in mean.iter_mut().zip(softmax(logits)) {
                    *m += p;
                }
            }
            let n = out.sre_logits.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(argmax(&mean) == u.speaker)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Verification EER over all (speaker present in `test`) × (test utterance)
/// trials, with enrollment models averaged from `enroll` utterances.
pub fn verification_eer(model: &JointModel, enroll: &[Utterance], test: &[Utterance]) -> Result<f64> {
    let trials = build_trials(test)?;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let enroll_vecs: Vec<RVector> = enroll
        .par_iter()
        .map(|u| extract_rvector(model, &u.frames))
        .collect::<Result<_>>()?;
    for (u, v) in enroll.iter().zip(&enroll_vecs) {
        let e = sums.entry(u.speaker).or_insert_with(|| (vec![0.0; v.0.len()], 0));
        e.0.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let models: BTreeMap<usize, RVector> = sums
        .into_iter()
        .map(|(spk, (mut s, n))| {
            s.iter_mut().for_each(|x| *x /= n as f64);
            (spk, RVector(s))
        })
        .collect();

    let test_vecs: BTreeMap<&str, RVector> = test
        .par_iter()
        .map(|u| Ok((u.id.as_str(), extract_rvector(model, &u.frames)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let mut target = Vec::new();
    let mut nontarget = Vec::new();
    for trial in &trials.trials {
        let enrolled = models.get(&trial.enroll_speaker).ok_or_else(|| {
            Error::invalid(format!("speaker {} has no enrollment utterances", trial.enroll_speaker))
        })?;
        let score = cosine_score(enrolled, &test_vecs[trial.test_utt.as_str()])?;
        if trial.is_target {
            target.push(score);
        } else {
            nontarget.push(score);
        }
    }
    compute_eer(&target, &nontarget)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub frame_error: f64,
    pub eer: f64,
    pub id_accuracy: f64,
}

/// Held-out metrics: frame error and identification on `test`, EER with
/// enrollment from `train`.
pub fn evaluate(model: &JointModel, train: &[Utterance], test: &[Utterance]) -> Result<Metrics> {
    Ok(Metrics {
        frame_error: frame_error_rate(model, test)?,
        eer: verification_eer(model, train, test)?,
        id_accuracy: speaker_id_accuracy(model, test)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: FeedbackConfig,
    pub metrics: Metrics,
    /// Published WER% for this configuration, display only.
    pub ref_wer: Option<f64>,
    /// Published EER% for this configuration, display only.
    pub ref_eer: Option<f64>,
}

pub const REPORT_CSV_HEADER: &str = "config_sources,config_sinks,frame_error,eer,id_accuracy,ref_wer,ref_eer";

/// Writes reports as CSV under [`REPORT_CSV_HEADER`].
pub fn write_reports_csv<W: Write>(mut w: W, reports: &[EvalReport]) -> std::io::Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.config.sources_label(),
            r.config.sinks_label(),
            r.metrics.frame_error,
            r.metrics.eer,
            r.metrics.id_accuracy,
            opt(r.ref_wer),
            opt(r.ref_eer)
        )?;
    }
    Ok(())
}

/// Trains and evaluates every row from the same seed and data. Rows run
/// concurrently; reports come back in row order.
pub fn run_ablation(dataset: &Dataset, spec: &ModelSpec, optim: &OptimConfig, rows: &[GridRow]) -> Result<Vec<EvalReport>> {
    rows.par_iter()
        .map(|row| {
            let model = spec.build(dataset, row.config.clone(), optim.seed)?;
            let state = train(model, &dataset.train, &dataset.test, optim)?;
            let metrics = evaluate(&state.model, &dataset.train, &dataset.test)?;
            Ok(EvalReport {
                config: row.config.clone(),
                metrics,
                ref_wer: Some(row.ref_wer),
                ref_eer: Some(row.ref_eer),
            })
        })
        .collect()
}
