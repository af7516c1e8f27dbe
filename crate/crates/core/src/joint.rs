//! Two projected-LSTM towers over the same frames, one per task, coupled by
//! cross-task links: at step t each tower receives, at every configured
//! sink, `Σ_source W · source_{t-1}` computed from the *other* tower.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{
    cell_backward, cell_forward, init_cell_params, CellDims, CellParams, CellState, Sink, SinkInjection, StepCache,
    StepUpstream,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax_xent, Mat, SplitMix64};

/// Which projection of the sending tower feeds the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    R,
    P,
}

impl Source {
    pub const ALL: [Source; 2] = [Source::R, Source::P];

    pub fn label(self) -> &'static str {
        match self {
            Source::R => "r",
            Source::P => "p",
        }
    }
}

/// Direction of a cross link, named by the receiving tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// speaker tower → content tower
    ToAsr,
    /// content tower → speaker tower
    ToSre,
}

impl Direction {
    pub fn mirrored(self) -> Direction {
        match self {
            Direction::ToAsr => Direction::ToSre,
            Direction::ToSre => Direction::ToAsr,
        }
    }
}

/// A symmetric feedback configuration: the same sources feed the same sinks
/// in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FeedbackConfig {
    sources: Vec<Source>,
    sinks: Vec<Sink>,
}

impl FeedbackConfig {
    /// Sources and sinks are deduplicated and sorted. Supplying one side
    /// without the other is rejected.
    pub fn new(sources: &[Source], sinks: &[Sink]) -> Result<Self> {
        let mut sources = sources.to_vec();
        sources.sort();
        sources.dedup();
        let mut sinks = sinks.to_vec();
        sinks.sort();
        sinks.dedup();
        if sources.is_empty() != sinks.is_empty() {
            return Err(Error::invalid(
                "feedback needs both sources and sinks, or neither for the baseline",
            ));
        }
        Ok(FeedbackConfig { sources, sinks })
    }

    pub fn baseline() -> Self {
        FeedbackConfig::default()
    }

    pub fn is_baseline(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn sinks(&self) -> &[Sink] {
        &self.sinks
    }

    /// e.g. `"r+p"`, or `"none"` for the baseline.
    pub fn sources_label(&self) -> String {
        join_labels(self.sources.iter().map(|s| s.label()))
    }

    pub fn sinks_label(&self) -> String {
        join_labels(self.sinks.iter().map(|s| s.label()))
    }

    /// Parses the `sources_label`/`sinks_label` notation. Separators `+`,
    /// `,` and whitespace are accepted.
    pub fn parse(sources: &str, sinks: &str) -> Result<Self> {
        let tokens = |s: &str| -> Vec<String> {
            let t = s.trim();
            if t.is_empty() || t.eq_ignore_ascii_case("none") {
                return vec![];
            }
            t.split(|c: char| c == '+' || c == ',' || c.is_whitespace())
                .filter(|x| !x.is_empty())
                .map(|x| x.to_ascii_lowercase())
                .collect()
        };
        let src = tokens(sources)
            .iter()
            .map(|t| match t.as_str() {
                "r" => Ok(Source::R),
                "p" => Ok(Source::P),
                other => Err(Error::invalid(format!("unknown feedback source '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let snk = tokens(sinks)
            .iter()
            .map(|t| match t.as_str() {
                "i" => Ok(Sink::I),
                "f" => Ok(Sink::F),
                "o" => Ok(Sink::O),
                "g" => Ok(Sink::G),
                other => Err(Error::invalid(format!("unknown feedback sink '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        FeedbackConfig::new(&src, &snk)
    }
}

fn join_labels<'a>(labels: impl Iterator<Item = &'a str>) -> String {
    let v: Vec<&str> = labels.collect();
    if v.is_empty() {
        "none".to_string()
    } else {
        v.join("+")
    }
}

impl fmt::Display for FeedbackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}->{{{}}}", self.sources_label(), self.sinks_label())
    }
}

impl FromStr for FeedbackConfig {
    type Err = Error;

    /// Accepts `SOURCES:SINKS`, e.g. `r+p:i+f+o+g`, or `none`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((a, b)) => FeedbackConfig::parse(a, b),
            None if s.trim().eq_ignore_ascii_case("none") => Ok(FeedbackConfig::baseline()),
            None => Err(Error::invalid(format!("expected SOURCES:SINKS, got '{s}'"))),
        }
    }
}

/// One row of the joint-training result grid, with the published WER% and
/// EER% kept as display metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: FeedbackConfig,
    pub ref_wer: f64,
    pub ref_eer: f64,
}

/// The 13 configurations of the joint-training grid, in published order.
pub fn table3_grid() -> Vec<GridRow> {
    use Sink::*;
    use Source::*;
    let rows: [(&[Source], &[Sink], f64, f64); 13] = [
        (&[], &[], 7.41, 1.84),
        (&[R], &[I], 7.05, 0.62),
        (&[R, P], &[I], 6.97, 0.64),
        (&[R], &[F], 7.12, 0.66),
        (&[R, P], &[F], 7.24, 0.65),
        (&[R], &[O], 7.26, 0.65),
        (&[R, P], &[O], 7.28, 0.59),
        (&[R], &[G], 7.11, 0.62),
        (&[R, P], &[G], 7.11, 0.67),
        (&[R], &[I, F, O], 7.06, 0.66),
        (&[R, P], &[I, F, O], 7.23, 0.71),
        (&[R], &[I, F, O, G], 7.05, 0.55),
        (&[R, P], &[I, F, O, G], 7.23, 0.62),
    ];
    rows.iter()
        .map(|(src, snk, wer, eer)| GridRow {
            config: FeedbackConfig::new(src, snk).expect("grid rows are well formed"),
            ref_wer: *wer,
            ref_eer: *eer,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossKey {
    pub direction: Direction,
    pub sink: Sink,
    pub source: Source,
}

/// Cross-task weight matrices, one per (direction, sink, source) in the
/// configuration. Each is `receiver cell × sender projection`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossWeights {
    mats: BTreeMap<CrossKey, Mat>,
}

fn source_dim(dims: &CellDims, source: Source) -> usize {
    match source {
        Source::R => dims.rec_proj,
        Source::P => dims.nonrec_proj,
    }
}

impl CrossWeights {
    pub fn zeros(config: &FeedbackConfig, asr: &CellDims, sre: &CellDims) -> Self {
        let mut mats = BTreeMap::new();
        for direction in [Direction::ToAsr, Direction::ToSre] {
            let (recv, send) = match direction {
                Direction::ToAsr => (asr, sre),
                Direction::ToSre => (sre, asr),
            };
            for &sink in config.sinks() {
                for &source in config.sources() {
                    mats.insert(
                        CrossKey {
                            direction,
                            sink,
                            source,
                        },
                        Mat::zeros(recv.cell, source_dim(send, source)),
                    );
                }
            }
        }
        CrossWeights { mats }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, key: &CrossKey) -> Option<&Mat> {
        self.mats.get(key)
    }

    pub fn get_mut(&mut self, key: &CrossKey) -> Option<&mut Mat> {
        self.mats.get_mut(key)
    }

    /// Keys in canonical (sorted) order.
    pub fn keys(&self) -> impl Iterator<Item = &CrossKey> {
        self.mats.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CrossKey, &Mat)> {
        self.mats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&CrossKey, &mut Mat)> {
        self.mats.iter_mut()
    }
}

/// All trainable parameters of the joint model. Also used as the gradient
/// and velocity container, so shapes always line up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    pub asr: CellParams,
    pub sre: CellParams,
    pub cross: CrossWeights,
}

impl JointParams {
    pub fn zeros_like(other: &JointParams) -> Self {
        let mut cross = other.cross.clone();
        for (_, m) in cross.iter_mut() {
            m.as_mut_slice().fill(0.0);
        }
        JointParams {
            asr: CellParams::zeros(other.asr.dims),
            sre: CellParams::zeros(other.sre.dims),
            cross,
        }
    }

    /// Flat view of every tensor: ASR tower, SRE tower, then cross matrices
    /// in key order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(40 + self.cross.len());
        v.extend(self.asr.tensors());
        v.extend(self.sre.tensors());
        v.extend(self.cross.iter().map(|(_, m)| m.as_slice()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(40 + self.cross.len());
        v.extend(self.asr.tensors_mut());
        v.extend(self.sre.tensors_mut());
        v.extend(self.cross.iter_mut().map(|(_, m)| m.as_mut_slice()));
        v
    }

    /// Human-readable name of each tensor, aligned with [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for tower in ["asr", "sre"] {
            v.extend(crate::cell::CELL_FIELD_NAMES.iter().map(|n| format!("{tower}.{n}")));
        }
        for k in self.cross.keys() {
            let dir = match k.direction {
                Direction::ToAsr => "sre->asr",
                Direction::ToSre => "asr->sre",
            };
            v.push(format!("cross[{dir},{},{}]", k.sink.label(), k.source.label()));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// True when both containers hold tensors of identical shapes.
    pub fn same_shape(&self, other: &JointParams) -> bool {
        self.asr.dims == other.asr.dims
            && self.sre.dims == other.sre.dims
            && self.cross.len() == other.cross.len()
            && self
                .cross
                .iter()
                .zip(other.cross.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.rows() == b.rows() && a.cols() == b.cols())
    }

    pub fn add_assign(&mut self, other: &JointParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for t in self.tensors() {
            for x in t {
                s += x * x;
            }
        }
        s.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub params: JointParams,
    pub config: FeedbackConfig,
    /// Frames by which content labels lag the input.
    pub asr_delay: usize,
}

impl JointModel {
    pub fn asr_dims(&self) -> CellDims {
        self.params.asr.dims
    }

    pub fn sre_dims(&self) -> CellDims {
        self.params.sre.dims
    }

    pub fn input_dim(&self) -> usize {
        self.params.asr.dims.input
    }
}

/// Initializes the content tower then the speaker tower from one stream;
/// cross matrices start at zero, so a fresh joint model computes exactly
/// what its two towers compute alone.
pub fn init_joint_model(
    asr: CellDims,
    sre: CellDims,
    config: FeedbackConfig,
    asr_delay: usize,
    rng: &mut SplitMix64,
) -> Result<JointModel> {
    if asr.input != sre.input {
        return Err(Error::dim("init_joint_model shared input", asr.input, sre.input));
    }
    let asr_params = init_cell_params(asr, rng)?;
    let sre_params = init_cell_params(sre, rng)?;
    let cross = CrossWeights::zeros(&config, &asr, &sre);
    Ok(JointModel {
        params: JointParams {
            asr: asr_params,
            sre: sre_params,
            cross,
        },
        config,
        asr_delay,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub asr_logits: Vec<Vec<f64>>,
    pub sre_logits: Vec<Vec<f64>>,
}

/// Per-frame step caches of both towers. Each cache carries its own
/// `r`/`p`, which are what the cross links read at the next frame.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    pub asr: Vec<StepCache>,
    pub sre: Vec<StepCache>,
}

impl SequenceCache {
    pub fn len(&self) -> usize {
        self.asr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.asr.is_empty()
    }
}

fn projection(cache: &StepCache, source: Source) -> &[f64] {
    match source {
        Source::R => &cache.r,
        Source::P => &cache.p,
    }
}

fn injection_for(cross: &CrossWeights, direction: Direction, receiver_cell: usize, sender_prev: Option<&StepCache>) -> SinkInjection {
    let mut inj = SinkInjection::none();
    let Some(sender) = sender_prev else {
        return inj;
    };
    for (key, w) in cross.iter().filter(|(k, _)| k.direction == direction) {
        let slot = inj.0[key.sink.index()].get_or_insert_with(|| vec![0.0; receiver_cell]);
        w.mul_vec_acc(projection(sender, key.source), slot);
    }
    inj
}

/// Runs both towers over `frames`.
pub fn forward_sequence(model: &JointModel, frames: &[Vec<f64>]) -> Result<(SequenceOutput, SequenceCache)> {
    if frames.is_empty() {
        return Err(Error::invalid("forward_sequence needs at least one frame"));
    }
    let p = &model.params;
    let (ad, sd) = (p.asr.dims, p.sre.dims);
    let mut asr_state = CellState::zeros(&ad);
    let mut sre_state = CellState::zeros(&sd);
    let mut cache = SequenceCache {
        asr: Vec::with_capacity(frames.len()),
        sre: Vec::with_capacity(frames.len()),
    };
    let mut out = SequenceOutput {
        asr_logits: Vec::with_capacity(frames.len()),
        sre_logits: Vec::with_capacity(frames.len()),
    };
    for x in frames {
        let asr_inj = injection_for(&p.cross, Direction::ToAsr, ad.cell, cache.sre.last());
        let sre_inj = injection_for(&p.cross, Direction::ToSre, sd.cell, cache.asr.last());
        let (a_out, a_cache) = cell_forward(&p.asr, x, &asr_state, &asr_inj)?;
        let (s_out, s_cache) = cell_forward(&p.sre, x, &sre_state, &sre_inj)?;
        asr_state = a_out.state;
        sre_state = s_out.state;
        out.asr_logits.push(a_out.pre_y);
        out.sre_logits.push(s_out.pre_y);
        cache.asr.push(a_cache);
        cache.sre.push(s_cache);
    }
    Ok((out, cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub asr_loss: f64,
    pub sre_loss: f64,
    pub d_asr_logits: Vec<Vec<f64>>,
    pub d_sre_logits: Vec<Vec<f64>>,
}

/// `L_asr + L_sre`, each a per-frame mean cross-entropy. Content frames
/// before `delay` are masked; frame `t` is scored against phone label
/// `t - delay`. Every frame is scored against the speaker label.
pub fn joint_loss(
    asr_logits: &[Vec<f64>],
    sre_logits: &[Vec<f64>],
    phone_labels: &[u16],
    speaker: usize,
    delay: usize,
) -> Result<JointLoss> {
    let t_len = asr_logits.len();
    if sre_logits.len() != t_len || phone_labels.len() != t_len {
        return Err(Error::dim(
            "joint_loss frame count",
            t_len,
            format!("{} speaker logits, {} phone labels", sre_logits.len(), phone_labels.len()),
        ));
    }
    if delay >= t_len {
        return Err(Error::invalid(format!(
            "target delay {delay} leaves no scored frames in a {t_len}-frame sequence"
        )));
    }
    let scored = (t_len - delay) as f64;
    let mut asr_loss = 0.0;
    let mut d_asr = Vec::with_capacity(t_len);
    for (t, logits) in asr_logits.iter().enumerate() {
        if t < delay {
            d_asr.push(vec![0.0; logits.len()]);
            continue;
        }
        let (l, mut g) = softmax_xent(logits, phone_labels[t - delay] as usize)?;
        asr_loss += l;
        g.iter_mut().for_each(|v| *v /= scored);
        d_asr.push(g);
    }
    asr_loss /= scored;

    let mut sre_loss = 0.0;
    let mut d_sre = Vec::with_capacity(t_len);
    for logits in sre_logits {
        let (l, mut g) = softmax_xent(logits, speaker)?;
        sre_loss += l;
        g.iter_mut().for_each(|v| *v /= t_len as f64);
        d_sre.push(g);
    }
    sre_loss /= t_len as f64;

    Ok(JointLoss {
        loss: asr_loss + sre_loss,
        asr_loss,
        sre_loss,
        d_asr_logits: d_asr,
        d_sre_logits: d_sre,
    })
}

fn check_cache_matches(model: &JointModel, cache: &SequenceCache) -> Result<()> {
    let p = &model.params;
    let ok = cache.asr.len() == cache.sre.len()
        && cache.asr.iter().all(|c| c.c.len() == p.asr.dims.cell && c.x.len() == p.asr.dims.input && c.p.len() == p.asr.dims.nonrec_proj)
        && cache.sre.iter().all(|c| c.c.len() == p.sre.dims.cell && c.x.len() == p.sre.dims.input && c.p.len() == p.sre.dims.nonrec_proj);
    if !ok {
        return Err(Error::dim(
            "backward_sequence cache",
            format!("caches for {:?} / {:?}", p.asr.dims, p.sre.dims),
            "caches from a different model",
        ));
    }
    Ok(())
}

/// Exact gradient of the loss whose logit gradients are given, by a reverse
/// sweep over both towers. Sink gradients at step t feed the cross matrices
/// and flow into the sender tower's projections at t−1.
pub fn backward_sequence(
    model: &JointModel,
    cache: &SequenceCache,
    d_asr_logits: &[Vec<f64>],
    d_sre_logits: &[Vec<f64>],
) -> Result<JointParams> {
    check_cache_matches(model, cache)?;
    let t_len = cache.len();
    if d_asr_logits.len() != t_len || d_sre_logits.len() != t_len {
        return Err(Error::dim(
            "backward_sequence logit gradients",
            t_len,
            format!("{} / {}", d_asr_logits.len(), d_sre_logits.len()),
        ));
    }
    let p = &model.params;
    let mut grads = JointParams::zeros_like(p);
    let (ad, sd) = (p.asr.dims, p.sre.dims);

    // recurrence gradients from step t+1
    let (mut a_dc, mut a_dr) = (vec![0.0; ad.cell], vec![0.0; ad.rec_proj]);
    let (mut s_dc, mut s_dr) = (vec![0.0; sd.cell], vec![0.0; sd.rec_proj]);
    // cross-link gradients into each tower's r/p at step t, from step t+1
    let (mut a_xr, mut a_xp) = (vec![0.0; ad.rec_proj], vec![0.0; ad.nonrec_proj]);
    let (mut s_xr, mut s_xp) = (vec![0.0; sd.rec_proj], vec![0.0; sd.nonrec_proj]);

    for t in (0..t_len).rev() {
        let a_up = StepUpstream {
            d_c_next: a_dc,
            d_r_next: a_dr,
            d_m: vec![],
            d_r: std::mem::replace(&mut a_xr, vec![0.0; ad.rec_proj]),
            d_p: std::mem::replace(&mut a_xp, vec![0.0; ad.nonrec_proj]),
            d_y: d_asr_logits[t].clone(),
        };
        let s_up = StepUpstream {
            d_c_next: s_dc,
            d_r_next: s_dr,
            d_m: vec![],
            d_r: std::mem::replace(&mut s_xr, vec![0.0; sd.rec_proj]),
            d_p: std::mem::replace(&mut s_xp, vec![0.0; sd.nonrec_proj]),
            d_y: d_sre_logits[t].clone(),
        };
        let a_g = cell_backward(&p.asr, &cache.asr[t], &a_up, &mut grads.asr)?;
        let s_g = cell_backward(&p.sre, &cache.sre[t], &s_up, &mut grads.sre)?;

        if t > 0 {
            for (key, w) in p.cross.iter() {
                let (d_sink, sender_cache, dst_r, dst_p) = match key.direction {
                    Direction::ToAsr => (&a_g.d_sink[key.sink.index()], &cache.sre[t - 1], &mut s_xr, &mut s_xp),
                    Direction::ToSre => (&s_g.d_sink[key.sink.index()], &cache.asr[t - 1], &mut a_xr, &mut a_xp),
                };
                let src = projection(sender_cache, key.source);
                grads
                    .cross
                    .get_mut(key)
                    .expect("gradient buffer mirrors parameters")
                    .add_outer(d_sink, src);
                let dst = match key.source {
                    Source::R => dst_r,
                    Source::P => dst_p,
                };
                w.t_mul_vec_acc(d_sink, dst);
            }
        }

        a_dc = a_g.d_c_prev;
        a_dr = a_g.d_r_prev;
        s_dc = s_g.d_c_prev;
        s_dr = s_g.d_r_prev;
    }
    Ok(grads)
}

/// Forward, loss and backward for one labelled sequence.
pub fn sequence_gradient(
    model: &JointModel,
    frames: &[Vec<f64>],
    phone_labels: &[u16],
    speaker: usize,
) -> Result<(JointLoss, JointParams)> {
    let (out, cache) = forward_sequence(model, frames)?;
    let loss = joint_loss(&out.asr_logits, &out.sre_logits, phone_labels, speaker, model.asr_delay)?;
    let grads = backward_sequence(model, &cache, &loss.d_asr_logits, &loss.d_sre_logits)?;
    Ok((loss, grads))
}
