//! Deterministic synthetic corpus with per-frame phone labels and a speaker
//! per utterance, its on-disk format, and verification trial lists.
//!
//! Each raw frame is `phone_mean[phone(t)] + speaker_offset[speaker] + σ·N(0, I)`;
//! model inputs are raw frames spliced with `splice_radius` neighbours on
//! each side, repeating the boundary frame at the edges.
//!
//! On disk a dataset is a directory holding `manifest.json` plus, per
//! utterance, `<id>.feat` (row-major little-endian f64, `T × spliced_dim`)
//! and `<id>.lab` (little-endian u16 per frame).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SplitMix64;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "mtrl-dataset";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_phones: usize,
    pub feat_dim: usize,
    pub utts_per_speaker: usize,
    pub frames_per_utt: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub noise_sigma: f64,
    pub splice_radius: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 20,
            n_phones: 10,
            feat_dim: 20,
            utts_per_speaker: 30,
            frames_per_utt: 60,
            segment_min: 4,
            segment_max: 8,
            noise_sigma: 0.3,
            splice_radius: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn spliced_dim(&self) -> usize {
        self.feat_dim * (2 * self.splice_radius + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("n_phones", self.n_phones),
            ("feat_dim", self.feat_dim),
            ("frames_per_utt", self.frames_per_utt),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::invalid("utts_per_speaker must be at least 2 to fill both splits"));
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return Err(Error::invalid(format!(
                "empty segment length range {}..={}",
                self.segment_min, self.segment_max
            )));
        }
        if self.n_phones > u16::MAX as usize + 1 {
            return Err(Error::invalid("phone labels must fit in u16"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Held-out utterances per speaker: 10%, rounded, at least one.
    pub fn test_per_speaker(&self) -> usize {
        ((self.utts_per_speaker + 5) / 10).clamp(1, self.utts_per_speaker - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    /// `T` spliced frames.
    pub frames: Vec<Vec<f64>>,
    pub phone_labels: Vec<u16>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub frames: usize,
    pub feat_file: String,
    pub feat_bytes: u64,
    pub lab_file: String,
    pub lab_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: SynthConfig,
    pub spliced_dim: usize,
    /// False: every speaker appears in both splits.
    pub speaker_disjoint: bool,
    pub phone_means: Vec<Vec<f64>>,
    pub speaker_offsets: Vec<Vec<f64>>,
    pub utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn n_phones(&self) -> usize {
        self.manifest.config.n_phones
    }

    pub fn n_speakers(&self) -> usize {
        self.manifest.config.n_speakers
    }

    pub fn input_dim(&self) -> usize {
        self.manifest.spliced_dim
    }
}

fn utt_id(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}_utt{utt:03}")
}

fn splice(raw: &[Vec<f64>], radius: usize) -> Vec<Vec<f64>> {
    let last = raw.len() as isize - 1;
    (0..raw.len() as isize)
        .map(|t| {
            let mut out = Vec::with_capacity(raw[0].len() * (2 * radius + 1));
            for k in -(radius as isize)..=radius as isize {
                out.extend_from_slice(&raw[(t + k).clamp(0, last) as usize]);
            }
            out
        })
        .collect()
}

fn phone_sequence(cfg: &SynthConfig, rng: &mut SplitMix64) -> Vec<u16> {
    let mut labels = Vec::with_capacity(cfg.frames_per_utt);
    let span = cfg.segment_max - cfg.segment_min + 1;
    while labels.len() < cfg.frames_per_utt {
        let phone = rng.below(cfg.n_phones) as u16;
        let len = cfg.segment_min + rng.below(span);
        let len = len.min(cfg.frames_per_utt - labels.len());
        labels.extend(std::iter::repeat(phone).take(len));
    }
    labels
}

/// Generates the corpus. Draw order: phone means, speaker offsets, then per
/// speaker and utterance the label sequence followed by frame noise, then
/// one Fisher–Yates shuffle per speaker choosing its held-out utterances.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let draw_table = |rows: usize, rng: &mut SplitMix64| -> Result<Vec<Vec<f64>>> {
        (0..rows)
            .map(|_| (0..cfg.feat_dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    };
    let phone_means = draw_table(cfg.n_phones, &mut rng)?;
    let speaker_offsets = draw_table(cfg.n_speakers, &mut rng)?;

    let mut by_speaker: Vec<Vec<Utterance>> = Vec::with_capacity(cfg.n_speakers);
    for spk in 0..cfg.n_speakers {
        let mut utts = Vec::with_capacity(cfg.utts_per_speaker);
        for u in 0..cfg.utts_per_speaker {
            let labels = phone_sequence(cfg, &mut rng);
            let raw: Vec<Vec<f64>> = labels
                .iter()
                .map(|&ph| {
                    (0..cfg.feat_dim)
                        .map(|d| {
                            let clean = phone_means[ph as usize][d] + speaker_offsets[spk][d];
                            if cfg.noise_sigma == 0.0 {
                                clean
                            } else {
                                clean + cfg.noise_sigma * rng.gaussian()
                            }
                        })
                        .collect()
                })
                .collect();
            utts.push(Utterance {
                id: utt_id(spk, u),
                speaker: spk,
                frames: splice(&raw, cfg.splice_radius),
                phone_labels: labels,
            });
        }
        by_speaker.push(utts);
    }

    let n_test = cfg.test_per_speaker();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut records = Vec::new();
    for utts in by_speaker {
        let mut order: Vec<usize> = (0..utts.len()).collect();
        rng.shuffle(&mut order);
        let held: BTreeSet<usize> = order[..n_test].iter().copied().collect();
        for (u, utt) in utts.into_iter().enumerate() {
            let split = if held.contains(&u) { Split::Test } else { Split::Train };
            records.push(record_for(&utt, split, cfg.spliced_dim()));
            match split {
                Split::Train => train.push(utt),
                Split::Test => test.push(utt),
            }
        }
    }

    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        spliced_dim: cfg.spliced_dim(),
        speaker_disjoint: false,
        phone_means,
        speaker_offsets,
        utterances: records,
    };
    Ok(Dataset { manifest, train, test })
}

fn record_for(utt: &Utterance, split: Split, dim: usize) -> UtteranceRecord {
    UtteranceRecord {
        id: utt.id.clone(),
        speaker: utt.speaker,
        split,
        frames: utt.len(),
        feat_file: format!("{}.feat", utt.id),
        feat_bytes: (utt.len() * dim * 8) as u64,
        lab_file: format!("{}.lab", utt.id),
        lab_bytes: (utt.len() * 2) as u64,
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&ds.manifest)
        .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let find = |id: &str| ds.train.iter().chain(&ds.test).find(|u| u.id == id);
    for rec in &ds.manifest.utterances {
        let utt = find(&rec.id).ok_or_else(|| Error::format("dataset", format!("manifest lists unknown utterance {}", rec.id)))?;
        let mut feat = Vec::with_capacity(rec.feat_bytes as usize);
        for frame in &utt.frames {
            for v in frame {
                feat.extend_from_slice(&v.to_le_bytes());
            }
        }
        let lab: Vec<u8> = utt.phone_labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        let fp = dir.join(&rec.feat_file);
        fs::write(&fp, feat).map_err(|e| Error::io(&fp, e))?;
        let lp = dir.join(&rec.lab_file);
        fs::write(&lp, lab).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("dataset manifest", e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            "dataset manifest",
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let dim = manifest.spliced_dim;
    if dim != manifest.config.spliced_dim() {
        return Err(Error::format("dataset manifest", "spliced_dim disagrees with config"));
    }
    let mut ids = BTreeSet::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for rec in &manifest.utterances {
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::format("dataset manifest", format!("duplicate utterance id {}", rec.id)));
        }
        let what = format!("utterance {}", rec.id);
        let fp = dir.join(&rec.feat_file);
        let feat = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
        let expect = rec.frames * dim * 8;
        if feat.len() != expect || rec.feat_bytes as usize != expect {
            return Err(Error::format(
                what,
                format!("feature file has {} bytes, manifest implies {} ({} frames)", feat.len(), expect, rec.frames),
            ));
        }
        let lp = dir.join(&rec.lab_file);
        let lab = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        if lab.len() != rec.frames * 2 || rec.lab_bytes as usize != lab.len() {
            return Err(Error::format(
                what,
                format!("label file has {} bytes, manifest implies {}", lab.len(), rec.frames * 2),
            ));
        }
        let frames: Vec<Vec<f64>> = feat
            .chunks_exact(dim * 8)
            .map(|row| {
                row.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect()
            })
            .collect();
        let phone_labels: Vec<u16> = lab.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        if let Some(bad) = phone_labels.iter().find(|&&l| l as usize >= manifest.config.n_phones) {
            return Err(Error::format(what, format!("phone label {bad} out of range")));
        }
        if rec.speaker >= manifest.config.n_speakers {
            return Err(Error::format(what, format!("speaker {} out of range", rec.speaker)));
        }
        let utt = Utterance {
            id: rec.id.clone(),
            speaker: rec.speaker,
            frames,
            phone_labels,
        };
        match rec.split {
            Split::Train => train.push(utt),
            Split::Test => test.push(utt),
        }
    }
    Ok(Dataset { manifest, train, test })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_speaker: usize,
    pub test_utt: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.trials.len() - self.n_target()
    }
}

/// Every speaker present in `test` against every test utterance.
pub fn build_trials(test: &[Utterance]) -> Result<TrialList> {
    let speakers: BTreeSet<usize> = test.iter().map(|u| u.speaker).collect();
    if speakers.len() < 2 {
        return Err(Error::invalid(format!(
            "verification trials need at least 2 speakers, test set has {}",
            speakers.len()
        )));
    }
    let trials = speakers
        .iter()
        .flat_map(|&spk| {
            test.iter().map(move |u| Trial {
                enroll_speaker: spk,
                test_utt: u.id.clone(),
                is_target: u.speaker == spk,
            })
        })
        .collect();
    Ok(TrialList { trials })
}
