//! Acceptance criteria, one line of output per criterion. Runs under
//! `cargo test` as its own target and exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mtrl::cell::{cell_forward, CellState, SinkInjection};
use mtrl::data::{gen_dataset, load_dataset, save_dataset, SynthConfig};
use mtrl::eval::{compute_eer, evaluate, REPORT_CSV_HEADER};
use mtrl::gradcheck::{random_problem, GradCheckDims, Problem};
use mtrl::joint::{forward_sequence, joint_loss, sequence_gradient, table3_grid, FeedbackConfig};
use mtrl::numerics::SplitMix64;
use mtrl::trainer::{load_checkpoint, parse_checkpoint, save_checkpoint, train, ModelSpec, OptimConfig};
use mtrl::{Sink, Source};

const BIN: &str = env!("CARGO_BIN_EXE_mtrl");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mtrl(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mtrl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// Central differences of the full-sequence loss, using only the forward pass.
fn fd_max_rel_err(p: &mut Problem, eps: f64) -> f64 {
    let loss = |p: &Problem| {
        let (out, _) = forward_sequence(&p.model, &p.frames).unwrap();
        joint_loss(&out.asr_logits, &out.sre_logits, &p.phones, p.speaker, p.model.asr_delay)
            .unwrap()
            .loss
    };
    let (_, grads) = sequence_gradient(&p.model, &p.frames, &p.phones, p.speaker).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (ti, t) in analytic.iter().enumerate() {
        for (e, &a) in t.iter().enumerate() {
            let orig = p.model.params.tensors()[ti][e];
            p.model.params.tensors_mut()[ti][e] = orig + eps;
            let hi = loss(p);
            p.model.params.tensors_mut()[ti][e] = orig - eps;
            let lo = loss(p);
            p.model.params.tensors_mut()[ti][e] = orig;
            let n = (hi - lo) / (2.0 * eps);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let dims = GradCheckDims::default();
    let mut overall: f64 = 0.0;
    for (k, row) in table3_grid().into_iter().enumerate() {
        let mut p = random_problem(&dims, row.config.clone(), 1000 + k as u64).map_err(|e| e.to_string())?;
        let err = fd_max_rel_err(&mut p, 1e-4);
        ensure(err < 1e-4, || format!("{} max rel err {err:.3e}", row.config))?;
        overall = overall.max(err);
    }
    Ok(format!("13 configs, max relative error {overall:.2e} < 1e-4"))
}

fn baseline_reduction() -> Outcome {
    let dims = GradCheckDims::default();
    let grid = table3_grid();
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let cfg = grid[(i as usize) % grid.len()].config.clone();
        let mut p = random_problem(&dims, cfg, 5000 + i).map_err(|e| e.to_string())?;
        for (_, m) in p.model.params.cross.iter_mut() {
            m.as_mut_slice().fill(0.0);
        }
        let (out, _) = forward_sequence(&p.model, &p.frames).unwrap();
        for (params, joint) in [(&p.model.params.asr, &out.asr_logits), (&p.model.params.sre, &out.sre_logits)] {
            let mut state = CellState::zeros(&params.dims);
            for (x, y) in p.frames.iter().zip(joint) {
                let (o, _) = cell_forward(params, x, &state, &SinkInjection::none()).unwrap();
                for (a, b) in o.pre_y.iter().zip(y) {
                    worst = worst.max((a - b).abs());
                }
                state = o.state;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 instances, max deviation {worst:e} <= 1e-12"))
}

fn causality() -> Outcome {
    let dims = GradCheckDims {
        frames: 8,
        ..GradCheckDims::default()
    };
    let cfg = FeedbackConfig::new(&[Source::R, Source::P], &Sink::ALL).unwrap();
    let p = random_problem(&dims, cfg, 77).map_err(|e| e.to_string())?;
    let (base, _) = forward_sequence(&p.model, &p.frames).unwrap();
    for t in 0..dims.frames {
        let mut frames = p.frames.clone();
        frames[t].iter_mut().for_each(|v| *v += 0.37);
        let (pert, _) = forward_sequence(&p.model, &frames).unwrap();
        ensure(pert.asr_logits[..t] == base.asr_logits[..t], || format!("ASR output before {t} changed"))?;
        ensure(pert.sre_logits[..t] == base.sre_logits[..t], || format!("SRE output before {t} changed"))?;
        ensure(pert.asr_logits[t] != base.asr_logits[t], || format!("perturbation at {t} had no effect"))?;
    }
    let one = &p.frames[..1];
    let (a, _) = forward_sequence(&p.model, one).unwrap();
    let mut rng = SplitMix64::new(3);
    for _ in 0..10 {
        let mut m = p.model.clone();
        for t in m.params.sre.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.uniform(-5.0, 5.0).unwrap());
        }
        let (b, _) = forward_sequence(&m, one).unwrap();
        ensure(a.asr_logits == b.asr_logits, || "one-frame ASR logits depend on SRE parameters".into())?;
    }
    Ok("prefix outputs unchanged exactly; one-frame ASR logits independent of SRE tower".into())
}

// Brute-force sweep: evaluate the rates at thresholds below the minimum,
// at each midpoint between consecutive distinct scores, and above the
// maximum, then take the first crossing.
fn eer_oracle(t: &[f64], n: &[f64]) -> f64 {
    let mut all: Vec<f64> = t.iter().chain(n).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0];
    thresholds.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(all[all.len() - 1] + 1.0);
    let mut prev: Option<(f64, f64)> = None;
    for th in thresholds {
        let far = n.iter().filter(|&&s| s >= th).count() as f64 / n.len() as f64;
        let frr = t.iter().filter(|&&s| s < th).count() as f64 / t.len() as f64;
        let d = far - frr;
        if d == 0.0 {
            return far;
        }
        if d < 0.0 {
            let (pf, pr) = prev.unwrap();
            let pd = pf - pr;
            return pf + pd / (pd - d) * (far - pf);
        }
        prev = Some((far, frr));
    }
    unreachable!("FAR - FRR reaches -1 above the maximum score")
}

fn eer_oracle_equivalence() -> Outcome {
    let mut rng = SplitMix64::new(2024);
    for i in 0..1000 {
        let nt = 1 + rng.below(50);
        let nn = 1 + rng.below(50);
        // every third instance on a coarse grid to force ties
        let coarse = i % 3 == 0;
        let mut draw = |shift: f64| {
            let v = rng.next_f64() + shift;
            if coarse {
                (v * 20.0).round() / 20.0
            } else {
                v
            }
        };
        let t: Vec<f64> = (0..nt).map(|_| draw(0.3)).collect();
        let n: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        let got = compute_eer(&t, &n).map_err(|e| e.to_string())?;
        let want = eer_oracle(&t, &n);
        ensure(got == want, || format!("instance {i}: {got} vs oracle {want}"))?;
    }
    Ok("1000 random score sets match the midpoint sweep exactly".into())
}

fn joint_improvement() -> Outcome {
    let ds = gen_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let spec = ModelSpec::default();
    let joint_cfg = FeedbackConfig::new(&[Source::R], &[Sink::G]).unwrap();
    let mut eer_ok = Vec::new();
    let mut fer_ok = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let optim = OptimConfig {
            seed,
            ..OptimConfig::default()
        };
        let mut metrics = BTreeMap::new();
        for cfg in [FeedbackConfig::baseline(), joint_cfg.clone()] {
            let model = spec.build(&ds, cfg.clone(), seed).map_err(|e| e.to_string())?;
            let state = train(model, &ds.train, &ds.test, &optim).map_err(|e| e.to_string())?;
            let m = evaluate(&state.model, &ds.train, &ds.test).map_err(|e| e.to_string())?;
            metrics.insert(cfg.is_baseline(), m);
        }
        let (b, j) = (metrics[&true], metrics[&false]);
        eer_ok.push(j.eer <= b.eer);
        fer_ok.push(j.frame_error <= b.frame_error);
        lines.push(format!(
            "seed {seed}: EER {:.4} vs {:.4}, frame error {:.4} vs {:.4}",
            j.eer, b.eer, j.frame_error, b.frame_error
        ));
    }
    for l in &lines {
        println!("    {l} (joint vs baseline)");
    }
    // median of three booleans = majority
    let median = |v: &[bool]| v.iter().filter(|&&x| x).count() >= 2;
    ensure(median(&eer_ok), || format!("EER not improved in the median: {eer_ok:?}"))?;
    ensure(median(&fer_ok), || format!("frame error not improved in the median: {fer_ok:?}"))?;
    Ok(format!("EER ok per seed {eer_ok:?}, frame error ok per seed {fer_ok:?}"))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    mtrl(&["gen-data", "--out", &p("d1"), "--seed", "5"])?;
    mtrl(&["gen-data", "--out", &p("d2"), "--seed", "5"])?;
    let (a, b) = (dir_bytes(&tmp.path().join("d1")), dir_bytes(&tmp.path().join("d2")));
    ensure(a.len() > 600 && a == b, || "gen-data outputs differ".into())?;

    let small = ["--speakers", "4", "--utts", "5", "--frames", "20", "--feat-dim", "6"];
    let s = p("s");
    let mut args = vec!["gen-data", "--out", &s];
    args.extend(small);
    mtrl(&args)?;
    for ck in ["c1", "c2"] {
        mtrl(&["train", "--data", &s, "--out", &p(ck), "--feedback", "r:g", "--epochs", "2", "--seed", "9"])?;
    }
    let (c1, c2) = (fs::read(p("c1")).unwrap(), fs::read(p("c2")).unwrap());
    ensure(c1 == c2, || "checkpoints differ".into())?;
    ensure(
        fs::read(p("c1.history.csv")).unwrap() == fs::read(p("c2.history.csv")).unwrap(),
        || "histories differ".into(),
    )?;
    Ok(format!("gen-data x2 identical ({} files); train x2 identical ({} bytes)", a.len(), c1.len()))
}

fn ablation_shape() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("d");
    let data_s = data.to_string_lossy().into_owned();
    mtrl(&["gen-data", "--out", &data_s, "--speakers", "3", "--utts", "4", "--frames", "16", "--feat-dim", "4"])?;
    let cfg = tmp.path().join("small.toml");
    fs::write(
        &cfg,
        "[model]\nasr_delay = 2\n[model.asr]\ncell = 4\nrec_proj = 2\nnonrec_proj = 2\n[model.sre]\ncell = 4\nrec_proj = 2\nnonrec_proj = 2\n",
    )
    .unwrap();
    let out = tmp.path().join("ablate.csv");
    mtrl(&[
        "ablate",
        "--data",
        &data_s,
        "--out",
        &out.to_string_lossy(),
        "--config",
        &cfg.to_string_lossy(),
        "--epochs",
        "1",
    ])?;
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    ensure(lines[0] == REPORT_CSV_HEADER, || format!("header {}", lines[0]))?;
    ensure(lines.len() == 14, || format!("{} data rows", lines.len() - 1))?;
    let expected = [
        ("none", "none"),
        ("r", "i"),
        ("r+p", "i"),
        ("r", "f"),
        ("r+p", "f"),
        ("r", "o"),
        ("r+p", "o"),
        ("r", "g"),
        ("r+p", "g"),
        ("r", "i+f+o"),
        ("r+p", "i+f+o"),
        ("r", "i+f+o+g"),
        ("r+p", "i+f+o+g"),
    ];
    for (line, (src, snk)) in lines[1..].iter().zip(expected) {
        let f: Vec<&str> = line.split(',').collect();
        ensure(f.len() == 7 && f[0] == src && f[1] == snk, || format!("row {line}"))?;
    }
    ensure(lines[1].ends_with(",7.41,1.84"), || format!("baseline row {}", lines[1]))?;
    ensure(lines[12].ends_with(",7.05,0.55"), || format!("r->ifog row {}", lines[12]))?;
    Ok("13 rows in grid order with reference WER/EER columns".into())
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = gen_dataset(&SynthConfig::default()).map_err(|e| e.to_string())?;
    save_dataset(&ds, tmp.path()).map_err(|e| e.to_string())?;
    let back = load_dataset(tmp.path()).map_err(|e| e.to_string())?;
    let bit_equal = back.train.iter().chain(&back.test).zip(ds.train.iter().chain(&ds.test)).all(|(a, b)| {
        a.phone_labels == b.phone_labels
            && a.frames.iter().flatten().zip(b.frames.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(bit_equal && back == ds, || "dataset round trip differs".into())?;

    let victim = ds.train[3].id.clone();
    let fp = tmp.path().join(format!("{victim}.feat"));
    let bytes = fs::read(&fp).unwrap();
    fs::write(&fp, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_dataset(tmp.path()).err().map(|e| e.to_string()).unwrap_or_default();
    ensure(err.contains(&victim), || format!("truncated feature file not attributed: {err:?}"))?;

    let small = SynthConfig {
        n_speakers: 3,
        utts_per_speaker: 4,
        frames_per_utt: 12,
        feat_dim: 4,
        ..SynthConfig::default()
    };
    let sds = gen_dataset(&small).map_err(|e| e.to_string())?;
    let spec = ModelSpec::default();
    let cfg = FeedbackConfig::new(&[Source::R], &[Sink::G]).unwrap();
    let optim = OptimConfig {
        epochs: 1,
        ..OptimConfig::default()
    };
    let state = train(spec.build(&sds, cfg, 1).unwrap(), &sds.train, &sds.test, &optim).map_err(|e| e.to_string())?;
    let ck = tmp.path().join("m.ckpt");
    save_checkpoint(&state, &ck).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&ck).map_err(|e| e.to_string())?;
    let bits = |s: &mtrl::TrainState| -> Vec<u64> {
        s.model.params.tensors().into_iter().chain(s.velocity.tensors()).flatten().map(|v| v.to_bits()).collect()
    };
    ensure(bits(&loaded) == bits(&state) && loaded == state, || "checkpoint round trip differs".into())?;

    let good = fs::read(&ck).unwrap();
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    let e1 = parse_checkpoint(&bad).err().map(|e| e.to_string()).unwrap_or_default();
    ensure(e1.contains("magic"), || format!("bad magic: {e1:?}"))?;
    let e2 = parse_checkpoint(&good[..good.len() - 100]).err().map(|e| e.to_string()).unwrap_or_default();
    ensure(e2.contains("truncated"), || format!("truncation: {e2:?}"))?;
    Ok("dataset and checkpoint bit-exact; corruptions rejected with causes".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 baseline-reduction identity", baseline_reduction),
        ("3 causality/delay", causality),
        ("4 EER oracle equivalence", eer_oracle_equivalence),
        ("5 joint-improvement direction", joint_improvement),
        ("6 determinism", determinism),
        ("7 ablation harness shape", ablation_shape),
        ("8 format round-trips", format_round_trips),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
