use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtrl::data::{gen_dataset, load_dataset, save_dataset};
use mtrl::eval::{evaluate, run_ablation, write_reports_csv, EvalReport};
use mtrl::gradcheck::{check_config, GradCheckDims};
use mtrl::joint::table3_grid;
use mtrl::trainer::{load_checkpoint, save_checkpoint, train_with, TrainState};

mod config;

use config::{write_sidecar, RunConfig};

#[derive(Parser)]
#[command(name = "mtrl", version, about = "Multi-task recurrent learning of content and speaker tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a joint model and write a checkpoint plus history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval(EvalArgs),
    /// Train and evaluate the 13 feedback configurations.
    Ablate(AblateArgs),
    /// Finite-difference check of BPTT gradients for every configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    phones: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    utts: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    splice: Option<usize>,
}

#[derive(Args)]
struct OptimFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Content-task target delay in frames.
    #[arg(long)]
    delay: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Feedback as SOURCES:SINKS, e.g. `r:g`, `r+p:i+f+o+g`, or `none`.
    #[arg(long)]
    feedback: Option<String>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    optim: OptimFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    input: usize,
    /// Cell size of both towers.
    #[arg(long, default_value_t = 6)]
    cell: usize,
    /// Recurrent and non-recurrent projection size of both towers.
    #[arg(long, default_value_t = 3)]
    proj: usize,
    #[arg(long, default_value_t = 3)]
    phones: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    delay: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_optim(cfg: &mut RunConfig, f: &OptimFlags) {
    let o = &mut cfg.optim;
    if let Some(v) = f.epochs {
        o.epochs = v;
    }
    if let Some(v) = f.lr {
        o.learning_rate = v;
    }
    if let Some(v) = f.momentum {
        o.momentum = v;
    }
    if let Some(v) = f.clip {
        o.clip_norm = v;
    }
    if let Some(v) = f.batch {
        o.batch_size = v;
    }
    if let Some(v) = f.delay {
        cfg.model.asr_delay = v;
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    let d = &mut cfg.data;
    let overrides = [
        (&mut d.n_speakers, args.speakers),
        (&mut d.n_phones, args.phones),
        (&mut d.feat_dim, args.feat_dim),
        (&mut d.utts_per_speaker, args.utts),
        (&mut d.frames_per_utt, args.frames),
        (&mut d.splice_radius, args.splice),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(v) = args.noise {
        d.noise_sigma = v;
    }
    let cfg = cfg.resolve()?;
    let ds = gen_dataset(&cfg.data)?;
    save_dataset(&ds, &args.out)?;
    std::fs::write(args.out.join("run.toml"), cfg.to_toml()?)?;
    println!(
        "wrote {} train / {} test utterances to {}",
        ds.train.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(())
}

fn default_history(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    apply_optim(&mut cfg, &args.optim);
    if let Some(fb) = &args.feedback {
        let parsed: mtrl::FeedbackConfig = fb.parse()?;
        cfg.feedback.sources = parsed.sources_label();
        cfg.feedback.sinks = parsed.sinks_label();
    }
    let cfg = cfg.resolve()?;
    let ds = load_dataset(&args.data)?;
    let model = cfg.model.build(&ds, cfg.feedback_config()?, cfg.seed)?;
    let mut state = TrainState::new(model, cfg.optim.clone());
    state.provenance = Some(cfg.to_json()?);
    let state = train_with(state, &ds.train, &ds.test, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  frame_error {:.4}  id_accuracy {:.4}",
            r.epoch, r.train_loss, r.heldout_frame_error, r.heldout_id_accuracy
        );
    })?;
    save_checkpoint(&state, &args.out)?;
    write_sidecar(&args.out, &cfg)?;

    let history = args.history.unwrap_or_else(|| default_history(&args.out));
    let mut text = String::from("epoch,train_loss,heldout_frame_error,heldout_id_accuracy\n");
    for r in &state.history {
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.heldout_frame_error, r.heldout_id_accuracy));
    }
    std::fs::write(&history, text).with_context(|| format!("cannot write {}", history.display()))?;
    write_sidecar(&history, &cfg)?;
    println!("wrote checkpoint {} after {} epochs", args.out.display(), state.epoch);
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let state = load_checkpoint(&args.ckpt)?;
    let metrics = evaluate(&state.model, &ds.train, &ds.test)?;
    let reference = table3_grid().into_iter().find(|g| g.config == state.model.config);
    let report = EvalReport {
        config: state.model.config.clone(),
        metrics,
        ref_wer: reference.as_ref().map(|g| g.ref_wer),
        ref_eer: reference.as_ref().map(|g| g.ref_eer),
    };
    write_csv(&args.out, &[report])?;
    // the checkpoint carries the run configuration it was trained with
    if let Some(p) = &state.provenance {
        if let Ok(cfg) = serde_json::from_value::<RunConfig>(p.clone()) {
            write_sidecar(&args.out, &cfg)?;
        }
    }
    println!(
        "frame_error {} eer {} id_accuracy {}",
        metrics.frame_error, metrics.eer, metrics.id_accuracy
    );
    Ok(())
}

fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    write_reports_csv(BufWriter::new(f), reports)?;
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?;
    apply_optim(&mut cfg, &args.optim);
    let cfg = cfg.resolve()?;
    let ds = load_dataset(&args.data)?;
    let reports = run_ablation(&ds, &cfg.model, &cfg.optim, &table3_grid())?;
    write_csv(&args.out, &reports)?;
    write_sidecar(&args.out, &cfg)?;
    for r in &reports {
        println!(
            "{:<20} frame_error {:.4}  eer {:.4}  id_accuracy {:.4}",
            r.config.to_string(),
            r.metrics.frame_error,
            r.metrics.eer,
            r.metrics.id_accuracy
        );
    }
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool> {
    let dims = GradCheckDims {
        input: args.input,
        asr_cell: args.cell,
        asr_rec_proj: args.proj,
        asr_nonrec_proj: args.proj,
        sre_cell: args.cell,
        sre_rec_proj: args.proj,
        sre_nonrec_proj: args.proj,
        phones: args.phones,
        speakers: args.speakers,
        frames: args.frames,
        delay: args.delay,
    };
    if dims.delay >= dims.frames {
        bail!("delay {} leaves no scored frames in {} frames", dims.delay, dims.frames);
    }
    let mut ok = true;
    for row in table3_grid() {
        let r = check_config(&dims, row.config.clone(), args.seed, args.eps)?;
        let pass = r.max_rel_err < args.tol;
        ok &= pass;
        println!(
            "{:<20} params {:>4}  max_rel_err {:.3e}  {}",
            row.config.to_string(),
            r.n_params,
            r.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Ablate(a) => ablate_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
