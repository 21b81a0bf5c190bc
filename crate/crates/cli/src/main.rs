//! `ardiff`: command-line laboratory for autoregressive diffusion over
//! patches. Subcommands map one-to-one onto the library operations; every
//! run against an output directory records its effective configuration and
//! a manifest so results can be replayed byte for byte.
//!
//! Exit codes: 0 success, 2 validation/usage error, 3 numerical failure.

mod report;
mod runio;
mod svg;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ardiff_core::gauss::{Gaussian, GaussianMixture};
use ardiff_core::oracle::{ConditionalOracle, PerturbMode, PerturbedScore, ScoreSource};
use ardiff_core::patches::PatchLayout;
use ardiff_core::rng::SeedPath;
use ardiff_core::sampler::{ar_sample, exact_pushforward, BiasSpec, DriftGain, RunConfig};
use ardiff_core::schedule::{
    appendix_tail_constant, tail_admissible_max, theorem1_bound, BoundInputs, TimeSchedule,
};
use ardiff_core::scorelearn::{
    compare_losses, estimate_constant, train, LossTrace, ScoreNet, TimeSampling, TrainConfig,
};
use ardiff_core::synthtasks::{
    evaluate, extract_features, gen_task1, gen_task2, Features, RasterImage, Task1Bounds,
    Task2Bounds, TaskKind,
};
use ardiff_core::verify::{
    ar_vs_joint_conditional, check_counterexample, init_error_sweep, CounterexampleSpec,
};
use ardiff_core::{Error, ErrorKind, Result};

use runio::{digest_value, effective_params, Csv, RunContext};

#[derive(Parser)]
#[command(
    name = "ardiff",
    version,
    about = "Autoregressive diffusion over patches: schedules, exact sampling laws, training, and verification"
)]
struct Cli {
    /// Root random seed
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (outputs, config.json, and run.json land here)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replay a stored config.json instead of reading command flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread count
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the three-regime time grid; print it as CSV with a budget report
    Schedule(ScheduleCmd),
    /// Draw AR samples from a Gaussian-mixture target with oracle scores
    Sample(SampleCmd),
    /// Closed-form generated law and exact KL for a single-Gaussian target
    Pushforward(PushforwardCmd),
    /// Train the noise-prediction network on a mixture target
    Train(TrainCmd),
    /// Loss-constant estimation and corrected loss comparison
    AnalyzeTrace(AnalyzeTraceCmd),
    /// The small-joint-KL / large-conditional-KL Gaussian pair
    Counterexample(CounterexampleCmd),
    /// Exact KL along the forward flow against its budget
    InitBound(InitBoundCmd),
    /// Joint-path vs AR-path generation of the same two-patch target
    ArVsJoint(ArVsJointCmd),
    /// Generate synthetic raster task samples as PPM files
    SynthGen(SynthGenCmd),
    /// Extract features from PPM files and evaluate the constraint fit
    SynthEval(SynthEvalCmd),
    /// Render SVG plots and a summary table from run directories
    Report(ReportCmd),
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct GridArgs {
    /// Mixing time T (> 1)
    #[arg(long = "T", required_unless_present = "config")]
    t_total: Option<f64>,
    /// Maximum step size in (0, 1]
    #[arg(long, required_unless_present = "config")]
    eta: Option<f64>,
    /// Requested tail width
    #[arg(long, default_value_t = 0.25)]
    delta: f64,
    /// Smoothness constant gating the tail admissibility
    #[arg(long = "L", default_value_t = 1.0)]
    smoothness: f64,
}

impl GridArgs {
    fn build(&self) -> Result<TimeSchedule> {
        TimeSchedule::build(
            req(&self.t_total, "--T")?,
            req(&self.eta, "--eta")?,
            self.delta,
            self.smoothness,
        )
    }
}

/// A parameter that clap enforces unless `--config` supplies it.
fn req<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::InvalidInput {
        what: "missing parameter",
        why: name.into(),
    })
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum GainArg {
    Double,
    Single,
}

impl From<GainArg> for DriftGain {
    fn from(g: GainArg) -> Self {
        match g {
            GainArg::Double => DriftGain::Double,
            GainArg::Single => DriftGain::Single,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SamplingArg {
    Uniform,
    Reweighted,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e.kind() {
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone();
    let cfg = cli.config.clone();
    let seed = cli.seed;
    match cli.command {
        Command::Schedule(c) => cmd_schedule(c, out, cfg, seed),
        Command::Sample(c) => cmd_sample(c, out, cfg, seed),
        Command::Pushforward(c) => cmd_pushforward(c, out, cfg, seed),
        Command::Train(c) => cmd_train(c, out, cfg, seed),
        Command::AnalyzeTrace(c) => cmd_analyze_trace(c, out, cfg, seed),
        Command::Counterexample(c) => cmd_counterexample(c, out, cfg, seed),
        Command::InitBound(c) => cmd_init_bound(c, out, cfg, seed),
        Command::ArVsJoint(c) => cmd_ar_vs_joint(c, out, cfg, seed),
        Command::SynthGen(c) => cmd_synth_gen(c, out, cfg, seed),
        Command::SynthEval(c) => cmd_synth_eval(c, out, cfg, seed),
        Command::Report(c) => cmd_report(c, out, cfg, seed),
    }
}

// ---------------------------------------------------------------------------
// shared parsing and file loading
// ---------------------------------------------------------------------------

fn parse_layout(spec: &str) -> Result<PatchLayout> {
    let dims: std::result::Result<Vec<usize>, _> =
        spec.split(',').map(|s| s.trim().parse()).collect();
    PatchLayout::new(dims.map_err(|e| Error::Parse {
        what: "layout",
        why: format!("{e}"),
    })?)
}

fn parse_f64_list(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim().parse().map_err(|e| Error::Parse {
                what: "number list",
                why: format!("{e}"),
            })
        })
        .collect()
}

fn parse_usize_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim().parse().map_err(|e| Error::Parse {
                what: "number list",
                why: format!("{e}"),
            })
        })
        .collect()
}

fn load_mixture(path: &Path) -> Result<GaussianMixture> {
    let raw = std::fs::read_to_string(path)?;
    if let Ok(m) = serde_json::from_str::<GaussianMixture>(&raw) {
        return Ok(m);
    }
    serde_json::from_str::<Gaussian>(&raw)
        .map(GaussianMixture::single)
        .map_err(|e| Error::Parse {
            what: "target file",
            why: format!("{}: {e}", path.display()),
        })
}

fn load_gaussian(path: &Path) -> Result<Gaussian> {
    let m = load_mixture(path)?;
    if m.component_count() != 1 {
        return Err(Error::InvalidInput {
            what: "target",
            why: "this operation needs a single-Gaussian target".into(),
        });
    }
    Ok(m.components()[0].clone())
}

fn task_kind(task: u8) -> Result<TaskKind> {
    match task {
        1 => Ok(TaskKind::SunShadow),
        2 => Ok(TaskKind::ScaledSquares),
        other => Err(Error::InvalidInput {
            what: "task",
            why: format!("expected 1 or 2, got {other}"),
        }),
    }
}

fn stage_sources(
    target: &GaussianMixture,
    layout: &PatchLayout,
    model: Option<&Path>,
    eps: f64,
    bias_seed: u64,
) -> Result<Vec<Arc<dyn ScoreSource>>> {
    let learned: Option<Arc<ScoreNet>> = match model {
        None => None,
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let net: ScoreNet = serde_json::from_str(&raw).map_err(|e| Error::Parse {
                what: "model file",
                why: format!("{}: {e}", path.display()),
            })?;
            Some(Arc::new(net))
        }
    };
    (1..=layout.patch_count())
        .map(|k| {
            let base: Arc<dyn ScoreSource> = match &learned {
                Some(net) => {
                    if net.patch_dim() != layout.dims()[k - 1]
                        || net.cond_width() < layout.prefix_dim(k)?
                    {
                        return Err(Error::InvalidInput {
                            what: "model",
                            why: format!("network does not fit patch {k} of this layout"),
                        });
                    }
                    net.clone()
                }
                None => Arc::new(ConditionalOracle::new(target.clone(), layout.clone(), k)?),
            };
            if eps > 0.0 {
                Ok(Arc::new(PerturbedScore::new(
                    base,
                    eps,
                    PerturbMode::ConstantBias { seed: bias_seed },
                    k,
                )?) as Arc<dyn ScoreSource>)
            } else {
                Ok(base)
            }
        })
        .collect()
}

fn emit_json<T: Serialize>(ctx: &mut RunContext, name: &str, value: &T) -> Result<()> {
    if ctx.out_dir.is_some() {
        ctx.write_json(name, value)?;
    } else {
        println!("{}", serde_json::to_string_pretty(value).expect("json"));
    }
    Ok(())
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct ScheduleCmd {
    #[command(flatten)]
    #[serde(flatten)]
    grid: GridArgs,
    /// Second moment m0 for the budget report
    #[arg(long, default_value_t = 1.0)]
    m0: f64,
    /// Total dimension d for the budget report
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Patch count K for the budget report
    #[arg(long, default_value_t = 1)]
    patches: usize,
    /// Average score error entering the budget
    #[arg(long, default_value_t = 0.0)]
    eps_score: f64,
}

fn cmd_schedule(
    cmd: ScheduleCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "schedule", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "schedule", cfg, seed)?;
    let sched = p.grid.build()?;
    sched.validate()?;

    let mut csv = Csv::new(&["r", "t_r", "eta_r", "regime"]);
    for (r, &eta) in sched.steps().iter().enumerate() {
        csv.row(&[
            r.to_string(),
            format!("{}", sched.times()[r]),
            format!("{eta}"),
            format!("{:?}", sched.regime(r)).to_lowercase(),
        ]);
    }
    let csv = csv.into_string();
    print!("{csv}");
    ctx.write_bytes("schedule.csv", csv.as_bytes())?;

    let bound = theorem1_bound(&BoundInputs::new(
        p.grid.smoothness,
        p.m0,
        p.dim,
        p.patches,
        p.eps_score,
        &sched,
    ));
    let report = json!({
        "t_total": sched.total_time(),
        "eta": sched.max_step(),
        "requested_tail": sched.requested_tail(),
        "achieved_tail": sched.achieved_tail(),
        "uniform_end": sched.uniform_end(),
        "geometric_end": sched.geometric_end(),
        "step_count": sched.step_count(),
        "sum_of_steps": sched.steps().iter().sum::<f64>(),
        "tail_admissible_max": tail_admissible_max(p.grid.smoothness),
        "appendix_tail_constant": appendix_tail_constant(p.grid.smoothness),
        "kl_budget": bound,
        "budget_inputs": {
            "smoothness": p.grid.smoothness,
            "m0": p.m0,
            "dim": p.dim,
            "patches": p.patches,
            "eps_score": p.eps_score,
        },
    });
    emit_json(&mut ctx, "bounds.json", &report)?;
    ctx.finish()
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct SampleCmd {
    /// Target distribution (JSON: mixture or single Gaussian)
    #[arg(long, required_unless_present = "config")]
    target: Option<PathBuf>,
    /// Patch dims, comma-separated (e.g. 1,1)
    #[arg(long, required_unless_present = "config")]
    layout: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    grid: GridArgs,
    /// Number of samples
    #[arg(long, required_unless_present = "config")]
    n: Option<usize>,
    /// Trained network JSON; replaces the exact oracles for every stage
    #[arg(long)]
    model: Option<PathBuf>,
    /// Constant-bias score error added to every stage source
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Seed of the bias directions
    #[arg(long, default_value_t = 0)]
    bias_seed: u64,
    #[arg(long, value_enum, default_value_t = GainArg::Double)]
    gain: GainArg,
}

fn cmd_sample(
    cmd: SampleCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "sample", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "sample", cfg, seed)?;
    let target = load_mixture(&req(&p.target, "--target")?)?;
    let layout = parse_layout(&req(&p.layout, "--layout")?)?;
    let sched = p.grid.build()?;
    let run = RunConfig {
        layout: layout.clone(),
        schedule: sched.clone(),
        sources: stage_sources(&target, &layout, p.model.as_deref(), p.eps, p.bias_seed)?,
        n_samples: req(&p.n, "--n")?,
        seed: SeedPath::root(seed),
        gain: p.gain.into(),
    };
    let samples = ar_sample(&run)?;

    let d = layout.total_dim();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header_refs);
    for s in &samples {
        csv.row_f64(s.as_slice());
    }
    let body = csv.into_string();
    if ctx.write_bytes("samples.csv", body.as_bytes())?.is_none() {
        print!("{body}");
    }
    ctx.set_extra(json!({
        "schedule_digest": digest_value(&serde_json::to_value(&sched).expect("schedule")),
        "n_samples": run.n_samples,
    }));
    ctx.finish()
}

// ---------------------------------------------------------------------------
// pushforward
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct PushforwardCmd {
    /// Target distribution (JSON, single Gaussian)
    #[arg(long, required_unless_present = "config")]
    target: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    layout: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    grid: GridArgs,
    /// Constant-bias score error
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    bias_seed: u64,
    /// Apply the bias only to this stage (1-based)
    #[arg(long)]
    only_stage: Option<usize>,
    #[arg(long, value_enum, default_value_t = GainArg::Double)]
    gain: GainArg,
}

fn cmd_pushforward(
    cmd: PushforwardCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "pushforward", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "pushforward", cfg, seed)?;
    let target = load_gaussian(&req(&p.target, "--target")?)?;
    let layout = parse_layout(&req(&p.layout, "--layout")?)?;
    let sched = p.grid.build()?;
    let bias = (p.eps > 0.0).then_some(BiasSpec {
        eps: p.eps,
        seed: p.bias_seed,
        only_stage: p.only_stage,
    });
    let push = exact_pushforward(&target, &layout, &sched, bias, p.gain.into())?;

    let budget = theorem1_bound(&BoundInputs::new(
        target.precision_lmax(),
        target.second_moment(),
        target.dim(),
        layout.patch_count(),
        p.eps,
        &sched,
    ));
    let stages: Vec<_> = push
        .stages
        .iter()
        .map(|s| {
            json!({
                "gain": matrix_rows(&s.gain),
                "offset": s.offset.as_slice(),
                "cov": matrix_rows(&s.cov),
            })
        })
        .collect();
    let out_json = json!({
        "kl": push.kl,
        "kl_budget": budget,
        "eta": sched.max_step(),
        "t_total": sched.total_time(),
        "r_steps": sched.step_count(),
        "eps_score": p.eps,
        "output": push.output,
        "stages": stages,
    });
    emit_json(&mut ctx, "pushforward.json", &out_json)?;
    ctx.finish()
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct TrainCmd {
    /// Target distribution (JSON: mixture or single Gaussian)
    #[arg(long, required_unless_present = "config")]
    target: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    layout: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    grid: GridArgs,
    /// Hidden layer widths, comma-separated
    #[arg(long, default_value = "8,8")]
    widths: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = SamplingArg::Uniform)]
    time_sampling: SamplingArg,
    /// Condition width; defaults to the largest prefix dimension
    #[arg(long)]
    cond_width: Option<usize>,
    /// Free-form task label stored in the trace
    #[arg(long, default_value = "synthetic")]
    task_label: String,
}

fn cmd_train(
    cmd: TrainCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "train", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "train", cfg, seed)?;
    let target = load_mixture(&req(&p.target, "--target")?)?;
    let layout = parse_layout(&req(&p.layout, "--layout")?)?;
    let sched = p.grid.build()?;
    let dims = layout.dims();
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::InvalidInput {
            what: "layout",
            why: "the shared network needs equal patch dims".into(),
        });
    }
    let cond_width = p
        .cond_width
        .unwrap_or(layout.total_dim() - dims[dims.len() - 1]);
    let widths = parse_usize_list(&p.widths)?;
    let net = ScoreNet::new(dims[0], cond_width, &widths, SeedPath::root(seed).child(1));
    let train_cfg = TrainConfig {
        lr: p.lr,
        steps: p.steps,
        batch: p.batch,
        seed,
        time_sampling: match p.time_sampling {
            SamplingArg::Uniform => TimeSampling::Uniform,
            SamplingArg::Reweighted => TimeSampling::Reweighted,
        },
        task: p.task_label.clone(),
    };
    let (trained, trace) = train(&net, &target, &layout, &sched, &train_cfg)?;

    let mut csv = Csv::new(&["step", "loss"]);
    for (i, loss) in trace.losses.iter().enumerate() {
        csv.row(&[i.to_string(), format!("{loss}")]);
    }
    let body = csv.into_string();
    if ctx.write_bytes("trace.csv", body.as_bytes())?.is_none() {
        print!("{body}");
    }
    ctx.write_json("model.json", &trained)?;
    let last = *trace.losses.last().expect("nonempty");
    ctx.set_extra(json!({
        "final_loss": last,
        "model_id": trace.model_id,
        "patches": trace.patches,
        "task": trace.task,
    }));
    eprintln!("trained {} steps, final loss {last:.6}", trace.losses.len());
    ctx.finish()
}

// ---------------------------------------------------------------------------
// analyze-trace
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct AnalyzeTraceCmd {
    /// Loss trace CSV (step,loss); treated as the AR side when comparing
    #[arg(long, required_unless_present = "config")]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    window: usize,
    #[arg(long, default_value_t = 1e-4)]
    var_threshold: f64,
    /// Baseline trace CSV for the corrected comparison
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Patch count of the AR trace (the correction factor)
    #[arg(long, default_value_t = 1)]
    patches: usize,
}

fn cmd_analyze_trace(
    cmd: AnalyzeTraceCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "analyze-trace", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "analyze-trace", cfg, seed)?;
    let trace_path = req(&p.trace, "--trace")?;
    let losses = runio::read_csv_column(&trace_path, "loss")?;
    let trace = LossTrace {
        losses,
        model_id: trace_path.display().to_string(),
        patches: p.patches,
        task: String::new(),
    };
    let est = estimate_constant(&trace, p.window, p.var_threshold)?;
    let mut analysis = json!({
        "constant_mean": est.mean,
        "constant_final": est.final_loss,
        "window_start": est.window_start,
        "window": p.window,
        "var_threshold": p.var_threshold,
    });

    if let Some(other) = &p.compare {
        let losses = runio::read_csv_column(other, "loss")?;
        let baseline = LossTrace {
            losses,
            model_id: other.display().to_string(),
            patches: 1,
            task: String::new(),
        };
        let base_est = estimate_constant(&baseline, p.window, p.var_threshold)?;
        let cmp = compare_losses(&trace, &baseline, p.patches, est.mean, base_est.mean)?;
        let mut csv = Csv::new(&["step", "delta"]);
        for (i, d) in cmp.delta.iter().enumerate() {
            csv.row(&[i.to_string(), format!("{d}")]);
        }
        ctx.write_bytes("delta.csv", csv.into_string().as_bytes())?;
        analysis["baseline_constant_mean"] = json!(base_est.mean);
        analysis["fraction_positive"] = json!(cmp.fraction_positive);
    }
    emit_json(&mut ctx, "analysis.json", &analysis)?;
    ctx.finish()
}

// ---------------------------------------------------------------------------
// counterexample / init-bound / ar-vs-joint
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct CounterexampleCmd {
    #[arg(long, required_unless_present = "config")]
    eps: Option<f64>,
    /// Conditional-gap scale M
    #[arg(long = "M", required_unless_present = "config")]
    magnitude: Option<f64>,
    #[arg(long, required_unless_present = "config")]
    dx: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    dy: Option<usize>,
    /// Probe point, comma-separated (dx entries)
    #[arg(long, required_unless_present = "config")]
    probe: Option<String>,
}

fn cmd_counterexample(
    cmd: CounterexampleCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "counterexample", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "counterexample", cfg, seed)?;
    let spec = CounterexampleSpec {
        eps: req(&p.eps, "--eps")?,
        magnitude: req(&p.magnitude, "--M")?,
        d_y: req(&p.dy, "--dy")?,
        d_x: req(&p.dx, "--dx")?,
    };
    let probe = DVector::from_vec(parse_f64_list(&req(&p.probe, "--probe")?)?);
    let report = check_counterexample(&spec, &probe)?;
    let out_json = json!({
        "spec": spec,
        "probe": probe.as_slice(),
        "report": report,
    });
    emit_json(&mut ctx, "counterexample.json", &out_json)?;
    ctx.finish()
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct InitBoundCmd {
    /// Mean of the 1-D conditional
    #[arg(long, required_unless_present = "config")]
    mean: Option<f64>,
    /// Variance of the 1-D conditional
    #[arg(long, required_unless_present = "config")]
    var: Option<f64>,
    #[arg(long = "L", default_value_t = 1.0)]
    smoothness: f64,
    /// Time grid, comma-separated
    #[arg(long, default_value = "0,0.5,1,2,4")]
    t_grid: String,
}

fn cmd_init_bound(
    cmd: InitBoundCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "init-bound", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "init-bound", cfg, seed)?;
    let target = Gaussian::scalar(req(&p.mean, "--mean")?, req(&p.var, "--var")?)?;
    let grid = parse_f64_list(&p.t_grid)?;
    let rows = init_error_sweep(&target, p.smoothness, &grid)?;
    let mut csv = Csv::new(&["t", "exact_kl", "bound", "dominated"]);
    for r in &rows {
        csv.row(&[
            format!("{}", r.t),
            format!("{}", r.exact_kl),
            format!("{}", r.bound),
            r.dominated.to_string(),
        ]);
    }
    ctx.write_bytes("init_bound.csv", csv.into_string().as_bytes())?;
    let out_json = json!({
        "rows": rows,
        "all_dominated": rows.iter().all(|r| r.dominated),
    });
    emit_json(&mut ctx, "init_bound.json", &out_json)?;
    ctx.finish()
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct ArVsJointCmd {
    /// Target distribution (JSON, single Gaussian over two patches)
    #[arg(long, required_unless_present = "config")]
    target: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    layout: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    grid: GridArgs,
    /// Constant bias applied on the joint (single-stage) path
    #[arg(long, default_value_t = 0.0)]
    eps_joint: f64,
    /// Constant bias applied on the AR path
    #[arg(long, default_value_t = 0.0)]
    eps_ar: f64,
    /// Restrict the AR-path bias to this stage
    #[arg(long)]
    ar_stage: Option<usize>,
    #[arg(long, default_value_t = 0)]
    bias_seed: u64,
    #[arg(long, value_enum, default_value_t = GainArg::Double)]
    gain: GainArg,
}

fn cmd_ar_vs_joint(
    cmd: ArVsJointCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "ar-vs-joint", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "ar-vs-joint", cfg, seed)?;
    let target = load_gaussian(&req(&p.target, "--target")?)?;
    let layout = parse_layout(&req(&p.layout, "--layout")?)?;
    let sched = p.grid.build()?;
    let joint_bias = (p.eps_joint > 0.0).then_some(BiasSpec::uniform(p.eps_joint, p.bias_seed));
    let ar_bias = (p.eps_ar > 0.0).then_some(BiasSpec {
        eps: p.eps_ar,
        seed: p.bias_seed,
        only_stage: p.ar_stage,
    });
    let (report, joint_out, ar_out) =
        ar_vs_joint_conditional(&target, &layout, &sched, joint_bias, ar_bias, p.gain.into())?;
    let out_json = json!({
        "report": report,
        "joint_path_output": joint_out,
        "ar_path_output": ar_out,
    });
    emit_json(&mut ctx, "ar_vs_joint.json", &out_json)?;
    ctx.finish()
}

// ---------------------------------------------------------------------------
// synth-gen / synth-eval
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct SynthGenCmd {
    /// Task number: 1 (sun/shadow) or 2 (scaled squares)
    #[arg(long, required_unless_present = "config")]
    task: Option<u8>,
    #[arg(long, required_unless_present = "config")]
    n: Option<usize>,
}

fn cmd_synth_gen(
    cmd: SynthGenCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "synth-gen", &cmd, seed)?;
    if out.is_none() {
        return Err(Error::InvalidInput {
            what: "synth-gen",
            why: "needs --out for the PPM files".into(),
        });
    }
    let mut ctx = RunContext::new(out, "synth-gen", cfg, seed)?;
    let kind = task_kind(req(&p.task, "--task")?)?;
    let n = req(&p.n, "--n")?;
    let samples = match kind {
        TaskKind::SunShadow => gen_task1(n, seed, &Task1Bounds::default())?,
        TaskKind::ScaledSquares => gen_task2(n, seed, &Task2Bounds::default())?,
    };
    let mut csv = match kind {
        TaskKind::SunShadow => Csv::new(&["file", "l1", "h1", "h2", "l2", "target_ratio"]),
        TaskKind::ScaledSquares => Csv::new(&["file", "l1", "l2", "target_ratio"]),
    };
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.ppm");
        ctx.write_bytes(&name, &s.image.to_ppm_bytes())?;
        match s.truth {
            Features::SunShadow { l1, h1, h2, l2 } => csv.row(&[
                name,
                format!("{l1}"),
                format!("{h1}"),
                format!("{h2}"),
                format!("{l2}"),
                format!("{}", s.target_ratio),
            ]),
            Features::Squares { l1, l2 } => csv.row(&[
                name,
                format!("{l1}"),
                format!("{l2}"),
                format!("{}", s.target_ratio),
            ]),
        }
    }
    ctx.write_bytes("index.csv", csv.into_string().as_bytes())?;
    ctx.finish()
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SynthEvalCmd {
    /// Directory of PPM files
    #[arg(long, required_unless_present = "config")]
    dir: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    task: Option<u8>,
    /// Per-channel color tolerance for the masks
    #[arg(long, default_value_t = 0)]
    tolerance: u8,
}

fn cmd_synth_eval(
    cmd: SynthEvalCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "synth-eval", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "synth-eval", cfg, seed)?;
    let kind = task_kind(req(&p.task, "--task")?)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(req(&p.dir, "--dir")?)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    let images: Vec<RasterImage> = files
        .iter()
        .map(|f| RasterImage::read_ppm(f))
        .collect::<Result<_>>()?;
    let ev = evaluate(&images, kind, p.tolerance)?;

    let mut csv = Csv::new(&["index", "file", "ratio", "x", "y"]);
    for (i, (file, img)) in files.iter().zip(&images).enumerate() {
        if let Ok(ex) = extract_features(img, kind, p.tolerance) {
            let (x, y) = ex.features.pair();
            csv.row(&[
                i.to_string(),
                file.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                format!("{}", ex.features.ratio()),
                format!("{x}"),
                format!("{y}"),
            ]);
        }
    }
    ctx.write_bytes("ratios.csv", csv.into_string().as_bytes())?;
    emit_json(&mut ctx, "evaluation.json", &ev)?;
    ctx.finish()
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args, Clone, Serialize, Deserialize)]
struct ReportCmd {
    /// Run directory; repeat for multiple runs
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    /// Report title
    #[arg(long)]
    title: Option<String>,
    /// Optional template JSON overriding the title
    #[arg(long)]
    template: Option<PathBuf>,
}

fn cmd_report(
    cmd: ReportCmd,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    let (p, seed, cfg) = effective_params(config.as_ref(), "report", &cmd, seed)?;
    let mut ctx = RunContext::new(out, "report", cfg, seed)?;
    let mut title = p.title.clone().unwrap_or_else(|| "ardiff report".into());
    if let Some(tpl) = &p.template {
        let raw = std::fs::read_to_string(tpl)?;
        let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            what: "template",
            why: e.to_string(),
        })?;
        if let Some(t) = v.get("title").and_then(serde_json::Value::as_str) {
            title = t.to_string();
        }
    }
    if p.runs.is_empty() {
        eprintln!("warning: no runs given; nothing to report");
    }
    report::run_report(&p.runs, &title, &mut ctx)?;
    ctx.finish()
}
