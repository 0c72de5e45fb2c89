//! `seqco`: dataset synthesis, proposals, mask and view inspection, matching,
//! gradient checking, pre-training and evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use seqco::augment::{make_views, map_boxes};
use seqco::gradcheck::{run_gradcheck, GradcheckConfig};
use seqco::image::ImageTensor;
use seqco::masking::{mask_pair, MaskConfig, MaskGrid, MaskStrategy, ProportionSpec};
use seqco::matching::{hungarian, one_by_one, CostMatrix, MatchStrategy};
use seqco::par::Execution;
use seqco::pretrain::{evaluate_matching, run, Dataset, PretrainConfig, TrainState};
use seqco::proposals::{proposal_source, sha256_hex, sidecar_path, write_sidecar, ProposalConfig, ProposalMode, ProposalSidecar};
use seqco::synth::{generate_synthetic, read_annotation, SceneConfig};
use seqco::seeds;

#[derive(Parser, Debug)]
#[command(name = "seqco", version, about = "Sequence-consistency pre-training for a toy DETR-style detector")]
#[command(after_help = "Verbosity is read from SEQCO_LOG (error, info, debug; default info). Progress goes to stderr.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic multi-object scenes as PPM images with ground-truth sidecars.
    Synth(SynthArgs),
    /// Compute region proposals for one image and write the sidecar.
    Proposals(ProposalArgs),
    /// Sample a branch mask pair and write it as PGM images plus a summary.
    Masks(MaskArgs),
    /// Build the two augmented views of one image.
    Views(ViewArgs),
    /// Solve a query-to-target assignment.
    Match(MatchArgs),
    /// Check analytic against finite-difference gradients of the full loss.
    Gradcheck(GradcheckArgs),
    /// Run pre-training, writing NDJSON metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Report matching quality of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fewest objects per scene.
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    /// Most objects per scene.
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
}

#[derive(Args, Debug)]
struct ProposalArgs {
    /// Input PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Proposal source: ss (selective search), gt (ground-truth sidecar) or random.
    #[arg(long, default_value = "ss", value_parser = parse_mode)]
    mode: ProposalMode,
    /// Keep this many highest-ranked proposals.
    #[arg(long, default_value_t = 30)]
    top: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output sidecar [default: <image stem>.props.json next to the image].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Segmentation smoothing sigma.
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
    /// Segmentation scale parameter.
    #[arg(long, default_value_t = 200.0)]
    k: f64,
    /// Minimum segment size in pixels.
    #[arg(long, default_value_t = 50)]
    min_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    None,
    OnlineOnly,
    Independent,
    Complementary,
}

impl From<StrategyArg> for MaskStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => MaskStrategy::None,
            StrategyArg::OnlineOnly => MaskStrategy::OnlineOnly,
            StrategyArg::Independent => MaskStrategy::Independent,
            StrategyArg::Complementary => MaskStrategy::Complementary,
        }
    }
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Which branches are masked and how the two masks relate.
    #[arg(long, value_enum, default_value_t = StrategyArg::Complementary)]
    strategy: StrategyArg,
    /// Online-branch masked proportion.
    #[arg(long, default_value_t = 0.7)]
    online: f64,
    /// Momentum-branch masked proportion (ignored by the complementary strategy).
    #[arg(long, default_value_t = 0.3)]
    momentum: f64,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for online.pgm, momentum.pgm and masks.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ViewArgs {
    /// Input PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Pre-training config whose augment section is used [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for base.ppm, view1.ppm, view2.ppm and views.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatcherArg {
    Hungarian,
    OneByOne,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// JSON file holding a queries x targets cost matrix as an array of rows.
    #[arg(long, conflicts_with_all = ["rows", "cols"])]
    cost: Option<PathBuf>,
    /// Rows of a random uniform cost matrix, used when --cost is absent.
    #[arg(long, default_value_t = 5)]
    rows: usize,
    /// Columns of the random cost matrix.
    #[arg(long, default_value_t = 5)]
    cols: usize,
    /// Optimal bipartite matching, or query i paired with target i.
    #[arg(long, value_enum, default_value_t = MatcherArg::Hungarian)]
    strategy: MatcherArg,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the assignment as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Half-width of the uniform noise added to the initial parameters.
    #[arg(long, default_value_t = 0.05)]
    perturb: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Pre-training config JSON [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image directory, overriding the config; without one, scenes are synthesized in memory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of in-memory synthetic scenes when no dataset directory is set.
    #[arg(long, default_value_t = 500)]
    synthetic: usize,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Override the config step count [config default: 300].
    #[arg(long)]
    steps: Option<u64>,
    /// Override the config batch size [config default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Metrics NDJSON path [default: config value, else metrics.ndjson].
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Checkpoint path [default: config value, else final.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Save a checkpoint every this many steps, 0 for only at the end [config default: 0].
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Continue from this checkpoint, appending to the metrics file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report JSON path.
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

/// Invalid flag combinations found after parsing; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_mode(s: &str) -> Result<ProposalMode, String> {
    s.parse().map_err(|e: seqco::Error| e.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.min_objects == 0 || a.min_objects > a.max_objects {
        return Err(usage("need 1 <= --min-objects <= --max-objects"));
    }
    if a.size < 16 {
        return Err(usage("--size must be at least 16"));
    }
    let cfg = SceneConfig {
        size: a.size,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        side: [a.size * 3 / 16, a.size * 15 / 32],
        ..SceneConfig::default()
    };
    let paths = generate_synthetic(a.count, a.seed, &a.out, &cfg)?;
    log::info!("wrote {} scenes to {}", paths.len(), a.out.display());
    Ok(())
}

fn proposals(a: ProposalArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = ImageTensor::from_ppm(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", a.image.display()))?;
    let cfg = ProposalConfig {
        mode: a.mode,
        top_k: a.top,
        sigma: a.sigma,
        k: a.k,
        min_size: a.min_size,
        ..ProposalConfig::default()
    };
    let gt = match a.mode {
        ProposalMode::GroundTruth => Some(read_annotation(&a.image)?.boxes),
        _ => None,
    };
    let props = proposal_source(&img, gt.as_deref(), &cfg, a.seed)?;
    let out = a.out.unwrap_or_else(|| sidecar_path(&a.image));
    write_sidecar(
        &out,
        &ProposalSidecar {
            image_sha256: sha256_hex(&bytes),
            mode: a.mode.as_str().to_string(),
            proposals: props.iter().map(|p| p.bbox).collect(),
        },
    )?;
    log::info!("{} proposals -> {}", props.len(), out.display());
    Ok(())
}

/// Cell rows with `#` for masked and `.` for visible.
fn grid_summary(m: &MaskGrid) -> serde_json::Value {
    let (_, gw) = m.grid_dims();
    let rows: Vec<String> = m
        .cells()
        .chunks(gw)
        .map(|r| r.iter().map(|&c| if c { '#' } else { '.' }).collect())
        .collect();
    json!({
        "masked_cells": m.masked_count(),
        "masked_fraction": m.masked_fraction(),
        "grid": rows,
    })
}

fn masks(a: MaskArgs) -> anyhow::Result<()> {
    let cfg = MaskConfig {
        strategy: a.strategy.into(),
        online: ProportionSpec::Fixed(a.online),
        momentum: ProportionSpec::Fixed(a.momentum),
        patch: a.patch,
        ..MaskConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let pair = mask_pair(&cfg, a.height, a.width, a.seed)?;
    create_dir(&a.out)?;
    let mut summary = serde_json::Map::new();
    summary.insert("strategy".into(), serde_json::to_value(cfg.strategy)?);
    summary.insert("patch".into(), json!(a.patch));
    for (name, grid) in [("online", &pair.online), ("momentum", &pair.momentum)] {
        if let Some(g) = grid {
            let path = a.out.join(format!("{name}.pgm"));
            std::fs::write(&path, g.to_pgm()).with_context(|| format!("writing {}", path.display()))?;
            summary.insert(name.into(), grid_summary(g));
            log::info!("{name}: {} of {} cells masked", g.masked_count(), g.num_cells());
        }
    }
    write_json(&a.out.join("masks.json"), &summary)
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PretrainConfig> {
    Ok(match path {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    })
}

fn views(a: ViewArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let img = ImageTensor::read_ppm(&a.image)?;
    let v = make_views(&img, &cfg.augment, a.seed)?;
    create_dir(&a.out)?;
    for (name, view) in [("base", &v.base), ("view1", &v.view1), ("view2", &v.view2)] {
        view.denormalized().write_ppm(&a.out.join(format!("{name}.ppm")))?;
    }
    let boxes = read_annotation(&a.image)
        .ok()
        .map(|ann| map_boxes(&ann.boxes, &v.geometry, cfg.augment.min_visible));
    let summary = json!({
        "geometry": v.geometry,
        "momentum_mask": v.masks.momentum.as_ref().map(grid_summary),
        "online_mask": v.masks.online.as_ref().map(grid_summary),
        "boxes": boxes,
    });
    write_json(&a.out.join("views.json"), &summary)?;
    log::info!("views written to {}", a.out.display());
    Ok(())
}

fn matching(a: MatchArgs) -> anyhow::Result<()> {
    let cost = match &a.cost {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            CostMatrix::from_rows(&rows)?
        }
        None => {
            use rand::Rng;
            let mut rng = seeds::rng(a.seed);
            let data = (0..a.rows * a.cols).map(|_| rng.gen::<f64>()).collect();
            CostMatrix::new(a.rows, a.cols, data)?
        }
    };
    let assignment = match a.strategy {
        MatcherArg::Hungarian => hungarian(&cost)?,
        MatcherArg::OneByOne => {
            if cost.cols() > cost.rows() {
                bail!("{} targets but only {} queries", cost.cols(), cost.rows());
            }
            one_by_one(cost.cols())
        }
    };
    let total = assignment.cost(&cost);
    let strategy = match a.strategy {
        MatcherArg::Hungarian => MatchStrategy::Hungarian,
        MatcherArg::OneByOne => MatchStrategy::OneByOne,
    };
    println!("{strategy:?} cost {total:.6}: query for target {:?}", assignment.query_for_target);
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({
                "strategy": strategy,
                "query_for_target": assignment.query_for_target,
                "cost": total,
            }),
        )?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        step: a.step,
        perturb: a.perturb,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    println!(
        "max relative error {:.3e} over {} parameters (worst in {}); tolerance {:.0e}: {}",
        report.max_relative_error,
        report.parameters,
        report.worst_parameter,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if !report.passed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn build(data: &DataArgs) -> anyhow::Result<(PretrainConfig, Dataset)> {
    let mut cfg = load_config(data.config.as_deref())?;
    if let Some(seed) = data.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &data.dataset {
        cfg.dataset = Some(d.clone());
    }
    if data.sequential {
        cfg.execution = Execution::Sequential;
    }
    let dataset = match &cfg.dataset {
        Some(dir) => Dataset::load(dir, &cfg.proposals, cfg.seed, cfg.execution)?,
        None => Dataset::synthetic(
            data.synthetic,
            cfg.seed,
            &SceneConfig {
                size: cfg.model.image_size,
                ..SceneConfig::default()
            },
            &cfg.proposals,
            cfg.execution,
        )?,
    };
    if dataset.is_empty() {
        return Err(usage("dataset is empty"));
    }
    log::info!("{} training images", dataset.len());
    Ok((cfg, dataset))
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let (mut cfg, dataset) = build(&a.data)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.checkpoint_every = k;
    }
    cfg.metrics = a.metrics.or(cfg.metrics).or_else(|| Some("metrics.ndjson".into()));
    cfg.checkpoint = a.checkpoint.or(cfg.checkpoint).or_else(|| Some("final.ckpt".into()));
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    cfg.check_paths()?;

    let mut state = match &a.resume {
        Some(path) => {
            let s = TrainState::load(path)?;
            log::info!("resuming from step {}", s.step);
            s
        }
        None => TrainState::new(&cfg.model, cfg.seed)?,
    };
    let metrics = cfg.metrics.clone().expect("metrics path set");
    let file = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics)
    } else {
        File::create(&metrics)
    }
    .with_context(|| format!("opening {}", metrics.display()))?;
    let mut out = BufWriter::new(file);
    run(&mut state, &dataset, &cfg, |r| {
        let line = serde_json::to_string(r).map_err(|e| seqco::Error::json(&metrics, e))?;
        writeln!(out, "{line}").map_err(|e| seqco::Error::io(&metrics, e))
    })?;
    out.flush()?;
    log::info!(
        "finished at step {}; checkpoint {}",
        state.step,
        cfg.checkpoint.as_ref().expect("checkpoint path set").display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (cfg, dataset) = build(&a.data)?;
    let state = TrainState::load(&a.checkpoint)?;
    state.online.check_same_layout(&TrainState::new(&cfg.model, 0)?.online)?;
    let report = evaluate_matching(&state, &dataset, &cfg)?;
    println!(
        "{} scenes: recall@0.5 {:.3}, matched IoU {:.3}, branch pair L2 {:.4}, matched fg prob {:.3}",
        report.scenes, report.recall_at_05, report.mean_matched_iou, report.mean_pair_l2, report.mean_matched_fg_prob
    );
    write_json(&a.out, &report)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Proposals(a) => proposals(a),
        Command::Masks(a) => masks(a),
        Command::Views(a) => views(a),
        Command::Match(a) => matching(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQCO_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
