use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use feedrank::config::RunConfig;
use feedrank::demo::{schema_examples, serve, DemoShared};
use feedrank::metrics::{auc, experiment_report, held_out_auc, SessionCounts};
use feedrank::model::{fit, io, Adam, Example, ModelParams, TASKS};
use feedrank::rerank::ContextScorer;
use feedrank::sim::dataset::{evaluation_set, training_set};
use feedrank::sim::experiment::{run_arm, session_specs, stability_by_step};
use feedrank::sim::log::{group_sessions, read_events, write_events, SessionLog};
use feedrank::sim::session::validate_session;
use feedrank::sim::{Arm, VideoPool};

use crate::output::{fmt, fmt_opt, prepare_dir, write_resolved, CliResult, Failure, Table};

#[derive(Debug, Parser)]
#[command(name = "feedrank", version, about = "Edge-side context-aware re-ranking of short-video feeds")]
pub struct Cli {
    /// TOML file with any subset of the run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set sim.user.gamma=0.8`.
    /// Applied after the config file, in order.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run sessions of one arm and write their logs.
    Simulate(SimulateArgs),
    /// Train the ranking model on logged sessions.
    Train(TrainArgs),
    /// Paired experiment across arms with uplift report.
    Eval(EvalArgs),
    /// Mean beam stability and relative latency by search depth.
    BenchStability(BenchArgs),
    /// Serve interactive sessions over TCP or WebSocket.
    ServeDemo(ServeArgs),
    /// Print an example of every demo message kind.
    Schema,
    /// Check session logs against the pagination protocol.
    Validate(ValidateArgs),
    /// Print the resolved configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "server_order")]
    pub arm: Arm,
    /// Model weights; required by the greedy and context_aware arms.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training session logs (NDJSON), typically from the server_order arm.
    #[arg(long, required = true)]
    pub logs: Vec<PathBuf>,
    /// Held-out session logs for the final evaluation.
    #[arg(long)]
    pub eval_logs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from; its optimizer state must sit next to it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Steps between checkpoints; defaults to one epoch.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Steps per block of the smoothed loss curve.
    #[arg(long, default_value_t = 50)]
    pub smoothing_window: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Arms to run; the report baseline is added when missing.
    #[arg(long, value_delimiter = ',', default_values_t = Arm::ALL)]
    pub arms: Vec<Arm>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every arm's session logs.
    #[arg(long)]
    pub save_logs: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub latency_triggers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Arm used when a client does not pick one.
    #[arg(long, default_value = "context_aware")]
    pub arm: Arm,
    /// Stop after accepting this many connections.
    #[arg(long)]
    pub max_connections: Option<u64>,
    /// Directory for the logs of served sessions.
    #[arg(long)]
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, required = true)]
    pub logs: Vec<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult {
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::BenchStability(a) => bench_stability(&cfg, a),
        Command::ServeDemo(a) => serve_demo(&cfg, a),
        Command::Schema => {
            for msg in schema_examples() {
                println!("{}", serde_json::to_string(&msg)?);
            }
            Ok(())
        }
        Command::Validate(a) => validate(&cfg, a),
        Command::Config => {
            print!("{}", toml::to_string(&cfg).map_err(Failure::config)?);
            Ok(())
        }
    }
}

pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override {o:?} is not PATH=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<ModelParams> {
    let model = io::load(path)?;
    if model.config().features != cfg.model.features {
        return Err(Failure::config(format!(
            "model {} was built for different feature settings than the configuration",
            path.display()
        )));
    }
    Ok(model)
}

fn read_logs(paths: &[PathBuf]) -> CliResult<Vec<SessionLog>> {
    let mut all = Vec::new();
    for p in paths {
        let file = File::open(p).map_err(|e| Failure::config(format!("cannot open {}: {e}", p.display())))?;
        let events = read_events(BufReader::new(file))?;
        all.extend(group_sessions(events)?);
    }
    if all.is_empty() {
        return Err(Failure::contract("no sessions in the given logs"));
    }
    Ok(all)
}

fn write_logs(path: &Path, logs: &[SessionLog]) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    for log in logs {
        write_events(&mut w, &log.events)?;
    }
    w.flush()?;
    Ok(())
}

fn check_protocol(cfg: &RunConfig, logs: &[SessionLog]) -> CliResult<u64> {
    let mut impressions = 0;
    for (i, log) in logs.iter().enumerate() {
        let s = validate_session(log, &cfg.sim.protocol, true)
            .map_err(|e| Failure::contract(format!("session #{i}: {e}")))?;
        impressions += s.impressions as u64;
    }
    Ok(impressions)
}

fn simulate(cfg: &RunConfig, a: SimulateArgs) -> CliResult {
    prepare_dir(&a.out)?;
    write_resolved(&a.out, cfg)?;
    let model = a.model.as_deref().map(|p| load_model(p, cfg)).transpose()?;
    let pool = VideoPool::generate(&cfg.sim.pool)?;
    let scorer = model.as_ref().map(|m| m as &dyn ContextScorer);
    let logs = run_arm(a.arm, &session_specs(&cfg.experiment), &pool, &cfg.sim, scorer, &cfg.rerank)?;
    check_protocol(cfg, &logs)?;
    let path = a.out.join(format!("sessions-{}.ndjson", a.arm));
    write_logs(&path, &logs)?;
    let mut t = Table::new("sessions", &["session_id", "user_id", "impressions", "likes", "effective_views", "follows"]);
    for log in &logs {
        let start = log.start().expect("validated");
        let c = SessionCounts::from_log(log);
        t.rows.push(vec![
            start.session_id.to_string(),
            start.user_id.to_string(),
            c.impressions.to_string(),
            c.likes.to_string(),
            c.effective_views.to_string(),
            c.follows.to_string(),
        ]);
    }
    let csv = a.out.join("sessions.csv");
    let mut w = csv::Writer::from_path(&csv)?;
    w.write_record(&t.header)?;
    for r in &t.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    let total: u64 = logs.iter().map(|l| SessionCounts::from_log(l).impressions).sum();
    println!("{} sessions, {total} impressions, arm {}: {}", logs.len(), a.arm, path.display());
    Ok(())
}

fn train(cfg: &RunConfig, a: TrainArgs) -> CliResult {
    prepare_dir(&a.out)?;
    write_resolved(&a.out, cfg)?;
    let ckpt_dir = a.out.join("checkpoints");
    prepare_dir(&ckpt_dir)?;
    let logs = read_logs(&a.logs)?;
    let examples: Vec<Example> = training_set(&logs, &cfg.model.features, &cfg.dataset)?;
    let (mut params, mut opt) = match &a.resume {
        Some(path) => {
            let params = load_model(path, cfg)?;
            if params.config() != &cfg.model {
                return Err(Failure::config("resumed checkpoint has a different model configuration"));
            }
            let opt = io::load_optimizer(path.with_extension("adam"), &params)?;
            (params, opt)
        }
        None => {
            let params = ModelParams::init(cfg.model.clone(), cfg.train.seed)?;
            let opt = Adam::new(&params, cfg.train.adam.clone());
            (params, opt)
        }
    };
    let every = a
        .checkpoint_every
        .unwrap_or(cfg.train.steps_per_epoch(examples.len()) as u64)
        .max(1);
    eprintln!(
        "training on {} examples from {} sessions, {} steps per epoch, from step {}",
        examples.len(),
        logs.len(),
        cfg.train.steps_per_epoch(examples.len()),
        opt.step
    );

    let mut curve = csv::Writer::from_path(a.out.join("curve.csv"))?;
    curve.write_record(["step", "epoch", "loss"])?;
    let mut checkpoints = csv::Writer::from_path(a.out.join("checkpoints.csv"))?;
    checkpoints.write_record(["step", "path", "sha256"])?;
    let mut losses = Vec::new();
    let mut sink_error: Option<Failure> = None;
    let result = fit(&mut params, &mut opt, &examples, &cfg.train, |p, o, s| {
        losses.push(s.loss);
        let mut step = || -> CliResult {
            curve.write_record([s.step.to_string(), s.epoch.to_string(), format!("{:.12}", s.loss)])?;
            if s.step % every == 0 {
                let path = ckpt_dir.join(format!("step-{:08}.frkw", s.step));
                let digest = io::save(p, &path)?;
                io::save_optimizer(o, p, path.with_extension("adam"))?;
                checkpoints.write_record([s.step.to_string(), path.display().to_string(), digest])?;
            }
            Ok(())
        };
        step().map_err(|e| {
            let msg = e.message.clone();
            sink_error = Some(e);
            feedrank::Error::Config(msg)
        })
    });
    if let Some(e) = sink_error {
        return Err(e);
    }
    result?;
    curve.flush()?;
    checkpoints.flush()?;

    let digest = io::save(&params, a.out.join("model.frkw"))?;
    io::save_optimizer(&opt, &params, a.out.join("model.adam"))?;
    println!("model: {} (sha256 {digest})", a.out.join("model.frkw").display());

    let mut smooth = Table::new("curve_smoothed", &["block", "first_step", "last_step", "mean_loss"]);
    let first_step = opt.step as usize - losses.len() + 1;
    for (b, chunk) in losses.chunks(a.smoothing_window.max(1)).enumerate() {
        let start = first_step + b * a.smoothing_window.max(1);
        smooth.push(vec![
            b.to_string(),
            start.to_string(),
            (start + chunk.len() - 1).to_string(),
            fmt(chunk.iter().sum::<f64>() / chunk.len() as f64),
        ]);
    }
    smooth.emit(&a.out)?;

    if let Some(path) = &a.eval_logs {
        let eval_logs = read_logs(std::slice::from_ref(path))?;
        let eval = evaluation_set(&eval_logs, &cfg.model.features)?;
        let report = held_out_auc(&params, &eval, false)?;
        let constant = vec![0.5; eval.len()];
        let likes: Vec<bool> = eval.iter().map(|e| e.example.labels.like).collect();
        let mut t = Table::new("eval_auc", &["ranker", "task", "auc", "impressions"]);
        for (task, value) in TASKS.iter().zip(report.as_array()) {
            t.push(vec!["model".into(), task.to_string(), fmt_opt(value), eval.len().to_string()]);
        }
        t.push(vec!["server".into(), "like".into(), fmt_opt(report.server_like), eval.len().to_string()]);
        t.push(vec!["constant".into(), "like".into(), fmt_opt(auc(&constant, &likes)), eval.len().to_string()]);
        t.emit(&a.out)?;
        fs::write(a.out.join("eval_auc.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> CliResult {
    prepare_dir(&a.out)?;
    write_resolved(&a.out, cfg)?;
    let mut arms = a.arms.clone();
    if !arms.contains(&cfg.report.baseline) {
        arms.insert(0, cfg.report.baseline);
    }
    arms.dedup();
    let model = a.model.as_deref().map(|p| load_model(p, cfg)).transpose()?;
    if model.is_none() && arms.iter().any(|arm| arm.needs_model()) {
        return Err(Failure::config("--model is required for the greedy and context_aware arms"));
    }
    let pool = VideoPool::generate(&cfg.sim.pool)?;
    let specs = session_specs(&cfg.experiment);
    let scorer = model.as_ref().map(|m| m as &dyn ContextScorer);
    let mut logs = Vec::new();
    for &arm in &arms {
        let l = run_arm(arm, &specs, &pool, &cfg.sim, scorer, &cfg.rerank)?;
        check_protocol(cfg, &l)?;
        if a.save_logs {
            write_logs(&a.out.join(format!("sessions-{arm}.ndjson")), &l)?;
        }
        logs.push((arm, l));
    }
    let refs: Vec<(Arm, &[SessionLog])> = logs.iter().map(|(arm, l)| (*arm, l.as_slice())).collect();
    let header = serde_json::to_value(cfg)?;
    let report = experiment_report(&refs, &cfg.report, header)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    let mut t = Table::new(
        "arms",
        &["arm", "sessions", "impressions", "like_rate", "effective_view_rate", "follow_rate", "mean_depth"],
    );
    for m in &report.arms {
        t.push(vec![
            m.arm.to_string(),
            m.sessions.to_string(),
            m.impressions.to_string(),
            fmt(m.like_rate),
            fmt(m.effective_view_rate),
            fmt(m.follow_rate),
            fmt(m.mean_depth),
        ]);
    }
    t.emit(&a.out)?;
    let mut t = Table::new(
        "comparisons",
        &["arm", "baseline", "relative_uplift", "uplift_ci_low", "uplift_ci_high", "difference", "difference_ci_low", "difference_ci_high"],
    );
    for c in &report.comparisons {
        t.push(vec![
            c.arm.to_string(),
            c.baseline.to_string(),
            fmt(c.relative_uplift),
            fmt(c.uplift_ci[0]),
            fmt(c.uplift_ci[1]),
            fmt(c.difference),
            fmt(c.difference_ci[0]),
            fmt(c.difference_ci[1]),
        ]);
    }
    t.emit(&a.out)?;
    let mut t = Table::new("page_pattern", &["arm", "pages_used", "first_position_uplift", "within_page_max_uplift"]);
    for (arm, p) in &report.page_patterns {
        t.push(vec![
            arm.to_string(),
            p.pages_used.to_string(),
            fmt(p.mean_first_position_uplift),
            fmt(p.mean_within_page_max_uplift),
        ]);
    }
    t.emit(&a.out)?;
    // The per-position curve is long; it only goes to CSV.
    let mut w = csv::Writer::from_path(a.out.join("position_uplift.csv"))?;
    w.write_record(["arm", "position", "arm_impressions", "arm_likes", "baseline_impressions", "baseline_likes", "uplift"])?;
    for curve in &report.position_uplift {
        for p in &curve.positions {
            w.write_record([
                curve.arm.to_string(),
                p.position.to_string(),
                p.arm_impressions.to_string(),
                p.arm_likes.to_string(),
                p.baseline_impressions.to_string(),
                p.baseline_likes.to_string(),
                fmt_opt(p.uplift),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bench_stability(cfg: &RunConfig, a: BenchArgs) -> CliResult {
    prepare_dir(&a.out)?;
    write_resolved(&a.out, cfg)?;
    let model = load_model(&a.model, cfg)?;
    let pool = VideoPool::generate(&cfg.sim.pool)?;
    let rows = stability_by_step(&cfg.experiment, &pool, &cfg.sim, &model, &cfg.rerank, a.steps, a.latency_triggers)?;
    let mut t = Table::new("stability", &["step", "mean_stability", "triggers", "relative_latency"]);
    for r in &rows {
        t.push(vec![
            r.step.to_string(),
            fmt(r.mean_stability),
            r.triggers.to_string(),
            format!("{:.3}", r.relative_latency),
        ]);
    }
    t.emit(&a.out)?;
    Ok(())
}

fn serve_demo(cfg: &RunConfig, a: ServeArgs) -> CliResult {
    let model = a.model.as_deref().map(|p| load_model(p, cfg)).transpose()?;
    let model_digest = a.model.as_deref().map(io::file_digest).transpose()?;
    if model.is_none() && a.arm.needs_model() {
        return Err(Failure::config(format!("arm {} needs --model", a.arm)));
    }
    let shared = Arc::new(DemoShared {
        pool: VideoPool::generate(&cfg.sim.pool)?,
        sim: cfg.sim.clone(),
        rerank: cfg.rerank.clone(),
        model,
        model_digest,
        default_arm: a.arm,
        seed: cfg.experiment.seed,
        record_dir: a.record_dir.clone(),
    });
    let listener = TcpListener::bind(&a.addr).map_err(|e| Failure::config(format!("cannot bind {}: {e}", a.addr)))?;
    eprintln!("serving on {}", listener.local_addr()?);
    serve(listener, shared, a.max_connections)?;
    Ok(())
}

fn validate(cfg: &RunConfig, a: ValidateArgs) -> CliResult {
    let logs = read_logs(&a.logs)?;
    let impressions = check_protocol(cfg, &logs)?;
    println!("{} sessions, {impressions} impressions: protocol ok", logs.len());
    Ok(())
}
