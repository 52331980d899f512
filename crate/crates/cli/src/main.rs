mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pointroute::bench::{
    evaluate, export_tours, read_dataset, read_opt_file, tsplib_group_rows, write_dataset, write_tours_json,
    BenchReport, BenchRow, Method, OptSource, TsplibResult,
};
use pointroute::baselines::{nearest_neighbor_best, nn_two_opt_best, TwoOptConfig};
use pointroute::instance::{generate_instances, normalize_to_unit_square, optimality_gap, Instance, Tour};
use pointroute::neural::load_policy;
use pointroute::rollout::{best_of, multi_start_rollout, DecodeMode};
use pointroute::training::{CsvSink, Trainer};
use pointroute::tsplib::{parse_tsplib, tsplib_tour_length, write_tour, EdgeWeightType, TsplibMeta};
use pointroute::Policy;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "pointroute", version, about = "Multi-pointer attention solver for the Euclidean TSP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset of uniform random instances (JSON lines).
    Gen(GenArgs),
    /// Train a policy from a TOML run file.
    Train(TrainArgs),
    /// Solve one instance with a trained policy.
    Solve(SolveArgs),
    /// Evaluate a policy and/or baselines on a dataset; writes a CSV report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Resume from a run directory written by an earlier `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Initial parameter seed (ignored when resuming).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SolveArgs {
    /// Checkpoint manifest (`model.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.tsp` file, or a JSON instance (first line of a dataset).
    instance: PathBuf,
    #[arg(long, default_value = "greedy")]
    mode: DecodeMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tour file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON-lines dataset, or one or more `.tsp` files.
    #[arg(long = "dataset", required = true, num_args = 1..)]
    datasets: Vec<PathBuf>,
    /// Optimum source: hk, file:<path> or none.
    #[arg(long, default_value = "none")]
    opt: OptSource,
    /// Also run nearest neighbor and nearest neighbor + 2-opt.
    #[arg(long)]
    baselines: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-tour coordinates as JSON for plotting.
    #[arg(long)]
    tours: Option<PathBuf>,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POINTROUTE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("POINTROUTE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn is_tsp(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsp"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let instances = generate_instances(args.seed, args.n, args.count)?;
    write_dataset(&args.out, &instances)?;
    println!("wrote {} instances of {} nodes to {}", args.count, args.n, args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = RunConfig::load(&args.config, &args.out)?;
    let train = run.train.clone();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let metrics_path = args.out.join("metrics.csv");
    let mut trainer = match &args.checkpoint {
        Some(dir) => {
            let t = Trainer::resume(train, dir).with_context(|| format!("resuming from {}", dir.display()))?;
            run.model.check_compatible(t.policy().config())?;
            t
        }
        None => Trainer::new(train, Policy::new(run.model, args.seed)?)?,
    };
    let append = args.checkpoint.is_some() && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut sink = CsvSink::new(std::io::BufWriter::new(file), !append)?;
    trainer.run(&mut sink, None)?;
    let state = trainer.state();
    println!(
        "trained {} batches in {:.1}s; checkpoint in {}",
        state.steps,
        state.wallclock_s,
        args.out.display()
    );
    Ok(())
}

fn load_instance(path: &Path) -> Result<(Instance, Option<TsplibMeta>)> {
    let text = read_text(path)?;
    if is_tsp(path) {
        let (inst, meta) = parse_tsplib(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok((inst, Some(meta)));
    }
    let line = text.lines().find(|l| !l.trim().is_empty()).context("instance file is empty")?;
    let inst: Instance = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
    Ok((inst, None))
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let policy = load_policy(&args.checkpoint, None)?;
    let (inst, meta) = load_instance(&args.instance)?;
    let started = Instant::now();
    let norm = if inst.is_normalized() {
        inst.clone()
    } else {
        normalize_to_unit_square(&inst)?.0
    };
    let seed = (args.mode == DecodeMode::Sample).then_some(args.seed);
    let best = best_of(&multi_start_rollout(&policy, &norm, args.mode, seed)?)?;
    let tour = Tour::new(&inst, best.into_order())?;
    let elapsed = started.elapsed().as_secs_f64();
    let meta = meta.unwrap_or_else(|| TsplibMeta {
        name: inst.name().unwrap_or("instance").to_string(),
        dimension: inst.len(),
        edge_weight_type: EdgeWeightType::Euc2d,
        comment: None,
    });
    if let Some(out) = &args.out {
        fs::write(out, write_tour(&meta, tour.order())).with_context(|| format!("writing {}", out.display()))?;
    }
    let mut line = format!("{}: nodes={} length={:.6}", meta.name, inst.len(), tour.length());
    if is_tsp(&args.instance) {
        line.push_str(&format!(" rounded={}", tsplib_tour_length(&inst, tour.order())?));
    }
    line.push_str(&format!(" time={elapsed:.3}s"));
    println!("{line}");
    Ok(())
}

fn eval_tsplib(policy: Option<&Policy>, args: &EvalArgs) -> Result<BenchReport> {
    let opt = match &args.opt {
        OptSource::File(p) => Some(read_opt_file(p)?),
        OptSource::None => None,
        OptSource::HeldKarp => bail!("TSPLIB evaluation takes optimum values from a file (--opt file:<path>)"),
    };
    if let Some(o) = &opt {
        if o.len() < args.datasets.len() {
            bail!("{} optimum values for {} TSPLIB files", o.len(), args.datasets.len());
        }
    }
    let mut methods = Vec::new();
    if policy.is_some() {
        methods.push(Method::Model);
    }
    if args.baselines {
        methods.extend([Method::NearestNeighbor, Method::NearestNeighborTwoOpt]);
    }
    let instances = args
        .datasets
        .iter()
        .map(|p| {
            let (inst, meta) = parse_tsplib(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?;
            Ok((inst, meta))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = BenchReport::default();
    for method in methods {
        let mut results = Vec::new();
        for (k, (inst, meta)) in instances.iter().enumerate() {
            let started = Instant::now();
            let tour = match method {
                Method::Model => pointroute::bench::model_tour(policy.expect("checked"), inst)?,
                Method::NearestNeighbor => nearest_neighbor_best(inst)?,
                Method::NearestNeighborTwoOpt => nn_two_opt_best(inst, TwoOptConfig::default())?,
            };
            let wallclock_s = started.elapsed().as_secs_f64();
            let length = tsplib_tour_length(inst, tour.order())? as f64;
            let gap_pct = opt.as_ref().map(|o| optimality_gap(length, o[k])).transpose()?;
            report.rows.push(BenchRow {
                dataset: meta.name.clone(),
                method: method.label().into(),
                mean_len: length,
                gap_pct,
                wallclock_s,
            });
            if let Some(o) = &opt {
                results.push(TsplibResult {
                    name: meta.name.clone(),
                    n: inst.len(),
                    opt: o[k],
                    length,
                    wallclock_s,
                });
            }
        }
        report.rows.extend(tsplib_group_rows(method.label(), &results)?);
    }
    Ok(report)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let policy = args.checkpoint.as_deref().map(|p| load_policy(p, None)).transpose()?;
    if policy.is_none() && !args.baselines {
        bail!("nothing to evaluate: pass --checkpoint and/or --baselines");
    }
    let report = if args.datasets.iter().all(|p| is_tsp(p)) {
        eval_tsplib(policy.as_ref(), &args)?
    } else {
        if args.datasets.len() != 1 {
            bail!("give one JSON-lines dataset or a list of .tsp files");
        }
        let path = &args.datasets[0];
        let instances = read_dataset(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (report, results) = evaluate(&name, policy.as_ref(), &instances, &args.opt, args.baselines)?;
        if let Some(out) = &args.tours {
            let tours: Vec<_> = results.iter().flat_map(|r| export_tours(&name, r, &instances)).collect();
            write_tours_json(out, &tours)?;
        }
        report
    };
    let csv = report.to_csv();
    match &args.out {
        Some(out) => fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
