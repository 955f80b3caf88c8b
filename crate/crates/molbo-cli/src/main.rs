//! `molbo`: Bayesian-optimization campaigns over finite molecule pools.
//!
//! Subcommands: `fingerprint` caches Morgan fingerprints as a binary feature
//! file, `run` executes surrogate-guided campaigns across seeds, `random`
//! runs the uniform baseline with the same trace schema, and `eval` turns
//! trace files into GAP (and, for multiobjective pools, hypervolume) curves.
//!
//! Exit codes: 0 on success, 2 on any input error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, anyhow, bail};
use clap::{Args, Parser, Subcommand};

use molbo::bo_loop::{CampaignTrace, ReplicateSet, read_trace_csv, run_random_replicates,
    run_replicates, write_trace_csv};
use molbo::chem::{morgan_fingerprint, parse_smiles};
use molbo::config::{Preset, RunPlan, apply_thread_cap, load_pool, parse_kv, resolve, thread_cap};
use molbo::metrics::{hypervolume, reference_point};
use molbo::pool::{CandidatePool, Direction, FeatureMatrix, write_feature_file};
use molbo::stats::mean_stderr;

#[derive(Parser)]
#[command(
    name = "molbo",
    version,
    about = "Bayesian optimization over finite molecule pools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute Morgan fingerprints for a pool CSV and write them as a
    /// binary feature file.
    Fingerprint {
        /// Pool CSV (`id,smiles,y0[,y1,...]`).
        pool: PathBuf,
        /// Output feature file.
        #[arg(long)]
        out: PathBuf,
        /// Neighborhood radius.
        #[arg(long, default_value_t = 2)]
        radius: u32,
        /// Fingerprint width in bits (a power of two, at least 64).
        #[arg(long, default_value_t = 1024)]
        bits: usize,
    },
    /// Run surrogate-guided campaigns across seeds and write per-seed trace
    /// CSVs plus a summary JSON.
    Run(RunArgs),
    /// Run the uniform random-search baseline with the same outputs.
    Random(RunArgs),
    /// Aggregate trace CSVs into GAP curves (and hypervolume curves for
    /// multiobjective pools), mean and standard error across seeds.
    Eval {
        /// Pool CSV the traces were produced from.
        #[arg(long)]
        pool: PathBuf,
        /// Objective directions as a comma-separated list of max/min
        /// (default: maximize everything).
        #[arg(long)]
        directions: Option<String>,
        /// Output directory for curve CSVs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Labeled trace group `LABEL=FILE[,FILE...]`; repeat for several
        /// curves (e.g. a surrogate and its random baseline).
        #[arg(long = "group", required = true)]
        groups: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment preset supplying defaults (gp-tanimoto, gp-matern,
    /// la-mlp, lora-lla, random).
    #[arg(long)]
    preset: Option<String>,
    /// Config file in `key = value` form; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual `key=value` override; repeatable, overrides the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Pool CSV (shorthand for --set pool=...).
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Feature file (shorthand for --set features=...).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Output directory (shorthand for --set out_dir=...).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seeds as a comma-separated list (shorthand for --set seeds=...).
    #[arg(long)]
    seeds: Option<String>,
    /// Worker-thread cap (default: the MOLBO_THREADS environment variable,
    /// else all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fingerprint {
            pool,
            out,
            radius,
            bits,
        } => cmd_fingerprint(&pool, &out, radius, bits),
        Command::Run(args) => cmd_run(args, false),
        Command::Random(args) => cmd_run(args, true),
        Command::Eval {
            pool,
            directions,
            out_dir,
            groups,
        } => cmd_eval(&pool, directions.as_deref(), &out_dir, &groups),
    }
}

fn cmd_fingerprint(pool_path: &Path, out: &Path, radius: u32, bits: usize) -> Result<()> {
    let pool = CandidatePool::load_csv(pool_path, &[])
        .with_context(|| format!("loading pool {}", pool_path.display()))?;
    let mut data = Vec::with_capacity(pool.len() * bits);
    for entry in pool.entries() {
        let mol = parse_smiles(&entry.smiles)
            .map_err(|e| anyhow!("candidate {}: {e}", entry.id))?;
        let fp = morgan_fingerprint(&mol, radius, bits)
            .map_err(|e| anyhow!("candidate {}: {e}", entry.id))?;
        for bit in 0..bits {
            data.push(if fp.get(bit) { 1.0 } else { 0.0 });
        }
    }
    let features = FeatureMatrix::new(pool.len(), bits, data);
    write_feature_file(out, &features)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} fingerprints of width {} to {}",
        pool.len(),
        bits,
        out.display()
    );
    Ok(())
}

/// Shared implementation of `run` and `random`: resolve the configuration,
/// load the pool, execute the replicates, and write traces plus summary.
fn cmd_run(args: RunArgs, random_baseline: bool) -> Result<()> {
    let preset = match &args.preset {
        Some(name) => Some(Preset::from_name(name)?),
        None if random_baseline => Some(Preset::Random),
        None => None,
    };
    let file_keys = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_kv(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => BTreeMap::new(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for entry in &args.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {entry:?}"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(p) = &args.pool {
        overrides.push(("pool".to_string(), p.display().to_string()));
    }
    if let Some(p) = &args.features {
        overrides.push(("features".to_string(), p.display().to_string()));
    }
    if let Some(p) = &args.out_dir {
        overrides.push(("out_dir".to_string(), p.display().to_string()));
    }
    if let Some(s) = &args.seeds {
        overrides.push(("seeds".to_string(), s.clone()));
    }

    let plan = resolve(preset, file_keys, &overrides)?;
    let pool = load_pool(&plan)?;
    apply_thread_cap(thread_cap(args.threads));

    let set: ReplicateSet = if random_baseline {
        run_random_replicates(&pool, plan.m_init, plan.t_budget, &plan.seeds)?
    } else {
        let config = plan.campaign.as_ref().ok_or_else(|| {
            anyhow!(
                "no surrogate configured; set surrogate.kind or pass a surrogate preset \
                 (or use the random subcommand for the baseline)"
            )
        })?;
        run_replicates(&pool, config, &plan.seeds)?
    };

    write_outputs(&plan, &pool, &set, random_baseline)
}

fn write_outputs(
    plan: &RunPlan,
    pool: &CandidatePool,
    set: &ReplicateSet,
    random_baseline: bool,
) -> Result<()> {
    std::fs::create_dir_all(&plan.out_dir)
        .with_context(|| format!("creating {}", plan.out_dir.display()))?;

    let mut trace_files = Vec::new();
    for trace in &set.traces {
        let name = format!("trace_seed{}.csv", trace.seed);
        write_trace_csv(&plan.out_dir.join(&name), trace, pool)?;
        trace_files.push(name);
    }

    // The resolved key set doubles as a rerunnable config file.
    let mut cfg_text = String::new();
    for (k, v) in &plan.resolved {
        cfg_text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(plan.out_dir.join("resolved.cfg"), &cfg_text)?;

    let per_seed: Vec<serde_json::Value> = set
        .traces
        .iter()
        .map(|t| {
            serde_json::json!({
                "seed": t.seed,
                "iterations": t.iterations.len(),
                "best_id": t.best_id,
                "best_objectives": t.best_objectives,
                "failure": t.failure,
            })
        })
        .collect();
    let failures: Vec<serde_json::Value> = set
        .failures
        .iter()
        .map(|(seed, cause)| serde_json::json!({ "seed": seed, "cause": cause }))
        .collect();
    let summary = serde_json::json!({
        "command": if random_baseline { "random" } else { "run" },
        "config": plan.resolved,
        "pool_size": pool.len(),
        "objectives": pool.objective_count(),
        "seeds": plan.seeds,
        "traces": trace_files,
        "per_seed": per_seed,
        "completed": set.aggregate.completed,
        "failures": failures,
        "aggregate": {
            "mean_incumbent": set.aggregate.mean_incumbent,
            "stderr_incumbent": set.aggregate.stderr_incumbent,
            "mean_gap": set.aggregate.mean_gap,
            "stderr_gap": set.aggregate.stderr_gap,
        },
    });
    let summary_path = plan.out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    println!(
        "wrote {} trace(s), resolved.cfg, and summary.json to {}",
        set.traces.len(),
        plan.out_dir.display()
    );
    if !set.failures.is_empty() {
        for (seed, cause) in &set.failures {
            eprintln!("warning: seed {seed} aborted: {cause}");
        }
    }
    Ok(())
}

fn cmd_eval(
    pool_path: &Path,
    directions: Option<&str>,
    out_dir: &Path,
    groups: &[String],
) -> Result<()> {
    let directions = match directions {
        Some(text) => text
            .split(',')
            .map(|p| match p.trim() {
                "max" => Ok(Direction::Maximize),
                "min" => Ok(Direction::Minimize),
                other => Err(anyhow!("--directions expects max or min, got {other:?}")),
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let pool = CandidatePool::load_csv(pool_path, &directions)
        .with_context(|| format!("loading pool {}", pool_path.display()))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let multiobjective = pool.objective_count() >= 2;
    let reference = if multiobjective {
        let points: Vec<Vec<f64>> = (0..pool.len()).map(|i| pool.internal_objectives(i)).collect();
        reference_point(&points)
    } else {
        Vec::new()
    };

    for group in groups {
        let (label, list) = group
            .split_once('=')
            .ok_or_else(|| anyhow!("--group expects LABEL=FILE[,FILE...], got {group:?}"))?;
        if label.is_empty() || label.contains(['/', '\\']) {
            bail!("group label {label:?} is not a valid file-name component");
        }
        let mut traces = Vec::new();
        for (k, file) in list.split(',').enumerate() {
            let path = PathBuf::from(file.trim());
            let trace = read_trace_csv(&path, &pool, k as u64)
                .with_context(|| format!("group {label}"))?;
            traces.push(trace);
        }
        if traces.is_empty() {
            bail!("group {label} lists no trace files");
        }

        let agg = molbo::bo_loop::aggregate_curves(&pool, &traces);
        let gap_path = out_dir.join(format!("gap_{label}.csv"));
        let mut text = String::from("t,mean_gap,stderr_gap,mean_incumbent,stderr_incumbent\n");
        for t in 0..agg.mean_gap.len() {
            text.push_str(&format!(
                "{t},{},{},{},{}\n",
                agg.mean_gap[t], agg.stderr_gap[t], agg.mean_incumbent[t], agg.stderr_incumbent[t]
            ));
        }
        std::fs::write(&gap_path, text)?;
        println!("wrote {}", gap_path.display());

        if multiobjective {
            let curves: Vec<Vec<f64>> = traces
                .iter()
                .map(|t| hypervolume_curve(&pool, t, &reference))
                .collect::<Result<_>>()?;
            let horizon = curves.iter().map(|c| c.len()).min().unwrap_or(0);
            let hv_path = out_dir.join(format!("hypervolume_{label}.csv"));
            let mut text = String::from("t,mean_hypervolume,stderr_hypervolume\n");
            for t in 0..horizon {
                let values: Vec<f64> = curves.iter().map(|c| c[t]).collect();
                let (mean, stderr) = mean_stderr(&values);
                text.push_str(&format!("{t},{mean},{stderr}\n"));
            }
            std::fs::write(&hv_path, text)?;
            println!("wrote {}", hv_path.display());
        }
    }
    Ok(())
}

/// Hypervolume of the observed internal objectives after the initial design
/// (index 0) and after each iteration, against a fixed pool-wide reference.
fn hypervolume_curve(
    pool: &CandidatePool,
    trace: &CampaignTrace,
    reference: &[f64],
) -> Result<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = trace
        .initial
        .iter()
        .map(|(idx, _, _)| pool.internal_objectives(*idx))
        .collect();
    let mut curve = vec![hypervolume(&points, reference)?];
    for rec in &trace.iterations {
        points.push(pool.internal_objectives(rec.index));
        curve.push(hypervolume(&points, reference)?);
    }
    Ok(curve)
}
