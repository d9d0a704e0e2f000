use clap::{Args, Parser, Subcommand};
use clustermc::diagnostics::{hotelling_rs, top_k_scheme, DiagnosticResult};
use clustermc::io::{self, HyperSource, ManifestChain, RunManifest};
use clustermc::regen::{find_tours, most_frequent_state};
use clustermc::{
    Allocation, ChainConfig, DataMatrix, Error, HyperParams, KernelKind, Result, Trace,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "clustermc", version, about = "Cluster-allocation MCMC with regenerative convergence diagnostics")]
struct Cli {
    /// Size of the rayon thread pool (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit hyperparameters by empirical Bayes and write a key-value file
    Fit(FitArgs),
    /// Run one or more chains and write traces, diagnostics, and consensus
    Run(RunArgs),
    /// Parse and validate input files without running anything
    Validate(ValidateArgs),
    /// Recompute diagnostics and consensus from an existing trace
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = clustermc::eb::DEFAULT_STARTS)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional key-value file used as the first optimizer start
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON manifest describing data, hyperparameters, and chains
    #[arg(long, conflicts_with_all = ["data", "hyper"])]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    /// Hyperparameter file; omit to fit by empirical Bayes first
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gibbs)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    gibbs_per_sm: usize,
    /// singletons, one-cluster, or random
    #[arg(long, default_value = "singletons")]
    init: String,
    #[arg(long, default_value_t = 1000)]
    check_every: usize,
    /// Scheme sizes for the Hotelling diagnostic
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 5, 10])]
    k: Vec<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KernelArg {
    Gibbs,
    SplitMergeHybrid,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Gibbs => KernelKind::Gibbs,
            KernelArg::SplitMergeHybrid => KernelKind::SplitMergeHybrid,
        }
    }
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    fixture: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 5, 10])]
    k: Vec<usize>,
    /// Only report co-clustering pairs with at least this probability
    #[arg(long, default_value_t = 0.0)]
    rho_min: f64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) => 2,
        Error::InvalidHyperParameter(_) => 3,
        Error::ResourceLimit(_) => 4,
        Error::InsufficientRegeneration(_) => 5,
        Error::InsufficientStates { .. } => 6,
        Error::OptimizationFailure(_) => 7,
        Error::Parse { .. } => 8,
        Error::Io(_) => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("error: could not configure thread pool");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = io::load_data_csv(&args.data)?;
    let init = match &args.init {
        Some(p) => io::load_hyper(p)?,
        None => HyperParams {
            mu: 0.0,
            sigma2: 1.0,
            sigma2_eta: 1.0,
            sigma2_theta: 1.0,
            p: 0.1,
        },
    };
    let fit = clustermc::eb::fit_empirical_bayes_with(&data, &init, args.starts, args.seed)?;
    io::write_atomic(&args.out, &io::format_hyper(&fit.hyper, Some(&fit.se)))?;
    println!(
        "fit: objective {:.6}, {} iterations, converged {}",
        fit.objective, fit.iterations, fit.converged
    );
    if !fit.boundary_hits.is_empty() {
        println!("fit: boundary guards hit for {}", fit.boundary_hits.join(", "));
    }
    println!("fit: wrote {}", args.out.display());
    Ok(())
}

fn initial_allocation(kind: &str, n: usize, seed: u64) -> Result<Allocation> {
    match kind {
        "singletons" => Ok(Allocation::singletons(n)),
        "one-cluster" => Ok(Allocation::one_cluster(n)),
        "random" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
            let mut labels = vec![0u32; n];
            let mut max = 0u32;
            for l in labels.iter_mut().skip(1) {
                *l = rng.gen_range(0..=max + 1);
                max = max.max(*l);
            }
            canonical_from_raw(&labels)
        }
        other => Err(Error::InvalidInput(format!(
            "unknown initializer {other:?}; expected singletons, one-cluster, or random"
        ))),
    }
}

fn canonical_from_raw(labels: &[u32]) -> Result<Allocation> {
    let shifted: Vec<u32> = labels.iter().map(|&l| l + 1).collect();
    clustermc::partition::canonicalize(&shifted)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let manifest = match &args.manifest {
        Some(p) => {
            let m = io::read_manifest(&std::fs::read_to_string(p)?)?;
            m.validate()?;
            m
        }
        None => RunManifest {
            data: args.data.clone().unwrap(),
            hyper: match &args.hyper {
                Some(p) => HyperSource::File { path: p.clone() },
                None => HyperSource::Fit { init: None },
            },
            chains: vec![ManifestChain {
                kernel: args.kernel.into(),
                iters: args.iters,
                seed: args.seed,
                gibbs_per_sm: args.gibbs_per_sm,
                init: args.init.clone(),
            }],
            k_list: args.k.clone(),
            check_every: args.check_every,
            out_dir: args.out_dir.clone(),
        },
    };
    manifest.validate().or_else(|e| {
        // direct-flag mode skips the data-path existence check done above
        if args.manifest.is_some() {
            Err(e)
        } else {
            Ok(())
        }
    })?;
    let data = io::load_data_csv(&manifest.data)?;
    let hyper = match &manifest.hyper {
        HyperSource::File { path } => io::load_hyper(path)?,
        HyperSource::Fit { init } => {
            let init = match init {
                Some(p) => io::load_hyper(p)?,
                None => HyperParams {
                    mu: 0.0,
                    sigma2: 1.0,
                    sigma2_eta: 1.0,
                    sigma2_theta: 1.0,
                    p: 0.1,
                },
            };
            let fit = clustermc::eb::fit_empirical_bayes(&data, &init)?;
            let path = manifest.out_dir.join("hyper_fitted.txt");
            io::write_atomic(&path, &io::format_hyper(&fit.hyper, Some(&fit.se)))?;
            println!("run: fitted hyperparameters written to {}", path.display());
            fit.hyper
        }
    };
    std::fs::create_dir_all(&manifest.out_dir)?;

    let outcomes: Vec<(usize, Result<()>)> = manifest
        .chains
        .par_iter()
        .enumerate()
        .map(|(idx, chain)| (idx, run_one_chain(&manifest, chain, idx, &data, &hyper)))
        .collect();
    let mut first_err: Option<Error> = None;
    for (idx, out) in outcomes {
        match out {
            Ok(()) => println!("chain {idx}: done"),
            Err(e) => {
                eprintln!("chain {idx}: failed: {e}");
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn run_one_chain(
    manifest: &RunManifest,
    chain: &ManifestChain,
    idx: usize,
    data: &DataMatrix,
    hyper: &HyperParams,
) -> Result<()> {
    let init = initial_allocation(&chain.init, data.n_obs(), chain.seed)?;
    let mut cfg = ChainConfig::new(chain.kernel, chain.iters, chain.seed, &init);
    cfg.gibbs_cycles_per_splitmerge = chain.gibbs_per_sm;
    let trace = clustermc::samplers::run_chain(data, hyper, &cfg)?;
    let trace_path = manifest.out_dir.join(format!("trace_{idx}.csv"));
    io::write_atomic(&trace_path, &io::format_trace(&trace))?;

    let progress = progress_table(&trace, manifest.check_every, manifest.k_list[0]);
    io::write_atomic(
        &manifest.out_dir.join(format!("progress_{idx}.csv")),
        &progress,
    )?;

    write_reports(
        &trace,
        &manifest.k_list,
        0.0,
        &manifest.out_dir,
        &format!("chain{idx}_"),
        Some(data.ids()),
    )
}

/// Evaluates the smallest-K diagnostic on growing trace prefixes.
fn progress_table(trace: &Trace, check_every: usize, k: usize) -> String {
    let mut out = String::from("iteration,num_tours,t2,p_value,note\n");
    let mut at = check_every;
    while at <= trace.len() {
        let prefix = Trace::from_parts(
            trace.states()[..at].to_vec(),
            trace.log_post_table().clone(),
            trace.meta().clone(),
        )
        .expect("prefix states share the full table");
        match diag_at(&prefix, k) {
            Ok(d) => out.push_str(&format!(
                "{at},{},{},{},\n",
                d.num_tours, d.t2, d.p_value
            )),
            Err(e) => out.push_str(&format!("{at},,,,{e}\n")),
        }
        if at == trace.len() {
            break;
        }
        at = (at + check_every).min(trace.len());
    }
    out
}

fn diag_at(trace: &Trace, k: usize) -> Result<DiagnosticResult> {
    let delta = most_frequent_state(trace)?;
    let tours = find_tours(trace, &delta)?;
    let scheme = top_k_scheme(trace, k)?;
    hotelling_rs(trace, &tours, &scheme)
}

fn write_reports(
    trace: &Trace,
    k_list: &[usize],
    rho_min: f64,
    out_dir: &Path,
    prefix: &str,
    ids: Option<&[String]>,
) -> Result<()> {
    let delta = most_frequent_state(trace)?;
    let tours = find_tours(trace, &delta)?;

    for &k in k_list {
        let path = out_dir.join(format!("{prefix}diag_k{k}.json"));
        match top_k_scheme(trace, k).and_then(|s| hotelling_rs(trace, &tours, &s)) {
            Ok(diag) => {
                let json = serde_json::to_string_pretty(&diag)
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                io::write_atomic(&path, &json)?;
                println!(
                    "{prefix}diag k={k}: T2 = {:.4}, p = {:.6}, tours = {}",
                    diag.t2, diag.p_value, diag.num_tours
                );
            }
            Err(e) => println!("{prefix}diag k={k}: skipped ({e})"),
        }
    }

    let (rho, se) = clustermc::consensus::co_occurrence_rs(trace, &tours)?;
    let n = rho.n();
    let generic: Vec<String> = (1..=n).map(|i| format!("o{i}")).collect();
    let ids: &[String] = ids.unwrap_or(&generic);
    io::write_atomic(
        &out_dir.join(format!("{prefix}consensus.csv")),
        &io::format_consensus(&rho, ids),
    )?;

    let mut pairs = String::from("i,j,rho,se,cv\n");
    for i in 0..n {
        for j in (i + 1)..n {
            let r = rho.get(i, j);
            if r < rho_min {
                continue;
            }
            let cv = clustermc::diagnostics::cv_diagnostic(trace, &tours, (i, j))?;
            pairs.push_str(&format!("{},{},{},{},{}\n", ids[i], ids[j], r, se.get(i, j), cv));
        }
    }
    io::write_atomic(&out_dir.join(format!("{prefix}pairs.csv")), &pairs)?;

    let (map_alloc, map_lp) = clustermc::consensus::map_allocation(trace)?;
    let summary = serde_json::json!({
        "delta": delta.as_str(),
        "num_tours": tours.num_tours(),
        "mean_tour_length": tours.mean_length(),
        "map_state": map_alloc.key().as_str(),
        "map_log_post": map_lp,
        "trace_len": trace.len(),
    });
    io::write_atomic(
        &out_dir.join(format!("{prefix}summary.json")),
        &serde_json::to_string_pretty(&summary).map_err(|e| Error::InvalidInput(e.to_string()))?,
    )?;
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let mut checked = 0;
    if let Some(p) = &args.data {
        let d = io::load_data_csv(p)?;
        println!(
            "ok: data {} ({} observations, {} variables)",
            p.display(),
            d.n_obs(),
            d.n_vars()
        );
        checked += 1;
    }
    if let Some(p) = &args.hyper {
        let h = io::load_hyper(p)?;
        println!("ok: hyper {} (p = {})", p.display(), h.p);
        checked += 1;
    }
    if let Some(p) = &args.trace {
        let t = io::load_trace(p)?;
        println!(
            "ok: trace {} ({} states, {} distinct)",
            p.display(),
            t.len(),
            t.log_post_table().len()
        );
        checked += 1;
    }
    if let Some(p) = &args.manifest {
        let m = io::read_manifest(&std::fs::read_to_string(p)?)?;
        m.validate()?;
        println!("ok: manifest {} ({} chains)", p.display(), m.chains.len());
        checked += 1;
    }
    if let Some(p) = &args.fixture {
        let f = io::read_fixture(&std::fs::read_to_string(p)?)?;
        println!("ok: fixture {} ({} states)", p.display(), f.states().len());
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::InvalidInput(
            "nothing to validate; pass at least one of --data/--hyper/--trace/--manifest/--fixture"
                .into(),
        ));
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let trace = io::load_trace(&args.trace)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_reports(&trace, &args.k, args.rho_min, &args.out_dir, "", None)
}
