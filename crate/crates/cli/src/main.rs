use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use randmark::attacks::{apply_attack, sample_model_population, PopulationKind};
use randmark::bounds::{
    estimate_bit_collisions, BitCollisionEstimate, BoundReport, BoundSettings, Tail,
};
use randmark::harness::persistence::{
    load_bundle, load_checkpoint_dir, save_bundle, save_population,
};
use randmark::harness::pipeline::{
    build_triggers, configure_threads, pretrain_backbone, train_bundle, RunSeeds,
};
use randmark::harness::{run_pipeline, ExperimentConfig, RunManifest, RunSummary};
use randmark::nn::checkpoint;
use randmark::oracles::{
    brute_force_poisson_binomial, exact_binomial_tail, monte_carlo_bernoulli_sum,
};
use randmark::stats::{detection_rate, mean_distance, VerificationReport};
use randmark::watermark::{extract_all, ExtractionBatch, TriggerSet};
use randmark::{Bundle, Error, Mlp};

const EXIT_USAGE: u8 = 1;
const EXIT_INCOMPATIBLE: u8 = 2;
const EXIT_NOT_APPLICABLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "randmark",
    version,
    about = "Trigger-set watermarking and ownership verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, where noted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trigger images and write a trigger set.
    GenData(Shared),
    /// Pretrain a backbone and embed the watermark.
    Embed {
        #[command(flatten)]
        shared: Shared,
        /// Existing trigger set; generated from the config otherwise.
        #[arg(long)]
        triggers: Option<PathBuf>,
    },
    /// Apply a named attack from the config to a backbone checkpoint.
    Attack {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        attack: String,
    },
    /// Verify a suspect backbone against a bundle.
    Verify {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        triggers: PathBuf,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(long = "K")]
        k: Option<usize>,
    },
    /// Generate an omega or xi model population.
    Population {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        kind: PopKind,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Compute the bound report from population directories or an estimates file.
    Bounds {
        #[command(flatten)]
        shared: Shared,
        /// JSON file with `omega`, `xi`, `p_hat` and `q_hat`.
        #[arg(long, conflicts_with_all = ["omega", "xi"])]
        estimates: Option<PathBuf>,
        #[arg(long, requires_all = ["xi", "bundle", "triggers"])]
        omega: Option<PathBuf>,
        #[arg(long)]
        xi: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        triggers: Option<PathBuf>,
    },
    /// Exact and Monte Carlo reference values, as JSON lines.
    Oracle {
        #[command(subcommand)]
        which: OracleCommand,
    },
    /// Run the full experiment into `--out`.
    Pipeline(Shared),
    /// Summarize a run directory and check its manifest.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    /// P(at most tau mismatches) for n bits with match probability r.
    BinomialTail {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        tau: usize,
        #[arg(long)]
        r: f64,
    },
    /// Tail of a sum of independent Bernoulli variables.
    PoissonBinomial {
        #[arg(long, value_delimiter = ',', required = true)]
        probs: Vec<f64>,
        #[arg(long)]
        d: usize,
        #[arg(long, value_enum, default_value = "below")]
        tail: TailArg,
        /// Also emit a Monte Carlo estimate of P(S < d).
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PopKind {
    Omega,
    Xi,
}

#[derive(Clone, Copy, ValueEnum)]
enum TailArg {
    Below,
    Above,
}

fn load_config(shared: &Shared) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &shared.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| anyhow!(Error::InvalidArgument("--out is required".into())))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) if p.extension().is_some() => fs::write(p, text)?,
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn tau_for(cfg: &ExperimentConfig, n: usize) -> randmark::Result<usize> {
    match cfg.tau {
        Some(t) => Ok(t),
        None => randmark::stats::select_threshold(0.5, n, cfg.epsilon_fpr)?.ok_or_else(|| {
            Error::NotApplicable(format!(
                "no threshold meets epsilon_fpr = {}",
                cfg.epsilon_fpr
            ))
        }),
    }
}

fn population_batches(
    dir: &Path,
    bundle: &Bundle,
    triggers: &TriggerSet,
    k: usize,
    seed: u64,
) -> anyhow::Result<Vec<Vec<ExtractionBatch>>> {
    let models = load_checkpoint_dir::<f64>(dir)?;
    if models.is_empty() {
        bail!(Error::InvalidArgument(format!(
            "no checkpoints in {}",
            dir.display()
        )));
    }
    Ok(models
        .iter()
        .map(|(_, m)| extract_all(m, bundle, triggers, k, seed))
        .collect::<randmark::Result<_>>()?)
}

fn mean_rate(pop: &[Vec<ExtractionBatch>], tau: usize) -> randmark::Result<f64> {
    let mut total = 0.0;
    for batches in pop {
        let rhos = batches
            .iter()
            .map(mean_distance)
            .collect::<randmark::Result<Vec<_>>>()?;
        total += detection_rate(&rhos, tau)?;
    }
    Ok(total / pop.len() as f64)
}

#[derive(serde::Deserialize)]
struct EstimatesFile {
    omega: Vec<BitCollisionEstimate>,
    xi: Vec<BitCollisionEstimate>,
    p_hat: f64,
    q_hat: f64,
    n: usize,
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::GenData(shared) => {
            let cfg = load_config(&shared)?;
            let dir = out_dir(&cfg)?;
            build_triggers(&cfg)?.save(dir.join("triggers.rmts"))?;
            fs::write(dir.join("config.ini"), cfg.to_ini())?;
        }
        Command::Embed { shared, triggers } => {
            let cfg = load_config(&shared)?;
            let dir = out_dir(&cfg)?;
            let set = match triggers {
                Some(p) => TriggerSet::load(p)?,
                None => {
                    let set = build_triggers(&cfg)?;
                    set.save(dir.join("triggers.rmts"))?;
                    set
                }
            };
            let (bundle, log) = train_bundle(&cfg, pretrain_backbone(&cfg)?, &set)?;
            save_bundle(&bundle, dir.join("bundle"))?;
            fs::write(dir.join("training_log.csv"), log.to_csv())?;
            if let Some(last) = log.last() {
                eprintln!("final bit accuracy {:.4}", last.bit_accuracy);
            }
        }
        Command::Attack {
            shared,
            model,
            attack,
        } => {
            let cfg = load_config(&shared)?;
            let dir = out_dir(&cfg)?;
            let named = cfg
                .attacks
                .iter()
                .find(|a| a.name == attack)
                .ok_or_else(|| {
                    anyhow!(Error::InvalidArgument(format!(
                        "no attack named '{attack}' in the config"
                    )))
                })?;
            let base: Mlp = checkpoint::load(&model)?;
            checkpoint::save(
                &apply_attack(&base, &named.spec)?,
                dir.join(format!("{attack}.rmk")),
            )?;
        }
        Command::Verify {
            shared,
            suspect,
            bundle,
            triggers,
            tau,
            k,
        } => {
            let cfg = load_config(&shared)?;
            let bundle: Bundle = load_bundle(&bundle)?;
            let set = TriggerSet::load(&triggers)?;
            let suspect_net: Mlp = checkpoint::load(&suspect)?;
            let tau = match tau {
                Some(t) => t,
                None => tau_for(&cfg, set.message_len())?,
            };
            let k = k.unwrap_or(cfg.k_verify);
            let seed = shared
                .seed
                .unwrap_or_else(|| RunSeeds::from_master(cfg.seed).verify);
            let batches = extract_all(&suspect_net, &bundle, &set, k, seed)?;
            let id = suspect
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let report = VerificationReport::from_batches(id, &batches, tau, seed, None)?;
            write_or_print(shared.out.as_deref(), &report.to_json()?)?;
        }
        Command::Population {
            shared,
            bundle,
            kind,
            m,
        } => {
            let cfg = load_config(&shared)?;
            let dir = out_dir(&cfg)?;
            let bundle: Bundle = load_bundle(&bundle)?;
            let seeds = RunSeeds::from_master(cfg.seed);
            let (kind, seed) = match kind {
                PopKind::Omega => (PopulationKind::Omega, seeds.omega),
                PopKind::Xi => (PopulationKind::Xi, seeds.xi),
            };
            let members =
                sample_model_population(&bundle, kind, m.unwrap_or(cfg.m), seed, &cfg.population)?;
            save_population(&members, kind, &dir)?;
            eprintln!("{} models written to {}", members.len(), dir.display());
        }
        Command::Bounds {
            shared,
            estimates,
            omega,
            xi,
            bundle,
            triggers,
        } => {
            let cfg = load_config(&shared)?;
            let (omega_est, xi_est, p_hat, q_hat, n) = match (estimates, omega) {
                (Some(file), _) => {
                    let e: EstimatesFile = serde_json::from_str(&fs::read_to_string(file)?)?;
                    (e.omega, e.xi, e.p_hat, e.q_hat, e.n)
                }
                (None, Some(omega_dir)) => {
                    let bundle: Bundle = load_bundle(bundle.expect("required by clap"))?;
                    let set = TriggerSet::load(triggers.expect("required by clap"))?;
                    let tau = tau_for(&cfg, set.message_len())?;
                    let seed = RunSeeds::from_master(cfg.seed).verify;
                    let om = population_batches(&omega_dir, &bundle, &set, cfg.k_verify, seed)?;
                    let xs = population_batches(
                        &xi.expect("required by clap"),
                        &bundle,
                        &set,
                        cfg.k_verify,
                        seed,
                    )?;
                    (
                        estimate_bit_collisions(&om, cfg.alpha, cfg.pooling)?,
                        estimate_bit_collisions(&xs, cfg.alpha, cfg.pooling)?,
                        mean_rate(&om, tau)?,
                        mean_rate(&xs, tau)?,
                        set.message_len(),
                    )
                }
                (None, None) => bail!(Error::InvalidArgument(
                    "pass --estimates or --omega/--xi".into()
                )),
            };
            let settings = BoundSettings {
                alpha: cfg.alpha,
                delta: cfg.delta,
                n,
                tau: tau_for(&cfg, n)?,
                r_bar: cfg.r_bar,
                r_under: cfg.r_under,
                bridge: cfg.bridge,
            };
            let report = BoundReport::build(&settings, &omega_est, &xi_est, p_hat, q_hat)?;
            write_or_print(shared.out.as_deref(), &report.to_json()?)?;
            if !report.not_applicable.is_empty() {
                for why in &report.not_applicable {
                    eprintln!("not applicable: {why}");
                }
                return Ok(EXIT_NOT_APPLICABLE);
            }
        }
        Command::Oracle { which } => match which {
            OracleCommand::BinomialTail { n, tau, r } => {
                println!(
                    "{}",
                    serde_json::to_string(&exact_binomial_tail(n, tau, r)?)?
                );
            }
            OracleCommand::PoissonBinomial {
                probs,
                d,
                tail,
                trials,
                seed,
            } => {
                let tail = match tail {
                    TailArg::Below => Tail::Below,
                    TailArg::Above => Tail::Above,
                };
                println!(
                    "{}",
                    serde_json::to_string(&brute_force_poisson_binomial(&probs, d, tail)?)?
                );
                if let Some(t) = trials {
                    println!(
                        "{}",
                        serde_json::to_string(&monte_carlo_bernoulli_sum(&probs, d, t, seed)?)?
                    );
                }
            }
        },
        Command::Pipeline(shared) => {
            let cfg = load_config(&shared)?;
            let dir = out_dir(&cfg)?;
            let outcome = run_pipeline(&cfg, &dir)?;
            print_summary(&outcome.summary);
        }
        Command::Report { run } => {
            let summary: RunSummary =
                serde_json::from_str(&fs::read_to_string(run.join("summary.json"))?)?;
            print_summary(&summary);
            let bad = RunManifest::load(&run)?.verify(&run)?;
            if !bad.is_empty() {
                bail!("manifest mismatch for {}", bad.join(", "));
            }
            println!("manifest ok");
        }
    }
    Ok(0)
}

fn print_summary(s: &RunSummary) {
    println!(
        "n = {}, N = {}, tau = {}, K = {}",
        s.n, s.triggers, s.tau, s.k
    );
    println!("fidelity ratio {:.4}", s.fidelity_ratio);
    println!("{:<16} {:<12} {:>6} {:>8}", "suspect", "kind", "R", "rho");
    for x in &s.suspects {
        println!(
            "{:<16} {:<12} {:>6.3} {:>8.3}",
            x.id, x.kind, x.detection_rate, x.mean_rho
        );
    }
    let c = &s.covariance;
    if let (Some(dep), Some(p95)) = (c.dependent_mean_delta, c.independent_p95) {
        println!("covariance: dependent {dep:.4}, independent p95 {p95:.4}");
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::IncompatibleSuspect(_) | Error::DimensionMismatch { .. }) => EXIT_INCOMPATIBLE,
        Some(Error::NotApplicable(_)) => EXIT_NOT_APPLICABLE,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
