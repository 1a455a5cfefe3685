use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aqe_wmmse::experiment::{
    generate_dataset, load_dataset, parallel_map, read_sweep_csv, run_sweep, train_method, write_report_csv,
    write_svg, ExperimentSpec, SweepGrid,
};
use aqe_wmmse::sysmodel::{dataset_read, dataset_write, SystemConfig};
use aqe_wmmse::train_eval::{evaluate, split_dataset, EvalOptions, EvalReport, Method, TrainConfig, Trainer};
use aqe_wmmse::{Error, Result};

/// RIS phase compression with an unrolled WMMSE beamformer: data
/// generation, training, evaluation and sweeps.
#[derive(Parser)]
#[command(name = "aqe-wmmse", version)]
struct Cli {
    /// Scenario JSON; defaults to the desk scenario, or to the dataset's
    /// own scenario for commands that read a dataset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training schedule JSON.
    #[arg(long, global = true)]
    train_config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for labeling, training several methods, and sweep
    /// grid points.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw channels and label them with the phase-iterated WMMSE solution.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        power_dbm: Option<f64>,
    },
    /// Train methods on a dataset; writes `<method>.ckpt` and
    /// `<method>_history.csv` under `--out`.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "aqe-wmmse,aqe,linq")]
        methods: String,
        /// Control message length; sets the number of encoder features.
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long)]
        power_dbm: Option<f64>,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate methods on the test split; writes `report.csv` and
    /// `per_sample.csv` under `--out`.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding `<method>.ckpt`; defaults to `--out`.
        #[arg(long)]
        ckpt_dir: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        bits: Option<usize>,
        /// Evaluate at this transmit power instead of the dataset's.
        #[arg(long)]
        power_dbm: Option<f64>,
        /// Also evaluate with the control message replaced by random phases.
        #[arg(long)]
        fallback: bool,
    },
    /// Mean sum-rate against transmit power.
    SweepPower {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_value = "15,20,25,30,35")]
        power_dbm: Vec<f64>,
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Mean sum-rate against control message length.
    SweepBits {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<usize>,
        #[arg(long)]
        power_dbm: Option<f64>,
    },
    /// Redraw a sweep chart from its CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "all")]
    methods: String,
    /// Samples per generated dataset.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Train grid points without a checkpoint instead of skipping them.
    #[arg(long)]
    train_missing: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RIS_LOG", "info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn base_config(path: Option<&Path>) -> Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::load(p),
        None => Ok(SystemConfig::desk()),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut t = match &cli.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        t.seed = s;
    }
    Ok(t)
}

/// Scenario for a command reading `dataset`: `--config` or the dataset's
/// own, with the message length from `--bits`.
fn dataset_config(cli: &Cli, dataset: &Path, bits: Option<usize>) -> Result<SystemConfig> {
    if !dataset.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", dataset.display())));
    }
    let mut cfg = match &cli.config {
        Some(p) => SystemConfig::load(p)?,
        None => dataset_read(dataset)?.0,
    };
    if let Some(b) = bits {
        let bpf = cfg.bits_per_feature();
        if b == 0 || b % bpf != 0 {
            return Err(Error::Config(format!("{b} bits is not a multiple of {bpf} bits per feature")));
        }
        cfg.n_c = b / bpf;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::GenData { n, out, power_dbm } => {
            let mut cfg = base_config(cli.config.as_deref())?;
            if let Some(p) = power_dbm {
                cfg = cfg.with_power_dbm(*p);
            }
            let data = generate_dataset(&cfg, *n, cli.seed.unwrap_or(0), cli.jobs)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            dataset_write(out, &cfg, &data)?;
            log::info!("wrote {} labeled samples to {}", data.len(), out.display());
        }
        Command::Train {
            dataset,
            out,
            methods,
            bits,
            power_dbm,
            resume,
        } => {
            let cfg = dataset_config(&cli, dataset, *bits)?;
            if let Some(p) = power_dbm {
                if (p - cfg.power_dbm()).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "dataset labels were computed at {:.3} dBm, not {p} dBm",
                        cfg.power_dbm()
                    )));
                }
            }
            let tcfg = train_config(&cli)?;
            let methods: Vec<Method> = Method::parse_list(methods)?.into_iter().filter(|m| m.is_trainable()).collect();
            if methods.is_empty() {
                return Err(Error::Config("none of the selected methods is trainable".into()));
            }
            let data = load_dataset(dataset, &cfg)?;
            fs::create_dir_all(out)?;
            parallel_map(methods.len(), cli.jobs, |i| {
                let m = methods[i];
                let ckpt = out.join(format!("{m}.ckpt"));
                let hist = out.join(format!("{m}_history.csv"));
                train_method(m, &cfg, &tcfg, data.clone(), &ckpt, &hist, *resume).map(drop)
            })?;
        }
        Command::Eval {
            dataset,
            out,
            ckpt_dir,
            methods,
            bits,
            power_dbm,
            fallback,
        } => {
            let cfg = dataset_config(&cli, dataset, *bits)?;
            let tcfg = train_config(&cli)?;
            let methods = Method::parse_list(methods)?;
            let ckpt_dir = ckpt_dir.as_ref().unwrap_or(out);
            let mut models = Vec::new();
            let mut missing = Vec::new();
            for m in methods.iter().filter(|m| m.is_trainable()) {
                let path = ckpt_dir.join(format!("{m}.ckpt"));
                if path.exists() {
                    models.push(Trainer::load(&path)?.best_model());
                } else {
                    missing.push(path.display().to_string());
                }
            }
            if !missing.is_empty() {
                return Err(Error::Config(format!("missing checkpoints: {}", missing.join(", "))));
            }
            if let Some(bad) = models.iter().find(|m| m.cfg.n_c != cfg.n_c) {
                return Err(Error::Config(format!(
                    "{} checkpoint uses {} features, the scenario {}",
                    bad.method, bad.cfg.n_c, cfg.n_c
                )));
            }
            let test = split_dataset(load_dataset(dataset, &cfg)?, &tcfg)?.test;
            let mut variants = vec![EvalOptions {
                power: power_dbm.map(aqe_wmmse::sysmodel::dbm_to_watts),
                ..Default::default()
            }];
            if *fallback {
                variants.push(EvalOptions {
                    fallback_seed: Some(cli.seed.unwrap_or(0)),
                    ..variants[0]
                });
            }
            let mut reports = Vec::new();
            for opts in &variants {
                let mut rep = Vec::new();
                for &m in &methods {
                    let r = evaluate(m, models.iter().find(|x| x.method == m), &test, &cfg, opts)?;
                    log::info!(
                        "{m}{}: {:.4} +- {:.4} bit/s/Hz",
                        if r.fallback { " (random phases)" } else { "" },
                        r.mean,
                        r.ci95
                    );
                    rep.push(r);
                }
                reports.push(EvalReport {
                    power_dbm: rep[0].power_dbm,
                    bits: cfg.bits(),
                    methods: rep,
                });
            }
            fs::create_dir_all(out)?;
            write_report_csv(&out.join("report.csv"), &reports)?;
            write_per_sample(&out.join("per_sample.csv"), &reports)?;
        }
        Command::SweepPower { sweep, power_dbm, bits } => {
            let mut config = base_config(cli.config.as_deref())?;
            if let Some(b) = bits {
                let bpf = config.bits_per_feature();
                if *b == 0 || b % bpf != 0 {
                    return Err(Error::Config(format!("{b} bits is not a multiple of {bpf} bits per feature")));
                }
                config.n_c = b / bpf;
            }
            finish_sweep(&cli, sweep, config, SweepGrid::PowerDbm(power_dbm.clone()))?;
        }
        Command::SweepBits { sweep, bits, power_dbm } => {
            let mut config = base_config(cli.config.as_deref())?;
            if let Some(p) = power_dbm {
                config = config.with_power_dbm(*p);
            }
            finish_sweep(&cli, sweep, config, SweepGrid::Bits(bits.clone()))?;
        }
        Command::Plot { csv, out } => {
            let rows = read_sweep_csv(csv)?;
            write_svg(out, &rows)?;
            log::info!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn finish_sweep(cli: &Cli, sweep: &SweepArgs, config: SystemConfig, grid: SweepGrid) -> Result<()> {
    let spec = ExperimentSpec {
        config,
        train: train_config(cli)?,
        methods: Method::parse_list(&sweep.methods)?,
        grid,
        out: sweep.out.clone(),
        seed: cli.seed.unwrap_or(0),
        samples: sweep.samples,
        jobs: cli.jobs,
        train_missing: sweep.train_missing,
    };
    let outcome = run_sweep(&spec)?;
    for s in &outcome.skipped {
        log::warn!("skipped {} at {} dBm, {} bits: {}", s.method, s.power_dbm, s.bits, s.reason);
    }
    log::info!("wrote {} and {}", outcome.csv.display(), outcome.svg.display());
    Ok(())
}

fn write_per_sample(path: &Path, reports: &[EvalReport]) -> Result<()> {
    use std::io::Write;
    aqe_wmmse::container::write_atomically(path, |w| {
        writeln!(w, "method,fallback,sample,sum_rate")?;
        for rep in reports {
            for m in &rep.methods {
                for (i, r) in m.per_sample.iter().enumerate() {
                    writeln!(w, "{},{},{i},{r}", m.method, m.fallback)?;
                }
            }
        }
        Ok(())
    })
}
