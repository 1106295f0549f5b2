use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kirchhoffnet::experiment::{self, ExperimentConfig};
use kirchhoffnet::gradcheck::{self, GradcheckConfig};
use kirchhoffnet::integrator::hw_scale;
use kirchhoffnet::topology::{fc_topo, ne_topo, proj_topo, Topology};
use kirchhoffnet::{DeviceKind, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "kirchhoffnet", version, about = "Circuit-ODE neural networks")]
struct Cli {
    /// Master seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a layer's edge list.
    Topo(TopoArgs),
    /// Train the net described by --config.
    Train {
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test metric of a checkpoint on the config's data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw samples from a trained flow.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        n: usize,
    },
    /// Evaluate a 2-D flow's density on a grid.
    Density {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid points per side.
        #[arg(long, default_value_t = 200)]
        grid: usize,
        /// Half-width of the square grid.
        #[arg(long, default_value_t = 4.0)]
        extent: f64,
    },
    /// Compare adjoint and finite-difference gradients on random nets.
    Gradcheck {
        /// Device kind; all learnable kinds when omitted.
        #[arg(long)]
        kind: Option<DeviceKind>,
        #[arg(long, default_value_t = 20)]
        nets: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
    },
    /// Hardware time and capacitance for a scale factor.
    Scale {
        #[arg(long)]
        a: f64,
        /// Total unit-less horizon D·T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Fc,
    Ne,
    Proj,
}

#[derive(Args)]
struct TopoArgs {
    #[arg(long, value_enum)]
    kind: Option<Pattern>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    projected: Option<usize>,
    #[arg(long, default_value_t = 1)]
    repeat_proj: usize,
    #[arg(long, default_value_t = 0)]
    ground_repeat: usize,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numeric() {
            EXIT_NUMERIC
        } else if matches!(e, Error::Config { .. } | Error::Version { .. } | Error::InvalidArgument(_)) {
            EXIT_CONFIG
        } else {
            1
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(key: &str, message: &str) -> Failure {
    Failure::from(Error::Config {
        key: key.into(),
        message: message.into(),
    })
}

impl Cli {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let path = self.config.as_ref().ok_or_else(|| usage("--config", "this command needs a config file"))?;
        let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => usage("--config", &format!("cannot read {}: {io}", path.display())),
            other => other.into(),
        })?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// The explicit checkpoint, else `checkpoint.json` in the output directory
    /// (from the flag, or the config when one is given).
    fn checkpoint(&self, explicit: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        let dir = match (&self.out_dir, &self.config) {
            (Some(d), _) => d.clone(),
            (None, Some(_)) => self.config()?.out_dir,
            (None, None) => return Err(usage("--checkpoint", "give --checkpoint, --out-dir or --config")),
        };
        Ok(dir.join("checkpoint.json"))
    }
}

fn topology(cli: &Cli, args: &TopoArgs) -> Result<Topology, Failure> {
    let topo = match (args.kind, &cli.config) {
        (None, Some(_)) => return Ok(cli.config()?.topology()?),
        (None, None) => return Err(usage("--kind", "give --kind or --config")),
        (Some(Pattern::Fc), _) => {
            fc_topo(args.nodes.ok_or_else(|| usage("--nodes", "an fc layer needs --nodes"))?, args.repeat)?
        }
        (Some(pattern), _) => {
            let need = |v: Option<usize>, key: &str| v.ok_or_else(|| usage(key, "ne and proj layers need --width, --height and --kernel"));
            let (w, h, k) = (need(args.width, "--width")?, need(args.height, "--height")?, need(args.kernel, "--kernel")?);
            match pattern {
                Pattern::Ne => ne_topo(args.channels, w, h, k, args.repeat)?,
                _ => proj_topo(
                    args.channels,
                    w,
                    h,
                    k,
                    args.projected.ok_or_else(|| usage("--projected", "a proj layer needs --projected"))?,
                    args.repeat,
                    args.repeat_proj,
                )?,
            }
        }
    };
    Ok(if args.ground_repeat > 0 {
        topo.with_ground_edges(args.ground_repeat)
    } else {
        topo
    })
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    kirchhoffnet::io::write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Topo(args) => {
            let text = topology(cli, args)?.to_text();
            if let Some(dir) = &cli.out_dir {
                write(&dir.join("topology.txt"), &text)?;
            }
            print!("{text}");
        }
        Command::Train { epochs } => {
            let mut cfg = cli.config()?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let report = experiment::run_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            log::info!("artifacts written to {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = cli.config()?;
            let path = cli.checkpoint(checkpoint)?;
            match experiment::run_eval(&cfg, &path)? {
                Some(m) => println!("{m}"),
                None => println!("no test metric for this config"),
            }
        }
        Command::Sample { checkpoint, n } => {
            let path = cli.checkpoint(checkpoint)?;
            let out = cli.out_dir().join("samples.csv");
            experiment::run_sample(&path, *n, cli.seed.unwrap_or(0), &out)?;
            println!("{}", out.display());
        }
        Command::Density { checkpoint, grid, extent } => {
            let path = cli.checkpoint(checkpoint)?;
            let out = cli.out_dir().join("density.csv");
            let mass = experiment::run_density_grid(&path, *grid, *extent, &out)?;
            println!("grid mass {mass}");
        }
        Command::Gradcheck { kind, nets, steps } => {
            let kinds = match kind {
                Some(k) => vec![*k],
                None => DeviceKind::LEARNABLE.to_vec(),
            };
            let mut failed = false;
            for kind in kinds {
                let mut cfg = GradcheckConfig::new(kind, cli.seed.unwrap_or(0));
                cfg.nets = *nets;
                cfg.steps = *steps;
                let r = gradcheck::run(&cfg)?;
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {kind}: max rel err {:.3e} over {} parameters ({} excluded at kinks)",
                    r.max_rel_err, r.checked, r.excluded
                );
                failed |= !r.passed();
            }
            if failed {
                return Err(Failure {
                    code: EXIT_CHECK,
                    message: "gradient check failed".into(),
                });
            }
        }
        Command::Scale { a, horizon } => {
            let plan = hw_scale(*horizon, *a)?;
            if let Some(dir) = &cli.out_dir {
                write(&dir.join("scale.json"), &serde_json::to_string_pretty(&plan).expect("plan serializes"))?;
            }
            print!("{plan}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
