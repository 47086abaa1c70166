use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mfeig::config::{RunConfig, Setup};
use mfeig::design::{EstimatorDesign, PilotResult};
use mfeig::models::NoiseForm;
use mfeig::pipeline::{self, InnerMode, SweepOutputs};
use mfeig::Error;

#[derive(Parser)]
#[command(name = "mfeig", version, about = "Multi-fidelity expected information gain estimation")]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "MFEIG_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every utility model on a pilot sample and write pilot.json
    Pilot {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Choose the estimator from pilot data and write design.json
    Design {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        pilot: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the repeated-trial sweep over the design grid
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        design: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Full run of the bundled one-dimensional nonlinear benchmark
    Benchmark {
        #[arg(long, value_enum, default_value_t = Variant::Additive)]
        variant: Variant,
        #[arg(long, value_enum, default_value_t = Mode::Naive)]
        mode: Mode,
        /// Share inner-loop prior draws across models
        #[arg(long)]
        reuse: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the number of trials
        #[arg(long)]
        trials: Option<usize>,
        /// Write pilot, design and sweep files here
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Additive,
    Scaled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Naive,
    Optimal,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: worker count must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is set once");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> mfeig::Result<()> {
    match command {
        Command::Pilot { config, out } => {
            let (cfg, setup) = load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let pilot = pipeline::pilot(&setup)?;
            print_pilot(&pilot);
            save(&dir, "pilot.json", |p| pilot.save(p))
        }
        Command::Design { config, pilot, out } => {
            let (cfg, setup) = load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let pilot = PilotResult::load(&pilot)?;
            let design = pipeline::design(&setup, &pilot)?;
            print_design(&design);
            save(&dir, "design.json", |p| design.save(p))
        }
        Command::Sweep { config, design, out } => {
            let (cfg, setup) = load(&config)?;
            let dir = out_dir(out, &cfg)?;
            let design = EstimatorDesign::load(&design)?;
            let out = pipeline::sweep(&setup, &design)?;
            print_sweep(&out);
            pipeline::write_sweep_outputs(&out, &dir)?;
            info!("wrote sweep outputs to {}", dir.display());
            Ok(())
        }
        Command::Benchmark {
            variant,
            mode,
            reuse,
            seed,
            trials,
            out,
        } => {
            let form = match variant {
                Variant::Additive => NoiseForm::Additive,
                Variant::Scaled => NoiseForm::Scaled,
            };
            let mode = match mode {
                Mode::Naive => InnerMode::Naive,
                Mode::Optimal => InnerMode::Optimal,
            };
            let mut cfg = pipeline::case1_config(form, mode, reuse, seed);
            if let Some(t) = trials {
                cfg.sweep.n_trials = t;
            }
            let setup = cfg.resolve()?;
            info!("pilot: {} samples at {} designs", setup.n_pilot, setup.pilot_designs.len());
            let pilot = pipeline::pilot(&setup)?;
            print_pilot(&pilot);
            let design = pipeline::design(&setup, &pilot)?;
            print_design(&design);
            info!("sweep: {} trials at {} designs", setup.n_trials, setup.designs.len());
            let sweep = pipeline::sweep(&setup, &design)?;
            print_sweep(&sweep);
            print_table(&design, &sweep);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                std::fs::write(dir.join("config.json"), cfg.to_json()? + "\n").map_err(|e| Error::Io {
                    path: dir.join("config.json"),
                    source: e,
                })?;
                pilot.save(&dir.join("pilot.json"))?;
                design.save(&dir.join("design.json"))?;
                pipeline::write_sweep_outputs(&sweep, &dir)?;
                info!("wrote outputs to {}", dir.display());
            }
            Ok(())
        }
    }
}

fn load(path: &Path) -> mfeig::Result<(RunConfig, Setup)> {
    let cfg = RunConfig::load(path)?;
    let setup = cfg.resolve()?;
    Ok((cfg, setup))
}

fn out_dir(out: Option<PathBuf>, cfg: &RunConfig) -> mfeig::Result<PathBuf> {
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass -o or set output_dir".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn save(dir: &Path, name: &str, write: impl FnOnce(&Path) -> mfeig::Result<()>) -> mfeig::Result<()> {
    let path = dir.join(name);
    write(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn print_pilot(pilot: &PilotResult) {
    println!(
        "pilot: {} samples x {} designs{}",
        pilot.n_pilot,
        pilot.designs.len(),
        if pilot.degenerate_designs.is_empty() {
            String::new()
        } else {
            format!(" ({} degenerate)", pilot.degenerate_designs.len())
        }
    );
    println!("{:>6} {:>8} {:>14} {:>12}", "model", "N_in", "cost", "corr(u0)");
    for (m, (cost, rho)) in pilot.costs.iter().zip(pilot.correlations()).enumerate() {
        println!("{m:>6} {:>8} {cost:>14.6} {rho:>12.6}", pilot.n_in[m]);
    }
}

fn print_design(d: &EstimatorDesign) {
    println!("estimator: {} over models {:?}", d.family, d.models);
    println!("inner sizes: {:?}", d.n_in);
    println!("group sizes: {:?}", d.groups.groups().iter().map(|g| g.size).collect::<Vec<_>>());
    if !d.alpha.is_empty() {
        println!("weights: {:?}", d.alpha);
    }
    println!("cost: {:.6e} of budget {:.6e}", d.cost, d.budget);
    println!("projected variance: {:.4e}", d.projected_variance);
    println!(
        "MC at equal budget: {:.4e} (projected reduction ratio {:.2})",
        d.mc_variance,
        d.projected_ratio()
    );
}

fn print_sweep(out: &SweepOutputs) {
    let s = &out.summary;
    println!("sweep: {} trials x {} designs", s.n_trials, s.n_designs);
    println!("xi* = {:?} (index {})", s.xi_star, s.xi_star_index);
    match s.design_averaged_variance {
        Some(v) => println!("design-averaged variance: {v:.4e}"),
        None => println!("design-averaged variance: n/a (one trial)"),
    }
    if let (Some(b), Some(r)) = (s.baseline_design_averaged_variance, s.design_averaged_ratio) {
        println!("baseline (N_out = {}): {b:.4e}, ratio {r:.2}", s.baseline_n_out.unwrap_or(0));
    }
}

fn print_table(d: &EstimatorDesign, out: &SweepOutputs) {
    let s = &out.summary;
    let fmt = |v: Option<f64>, exp: bool| match v {
        Some(v) if exp => format!("{v:.2e}"),
        Some(v) => format!("{v:.2}"),
        None => "--".into(),
    };
    println!();
    println!("{:<28} {:>12} {:>12}", "", "NMC", "MF-EIG");
    println!(
        "{:<28} {:>12} {:>12}",
        "variance (projected)",
        fmt(Some(d.mc_variance), true),
        fmt(Some(d.projected_variance), true)
    );
    println!(
        "{:<28} {:>12} {:>12}",
        "variance (empirical)",
        fmt(s.baseline_design_averaged_variance, true),
        fmt(s.design_averaged_variance, true)
    );
    println!(
        "{:<28} {:>12} {:>12}",
        "reduction ratio (projected)",
        "--",
        fmt(Some(d.projected_ratio()), false)
    );
    println!(
        "{:<28} {:>12} {:>12}",
        "reduction ratio (empirical)",
        "--",
        fmt(s.design_averaged_ratio, false)
    );
}
