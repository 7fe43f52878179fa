use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relaxest::error::{Error, Result};
use relaxest::harness::run::l96_params;
use relaxest::harness::{
    parse_algorithm, run, simulate, sweep, sweep_summary, write_record, ConfigFile, ExperimentConfig, Preset,
};
use relaxest::l96::{bound_eta, bounds, observed_fraction, L96ObservationSpec};
use relaxest::system::NudgeConfig;

/// Nudging-based state and parameter estimation experiments.
#[derive(Parser, Debug)]
#[command(name = "relaxest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the truth model only.
    Simulate(Common),
    /// Nudge with the parameters held at their initial guess.
    Assimilate(Common),
    /// Nudge and update the parameters on a schedule.
    Estimate(Common),
    /// Run the Cartesian product of `--axis` values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`; repeatable.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Print the Lorenz 96 absorbing-ball constants and gain conditions.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Radius of the model error used in the gain conditions.
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// rni, rni+, rls or none.
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu2: Option<f64>,
    #[arg(long)]
    update_interval: Option<f64>,
    #[arg(long)]
    fd_order: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report errors against the true parameters.
    #[arg(long)]
    test_mode: bool,
    /// Model override `key=value`; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
}

fn split_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::config(format!("expected key=value, got `{s}`")))
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, ConfigFile)> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let mut cfg = ExperimentConfig::from_file(&file, preset)?;
        if let Some(a) = &self.algorithm {
            cfg.algorithm = parse_algorithm(a)?;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.mu1 {
            cfg.mu1 = v;
        }
        if let Some(v) = self.mu2 {
            cfg.mu2 = v;
        }
        if let Some(v) = self.update_interval {
            cfg.update_interval = v;
        }
        if let Some(v) = self.fd_order {
            cfg.fd_order = v;
        }
        if self.dt.is_some() {
            cfg.dt = self.dt;
        }
        if let Some(v) = self.t_final {
            cfg.t_final = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.test_mode |= self.test_mode;
        for s in &self.sets {
            let (k, v) = split_pair(s)?;
            cfg.set_field(k, v)?;
        }
        Ok((cfg, file))
    }
}

fn run_one(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = run(cfg)?;
    write_record(&outcome.record, &cfg.output_dir)?;
    if let Some(last) = outcome.record.last() {
        let perr = last.param_error_rel.map_or(String::new(), |e| format!(", param error {e:.3e}"));
        println!(
            "t = {}: state error {:.3e}{perr}; params {:?}",
            last.t, last.state_error_rel, last.params
        );
    }
    println!("wrote {}", cfg.output_dir.join("run.csv").display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let (cfg, _) = c.resolve()?;
            let series = simulate(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let path = cfg.output_dir.join("simulate.csv");
            let mut text = String::from("t,state_norm\n");
            for (t, n) in series {
                text += &format!("{t:.16e},{n:.16e}\n");
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Assimilate(c) => {
            let (mut cfg, _) = c.resolve()?;
            cfg.algorithm = None;
            run_one(&cfg)
        }
        Command::Estimate(c) => {
            let (cfg, _) = c.resolve()?;
            if cfg.algorithm.is_none() {
                return Err(Error::config("estimate needs an algorithm (rni, rni+ or rls)"));
            }
            run_one(&cfg)
        }
        Command::Sweep { common, axes } => {
            let (cfg, file) = common.resolve()?;
            let mut parsed: Vec<(String, Vec<String>)> = file
                .sweep
                .iter()
                .map(|(k, vals)| {
                    let vals = vals
                        .iter()
                        .map(|v| match v {
                            toml::Value::String(s) => s.clone(),
                            other => other.to_string(),
                        })
                        .collect();
                    (k.clone(), vals)
                })
                .collect();
            for a in &axes {
                let (k, v) = split_pair(a)?;
                parsed.retain(|(key, _)| key != k);
                parsed.push((k.to_string(), v.split(',').map(|s| s.trim().to_string()).collect()));
            }
            if parsed.is_empty() {
                return Err(Error::config("sweep needs at least one --axis or a [sweep] table"));
            }
            let cells = sweep(&cfg, &parsed, true)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let path = cfg.output_dir.join("summary.csv");
            std::fs::write(&path, sweep_summary(&parsed, &cells)).map_err(|e| Error::io(&path, e))?;
            let failed = cells.iter().filter(|c| c.status != "ok").count();
            println!("{} cells, {failed} failed; wrote {}", cells.len(), path.display());
            Ok(())
        }
        Command::Bounds { common, delta } => {
            let (cfg, _) = common.resolve()?;
            if cfg.preset != Preset::L96Default {
                return Err(Error::config("bounds applies to the l96-default preset"));
            }
            let p = l96_params(&cfg)?;
            let obs = L96ObservationSpec::slow_only();
            let b = bounds(&p)?;
            let nudge = NudgeConfig::uniform(cfg.mu, &obs.operator(&p)?)?;
            let eta = bound_eta(&p, &obs, &nudge, delta)?;
            println!("d* = {}", b.d_star);
            println!("rho*^2 = {}", b.rho_star_sq);
            println!("|gamma|^2 = {}", b.gamma_norm_sq);
            println!("|d|^2 = {}", b.d_norm_sq);
            println!("rho_dot*^2 = {}", b.rho_dot_star_sq);
            println!("observed fraction = {}", observed_fraction(p.n_slow, p.n_fast, 0));
            println!("eta* = {}", eta.eta_star);
            println!("eta_dot* = {}", eta.eta_dot_star);
            println!("mu* = {} (delta = {delta})", eta.mu_star);
            for c in &eta.conditions {
                println!("{:<20} {:<5} margin {:e}", c.name, if c.holds { "holds" } else { "fails" }, c.margin);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
