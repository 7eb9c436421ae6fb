use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stc_core::config::{load_config, ChainConfig};
use stc_core::io::{export, load_head_trace, parse_grid, write_head_trace, Format, HarshBrake};
use stc_core::model::linearize;
use stc_core::nominal::{string_stability_check, DEFAULT_OMEGA_MAX, DEFAULT_SAMPLES};
use stc_core::observer::design_gain;
use stc_core::safety::PolicyKind;
use stc_core::sim::{
    linear_model, simulate, sweep_safe_range, ControllerKind, ScenarioKind, ScenarioSpec,
    SimSettings,
};
use stc_core::StcError;

const EXIT_COLLISION: u8 = 3;

// println! panics when stdout is a closed pipe
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "stc",
    version,
    about = "Safety-critical control of a mixed vehicle chain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation and write record.csv and summary.json.
    Simulate(SimulateArgs),
    /// Classify safety over a disturbance grid; writes sweep.csv and sweep.json.
    Sweep(SweepArgs),
    /// Sweep the head-to-tail gain of the nominal controller.
    Stability(StabilityArgs),
    /// Design an observer gain and write it as JSON.
    ObserverDesign(ObserverArgs),
    /// Write a synthetic head speed trace.
    MakeTrace(TraceArgs),
}

#[derive(Args)]
struct Common {
    /// Preset name (table1, table3-ngsim) or JSON config path.
    #[arg(long, default_value = "table1")]
    config: String,
    /// Override the spacing policy.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Override the policy time headway.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value = "stc")]
    controller: ControllerKind,
    #[arg(long)]
    no_saturation: bool,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
}

impl Common {
    fn load(&self) -> stc_core::Result<(ChainConfig, SimSettings)> {
        let (mut cfg, warnings) = load_config(&self.config)?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        if let Some(kind) = self.policy {
            cfg.filter.policy.kind = kind;
        }
        if let Some(tau) = self.tau {
            cfg.filter.policy.tau = tau;
        }
        let mut settings = cfg.sim.clone();
        settings.controller = self.controller;
        if self.no_saturation {
            settings.saturate = false;
        }
        if let Some(dt) = self.dt {
            settings.dt = dt;
        }
        if let Some(t) = self.t_end {
            settings.t_end = t;
        }
        cfg.sim = settings.clone();
        cfg.validate_structure()?;
        Ok((cfg, settings))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// 1, 2 or replay.
    #[arg(long, default_value = "1")]
    scenario: String,
    #[arg(long)]
    a_h: Option<f64>,
    #[arg(long)]
    t_h: Option<f64>,
    #[arg(long)]
    a_f: Option<f64>,
    #[arg(long)]
    t_f: Option<f64>,
    /// Head speed CSV for replay.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "t")]
    time_col: String,
    #[arg(long, default_value = "v")]
    speed_col: String,
    #[arg(long)]
    out: PathBuf,
    /// Exit with code 3 if any spacing reaches zero.
    #[arg(long)]
    fail_on_collision: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// 1 or 2.
    #[arg(long, default_value = "1")]
    scenario: String,
    /// start:stop:step
    #[arg(long)]
    accel_grid: String,
    /// start:stop:step
    #[arg(long)]
    speed_grid: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fail_on_collision: bool,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long, default_value = "table1")]
    config: String,
    #[arg(long, default_value_t = DEFAULT_OMEGA_MAX)]
    omega_max: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    /// Also write the sampled gains as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ObserverArgs {
    #[arg(long, default_value = "table1")]
    config: String,
    #[arg(long, default_value_t = 1.0)]
    q_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    r_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, default_value = "harsh-brake")]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    v_cruise: Option<f64>,
    #[arg(long)]
    decel: Option<f64>,
    #[arg(long)]
    brake_time: Option<f64>,
    #[arg(long)]
    dwell_time: Option<f64>,
}

fn usage(msg: String) -> StcError {
    StcError::InvalidParameter(msg)
}

fn scenario_spec(args: &SimulateArgs) -> stc_core::Result<ScenarioSpec> {
    let mut spec = match args.scenario.as_str() {
        "1" => ScenarioSpec::table_scenario1(),
        "2" => ScenarioSpec::table_scenario2(),
        "replay" => {
            let path = args
                .trace
                .as_ref()
                .ok_or_else(|| usage("replay needs --trace".into()))?;
            ScenarioSpec::replay(load_head_trace(path, &args.time_col, &args.speed_col)?)
        }
        other => return Err(usage(format!("unknown scenario '{other}' (1, 2, replay)"))),
    };
    spec.a_h = args.a_h.unwrap_or(spec.a_h);
    spec.t_h = args.t_h.unwrap_or(spec.t_h);
    spec.a_f = args.a_f.unwrap_or(spec.a_f);
    spec.t_f = args.t_f.unwrap_or(spec.t_f);
    Ok(spec)
}

fn create_dir(dir: &Path) -> stc_core::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> stc_core::Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => {
            let (cfg, settings) = args.common.load()?;
            let spec = scenario_spec(&args)?;
            let rec = simulate(&cfg, &spec, &settings)?;
            create_dir(&args.out)?;
            export(&rec, &args.out.join("record.csv"), Format::Csv)?;
            export(&rec, &args.out.join("summary.json"), Format::Json)?;
            let collided = rec.collided();
            say!(
                "{} samples, min spacing {:?}, collisions {:?}",
                rec.len(),
                (0..=cfg.n_followers)
                    .map(|i| rec.min_spacing(i))
                    .collect::<Vec<_>>(),
                collided
            );
            if args.fail_on_collision && !collided.is_empty() {
                return Ok(ExitCode::from(EXIT_COLLISION));
            }
        }
        Command::Sweep(args) => {
            let (cfg, settings) = args.common.load()?;
            let kind = match args.scenario.as_str() {
                "1" => ScenarioKind::Scenario1,
                "2" => ScenarioKind::Scenario2,
                other => return Err(usage(format!("sweeps take scenario 1 or 2, not '{other}'"))),
            };
            let accel = parse_grid(&args.accel_grid)?;
            let speed = parse_grid(&args.speed_grid)?;
            let res = sweep_safe_range(&cfg, kind, &accel, &speed, &settings)?;
            create_dir(&args.out)?;
            export(&res, &args.out.join("sweep.csv"), Format::Csv)?;
            export(&res, &args.out.join("sweep.json"), Format::Json)?;
            let unsafe_cells = res.cells.iter().filter(|c| !c.chain_safe).count();
            say!("{} cells, {unsafe_cells} unsafe", res.cells.len());
            if args.fail_on_collision && unsafe_cells > 0 {
                return Ok(ExitCode::from(EXIT_COLLISION));
            }
        }
        Command::Stability(args) => {
            let (cfg, _) = load_config(&args.config)?;
            let c = linearize(&cfg.hdv, cfg.equilibrium.s_star_hdv);
            let rep = string_stability_check(
                &c,
                &cfg.gains,
                cfg.n_followers,
                args.omega_max,
                args.samples,
            )?;
            if let Some(out) = &args.out {
                export(&rep, out, Format::Csv)?;
            }
            say!(
                "{}",
                serde_json::to_string_pretty(&stc_core::io::Export::json_summary(&rep))?
            );
        }
        Command::ObserverDesign(args) => {
            let (cfg, _) = load_config(&args.config)?;
            let sys = linear_model(&cfg)?;
            let obs = design_gain(&sys, args.q_scale, args.r_scale)?;
            std::fs::write(&args.out, serde_json::to_string_pretty(&obs)? + "\n")?;
            say!(
                "decay rate {}, transient factor {}",
                obs.lambda_rate,
                obs.m0_factor
            );
        }
        Command::MakeTrace(args) => {
            if args.kind != "harsh-brake" {
                return Err(usage(format!(
                    "unknown trace kind '{}' (harsh-brake)",
                    args.kind
                )));
            }
            let d = HarshBrake::default();
            let hb = HarshBrake {
                v_cruise: args.v_cruise.unwrap_or(d.v_cruise),
                decel: args.decel.unwrap_or(d.decel),
                brake_time: args.brake_time.unwrap_or(d.brake_time),
                dwell_time: args.dwell_time.unwrap_or(d.dwell_time),
                ..d
            };
            write_head_trace(&hb.trace()?, &args.out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
