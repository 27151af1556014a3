//! `voltlab`: generate feeders and profiles, run closed-loop voltage
//! regulation experiments, compare controllers and check network files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voltlab_core::{
    apply_config_file, assert_locality, build_comm_graph, build_sensitivities,
    controllers::max_inner_step_size, export_messages, export_results, generate_profiles,
    generate_synthetic_feeder, load_network, load_profiles, mean_setpoint_deviation, run_dynamic,
    run_static, save_network, save_profiles, validate_topology, Branching, ControllerKind,
    ProfileUnits, RadialNetwork, RunConfig, RunResult, ScenarioTimeSeries, SensitivityMatrices,
};

#[derive(Parser)]
#[command(
    name = "voltlab",
    about = "Distribution feeder voltage regulation lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic radial feeder and write it as a network file.
    GenNetwork {
        /// RNG seed; identical seeds reproduce the feeder exactly.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of buses excluding the substation.
        #[arg(long, default_value_t = 30)]
        buses: usize,
        /// Topology style: chain, chain-heavy or random.
        #[arg(long, default_value = "chain-heavy")]
        branching: Branching,
        /// Output network file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate demand and PV profiles for a network.
    GenProfiles {
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario length in seconds.
        #[arg(long, default_value_t = 1800.0)]
        duration: f64,
        /// Sample spacing in seconds.
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        /// Output profile CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one controller against the plant over a scenario.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Controller: none, centralized, nested, two-metric, truncated, droop.
        #[arg(long)]
        controller: Option<ControllerKind>,
        /// Optional `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Freeze the scenario at this sample index and iterate to
        /// convergence instead of tracking the full series.
        #[arg(long)]
        hold: Option<usize>,
        /// Output directory for voltages/setpoints/duals/metrics CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Also export the agent message log (nested controller only).
        #[arg(long)]
        messages: bool,
    },
    /// Run every controller on the same scenario and tabulate violations.
    Compare {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional CSV copy of the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a network file and print sensitivity diagnostics.
    Check {
        #[arg(long)]
        network: PathBuf,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Units of the profile CSV: pu or si.
    #[arg(long, default_value = "pu")]
    units: ProfileUnits,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), String> {
    match command {
        Command::GenNetwork {
            seed,
            buses,
            branching,
            out,
        } => {
            let net = generate_synthetic_feeder(seed, buses, branching).map_err(err)?;
            save_network(&net, &out).map_err(err)?;
            println!(
                "wrote {} ({} buses + substation, {} cables, {} DERs)",
                out.display(),
                net.n(),
                net.cables.len(),
                net.ders.len()
            );
            Ok(())
        }
        Command::GenProfiles {
            network,
            seed,
            duration,
            dt,
            out,
        } => {
            let net = load_checked(&network)?;
            let ts = generate_profiles(seed, &net, duration, dt).map_err(err)?;
            save_profiles(&ts, &out).map_err(err)?;
            println!(
                "wrote {} ({} samples x {} buses, dt = {} s)",
                out.display(),
                ts.len(),
                net.n(),
                ts.dt()
            );
            Ok(())
        }
        Command::Run {
            scenario,
            controller,
            config,
            hold,
            out,
            messages,
        } => {
            let (net, sens, ts) = load_scenario(&scenario)?;
            let mut cfg = build_config(&net, &sens, config.as_deref())?;
            if let Some(kind) = controller {
                cfg.controller = kind;
            }
            let result = match hold {
                Some(k) => {
                    if k >= ts.len() {
                        return Err(format!(
                            "--hold {k} is out of range; the scenario has {} samples",
                            ts.len()
                        ));
                    }
                    run_static(
                        &net,
                        &sens,
                        &ts.p_generation[k],
                        &ts.p_demand[k],
                        &ts.q_demand[k],
                        &cfg,
                        cfg.max_outer,
                    )
                    .map_err(err)?
                }
                None => run_dynamic(&net, &sens, &ts, &cfg).map_err(err)?,
            };
            export_results(&result, &out).map_err(err)?;
            if messages {
                export_messages(&result.messages, out.join("messages.csv")).map_err(err)?;
            }
            if cfg.controller == ControllerKind::Nested {
                let graph = build_comm_graph(&net);
                if let Err(offenders) = assert_locality(&result.messages, &graph) {
                    return Err(format!(
                        "locality violated: {} messages crossed non-neighbor pairs, first {} -> {}",
                        offenders.len(),
                        offenders[0].from,
                        offenders[0].to
                    ));
                }
            }
            print_run_summary(&result);
            if let Some(at) = result.converged_at {
                println!("converged after {at} outer iterations");
            } else if hold.is_some() {
                println!("did not converge within {} outer iterations", cfg.max_outer);
            }
            println!("results in {}", out.display());
            Ok(())
        }
        Command::Compare {
            scenario,
            config,
            out,
        } => {
            let (net, sens, ts) = load_scenario(&scenario)?;
            let base = build_config(&net, &sens, config.as_deref())?;
            compare(&net, &sens, &ts, base, out.as_deref())
        }
        Command::Check { network } => check(&network),
    }
}

fn err(e: voltlab_core::Error) -> String {
    e.to_string()
}

fn load_checked(path: &std::path::Path) -> Result<RadialNetwork, String> {
    let net = load_network(path).map_err(err)?;
    let violations = validate_topology(&net);
    if let Some(v) = violations.first() {
        return Err(format!("{}: invalid network: {v}", path.display()));
    }
    Ok(net)
}

fn load_scenario(
    args: &ScenarioArgs,
) -> Result<(RadialNetwork, SensitivityMatrices, ScenarioTimeSeries), String> {
    let net = load_checked(&args.network)?;
    let sens = build_sensitivities(&net).map_err(err)?;
    let ts = load_profiles(&args.profiles, args.units, net.s_base).map_err(err)?;
    if ts.p_demand[0].len() != net.n() {
        return Err(format!(
            "profile covers {} buses but the network has {}",
            ts.p_demand[0].len(),
            net.n()
        ));
    }
    Ok((net, sens, ts))
}

fn build_config(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    config: Option<&std::path::Path>,
) -> Result<RunConfig, String> {
    let base = RunConfig::tuned_for(net, sens);
    match config {
        Some(path) => apply_config_file(base, path).map_err(err),
        None => Ok(base),
    }
}

fn print_run_summary(result: &RunResult) {
    let m = &result.metrics;
    println!(
        "{}: {} instants, worst-bus AVV {:.3e} pu, max violation {:.3e} pu, mean controller time {:.3} ms",
        result.controller.name(),
        result.timestamps.len(),
        m.avv_worst_bus,
        m.max_violation,
        m.mean_iter_time_ms
    );
    if result.max_excursion > 0.0 {
        println!(
            "max setpoint excursion {:.3e} pu ({:.3}% of capacity)",
            result.max_excursion,
            100.0 * result.max_relative_excursion
        );
    }
}

fn compare(
    net: &RadialNetwork,
    sens: &SensitivityMatrices,
    ts: &ScenarioTimeSeries,
    base: RunConfig,
    out: Option<&std::path::Path>,
) -> Result<(), String> {
    let mut rows = Vec::new();
    let mut reference: Option<RunResult> = None;
    for kind in ControllerKind::ALL {
        let cfg = RunConfig {
            controller: kind,
            ..base.clone()
        };
        let mut result = run_dynamic(net, sens, ts, &cfg).map_err(err)?;
        if let Some(r) = &reference {
            result.metrics.mean_setpoint_deviation_vs_reference = mean_setpoint_deviation(&result, r);
        }
        if kind == ControllerKind::Centralized {
            reference = Some(result.clone());
        }
        rows.push(result);
    }
    // The reference exists after the pass; fill in the rows recorded before it.
    if let Some(r) = &reference {
        for row in &mut rows {
            if row.metrics.mean_setpoint_deviation_vs_reference.is_nan()
                && row.controller != ControllerKind::Centralized
            {
                row.metrics.mean_setpoint_deviation_vs_reference = mean_setpoint_deviation(row, r);
            }
        }
    }

    let centralized_avv = rows
        .iter()
        .find(|r| r.controller == ControllerKind::Centralized)
        .map(|r| r.metrics.avv_worst_bus)
        .unwrap_or(f64::NAN);

    println!(
        "{:<12} {:>14} {:>12} {:>16} {:>12}",
        "controller", "worst AVV [pu]", "vs central", "mean |dq| [pu]", "time [ms]"
    );
    let mut csv = String::from(
        "controller,avv_worst_bus,avv_ratio_vs_centralized,mean_setpoint_deviation,mean_iter_time_ms\n",
    );
    for row in &rows {
        let m = &row.metrics;
        let ratio = if centralized_avv > 0.0 {
            m.avv_worst_bus / centralized_avv
        } else {
            f64::NAN
        };
        println!(
            "{:<12} {:>14.3e} {:>12.2} {:>16.3e} {:>12.3}",
            row.controller.name(),
            m.avv_worst_bus,
            ratio,
            m.mean_setpoint_deviation_vs_reference,
            m.mean_iter_time_ms
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.controller.name(),
            m.avv_worst_bus,
            ratio,
            m.mean_setpoint_deviation_vs_reference,
            m.mean_iter_time_ms
        ));
    }
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(|e| format!("writing {}: {e}", path.display()))?;
        println!("table written to {}", path.display());
    }
    Ok(())
}

fn check(path: &std::path::Path) -> Result<(), String> {
    let net = load_network(path).map_err(err)?;
    let violations = validate_topology(&net);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        return Err(format!(
            "{}: {} topology violations",
            path.display(),
            violations.len()
        ));
    }
    let sens = build_sensitivities(&net).map_err(err)?;
    let n = net.n();
    let mut off_diag = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j && sens.is_adjacent(i, j) {
                off_diag += 1;
            }
        }
    }
    println!("{}: topology OK", path.display());
    println!(
        "  {} buses + substation, {} cables, {} DERs",
        n,
        net.cables.len(),
        net.ders.len()
    );
    println!(
        "  voltage limits [{:.4}, {:.4}] pu, slack {:.4} pu",
        net.v_min, net.v_max, net.v0
    );
    println!(
        "  lambda_max(X) = {:.6e}, lambda_min(X) = {:.6e}",
        sens.lambda_max_x(),
        sens.lambda_min_x()
    );
    println!(
        "  max stable inner step 2/lambda_max(X) = {:.6e}",
        max_inner_step_size(&sens)
    );
    println!(
        "  X^-1 sparsity: {} off-diagonal entries on {} directed cable slots",
        off_diag,
        2 * net.cables.len()
    );
    Ok(())
}
