//! Command-line driver: one subcommand per run mode, fed by a TOML
//! config or a shipped preset, with scalar flags overriding config keys.

use clap::{Args, Parser, Subcommand};
use finlat::config::{
    parse_config, Config, Mode, NumericsConfig, OutputConfig, PacketConfig, PhysicsConfig,
};
use finlat::runner::run;
use finlat::FinlatError;
use std::path::PathBuf;
use std::process::ExitCode;

const PRESETS: &[(&str, &str)] = &[
    ("fig3", include_str!("../presets/fig3.toml")),
    ("fig4", include_str!("../presets/fig4.toml")),
    ("fig5", include_str!("../presets/fig5.toml")),
    ("fig6", include_str!("../presets/fig6.toml")),
    ("bandmap9", include_str!("../presets/bandmap9.toml")),
    ("bandmap15", include_str!("../presets/bandmap15.toml")),
];

#[derive(Parser)]
#[command(
    name = "finlat",
    version,
    about = "Matter-wave dynamics in finite, time-dependent optical lattices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Export band tables, the complex dispersion and the cavity geometry
    Bandmap(RunArgs),
    /// Scan lattice transmission over incoming momentum
    Transmission(RunArgs),
    /// Propagate one packet: ramp, trapping, collapse and revival
    Propagate(RunArgs),
    /// Repeat a propagation over a parameter sweep and fit the scaling
    RevivalSweep(RunArgs),
    /// Exact hard-wall reference: box revival laws and traces
    BoxOracle(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset: fig3, fig4, fig5, fig6, bandmap9, bandmap15
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<String>,
    /// Run the convergence gates and write the manifest, nothing else
    #[arg(long)]
    check: bool,
    /// Peak lattice depth in E_R (overrides the config)
    #[arg(long)]
    v0_er: Option<f64>,
    /// Envelope waist in um (overrides the config)
    #[arg(long)]
    w_z_um: Option<f64>,
    /// Incoming momentum in p_R (overrides the config)
    #[arg(long)]
    p_in_pr: Option<f64>,
    /// Momentum spread in p_R (overrides the config)
    #[arg(long)]
    sigma_p_pr: Option<f64>,
    /// Time horizon in ms (overrides the config)
    #[arg(long)]
    t_final_ms: Option<f64>,
    /// Time step in t_R (overrides the config)
    #[arg(long)]
    dt_tr: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, mode) = match &cli.cmd {
        Cmd::Bandmap(a) => (a, Mode::Bandmap),
        Cmd::Transmission(a) => (a, Mode::Transmission),
        Cmd::Propagate(a) => (a, Mode::Propagate),
        Cmd::RevivalSweep(a) => (a, Mode::RevivalSweep),
        Cmd::BoxOracle(a) => (a, Mode::BoxOracle),
    };
    match execute(args, mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &RunArgs, mode: Mode) -> finlat::Result<()> {
    let config = load_config(args, mode)?;
    let summary = run(&config, args.check)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for g in &summary.gates {
        println!(
            "gate {}: {} (measured {:.3e}, bound {:.3e})",
            g.name,
            if g.pass { "pass" } else { "FAIL" },
            g.measured,
            g.bound
        );
    }
    // +1 for the manifest, which every run writes.
    println!(
        "wrote {} file(s) to {}",
        summary.outputs.len() + 1,
        summary.out_dir.display()
    );
    Ok(())
}

fn load_config(args: &RunArgs, mode: Mode) -> finlat::Result<Config> {
    let mut config = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        parse_config(&text)?
    } else if let Some(name) = &args.preset {
        let text = PRESETS
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                FinlatError::Config(format!(
                    "unknown preset \"{name}\"; shipped presets: {}",
                    known.join(", ")
                ))
            })?;
        parse_config(text)?
    } else {
        Config {
            mode,
            physics: PhysicsConfig {
                species: None,
                mass_kg: None,
                period_nm: None,
                beams: None,
                v0_er: None,
                w_z_um: None,
                guide_v_er: None,
                guide_w_um: None,
            },
            packet: None,
            schedule: None,
            numerics: None,
            scan: None,
            sweep: None,
            output: None,
            box_params: None,
        }
    };
    if config.mode != mode {
        return Err(FinlatError::Config(format!(
            "config is a {} run but the {} subcommand was invoked",
            mode_key(config.mode),
            mode_key(mode)
        )));
    }

    if let Some(v) = args.v0_er {
        config.physics.v0_er = Some(v);
    }
    if let Some(w) = args.w_z_um {
        config.physics.w_z_um = Some(w);
    }
    if args.p_in_pr.is_some() || args.sigma_p_pr.is_some() {
        let packet = config.packet.get_or_insert(PacketConfig {
            p_in_pr: None,
            sigma_p_pr: None,
            z0_um: None,
        });
        if let Some(p) = args.p_in_pr {
            packet.p_in_pr = Some(p);
        }
        if let Some(s) = args.sigma_p_pr {
            packet.sigma_p_pr = Some(s);
        }
    }
    if args.t_final_ms.is_some() || args.dt_tr.is_some() {
        let numerics = config.numerics.get_or_insert(NumericsConfig {
            dt_tr: None,
            points_per_period: None,
            kappa_min: None,
            monodromy_steps: None,
            z_samples: None,
            t_final_ms: None,
            sample_interval_tr: None,
            stop_threshold: None,
        });
        if let Some(t) = args.t_final_ms {
            numerics.t_final_ms = Some(t);
        }
        if let Some(dt) = args.dt_tr {
            numerics.dt_tr = Some(dt);
        }
    }
    if let Some(out) = &args.out {
        let output = config.output.get_or_insert(OutputConfig {
            dir: None,
            carpet: None,
            carpet_interval_ms: None,
        });
        output.dir = Some(out.clone());
    }
    Ok(config)
}

fn mode_key(mode: Mode) -> &'static str {
    match mode {
        Mode::Bandmap => "bandmap",
        Mode::Transmission => "transmission",
        Mode::Propagate => "propagate",
        Mode::RevivalSweep => "revival-sweep",
        Mode::BoxOracle => "box-oracle",
    }
}
