use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dspodfl::harness::{self, ConfigError, Curve, Environment, ExperimentConfig};
use dspodfl::mc;
use dspodfl::objectives::TheoryConstants;
use dspodfl::par::{self, Exec};
use dspodfl::theory::{self, DiminishingInputs, Regime, TheoryError};
use dspodfl::Error;

#[derive(Parser)]
#[command(name = "dspodfl", version, about = "Decentralized sporadic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config (or re-run a manifest).
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory; defaults to the config's output_dir under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate step-size feasibility, contraction rate and error floors.
    Theory(TheoryArgs),
    /// Write long-format plot data from a results directory.
    Plotdata {
        dir: PathBuf,
        /// accuracy-vs-delay, error-vs-iteration, envelope-overlay, or all.
        #[arg(long, default_value = "all")]
        curve: String,
    },
    /// Monte-Carlo checks of the mixing law, contraction factor and delay model.
    McVerify(McArgs),
}

#[derive(Args)]
struct Overrides {
    /// Dot-path override, e.g. --set schedule.alpha=0.005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Convex,
    Pl,
    Diminishing,
}

#[derive(Args)]
struct TheoryArgs {
    /// Derive constants from an experiment config instead of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum, default_value = "convex")]
    regime: RegimeArg,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 4.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    zeta: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma2: f64,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 0.9)]
    d_min: f64,
    #[arg(long, default_value_t = 1.0)]
    d_max: f64,
    #[arg(long, default_value_t = 0.5)]
    rho_tilde: f64,
    /// Constant step to query; defaults to half of alpha_max.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    alpha0: f64,
    #[arg(long, default_value_t = 1e3)]
    gamma: f64,
    /// Defaults to 1/alpha0.
    #[arg(long)]
    gamma3: Option<f64>,
    /// Iteration at which to evaluate the envelope.
    #[arg(long, default_value_t = 1000)]
    k: u64,
    /// Initial (opt_err, cons_err).
    #[arg(long, num_args = 2, default_values_t = [1.0, 0.0])]
    nu0: Vec<f64>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long, default_value_t = 20)]
    graphs: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, default_value_t = 8)]
    m_max: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Disable thread-level parallelism.
    #[arg(long)]
    sequential: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status: 1 for invalid input, 2 for runtime failure.
fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Theory(_) => 1,
        _ => 2,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(classify(&e))
}

/// Load a config; an unreadable file counts as invalid input.
fn load(path: &std::path::Path, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path, overrides).map_err(|e| match e {
        Error::Io { path, source } => ConfigError::Read { path, reason: source.to_string() }.into(),
        other => other,
    })
}

fn print_json(v: &Value) {
    use std::io::Write;
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, overrides, out } => cmd_run(config, &overrides.set, out),
        Cmd::Validate { config, overrides } => cmd_validate(config, &overrides.set),
        Cmd::Theory(a) => cmd_theory(&a),
        Cmd::Plotdata { dir, curve } => cmd_plotdata(&dir, &curve),
        Cmd::McVerify(a) => cmd_mc(&a),
    };
    match res {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

fn cmd_run(config: PathBuf, overrides: &[String], out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let cfg = load(&config, overrides)?;
    let v = harness::validate(&cfg)?;
    for w in &v.warnings {
        log::warn!("{w}");
    }
    let dir = out.unwrap_or_else(|| cfg.output_path());
    let outcome = harness::execute_into(&cfg, &dir)?;
    let failed = outcome.summary.cells.iter().filter(|c| !c.ok).count();
    println!("results written to {}", outcome.dir.display());
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see summary.json");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(config: PathBuf, overrides: &[String]) -> Result<ExitCode, Error> {
    let cfg = load(&config, overrides)?;
    let v = harness::validate(&cfg)?;
    print_json(&json!({ "valid": true, "warnings": v.warnings, "alpha_max": v.alpha_max }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_plotdata(dir: &std::path::Path, curve: &str) -> Result<ExitCode, Error> {
    let curves = if curve == "all" {
        vec![Curve::AccuracyVsDelay, Curve::ErrorVsIteration, Curve::EnvelopeOverlay]
    } else {
        vec![curve.parse::<Curve>()?]
    };
    if !dir.join("runs").is_dir() {
        return Err(ConfigError::Read { path: dir.display().to_string(), reason: "no runs/ directory".into() }.into());
    }
    for c in curves {
        println!("{}", harness::emit_plot_data(dir, c)?.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_theory(a: &TheoryArgs) -> Result<ExitCode, Error> {
    if let Some(path) = &a.config {
        let mut cfg = load(path, &a.overrides.set)?;
        cfg.theory_overlay = true;
        let env = Environment::build(&cfg, cfg.seeds.first().copied().unwrap_or(0))?;
        if let Some(e) = env.theory_error {
            return Err(ConfigError::Invalid(vec![e]).into());
        }
        print_json(&serde_json::to_value(&env.theory)?);
        return Ok(ExitCode::SUCCESS);
    }
    let c = TheoryConstants { mu: a.mu, beta: a.beta, delta: a.delta, zeta: a.zeta, sigma2: a.sigma2, exact: true };
    let nu0 = [a.nu0[0], a.nu0[1]];
    let (dmin, dmax, rt, m) = (a.d_min, a.d_max, a.rho_tilde, a.m);
    if !(0.0..1.0).contains(&rt) {
        return Err(TheoryError::BadRhoTilde(rt).into());
    }
    let out = match a.regime {
        RegimeArg::Convex | RegimeArg::Pl => {
            let pl = matches!(a.regime, RegimeArg::Pl);
            let f = if pl { theory::max_step_pl(&c, dmin, dmax, rt)? } else { theory::max_step_convex(&c, dmin, dmax, rt) };
            let alpha = a.alpha.unwrap_or(0.5 * f.alpha_max);
            let f = f.query(alpha);
            let (rho, psi) = if pl {
                (theory::spectral_radius_pl(&c, alpha, dmin, dmax, rt, m)?, theory::phi_psi_pl(&c, alpha, dmin, dmax, rt, m)?.psi)
            } else {
                (
                    theory::spectral_radius_convex(&c, alpha, dmin, dmax, rt, m)?,
                    theory::phi_psi_convex(&c, alpha, dmin, dmax, rt, m)?.psi,
                )
            };
            let gap = if pl {
                theory::asymptotic_gap_pl(&c, alpha, dmin, dmax, rt, m, rho.value)
            } else {
                theory::asymptotic_gap_convex(&c, alpha, dmin, dmax, rt, m, rho.value)
            };
            let env = theory::geometric_envelope(nu0, rho.value, psi, a.k);
            json!({
                "regime": if pl { Regime::Pl } else { Regime::Convex },
                "alpha": alpha,
                "feasibility": f,
                "rho_phi": rho,
                "asymptotic_gap": gap.ok(),
                "envelope": env.ok().map(|e| json!({ "k": a.k, "opt": e[0], "cons": e[1] })),
            })
        }
        RegimeArg::Diminishing => {
            let gamma3 = a.gamma3.unwrap_or(1.0 / a.alpha0);
            let f = theory::diminishing_feasibility(&c, rt, gamma3, a.alpha0)?;
            let inputs = DiminishingInputs { alpha0: a.alpha0, gamma: a.gamma, gamma3, rho_tilde_sup: rt, m };
            let env = theory::sublinear_envelope(nu0, &c, &inputs, a.k)?;
            json!({
                "regime": Regime::Diminishing,
                "feasibility": f,
                "inputs": inputs,
                "envelope": { "k": a.k, "opt": env[0], "cons": env[1] },
            })
        }
    };
    print_json(&out);
    Ok(ExitCode::SUCCESS)
}

fn cmd_mc(a: &McArgs) -> Result<ExitCode, Error> {
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let results = par::map(exec, a.graphs, |g| -> Result<Value, Error> {
        let inst = mc::random_instance(g as u64, a.m_max, a.n, a.seed)?;
        let s = a.seed.wrapping_add(g as u64);
        let b = &inst.profile.b;
        let moments = mc::mixing_moments(&inst.topology, &inst.weights, b, a.draws, s, Exec::Sequential)?;
        let contraction =
            mc::contraction(&inst.topology, &inst.weights, b, &inst.theta, a.draws, s, Exec::Sequential)?;
        let delay = mc::processing_delay(&inst.topology, &inst.profile, a.draws, s, Exec::Sequential);
        Ok(json!({ "instance": g, "m": inst.topology.m, "moments": moments, "contraction": contraction, "delay": delay }))
    });
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r?);
    }
    let count = |key: &str, field: &str| -> usize {
        reports.iter().map(|r| r[key][field].as_u64().unwrap_or(0) as usize).sum()
    };
    let (violations, compared) = (count("moments", "violations"), count("moments", "compared"));
    // Under exact moments each entry exceeds 3 standard errors with
    // probability 0.0027; allow that many plus three deviations.
    let expected = 0.0027 * compared as f64;
    let moments_ok = (violations as f64) <= expected + 3.0 * expected.sqrt()
        && reports.iter().all(|r| r["moments"]["r_zero_max_line_sum"].as_f64().unwrap_or(1.0) <= 1e-12);
    let all = |key: &str| reports.iter().filter(|r| r[key]["pass"].as_bool() == Some(true)).count();
    let contraction_ok = all("contraction") == reports.len();
    let delay_ok = all("delay") == reports.len();
    let pass = moments_ok && contraction_ok && delay_ok;
    let probe = mc::rho_tilde_monotonicity(a.graphs, a.m_max, &[1.0, 0.8, 0.6, 0.4, 0.2, 0.05], a.seed, exec)?;
    let report = json!({
        "pass": pass,
        "moments": { "pass": moments_ok, "violations": violations, "compared": compared, "expected_violations": expected },
        "contraction": { "pass": contraction_ok, "passed": all("contraction"), "total": reports.len() },
        "delay": { "pass": delay_ok, "passed": all("delay"), "total": reports.len() },
        "rho_tilde_monotonicity": probe,
        "instances": reports,
    });
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")
            .map_err(|source| Error::Io { path: p.display().to_string(), source })?;
    }
    println!(
        "moments: {} ({violations}/{compared} entries beyond 3 SE)\ncontraction: {}\ndelay: {}\n\
         rho_tilde monotone in b: {} violations over {} graphs (reported only)",
        verdict(moments_ok),
        verdict(contraction_ok),
        verdict(delay_ok),
        probe.violations.len(),
        probe.instances
    );
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
