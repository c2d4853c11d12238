//! Command-line front end: build codes and key generators, run seeded
//! simulations, and emit privacy, reliability, and convergence-bound
//! reports as JSON and CSV files.
//!
//! Every subcommand reads one JSON config (`--config`), validates the
//! sections it needs (reporting every violation at once), and writes its
//! artifacts into the output directory. Identical config and seed produce
//! byte-identical outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use seccogc::config::{ConfigError, ExperimentConfig, Requires};
use seccogc::convergence::{empirical_vs_bound, ConvergenceParams};
use seccogc::privacy::{self, PrivacyParams};
use seccogc::protocol::{run_training, TrainOptions, TrainingTrace};
use seccogc::reliability::{outage_exact, outage_monte_carlo, ReliabilityReport};
use seccogc::secret_keys::verify_conditions;
use seccogc::trainer::{dissimilarity_grid, fit_dissimilarity, Objective};

#[derive(Parser)]
#[command(name = "seccogc", version, about = "Secure cooperative gradient coding simulator")]
struct Cli {
    /// Path to the experiment JSON config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the subcommand's primary seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config output.dir, then "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trace detail for simulate.
    #[arg(long, global = true, value_enum)]
    trace: Option<TraceLevel>,
    /// Monte Carlo trials for reliability estimation.
    #[arg(long, global = true)]
    trials: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the gradient-code pair and write code.json.
    GenCode,
    /// Build the key generator matrix; write keys.json and keys_report.json.
    GenKeys,
    /// Run a full training simulation; write trace.csv (and summaries).
    Simulate,
    /// Evaluate every privacy accountant; write privacy.json and privacy.csv.
    PrivacyReport,
    /// Outage probability, exact or Monte Carlo; write reliability.{json,csv}.
    Reliability,
    /// Seeded runs compared against the convergence bound; write bound.{json,csv}.
    Bound,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TraceLevel {
    None,
    Summary,
    Full,
}

struct CliError {
    message: String,
    violations: Vec<String>,
}

impl CliError {
    fn new(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn to_json(&self) -> String {
        json!({"error": self.message, "violations": self.violations}).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid { violations } => CliError {
                message: "invalid configuration".into(),
                violations,
            },
            other => CliError::new(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::new("--config <path> is required"))?;
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::new(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    apply_seed_override(&mut cfg, cli);

    let out_dir = cli
        .out
        .clone()
        .or_else(|| {
            cfg.output
                .as_ref()
                .and_then(|o| o.dir.as_ref())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)?;

    match cli.cmd {
        Cmd::GenCode => gen_code(&cfg, &out_dir),
        Cmd::GenKeys => gen_keys(&cfg, &out_dir),
        Cmd::Simulate => simulate(&cfg, cli, &out_dir),
        Cmd::PrivacyReport => privacy_report(&cfg, &out_dir),
        Cmd::Reliability => reliability(&cfg, cli, &out_dir),
        Cmd::Bound => bound(&cfg, cli, &out_dir),
    }
}

/// `--seed` overrides the seed the subcommand keys its randomness on.
fn apply_seed_override(cfg: &mut ExperimentConfig, cli: &Cli) {
    let Some(seed) = cli.seed else { return };
    match cli.cmd {
        Cmd::GenCode => {
            if let Some(c) = &mut cfg.code {
                c.seed = seed;
            }
        }
        Cmd::GenKeys => {
            if let Some(k) = &mut cfg.keys {
                k.seed = seed;
            }
        }
        Cmd::Simulate | Cmd::Bound => {
            if let Some(t) = &mut cfg.training {
                t.seed = seed;
            }
        }
        Cmd::Reliability | Cmd::PrivacyReport => {}
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_code(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::CODE)?;
    let code = cfg.build_code()?;
    let check = code.verify(1e-9);
    let text = serde_json::to_string_pretty(&code).expect("serializable");
    write_file(&out.join("code.json"), &text)?;
    println!(
        "code: K={} s={} f={} max_error={:.3e}",
        code.k, code.s, code.f, check.max_error
    );
    Ok(())
}

fn gen_keys(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::KEYS)?;
    let gm = cfg.build_keys()?;
    let report = verify_conditions(&gm, 1e-9);
    write_file(
        &out.join("keys.json"),
        &serde_json::to_string_pretty(&gm).expect("serializable"),
    )?;
    write_file(
        &out.join("keys_report.json"),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    println!(
        "keys: K={} L={} rank={} correctness_residual={:.3e} fairness_spread={:.3e}",
        gm.k, gm.l, report.numerical_rank, report.correctness_residual, report.fairness_spread
    );
    Ok(())
}

fn trace_csv(trace: &TrainingTrace) -> String {
    let mut csv = String::from("round,success,event_label,loss,grad_norm,r_t,combinator_index\n");
    for row in &trace.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.round,
            u8::from(row.success),
            row.event.label(),
            row.loss,
            row.grad_norm,
            row.r_t,
            fmt_opt(&row.combinator)
        );
    }
    csv
}

fn simulate(cfg: &ExperimentConfig, cli: &Cli, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::SIMULATE)?;
    let code = cfg.build_code()?;
    let gm = cfg.build_keys()?;
    let net = cfg.build_network()?;
    let obj = cfg.build_objective()?;
    let solver = cfg.build_solver();
    let tr = cfg.training.as_ref().expect("validated");

    let level = cli.trace.unwrap_or_else(|| {
        match cfg
            .output
            .as_ref()
            .and_then(|o| o.trace.as_deref())
            .unwrap_or("summary")
        {
            "none" => TraceLevel::None,
            "full" => TraceLevel::Full,
            _ => TraceLevel::Summary,
        }
    });
    let opts = TrainOptions {
        t_threshold: tr.t,
        seed: tr.seed,
        on_failure: tr.on_failure,
        clip_radius: tr.clip_radius,
        record_full: level == TraceLevel::Full,
    };
    let trace = run_training(&code, &gm, &net, &obj, &solver, &opts)
        .map_err(|e| CliError::new(e.to_string()))?;

    write_file(&out.join("trace.csv"), &trace_csv(&trace))?;
    if level != TraceLevel::None {
        let successes = trace.rows.iter().filter(|r| r.success).count();
        let summary = json!({
            "rounds_executed": trace.rounds_executed,
            "t_c": trace.t_c,
            "successes": successes,
            "final_loss": trace.final_loss,
            "threshold": tr.t,
            "seed": tr.seed,
        });
        write_file(
            &out.join("summary.json"),
            &serde_json::to_string_pretty(&summary).expect("serializable"),
        )?;
    }
    if level == TraceLevel::Full {
        let full = trace.full.as_ref().expect("recorded");
        write_file(
            &out.join("trace_full.json"),
            &serde_json::to_string(&full).expect("serializable"),
        )?;
    }
    println!(
        "simulate: rounds={} successes={} final_loss={}",
        trace.rounds_executed, trace.t_c, trace.final_loss
    );
    Ok(())
}

fn privacy_report(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::PRIVACY)?;
    let code = cfg.build_code()?;
    let gm = cfg.build_keys()?;
    let net = cfg.build_network()?;
    let mut params: PrivacyParams = cfg.build_privacy_params();
    let bern = &cfg.privacy.as_ref().expect("validated").bernstein;
    let trials = bern.estimate_trials.unwrap_or(10_000).max(1_000);

    // Estimate missing Bernstein radii from variance samples; the largest
    // per-relay radius keeps the tail guarantee valid for every relay.
    if bern.r1.is_none() {
        let mut r1 = 0.0f64;
        for k in 0..code.k {
            let samples = privacy::sample_relay_variance(k, &code, &net, &gm, trials, 11)
                .map_err(|e| CliError::new(e.to_string()))?;
            let r = privacy::estimate_bernstein_radius(&samples, params.deltas.delta_prime)
                .map_err(|e| CliError::new(e.to_string()))?;
            r1 = r1.max(r);
        }
        params.r1 = r1;
    }
    if bern.r2.is_none() {
        let samples = privacy::sample_server_variance(0, &code, &net, &gm, trials, 13)
            .map_err(|e| CliError::new(e.to_string()))?;
        params.r2 = privacy::estimate_bernstein_radius(&samples, params.deltas.delta_prime)
            .map_err(|e| CliError::new(e.to_string()))?;
    }

    let report = privacy::privacy_report(&code, &net, &gm, &params)
        .map_err(|e| CliError::new(e.to_string()))?;

    write_file(
        &out.join("privacy.json"),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;

    let mut csv = String::from("layer,relay,target,value,delta\n");
    for (m, row) in report.mu1.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if m != k {
                let _ = writeln!(csv, "mu1,{m},{k},{v},");
            }
        }
    }
    for e in &report.mu2 {
        let _ = writeln!(
            csv,
            "mu2_derivation,{},{},{},",
            e.relay, e.target, e.derivation_form
        );
        let _ = writeln!(
            csv,
            "mu2_statement,{},{},{},",
            e.relay, e.target, e.statement_form
        );
    }
    for (k, &v) in report.mu3.iter().enumerate() {
        let _ = writeln!(csv, "mu3,{k},,{v},");
    }
    for (m, row) in report.delta1.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            if m != k {
                let _ = writeln!(csv, "eps1,{m},{k},{},{d}", report.eps1);
            }
        }
    }
    for e in &report.relay_ldp {
        let _ = writeln!(
            csv,
            "eps2,{},{},{},{}",
            e.relay,
            e.target,
            fmt_opt(&e.eps2),
            fmt_opt(&e.delta2)
        );
        let _ = writeln!(
            csv,
            "eps3,{},{},{},{}",
            e.relay,
            e.target,
            fmt_opt(&e.eps3),
            fmt_opt(&e.delta3)
        );
    }
    for f in &report.failure {
        let _ = writeln!(csv, "eps4,,{},{},", f.target, fmt_opt(&f.eps4));
        let _ = writeln!(csv, "eps5,,{},{},", f.target, fmt_opt(&f.eps5));
        for (k, &p) in f.p_tilde.iter().enumerate() {
            if p > 0.0 {
                let _ = writeln!(csv, "p_tilde,{k},{},{p},", f.target);
            }
        }
    }
    for (k, v) in report.nu_bar.iter().enumerate() {
        let _ = writeln!(csv, "nu_bar,{k},,{},{}", v.exact, v.discrepancy);
    }
    let _ = writeln!(csv, "eps6,,,{},", report.eps6);
    let _ = writeln!(csv, "eps7,,,{},", report.eps7);
    write_file(&out.join("privacy.csv"), &csv)?;
    println!(
        "privacy: eps1={:.4} eps6={:.4} r1={:.4e} r2={:.4e}",
        report.eps1, report.eps6, report.r1, report.r2
    );
    Ok(())
}

fn reliability_csv(r: &ReliabilityReport) -> String {
    format!(
        "method,p1,p2,p3,p_outage,trials,ci_half_width\n{},{},{},{},{},{},{}\n",
        match r.method {
            seccogc::reliability::Method::Enumeration => "enumeration",
            seccogc::reliability::Method::MonteCarlo => "monte_carlo",
        },
        r.p1,
        r.p2,
        r.p3,
        r.p_outage,
        fmt_opt(&r.trials),
        fmt_opt(&r.ci_half_width),
    )
}

fn reliability(cfg: &ExperimentConfig, cli: &Cli, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::RELIABILITY)?;
    let code = cfg.build_code()?;
    let net = cfg.build_network()?;
    let report = match cli.trials {
        Some(trials) => {
            if trials < 1_000 {
                return Err(CliError::new("--trials must be at least 1000"));
            }
            outage_monte_carlo(&code, &net, trials, cli.seed.unwrap_or(0))
        }
        None => outage_exact(&code, &net).map_err(|e| {
            CliError::new(format!("{e}; pass --trials <n> for a Monte Carlo estimate"))
        })?,
    };
    write_file(
        &out.join("reliability.json"),
        &serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    write_file(&out.join("reliability.csv"), &reliability_csv(&report))?;
    println!(
        "reliability: P_O={} (P1={}, P2={}, P3={})",
        report.p_outage, report.p1, report.p2, report.p3
    );
    Ok(())
}

fn bound(cfg: &ExperimentConfig, cli: &Cli, out: &Path) -> Result<(), CliError> {
    cfg.validate(Requires::SIMULATE)?;
    let code = cfg.build_code()?;
    let gm = cfg.build_keys()?;
    let net = cfg.build_network()?;
    let obj = cfg.build_objective()?;
    let solver = cfg.build_solver();
    let tr = cfg.training.as_ref().expect("validated");
    let bcfg = cfg.bound.clone().unwrap_or_default();

    let p_outage = match bcfg.p_outage {
        Some(p) => p,
        None => match outage_exact(&code, &net) {
            Ok(r) => r.p_outage,
            Err(_) => outage_monte_carlo(&code, &net, cli.trials.unwrap_or(100_000), 7).p_outage,
        },
    };
    let g_smooth = bcfg.g_smooth.unwrap_or_else(|| obj.smoothness());
    let kappa2 = bcfg.kappa2.unwrap_or_else(|| {
        let grid = dissimilarity_grid(&obj, 32, 5);
        fit_dissimilarity(&obj, &grid).1
    });
    // Full-batch gradients carry no data variance; minibatch logistic runs
    // should supply their own estimate.
    let sigma2 = bcfg.sigma2.unwrap_or(match &obj {
        Objective::Quadratic { .. } => 0.0,
        Objective::Logistic { .. } if tr.batch.is_none() => 0.0,
        Objective::Logistic { .. } => 0.0,
    });
    let l0_gap = obj.global_loss(&vec![0.0; obj.dim()]);

    let params = ConvergenceParams {
        t_rounds: tr.t,
        k_clients: code.k,
        g_smooth,
        a: tr.a.clone(),
        sigma2,
        kappa2,
        beta2: 1.0,
        p_outage,
        l0_gap,
        eta: tr.eta,
    };

    let runs = bcfg.runs.unwrap_or(30);
    let mut rows = Vec::new();
    let mut violations = 0u32;
    let mut csv = String::from("run,seed,empirical,bound,violated,t_c,rounds\n");
    for i in 0..runs {
        let seed = tr.seed.wrapping_add(i as u64);
        let opts = TrainOptions {
            t_threshold: tr.t,
            seed,
            on_failure: tr.on_failure,
            clip_radius: tr.clip_radius,
            record_full: false,
        };
        let trace = run_training(&code, &gm, &net, &obj, &solver, &opts)
            .map_err(|e| CliError::new(format!("run {i}: {e}")))?;
        let cmp = empirical_vs_bound(&trace, &params).map_err(|e| CliError::new(e.to_string()))?;
        violations += u32::from(cmp.violated);
        let _ = writeln!(
            csv,
            "{i},{seed},{},{},{},{},{}",
            cmp.empirical,
            cmp.bound,
            u8::from(cmp.violated),
            cmp.t_c,
            cmp.rounds_executed
        );
        rows.push(json!({
            "run": i,
            "seed": seed,
            "empirical": cmp.empirical,
            "bound": cmp.bound,
            "violated": cmp.violated,
            "t_c": cmp.t_c,
            "rounds": cmp.rounds_executed,
        }));
    }
    let eta_nominal = params.nominal_eta();
    let doc = json!({
        "params": params,
        "eta_nominal": eta_nominal,
        "eta_matches_nominal": (tr.eta - eta_nominal).abs() <= 1e-12 * eta_nominal.max(1.0),
        "runs": rows,
        "violations": violations,
    });
    write_file(
        &out.join("bound.json"),
        &serde_json::to_string_pretty(&doc).expect("serializable"),
    )?;
    write_file(&out.join("bound.csv"), &csv)?;
    println!("bound: runs={runs} violations={violations} p_outage={p_outage}");
    Ok(())
}
