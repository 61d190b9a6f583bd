//! Command-line front end: solve a scenario, construct and verify equilibria
//! (centralized or distributed), check a stored profile, or run the learning
//! dynamic with a CSV trace.
//!
//! Exit codes: 0 on success, 1 when a verification or audit fails, 2 on
//! input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use demandmech::learning::{learn, LearnConfig, PriceSet};
use demandmech::mech_central::{
    aggregates, allocate, budget_report, check_ir, construct_ne, radial_pricing, tax, verify_ne,
    CentralMessageProfile, NeReport, NeVerifyConfig, PEAK_TOL,
};
use demandmech::mech_dist::{
    budget_report_dist, check_ir_dist, check_summary_consistency, construct_ne_dist,
    spanning_tree, tax_dist, verify_ne_dist, HelperPolicy, TreeNetwork,
};
use demandmech::model::{build_instance, Instance};
use demandmech::oracle::{check_kkt, solve_centralized, CentralSolution, SolveConfig};
use demandmech::scenario::{ProfileFile, Scenario};

#[derive(Parser)]
#[command(name = "demandmech", version, about = "Demand management mechanisms for energy communities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the community welfare program and print the optimum with its KKT report
    Solve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 200_000)]
        max_iters: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Construct the equilibrium profile, verify it, and run the budget and rationality audits
    Ne {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the constructed profile to this JSON file
        #[arg(long)]
        profile_out: Option<PathBuf>,
    },
    /// Verify a stored message profile; the report is emitted as CSV
    Verify {
        scenario: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distributed equilibrium on the scenario's network: per-user taxes, summary consistency, audits
    DistNe {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the price-adjustment learning dynamic
    Learn {
        scenario: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        stop_tol: Option<f64>,
        /// Write the per-iteration trace to this CSV file
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: &Path) -> anyhow::Result<(Scenario, Instance)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let scenario = Scenario::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let instance = build_instance(&scenario).context("validating scenario")?;
    Ok((scenario, instance))
}

fn network_from(scenario: &Scenario, inst: &Instance) -> anyhow::Result<TreeNetwork> {
    let spec = scenario
        .network
        .as_ref()
        .ok_or_else(|| anyhow!("scenario has no network block"))?;
    let edges: Vec<(usize, usize)> = spec
        .edges
        .iter()
        .map(|&(a, b)| {
            if a == 0 || b == 0 || a > inst.n_users() || b > inst.n_users() {
                bail!("edge ({a}, {b}) is out of range (users are 1-based)");
            }
            Ok((a - 1, b - 1))
        })
        .collect::<anyhow::Result<_>>()?;
    let net = spanning_tree(inst.n_users(), &edges)?;
    match &spec.phi {
        None => Ok(net),
        Some(map) => {
            let mut phi = Vec::with_capacity(inst.n_users());
            for user in 1..=inst.n_users() {
                let helper = map
                    .get(&user.to_string())
                    .ok_or_else(|| anyhow!("phi map is missing user {user}"))?;
                if *helper == 0 || *helper > inst.n_users() {
                    bail!("phi({user}) = {helper} is out of range");
                }
                phi.push(helper - 1);
            }
            Ok(net.with_helpers(&HelperPolicy::Explicit(phi))?)
        }
    }
}

fn solve(inst: &Instance, tol: f64, max_iters: usize) -> anyhow::Result<CentralSolution> {
    solve_centralized(inst, &SolveConfig { tol, max_iters, step: None })
        .context("solving the welfare program")
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Solve { scenario, tol, max_iters, format } => {
            let (_, inst) = load_scenario(&scenario)?;
            let sol = solve(&inst, tol, max_iters)?;
            let report = check_kkt(&inst, &sol, tol);
            match format {
                Format::Text => {
                    println!("demands (one row per user):");
                    for i in 0..inst.n_users() {
                        let row: Vec<String> = (0..inst.horizon())
                            .map(|t| format!("{:>12.6}", sol.x[(i, t)]))
                            .collect();
                        println!("  user {}: {}", i + 1, row.join(" "));
                    }
                    println!("peak w = {:.6}", sol.w);
                    println!("row multipliers:");
                    for l in 0..inst.n_constraints() {
                        println!("  row {}: {:.6}", l + 1, sol.lambda[l]);
                    }
                    let mu: Vec<String> =
                        sol.mu.iter().map(|v| format!("{v:.6}")).collect();
                    println!("peak multipliers: {}", mu.join(" "));
                    println!(
                        "kkt: primal {:.3e}  dual {:.3e}  comp {:.3e}  stationarity {:.3e}  -> {} (tol {:.1e})",
                        report.primal_residual,
                        report.dual_residual,
                        report.comp_slackness,
                        report.stationarity_residual,
                        if report.pass { "PASS" } else { "FAIL" },
                        report.tol,
                    );
                }
                Format::Csv => {
                    println!("kind,i,t,value");
                    for i in 0..inst.n_users() {
                        for t in 0..inst.horizon() {
                            println!("x,{},{},{}", i + 1, t + 1, sol.x[(i, t)]);
                        }
                    }
                    println!("w,,,{}", sol.w);
                    for l in 0..inst.n_constraints() {
                        println!("lambda,{},,{}", l + 1, sol.lambda[l]);
                    }
                    for t in 0..inst.horizon() {
                        println!("mu,,{},{}", t + 1, sol.mu[t]);
                    }
                    println!("kkt_primal,,,{}", report.primal_residual);
                    println!("kkt_dual,,,{}", report.dual_residual);
                    println!("kkt_comp,,,{}", report.comp_slackness);
                    println!("kkt_stationarity,,,{}", report.stationarity_residual);
                    println!("kkt_pass,,,{}", report.pass);
                }
            }
            Ok(exit_for(report.pass))
        }
        Command::Ne { scenario, samples, tol, seed, profile_out } => {
            let (_, inst) = load_scenario(&scenario)?;
            let sol = solve(&inst, 1e-8, 200_000)?;
            let m = construct_ne(&inst, &sol, 1e-6)?;
            if let Some(path) = &profile_out {
                let file = m.to_file();
                std::fs::write(path, serde_json::to_string_pretty(&file)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_price_decomposition(&inst, &m)?;
            let budget = budget_report(&inst, &m);
            println!("budget: gross surplus {:.6}, rebated balance {:.3e}", budget.gross, budget.rebated);
            let ir = check_ir(&inst, &m, 1e-9)?;
            for e in &ir.per_user {
                println!(
                    "rationality: user {} payoff {:.6} vs outside {:.6} -> {}",
                    e.user + 1,
                    e.payoff,
                    e.outside_option,
                    if e.ok { "ok" } else { "VIOLATED" }
                );
            }
            let cfg = NeVerifyConfig { deviation_samples: samples, line_search_tol: 1e-7, tol, seed };
            let report = verify_ne(&inst, &m, &cfg)?;
            print_verification_summary(&report);
            Ok(exit_for(report.pass && ir.pass))
        }
        Command::Verify { scenario, profile, samples, tol, seed, out } => {
            let (_, inst) = load_scenario(&scenario)?;
            let text = std::fs::read_to_string(&profile)
                .with_context(|| format!("reading {}", profile.display()))?;
            let file = ProfileFile::from_json(&text)
                .with_context(|| format!("parsing {}", profile.display()))?;
            let m = CentralMessageProfile::from_file(&file, &inst)?;
            let cfg = NeVerifyConfig { deviation_samples: samples, line_search_tol: 1e-7, tol, seed };
            let report = verify_ne(&inst, &m, &cfg)?;
            let csv = report_to_csv(&report);
            match &out {
                Some(path) => std::fs::write(path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
            if !report.pass {
                let worst = report
                    .per_user
                    .iter()
                    .max_by(|a, b| a.improvement.total_cmp(&b.improvement))
                    .expect("at least one user");
                eprintln!(
                    "profile is not an equilibrium: user {} improves by {:.3e} deviating in {}{}",
                    worst.user + 1,
                    worst.improvement,
                    worst.kind,
                    worst
                        .proposed
                        .map(|v| format!(" (best response {v:.6})"))
                        .unwrap_or_default()
                );
            }
            Ok(exit_for(report.pass))
        }
        Command::DistNe { scenario, samples, tol, seed } => {
            let (sc, inst) = load_scenario(&scenario)?;
            let net = network_from(&sc, &inst)?;
            let sol = solve(&inst, 1e-8, 200_000)?;
            let m = construct_ne_dist(&inst, &net, &sol, 1e-6)?;
            println!("network edges: {:?}", net.edges().iter().map(|&(a, b)| (a + 1, b + 1)).collect::<Vec<_>>());
            let phi: Vec<String> =
                (0..inst.n_users()).map(|i| format!("{}->{}", i + 1, net.phi(i) + 1)).collect();
            println!("helpers: {}", phi.join(", "));
            for i in 0..inst.n_users() {
                let b = tax_dist(&inst, &net, &m, i)?;
                println!(
                    "user {}: tax {:.6} (cost {:.6}, penalties n {:.3e} beta {:.3e} nu {:.3e} con {:.3e})",
                    i + 1,
                    b.total(),
                    b.cost,
                    b.pr_n,
                    b.pr_beta,
                    b.pr_nu,
                    b.con_l.sum() + b.con_t.sum(),
                );
            }
            let consistency = check_summary_consistency(&inst, &net, &m, &sol.x, 1e-10);
            println!(
                "summary consistency: recursion ({:.2e}, {:.2e}) closed form ({:.2e}, {:.2e}) sums ({:.2e}, {:.2e}) -> {}",
                consistency.recursion_n,
                consistency.recursion_nu,
                consistency.closed_form_n,
                consistency.closed_form_nu,
                consistency.sum_n,
                consistency.sum_nu,
                if consistency.pass { "PASS" } else { "FAIL" }
            );
            let budget = budget_report_dist(&inst, &net, &m)?;
            println!("budget: gross surplus {:.6}, rebated balance {:.3e}", budget.gross, budget.rebated);
            let ir = check_ir_dist(&inst, &net, &m, 1e-9)?;
            let cfg = NeVerifyConfig { deviation_samples: samples, line_search_tol: 1e-7, tol, seed };
            let report = verify_ne_dist(&inst, &net, &m, &cfg)?;
            print_verification_summary(&report);
            Ok(exit_for(report.pass && ir.pass && consistency.pass))
        }
        Command::Learn { scenario, alpha, iters, stop_tol, trace } => {
            let (sc, inst) = load_scenario(&scenario)?;
            let block = sc.learning.as_ref();
            let set = match block.and_then(|b| b.bounds.as_ref()) {
                Some(bounds) => {
                    let to_matrix = |rows: &Vec<Vec<f64>>| -> anyhow::Result<DMatrix<f64>> {
                        if rows.len() != inst.n_users()
                            || rows.iter().any(|r| r.len() != inst.horizon())
                        {
                            bail!("derivative bounds must be an N x T grid");
                        }
                        Ok(DMatrix::from_fn(inst.n_users(), inst.horizon(), |i, t| rows[i][t]))
                    };
                    PriceSet::from_bounds(&inst, &to_matrix(&bounds.lo)?, &to_matrix(&bounds.hi)?)?
                }
                None => PriceSet::from_domain(&inst)?,
            };
            let cfg = LearnConfig {
                alpha: alpha.or_else(|| block.and_then(|b| b.alpha)),
                max_iters: iters
                    .or_else(|| block.and_then(|b| b.iters))
                    .unwrap_or(1000),
                stop_tol: stop_tol
                    .or_else(|| block.and_then(|b| b.stop_tol))
                    .unwrap_or(0.0),
                initial: None,
            };
            let reference = solve(&inst, 1e-8, 200_000)?.price_vector();
            let (profile, trace_data) = learn(&inst, &set, &cfg, Some(&reference))?;
            for w in &trace_data.warnings {
                eprintln!("warning: {w}");
            }
            let last = trace_data.records.last().expect("at least the initial record");
            println!(
                "learning: {} iterations at alpha {:.6} -> distance to optimum {:.3e} ({:?})",
                trace_data.records.len() - 1,
                trace_data.alpha,
                last.dist_to_opt.unwrap_or(f64::NAN),
                trace_data.stop,
            );
            let x = allocate(&profile);
            for i in 0..inst.n_users() {
                let row: Vec<String> =
                    (0..inst.horizon()).map(|t| format!("{:>12.6}", x[(i, t)])).collect();
                println!("  user {} demand: {}", i + 1, row.join(" "));
            }
            if let Some(path) = &trace {
                let csv = trace_to_csv(&inst, &trace_data);
                std::fs::write(path, csv)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

/// Per-user aggregated unit price (fixed price + shaped peak price +
/// constraint prices), the demand it supports, and the resulting payment.
fn print_price_decomposition(
    inst: &Instance,
    m: &CentralMessageProfile,
) -> anyhow::Result<()> {
    let x = allocate(m);
    for i in 0..inst.n_users() {
        let agg = aggregates(inst, m, i);
        let rp = radial_pricing(&agg.s_minus, &agg.zeta_minus, inst.peak_price(), PEAK_TOL);
        println!("user {}:", i + 1);
        println!("  slot |      unit |      peak |      rows | aggregated |     demand |    payment");
        for t in 0..inst.horizon() {
            let rows: f64 = inst
                .user_constraints(i)
                .iter()
                .map(|&l| agg.q_minus[l] * inst.coeff(l, i, t))
                .sum();
            let total = inst.unit_price(t) + rp[t] + rows;
            println!(
                "  {:>4} | {:>9.6} | {:>9.6} | {:>9.6} | {:>10.6} | {:>10.6} | {:>10.6}",
                t + 1,
                inst.unit_price(t),
                rp[t],
                rows,
                total,
                x[(i, t)],
                total * x[(i, t)],
            );
        }
        let breakdown = tax(inst, m, i);
        println!("  tax {:.6} (penalties {:.3e})", breakdown.total(), breakdown.total() - breakdown.cost);
    }
    Ok(())
}

fn print_verification_summary(report: &NeReport) {
    for dev in &report.per_user {
        println!(
            "verification: user {} best deviation {} improves by {:.3e}{}",
            dev.user + 1,
            dev.kind,
            dev.improvement,
            dev.proposed.map(|v| format!(" (value {v:.6})")).unwrap_or_default(),
        );
    }
    println!(
        "verification: max improvement {:.3e} vs tol {:.1e} (seed {}) -> {}",
        report.max_improvement,
        report.tol,
        report.seed,
        if report.pass { "PASS" } else { "FAIL" }
    );
}

fn report_to_csv(report: &NeReport) -> String {
    let mut out = String::from("user,max_improvement,coordinate,proposed,pass\n");
    for dev in &report.per_user {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            dev.user + 1,
            dev.improvement,
            dev.kind,
            dev.proposed.map(|v| v.to_string()).unwrap_or_default(),
            dev.improvement <= report.tol,
        ));
    }
    out.push_str(&format!(
        "all,{},,,{}\n",
        report.max_improvement, report.pass
    ));
    out
}

fn trace_to_csv(inst: &Instance, trace: &demandmech::learning::LearningTrace) -> String {
    let mut header = String::from("k");
    for l in 0..inst.n_constraints() {
        header.push_str(&format!(",q{}", l + 1));
    }
    for t in 0..inst.horizon() {
        header.push_str(&format!(",s{}", t + 1));
    }
    for i in 0..inst.n_users() {
        for t in 0..inst.horizon() {
            header.push_str(&format!(",y{}_{}", i + 1, t + 1));
        }
    }
    header.push_str(",dist_to_opt,dual_value\n");
    let mut out = header;
    for record in &trace.records {
        let mut line = record.k.to_string();
        for v in record.q.iter() {
            line.push_str(&format!(",{v}"));
        }
        for v in record.s.iter() {
            line.push_str(&format!(",{v}"));
        }
        for i in 0..inst.n_users() {
            for t in 0..inst.horizon() {
                line.push_str(&format!(",{}", record.y[(i, t)]));
            }
        }
        line.push_str(&format!(
            ",{},{}\n",
            record.dist_to_opt.map(|d| d.to_string()).unwrap_or_default(),
            record.dual_value
        ));
        out.push_str(&line);
    }
    out
}
