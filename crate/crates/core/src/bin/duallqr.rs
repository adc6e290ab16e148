use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duallqr::config::{load_config, ExperimentConfig};
use duallqr::evaluation::{evaluate_policy, monte_carlo_cost, CostReport, Policy};
use duallqr::experiments::{compare_on_model, dual_on_model, run_explore_commit, DesignOutcome};
use duallqr::linalg::Matrix;
use duallqr::lti::{rollout, LtiSystem};
use duallqr::output::{cell, emit, Format, Table};
use duallqr::riccati::{drde_cost, drde_solve};
use duallqr::synthesis::{
    synthesize_dual, synthesize_nominal, synthesize_robust, synthesize_robust_constant,
    SynthesisResult,
};
use duallqr::sysid::{coarse_id, UncertaintyModel};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "duallqr", version, about = "Finite-horizon LQR synthesis for uncertain linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct ModelArg {
    /// Uncertainty model (JSON from `identify --format json`); identified
    /// from fresh data when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the true plant once under a policy (zero gains by default).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Collect identification data and fit the uncertainty model.
    Identify {
        #[command(flatten)]
        common: Common,
    },
    /// Riccati gains and optimal cost for the true plant or a model estimate.
    Drde {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Certainty-equivalent design on the model estimate.
    SynthNominal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Worst-case design over the uncertainty set.
    SynthRobust {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// Use one multiplier for all steps, chosen by line search.
        #[arg(long)]
        constant_multiplier: bool,
    },
    /// Robust design with a reward for information gathered along the way.
    SynthDual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Expected cost of a policy on the true plant.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy JSON, or any synthesis output holding a `policy` field.
        #[arg(long)]
        policy: PathBuf,
        /// Estimate by Monte Carlo with this many rollouts instead.
        #[arg(long)]
        monte_carlo: Option<usize>,
    },
    /// Sweep the switching time of an explore-then-commit scheme.
    ExpExploreCommit {
        #[command(flatten)]
        common: Common,
    },
    /// Riccati, nominal and robust designs on one estimate, scored on the true plant.
    ExpCompare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Dual design on one estimate, scored on the true plant.
    ExpDual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    sys: LtiSystem,
    out: Option<PathBuf>,
    format: Format,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut cfg = load_config(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let sys = cfg.system()?;
        Ok(Self {
            cfg,
            sys,
            out: common.out,
            format: common.format,
        })
    }

    fn model(&self, arg: &ModelArg) -> Result<UncertaintyModel> {
        let model = match &arg.model {
            Some(path) => {
                let m: UncertaintyModel = read_json(path)?;
                UncertaintyModel::new(m.a_hat, m.b_hat, m.d, m.delta)?
            }
            None => coarse_id(&self.sys, &self.cfg.id_protocol, self.cfg.delta, &self.cfg.rng())?.1,
        };
        if model.n_x() != self.sys.n_x() || model.n_u() != self.sys.n_u() {
            bail!(
                "model is for n_x={}, n_u={} but the plant has n_x={}, n_u={}",
                model.n_x(),
                model.n_u(),
                self.sys.n_x(),
                self.sys.n_u()
            );
        }
        Ok(model)
    }

    fn emit<T: serde::Serialize>(&self, table: &Table, value: &T) -> Result<()> {
        emit(table, value, self.format, self.out.as_deref())?;
        Ok(())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow::anyhow!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))
}

fn read_policy(path: &Path) -> Result<Policy> {
    let mut value: serde_json::Value = read_json(path)?;
    if let Some(inner) = value.get_mut("policy") {
        value = inner.take();
    }
    let p: Policy = serde_json::from_value(value).with_context(|| format!("{}: not a policy", path.display()))?;
    Ok(Policy::new(p.gains().to_vec(), p.excitations().to_vec())?)
}

fn gain_columns(n_u: usize, n_x: usize) -> Vec<String> {
    (0..n_u)
        .flat_map(|i| (0..n_x).map(move |j| format!("k_{i}_{j}")))
        .collect()
}

fn gain_cells(k: &Matrix) -> Vec<String> {
    (0..k.nrows())
        .flat_map(|i| (0..k.ncols()).map(move |j| cell(Some(k[(i, j)]))))
        .collect()
}

fn policy_table(res: &SynthesisResult) -> Result<Table> {
    let pol = &res.policy;
    let mut cols = vec!["t".to_string(), "trace_s".into(), "multiplier".into()];
    cols.extend(gain_columns(pol.n_u(), pol.n_x()));
    let mut t = Table::new(cols);
    let mult = &res.trajectories.multipliers;
    for step in 1..=pol.len() {
        let m = if mult.len() == pol.len() {
            Some(mult[step - 1])
        } else {
            res.p_star
        };
        let mut row = vec![step.to_string(), cell(Some(res.s_traces[step - 1])), cell(m)];
        row.extend(gain_cells(pol.gain(step)));
        t.push(row)?;
    }
    Ok(t)
}

fn cost_table(report: &CostReport) -> Result<Table> {
    let mut t = Table::new(["t", "j_x", "j_e"]);
    for (i, (x, e)) in report.j_x.iter().zip(&report.j_e).enumerate() {
        t.push(vec![(i + 1).to_string(), cell(Some(*x)), cell(Some(*e))])?;
    }
    t.push(vec![(report.j_x.len() + 1).to_string(), cell(Some(report.j_terminal)), cell(Some(0.0))])?;
    Ok(t)
}

fn summarize(res: &SynthesisResult) {
    eprintln!(
        "{}: J = {:.6} ({} iterations{})",
        res.program,
        res.j_wc,
        res.iterations,
        res.p_star.map(|p| format!(", p = {p:.4e}")).unwrap_or_default()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, policy } => {
            let ctx = Ctx::new(common)?;
            let horizon = ctx.cfg.horizon;
            let pol = match policy {
                Some(p) => read_policy(&p)?,
                None => Policy::zero(ctx.sys.n_x(), ctx.sys.n_u(), horizon - 1),
            };
            let traj = rollout(&ctx.sys, &pol, horizon, &mut ctx.cfg.rng())?;
            let (n_x, n_u) = (ctx.sys.n_x(), ctx.sys.n_u());
            let mut cols = vec!["t".to_string()];
            cols.extend((0..n_x).map(|i| format!("x_{i}")));
            cols.extend((0..n_u).map(|i| format!("u_{i}")));
            let mut table = Table::new(cols);
            for t in 0..=horizon {
                let mut row = vec![t.to_string()];
                row.extend(traj.states[t].iter().map(|v| cell(Some(*v))));
                match traj.inputs.get(t) {
                    Some(u) => row.extend(u.iter().map(|v| cell(Some(*v)))),
                    None => row.extend(std::iter::repeat_n(String::new(), n_u)),
                }
                table.push(row)?;
            }
            let states: Vec<Vec<f64>> = traj.states.iter().map(|x| x.iter().copied().collect()).collect();
            let inputs: Vec<Vec<f64>> = traj.inputs.iter().map(|u| u.iter().copied().collect()).collect();
            ctx.emit(&table, &json!({ "states": states, "inputs": inputs }))
        }
        Command::Identify { common } => {
            let ctx = Ctx::new(common)?;
            let model = ctx.model(&ModelArg { model: None })?;
            let mut table = Table::new(["matrix", "row", "col", "value"]);
            for (name, m) in [("a_hat", &model.a_hat), ("b_hat", &model.b_hat), ("d", model.d.as_matrix())] {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        table.push(vec![name.into(), i.to_string(), j.to_string(), cell(Some(m[(i, j)]))])?;
                    }
                }
            }
            ctx.emit(&table, &model)
        }
        Command::Drde { common, model } => {
            let ctx = Ctx::new(common)?;
            let (a, b) = match &model.model {
                Some(_) => {
                    let m = ctx.model(&model)?;
                    (m.a_hat, m.b_hat)
                }
                None => (ctx.sys.a.clone(), ctx.sys.b.clone()),
            };
            let sol = drde_solve(&a, &b, ctx.cfg.cost.q(), ctx.cfg.cost.r(), ctx.cfg.horizon)?;
            let cost = drde_cost(&sol, ctx.sys.sigma_w2);
            eprintln!("riccati: J = {cost:.6}");
            let mut cols = vec!["t".to_string(), "trace_x".into()];
            cols.extend(gain_columns(ctx.sys.n_u(), ctx.sys.n_x()));
            let mut table = Table::new(cols);
            for t in 1..=sol.horizon() {
                let mut row = vec![t.to_string(), cell(Some(sol.value(t).trace()))];
                if t < sol.horizon() {
                    row.extend(gain_cells(sol.gain(t)));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), ctx.sys.n_u() * ctx.sys.n_x()));
                }
                table.push(row)?;
            }
            ctx.emit(&table, &json!({ "cost": cost, "solution": sol }))
        }
        Command::SynthNominal { common, model } => {
            let ctx = Ctx::new(common)?;
            let spec = ctx.cfg.design_settings().spec(ctx.model(&model)?, &ctx.cfg.cost, ctx.sys.sigma_w2, ctx.cfg.horizon)?;
            let res = synthesize_nominal(&spec)?;
            summarize(&res);
            ctx.emit(&policy_table(&res)?, &res)
        }
        Command::SynthRobust { common, model, constant_multiplier } => {
            let ctx = Ctx::new(common)?;
            let spec = ctx.cfg.design_settings().spec(ctx.model(&model)?, &ctx.cfg.cost, ctx.sys.sigma_w2, ctx.cfg.horizon)?;
            let res = if constant_multiplier {
                synthesize_robust_constant(&spec)?
            } else {
                synthesize_robust(&spec)?
            };
            summarize(&res);
            ctx.emit(&policy_table(&res)?, &res)
        }
        Command::SynthDual { common, model } => {
            let ctx = Ctx::new(common)?;
            let mut spec = ctx.cfg.design_settings().spec(ctx.model(&model)?, &ctx.cfg.cost, ctx.sys.sigma_w2, ctx.cfg.horizon)?;
            spec.k_bar = Some(synthesize_nominal(&spec)?.policy.gains().to_vec());
            let res = synthesize_dual(&spec)?;
            summarize(&res);
            ctx.emit(&policy_table(&res)?, &res)
        }
        Command::Eval { common, policy, monte_carlo } => {
            let ctx = Ctx::new(common)?;
            let pol = read_policy(&policy)?;
            let report = match monte_carlo {
                Some(n) => monte_carlo_cost(&ctx.sys, &pol, &ctx.cfg.cost, n, &ctx.cfg.rng())?,
                None => evaluate_policy(&ctx.sys, &ctx.cfg.cost, &pol)?,
            };
            match report.stderr {
                Some(se) => eprintln!("J = {:.6} ± {:.6}", report.j_total, se),
                None => eprintln!("J = {:.6}", report.j_total),
            }
            ctx.emit(&cost_table(&report)?, &report)
        }
        Command::ExpExploreCommit { common } => {
            let ctx = Ctx::new(common)?;
            let ec = &ctx.cfg.explore_commit;
            let rows = run_explore_commit(
                &ctx.sys,
                &ctx.cfg.cost,
                ctx.cfg.horizon,
                ctx.cfg.id_protocol.sigma_u2,
                &ec.t_sw,
                ec.n_realizations,
                &ctx.cfg.rng(),
            )?;
            let mut table = Table::new(["t_sw", "j_id", "j_k", "j_tot", "stderr", "rank_deficient"]);
            for r in &rows {
                table.push(vec![
                    r.t_sw.to_string(),
                    cell(Some(r.j_id)),
                    cell(Some(r.j_k)),
                    cell(Some(r.j_tot)),
                    cell(Some(r.stderr)),
                    r.rank_deficient.to_string(),
                ])?;
            }
            ctx.emit(&table, &rows)
        }
        Command::ExpCompare { common, model } => {
            let ctx = Ctx::new(common)?;
            let report = compare_on_model(ctx.model(&model)?, &ctx.cfg.cost, ctx.sys.sigma_w2, ctx.cfg.horizon, &ctx.cfg.design_settings())?;
            let true_cost = |d: &DesignOutcome| -> Result<f64> {
                let pol = Policy::feedback_only(d.gains.clone())?;
                Ok(evaluate_policy(&ctx.sys, &ctx.cfg.cost, &pol)?.j_total)
            };
            let mut table = Table::new(["design", "program_cost", "true_cost", "error"]);
            let mut true_costs = serde_json::Map::new();
            for (name, outcome) in [
                ("riccati", Ok(&report.drde)),
                ("nominal", report.nominal.as_ref()),
                ("robust", report.robust.as_ref()),
            ] {
                match outcome {
                    Ok(d) => {
                        let j = true_cost(d)?;
                        true_costs.insert(name.into(), json!(j));
                        table.push(vec![name.into(), cell(Some(d.cost)), cell(Some(j)), String::new()])?;
                    }
                    Err(e) => table.push(vec![name.into(), String::new(), String::new(), e.clone()])?,
                }
            }
            ctx.emit(&table, &json!({ "report": report, "true_cost": true_costs }))
        }
        Command::ExpDual { common, model } => {
            let ctx = Ctx::new(common)?;
            let report = dual_on_model(&ctx.sys, ctx.model(&model)?, &ctx.cfg.cost, ctx.cfg.horizon, &ctx.cfg.design_settings())?;
            summarize(&report.design);
            eprintln!("true cost: {:.6}", report.true_cost.j_total);
            let mut table = Table::new(["t", "trace_s", "j_x", "j_e"]);
            for t in 0..report.design.s_traces.len() {
                table.push(vec![
                    (t + 1).to_string(),
                    cell(Some(report.design.s_traces[t])),
                    cell(Some(report.true_cost.j_x[t])),
                    cell(Some(report.true_cost.j_e[t])),
                ])?;
            }
            ctx.emit(&table, &report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
