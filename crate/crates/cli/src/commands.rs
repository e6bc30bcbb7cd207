use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use qhedge_core::config::MethodName;
use qhedge_core::duality::Domain;
use qhedge_core::engine::{Curve, MethodRegistry, Pipeline, PricingMethod, RunContext};
use qhedge_core::montecarlo;
use qhedge_core::oracles;
use qhedge_core::pde::{
    compare_candidates, dual_to_primal, hjb_residual, read_surface, read_surface_csv, verify_supersolution,
    write_surface, write_surface_csv, Surface,
};
use qhedge_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::output::{curve_json, write_curve, Setup};
use crate::{CliError, Outcome};

fn context(setup: &Setup) -> Result<(RunContext, std::sync::Arc<dyn PricingMethod>), CliError> {
    let ctx = RunContext::new(setup.config.clone())?;
    let method = MethodRegistry::builtin().get(setup.config.run.method.as_str())?;
    Ok((ctx, method))
}

fn io_err(setup: &Setup, name: &str) -> impl Fn(std::io::Error) -> CliError {
    let path = setup.path(name);
    move |e| CliError::io(&path, e)
}

pub fn price(setup: &Setup) -> Result<Outcome, CliError> {
    let (ctx, method) = context(setup)?;
    let curve = method.price_curve(&ctx, &setup.config.p_grid())?;
    write_curve(&mut setup.create("price.csv")?, "p", &curve).map_err(io_err(setup, "price.csv"))?;
    setup.write_json("price.json", "price", json!({ "csv": "price.csv", "curve": curve_json("p", &curve) }))?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct GapRow {
    epsilon: f64,
    q: f64,
    value: f64,
    std_error: f64,
    gap: f64,
    gap_std_error: f64,
    bound: f64,
}

/// `w_eps` and `w_eps - w` for every level. Monte Carlo gaps use one sample set for
/// both terms, so their standard errors are those of the paired differences.
fn epsilon_table(
    ctx: &RunContext,
    method: &dyn PricingMethod,
    q_grid: &[f64],
    baseline: &Curve,
    levels: &[f64],
) -> Result<Vec<GapRow>, CliError> {
    let horizon = ctx.config.grid.horizon;
    let samples = match ctx.config.run.method {
        MethodName::Mc => Some(ctx.samples()?),
        _ => None,
    };
    let mut rows = Vec::new();
    for &eps in levels {
        let (values, gaps) = match &samples {
            Some(s) => (
                montecarlo::dual_curve_regularized(s, q_grid, eps)?,
                q_grid.iter().map(|&q| montecarlo::regularization_gap(s, q, eps)).collect::<Result<Vec<_>, _>>()?,
            ),
            None => {
                let c = method.dual_curve(ctx, q_grid, eps)?;
                let gaps = c
                    .points
                    .iter()
                    .zip(&baseline.points)
                    .map(|(a, b)| montecarlo::Estimate { value: a.value - b.value, std_error: 0.0, n: 0 })
                    .collect();
                (c.points, gaps)
            }
        };
        for (j, &q) in q_grid.iter().enumerate() {
            rows.push(GapRow {
                epsilon: eps,
                q,
                value: values[j].value,
                std_error: values[j].std_error,
                gap: gaps[j].value,
                gap_std_error: gaps[j].std_error,
                bound: oracles::regularization_bound(q, eps, horizon)?,
            });
        }
    }
    Ok(rows)
}

fn write_gap_rows(out: &mut impl Write, rows: &[GapRow]) -> std::io::Result<()> {
    writeln!(out, "epsilon,q,value,std_error,gap,gap_std_error,bound")?;
    for r in rows {
        writeln!(out, "{:?},{:?},{:?},{:?},{:?},{:?},{:?}", r.epsilon, r.q, r.value, r.std_error, r.gap, r.gap_std_error, r.bound)?;
    }
    out.flush()
}

pub fn dual(setup: &Setup) -> Result<Outcome, CliError> {
    let (ctx, method) = context(setup)?;
    let q = setup.config.q_grid();
    let curve = method.dual_curve(&ctx, &q, setup.config.run.epsilon)?;
    write_curve(&mut setup.create("dual.csv")?, "q", &curve).map_err(io_err(setup, "dual.csv"))?;
    let mut results = json!({ "csv": "dual.csv", "epsilon": setup.config.run.epsilon, "curve": curve_json("q", &curve) });
    let mut outcome = Outcome::Pass;
    if let Some(levels) = setup.config.run.epsilons.as_ref().filter(|l| !l.is_empty()) {
        let baseline = if setup.config.run.epsilon == 0.0 { curve.clone() } else { method.dual_curve(&ctx, &q, 0.0)? };
        let rows = epsilon_table(&ctx, method.as_ref(), &q, &baseline, levels)?;
        write_gap_rows(&mut setup.create("dual_epsilons.csv")?, &rows).map_err(io_err(setup, "dual_epsilons.csv"))?;
        let violations = rows.iter().filter(|r| r.gap.abs() > r.bound + 3.0 * r.gap_std_error).count();
        if violations > 0 {
            outcome = Outcome::Fail;
        }
        results["epsilon_table"] = json!({ "csv": "dual_epsilons.csv", "rows": rows, "bound_violations": violations });
    }
    setup.write_json("dual.json", "dual", results)?;
    Ok(outcome)
}

fn write_surface_files(setup: &Setup, stem: &str, s: &Surface) -> Result<Vec<String>, CliError> {
    let mut names = vec![format!("{stem}.qhs")];
    let mut f = setup.create(&names[0])?;
    write_surface(&mut f, s)?;
    f.flush().map_err(io_err(setup, &names[0]))?;
    if setup.config.run.surface_csv {
        names.push(format!("{stem}.csv"));
        let mut f = setup.create(&names[1])?;
        write_surface_csv(&mut f, s)?;
        f.flush().map_err(io_err(setup, &names[1]))?;
    }
    Ok(names)
}

pub fn solve(setup: &Setup) -> Result<Outcome, CliError> {
    let ctx = RunContext::new(setup.config.clone())?;
    let eps = setup.config.run.epsilon;
    let grid = setup.config.dual_grid(ctx.model.dim(), eps)?;
    let (w, report) = qhedge_core::pde::solve_dual_pde(&ctx.model, &ctx.payoff, &grid, &setup.config.solve_options())?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    let u = dual_to_primal(&w, &ctx.payoff, &setup.config.primal_options())?;
    let dual_files = write_surface_files(setup, "dual_surface", &w)?;
    let primal_files = write_surface_files(setup, "primal_surface", &u)?;
    let window = setup.config.verify_options(ctx.model.dim()).window;
    let residual = hjb_residual(&u, &ctx.model, eps, setup.config.verify_options(ctx.model.dim()).tol_convex)?;
    let max_abs = residual.max_abs(&window).map(|(r, _)| r);
    setup.write_json(
        "solve.json",
        "solve",
        json!({
            "dual_surface": dual_files,
            "primal_surface": primal_files,
            "epsilon": eps,
            "dual_grid": w.grid,
            "primal_grid": u.grid,
            "solver": report,
            "truncated_primal_nodes": u.truncated.len(),
            "residual_window": window,
            "max_abs_hjb_residual": max_abs,
        }),
    )?;
    Ok(Outcome::Pass)
}

fn load_surface(path: &Path, epsilon: f64) -> Result<Surface, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let s = if path.extension().is_some_and(|e| e == "csv") {
        read_surface_csv(BufReader::new(file), epsilon)
    } else {
        read_surface(&mut BufReader::new(file))
    };
    s.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn check_primal(s: &Surface, dim: usize, path: &Path) -> Result<(), CliError> {
    if s.grid.axis != Domain::P {
        return Err(CliError::config(format!("{}: expected a p-domain surface, found a q-domain one", path.display())));
    }
    if s.grid.dim() != dim {
        return Err(CliError::config(format!("{}: surface has d = {}, model has d = {dim}", path.display(), s.grid.dim())));
    }
    Ok(())
}

pub fn verify(setup: &Setup, surface: &Path, reference: Option<&Path>) -> Result<Outcome, CliError> {
    let result = verify_inner(setup, surface, reference);
    match result {
        Ok((pass, results)) => {
            setup.write_json("verify.json", "verify", results)?;
            Ok(if pass { Outcome::Pass } else { Outcome::Fail })
        }
        Err(e) => {
            setup.write_json("verify.json", "verify", json!({ "pass": false, "error": e.message, "exit_code": e.code }))?;
            Err(e)
        }
    }
}

fn verify_inner(setup: &Setup, surface: &Path, reference: Option<&Path>) -> Result<(bool, serde_json::Value), CliError> {
    let ctx = RunContext::new(setup.config.clone())?;
    let eps = setup.config.run.epsilon;
    let u = load_surface(surface, eps)?;
    check_primal(&u, ctx.model.dim(), surface)?;
    let opts = setup.config.verify_options(ctx.model.dim());
    let report = verify_supersolution(&u, &ctx.model, &ctx.payoff, &opts)?;
    let mut pass = report.pass;
    let mut results = json!({ "surface": surface.file_name().map(|n| n.to_string_lossy()), "report": report });
    if let Some(rpath) = reference {
        let r = load_surface(rpath, eps)?;
        check_primal(&r, ctx.model.dim(), rpath)?;
        let cmp = compare_candidates(&u, &r)?;
        let tol = setup.config.run.tolerances.compare_tol.unwrap_or(1e-6);
        let dominates = cmp.dominates(tol);
        pass &= dominates;
        results["comparison"] = json!({ "reference": rpath.file_name().map(|n| n.to_string_lossy()), "tol": tol, "dominates": dominates, "detail": cmp });
    }
    results["pass"] = json!(pass);
    results["scope"] = json!("residual and terminal checks on the reported window and grid only; not a proof of membership in the supersolution class");
    Ok((pass, results))
}

#[derive(Serialize)]
struct StudyRow {
    epsilon: f64,
    sup_gap: f64,
    gap_std_error: f64,
    argmax_q: f64,
    bound: f64,
    within_bound: bool,
}

pub fn study_epsilon(setup: &Setup) -> Result<Outcome, CliError> {
    let levels = setup
        .config
        .run
        .epsilons
        .clone()
        .ok_or_else(|| CliError::config("study-epsilon needs `run.epsilons` (an empty list runs the baseline only)"))?;
    let (ctx, method) = context(setup)?;
    let q = setup.config.q_grid();
    let baseline = method.dual_curve(&ctx, &q, 0.0)?;
    write_curve(&mut setup.create("baseline.csv")?, "q", &baseline).map_err(io_err(setup, "baseline.csv"))?;
    let rows = epsilon_table(&ctx, method.as_ref(), &q, &baseline, &levels)?;
    write_gap_rows(&mut setup.create("epsilon_curves.csv")?, &rows).map_err(io_err(setup, "epsilon_curves.csv"))?;

    let horizon = setup.config.grid.horizon;
    let q_hi = q.iter().copied().fold(0.0, f64::max);
    let mut study = Vec::new();
    for &eps in &levels {
        let worst = rows
            .iter()
            .filter(|r| r.epsilon == eps)
            .max_by(|a, b| a.gap.abs().total_cmp(&b.gap.abs()))
            .expect("every level has rows");
        // the bound is increasing in q, so its sup over the window sits at the right end
        let bound = oracles::regularization_bound(q_hi, eps, horizon)?;
        study.push(StudyRow {
            epsilon: eps,
            sup_gap: worst.gap.abs(),
            gap_std_error: worst.gap_std_error,
            argmax_q: worst.q,
            bound,
            within_bound: worst.gap.abs() <= bound + 3.0 * worst.gap_std_error,
        });
    }
    let mut f = setup.create("epsilon_study.csv")?;
    (|| -> std::io::Result<()> {
        writeln!(f, "epsilon,sup_gap,gap_std_error,argmax_q,bound,within_bound")?;
        for r in &study {
            writeln!(f, "{:?},{:?},{:?},{:?},{:?},{}", r.epsilon, r.sup_gap, r.gap_std_error, r.argmax_q, r.bound, r.within_bound)?;
        }
        f.flush()
    })()
    .map_err(io_err(setup, "epsilon_study.csv"))?;

    let mut by_eps: Vec<&StudyRow> = study.iter().collect();
    by_eps.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let monotone = by_eps.windows(2).all(|w| w[1].sup_gap <= w[0].sup_gap);
    let within = study.iter().all(|r| r.within_bound);
    setup.write_json(
        "epsilon_study.json",
        "study-epsilon",
        json!({
            "baseline_csv": "baseline.csv",
            "study_csv": "epsilon_study.csv",
            "curves_csv": "epsilon_curves.csv",
            "q_window": [q[0], q_hi],
            "baseline": curve_json("q", &baseline),
            "rows": study,
            "within_bound": within,
            "monotone": monotone,
        }),
    )?;
    Ok(if within && monotone { Outcome::Pass } else { Outcome::Fail })
}

#[derive(Serialize)]
struct OracleRow {
    kind: &'static str,
    axis: f64,
    value: f64,
    std_error: f64,
    oracle: f64,
    abs_error: f64,
    tolerance: f64,
    pass: bool,
}

pub fn compare_oracle(setup: &Setup) -> Result<Outcome, CliError> {
    let (ctx, method) = context(setup)?;
    let cfg = &setup.config;
    let x0 = ctx.x0[0];
    let tau = cfg.grid.horizon;
    if oracles::primal_reference(&ctx.model, x0, 0.5, tau, 0.0).is_none() || !ctx.payoff.is_identity_1d() {
        return Err(CliError::config(format!(
            "no closed-form reference for model `{}` with payoff {}",
            ctx.model.name(),
            ctx.payoff.describe()
        )));
    }
    let price_eps = match cfg.run.method {
        MethodName::Mc => 0.0,
        MethodName::Pde => cfg.run.epsilon,
        MethodName::Pipeline => match Pipeline::levels(cfg).as_slice() {
            [single] => *single,
            _ => 0.0,
        },
    };
    let dual_eps = cfg.run.epsilon;
    let rel = cfg.run.tolerances.oracle_rel.unwrap_or(0.003);
    let abs = cfg.run.tolerances.oracle_abs.unwrap_or(match cfg.run.method {
        // one sample carries weight 1 / n_paths; smaller values are not resolved
        MethodName::Mc => 1.0 / cfg.run.n_paths as f64,
        _ => 2e-3,
    });

    let mut rows = Vec::new();
    let mut push = |kind: &'static str, curve: &Curve, oracle: &dyn Fn(f64) -> Result<f64, Error>| -> Result<(), CliError> {
        for (a, e) in curve.axis.iter().zip(&curve.points) {
            let o = oracle(*a)?;
            let tolerance = (3.0 * e.std_error).max(rel * o.abs()).max(abs);
            let abs_error = (e.value - o).abs();
            rows.push(OracleRow { kind, axis: *a, value: e.value, std_error: e.std_error, oracle: o, abs_error, tolerance, pass: abs_error <= tolerance });
        }
        Ok(())
    };
    let price = method.price_curve(&ctx, &cfg.p_grid())?;
    let model = &ctx.model;
    push("price", &price, &|p| oracles::primal_reference(model, x0, p, tau, price_eps).expect("checked above").map(|r| r.value))?;
    let dual = method.dual_curve(&ctx, &cfg.q_grid(), dual_eps)?;
    push("dual", &dual, &|q| oracles::dual_reference(model, x0, q, tau, dual_eps).expect("checked above").map(|r| r.value))?;

    let mut f = setup.create("oracle.csv")?;
    (|| -> std::io::Result<()> {
        writeln!(f, "kind,axis,value,std_error,oracle,abs_error,tolerance,pass")?;
        for r in &rows {
            writeln!(f, "{},{:?},{:?},{:?},{:?},{:?},{:?},{}", r.kind, r.axis, r.value, r.std_error, r.oracle, r.abs_error, r.tolerance, r.pass)?;
        }
        f.flush()
    })()
    .map_err(io_err(setup, "oracle.csv"))?;
    let failures = rows.iter().filter(|r| !r.pass).count();
    let mut notes = price.notes.clone();
    notes.extend(dual.notes.iter().cloned());
    setup.write_json(
        "oracle.json",
        "compare-oracle",
        json!({
            "csv": "oracle.csv",
            "price_epsilon": price_eps,
            "dual_epsilon": dual_eps,
            "rel_tol": rel,
            "abs_tol": abs,
            "failures": failures,
            "pass": failures == 0,
            "rows": rows,
            "notes": notes,
        }),
    )?;
    Ok(if failures == 0 { Outcome::Pass } else { Outcome::Fail })
}
