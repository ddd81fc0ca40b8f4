//! Subcommand implementations. Each command reads the resolved
//! configuration, produces its CSV artifacts under the output directory,
//! and records a manifest; `report` only collates what the manifests list.

use std::path::{Path, PathBuf};

use seqstop::boundary::{
    cartesian, evaluate_policy_value, fit_and_maximize, grid_search, linspace, Ex1Boundary,
    Ex2Boundary, FitOutcome, ParamTable,
};
use seqstop::dp::{solve, DpOptions};
use seqstop::env::{EnvId, StoppingEnv};
use seqstop::error::{Error, Result};
use seqstop::example1::{exact_dp, Ex1Env};
use seqstop::example2::Ex2Env;
use seqstop::forward::{fmt_f64, load_dataset, run_forward, save_dataset, TrajectoryDataset};
use seqstop::pg::{self, banding_fraction, extract_regions, fit_state_stats};
use seqstop::qlearn::{dqn_train, net_table_csv, run_tabular, trace_csv};

use crate::config::ExperimentConfig;
use crate::manifest::{read_manifests, Manifest};
use crate::svg::{render_heatmap, render_trace, HeatmapStyle};

pub struct Ctx {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub data_path: PathBuf,
}

impl Ctx {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, data: Option<PathBuf>) -> Ctx {
        let out_dir = out.unwrap_or_else(|| PathBuf::from(&config.output.dir));
        let data_path = data.unwrap_or_else(|| out_dir.join("dataset.csv"));
        Ctx {
            config,
            out_dir,
            data_path,
        }
    }

    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    fn env1(&self) -> Result<Ex1Env> {
        Ex1Env::new(self.config.env.example1)
    }

    fn env2(&self) -> Result<Ex2Env> {
        Ex2Env::new(self.config.env.example2)
    }

    fn require_env(&self, want: EnvId, command: &str) -> Result<()> {
        let id = self.config.env_id()?;
        if id != want {
            return Err(Error::config(format!(
                "`{command}` runs on {} only (config selects {})",
                want.as_str(),
                id.as_str()
            )));
        }
        Ok(())
    }

    fn load_dataset_checked(&self, env_hash: &str) -> Result<TrajectoryDataset> {
        if !self.data_path.exists() {
            return Err(Error::data(
                None,
                format!(
                    "dataset not found at {}; produce it with `seqstop simulate`",
                    self.data_path.display()
                ),
            ));
        }
        let ds = load_dataset(&self.data_path)?;
        ds.check_config(env_hash)?;
        Ok(ds)
    }

    fn write(&self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.out_dir.join(name), content)?;
        Ok(())
    }

    fn manifest(&self, command: &str, env_hash: String, seed: u64, artifacts: &[&str]) -> Result<()> {
        let manifest = Manifest::new(
            command,
            &self.config.env.id,
            env_hash,
            seed,
            artifacts.iter().map(|s| s.to_string()).collect(),
            &self.config,
        );
        manifest.write(&self.out_dir)?;
        Ok(())
    }
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out()?;
    let opts = ctx.config.forward_options();
    let (ds, hash) = match ctx.config.env_id()? {
        EnvId::Example1 => {
            let env = ctx.env1()?;
            let ds = run_forward(&env, env.config(), &opts)?;
            let hash = env.config_hash();
            (ds, hash)
        }
        EnvId::Example2 => {
            let env = ctx.env2()?;
            let ds = run_forward(&env, env.config(), &opts)?;
            let hash = env.config_hash();
            (ds, hash)
        }
    };
    save_dataset(&ds, &ctx.data_path)?;
    let meta_name = seqstop::forward::meta_path(&ctx.data_path);
    println!(
        "simulate: {} episodes x {} steps -> {}",
        ds.meta.episodes,
        ds.meta.t_max,
        ctx.data_path.display()
    );
    let data_file = ctx
        .data_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset.csv".into());
    let meta_file = meta_name
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset.meta.toml".into());
    ctx.manifest(
        "simulate",
        hash,
        ctx.config.sim.seed,
        &[&data_file, &meta_file],
    )
}

pub fn dp(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out()?;
    let opts = DpOptions {
        max_iterations: ctx.config.dp.max_iterations,
        change_threshold: ctx.config.dp.change_threshold,
        ..DpOptions::default()
    };
    let (table_csv, hash, converged, iterations) = match ctx.config.env_id()? {
        EnvId::Example1 => {
            let env = ctx.env1()?;
            let hash = env.config_hash();
            let ds = ctx.load_dataset_checked(&hash)?;
            let sol = solve(&env, &ds, &opts)?;
            (sol.to_csv(), hash, sol.converged, sol.iterations)
        }
        EnvId::Example2 => {
            let env = ctx.env2()?;
            let hash = env.config_hash();
            let ds = ctx.load_dataset_checked(&hash)?;
            let sol = solve(&env, &ds, &opts)?;
            (sol.to_csv(), hash, sol.converged, sol.iterations)
        }
    };
    ctx.write("dp_table.csv", &table_csv)?;
    if converged {
        println!("dp: converged after {iterations} sweeps -> dp_table.csv");
    } else {
        println!("dp: WARNING not converged after {iterations} sweeps -> dp_table.csv");
    }
    ctx.manifest("dp", hash, ctx.config.sim.seed, &["dp_table.csv"])
}

fn describe_fit(names: &[&str], fit: &FitOutcome, value: f64, se: f64) -> String {
    let params: Vec<String> = names
        .iter()
        .zip(&fit.params)
        .map(|(n, v)| format!("{n}={v:.4}"))
        .collect();
    format!(
        "optimum {} value {:.3} (se {:.3}){}",
        params.join(" "),
        value,
        se,
        if fit.fallback {
            format!(" [fallback: {}]", fit.note)
        } else {
            String::new()
        }
    )
}

fn optimum_csv(names: &[&str], fit: &FitOutcome, value: f64, se: f64) -> String {
    let mut out = names.join(",");
    out.push_str(",value,se,fallback\n");
    for v in &fit.params {
        out.push_str(&fmt_f64(*v));
        out.push(',');
    }
    out.push_str(&format!(
        "{},{},{}\n",
        fmt_f64(value),
        fmt_f64(se),
        u8::from(fit.fallback)
    ));
    out
}

pub fn boundary(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out()?;
    let b = &ctx.config.boundary;
    let (table, fit, value, se, hash): (ParamTable, FitOutcome, f64, f64, String) =
        match ctx.config.env_id()? {
            EnvId::Example1 => {
                let env = ctx.env1()?;
                let hash = env.config_hash();
                let ds = ctx.load_dataset_checked(&hash)?;
                let t_max = env.t_max();
                let nodes: Vec<Vec<f64>> = linspace(b.phi_lo, b.phi_hi, b.phi_points)
                    .into_iter()
                    .map(|p| vec![p])
                    .collect();
                let table = grid_search(&env, &ds, &["phi"], &nodes, |p| {
                    Ok(Ex1Boundary::new(p[0])?.policy(t_max))
                })?;
                let fit = fit_and_maximize(&table, &[(b.phi_lo, b.phi_hi)])?;
                let opt_policy = Ex1Boundary::new(fit.params[0])?.policy(t_max);
                let v = evaluate_policy_value(&env, &ds, &opt_policy)?;
                (table, fit, v.mean, v.se, hash)
            }
            EnvId::Example2 => {
                let env = ctx.env2()?;
                let hash = env.config_hash();
                let ds = ctx.load_dataset_checked(&hash)?;
                let levels = vec![
                    linspace(b.b_lo, b.b_hi, b.b_points),
                    linspace(b.b_lo, b.b_hi, b.b_points),
                    linspace(b.c_lo, b.c_hi, b.c_points),
                ];
                let nodes = cartesian(&levels);
                let table = grid_search(&env, &ds, &["b1", "b2", "c"], &nodes, |p| {
                    Ex2Boundary::new(p[0], p[1], p[2])
                })?;
                let bounds = [(b.b_lo, b.b_hi), (b.b_lo, b.b_hi), (b.c_lo, b.c_hi)];
                let fit = fit_and_maximize(&table, &bounds)?;
                let opt_policy = Ex2Boundary::new(fit.params[0], fit.params[1], fit.params[2])?;
                let v = evaluate_policy_value(&env, &ds, &opt_policy)?;
                (table, fit, v.mean, v.se, hash)
            }
        };
    let names: Vec<&str> = table.names.iter().map(String::as_str).collect();
    ctx.write("boundary_table.csv", &table.to_csv())?;
    ctx.write("boundary_surface.csv", &fit.surface.to_csv())?;
    ctx.write("boundary_optimum.csv", &optimum_csv(&names, &fit, value, se))?;
    println!("boundary: {}", describe_fit(&names, &fit, value, se));
    ctx.manifest(
        "boundary",
        hash,
        ctx.config.sim.seed,
        &["boundary_table.csv", "boundary_surface.csv", "boundary_optimum.csv"],
    )
}

pub fn oracle(ctx: &Ctx) -> Result<()> {
    ctx.require_env(EnvId::Example1, "oracle")?;
    ctx.ensure_out()?;
    let env = ctx.env1()?;
    let tables = exact_dp(env.config())?;
    let mut csv = String::from("i0,i1,c0,c1,v_continue,v_stop1,v_stop2,policy,count\n");
    for t in 0..=tables.t_max {
        for k in 0..=t {
            let val = |v: f64| if v.is_nan() { String::new() } else { fmt_f64(v) };
            let p = if t > 0 { k as f64 / t as f64 } else { 0.5 };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},1\n",
                t,
                k,
                fmt_f64(t as f64),
                fmt_f64(p),
                val(tables.value(t, k, seqstop::env::Action::Continue)),
                val(tables.value(t, k, seqstop::env::Action::Stop1)),
                val(tables.value(t, k, seqstop::env::Action::Stop2)),
                tables.policy(t, k).index(),
            ));
        }
    }
    ctx.write("oracle_table.csv", &csv)?;
    println!(
        "oracle: exact optimal value {:.4} -> oracle_table.csv",
        tables.root_value()
    );
    ctx.manifest(
        "oracle",
        env.config_hash(),
        ctx.config.sim.seed,
        &["oracle_table.csv"],
    )
}

pub fn qlearn(ctx: &Ctx) -> Result<()> {
    ctx.require_env(EnvId::Example1, "qlearn")?;
    ctx.ensure_out()?;
    let env = ctx.env1()?;
    let table = run_tabular(&env, &ctx.config.qlearn.to_core())?;
    ctx.write("qlearn_table.csv", &table.to_csv())?;
    println!(
        "qlearn: {} episodes -> qlearn_table.csv",
        ctx.config.qlearn.episodes
    );
    ctx.manifest(
        "qlearn",
        env.config_hash(),
        ctx.config.qlearn.seed,
        &["qlearn_table.csv"],
    )
}

pub fn dqn(ctx: &Ctx) -> Result<()> {
    ctx.require_env(EnvId::Example1, "dqn")?;
    ctx.ensure_out()?;
    let env = ctx.env1()?;
    let result = dqn_train(&env, &ctx.config.dqn.to_core())?;
    ctx.write("dqn_trace.csv", &trace_csv(&result.trace))?;
    if let Some(reason) = &result.diverged {
        println!(
            "dqn: diverged ({reason}) after {} steps; trace written",
            result.steps_run
        );
        ctx.manifest(
            "dqn",
            env.config_hash(),
            ctx.config.dqn.seed,
            &["dqn_trace.csv"],
        )?;
        return Err(Error::numeric(format!("dqn training diverged: {reason}")));
    }
    ctx.write(
        "dqn_table.csv",
        &net_table_csv(&env, &result.best, ctx.config.sim.p_bins),
    )?;
    std::fs::write(ctx.out_dir.join("dqn_policy.bin"), result.best.to_bytes())?;
    ctx.write("dqn_policy.csv", &result.best.to_csv())?;
    println!(
        "dqn: best eval return {:.3} (se {:.3}) at step {} -> dqn_table.csv",
        result.best_eval.mean_return, result.best_eval.se, result.best_eval.step
    );
    ctx.manifest(
        "dqn",
        env.config_hash(),
        ctx.config.dqn.seed,
        &["dqn_trace.csv", "dqn_table.csv", "dqn_policy.bin", "dqn_policy.csv"],
    )
}

pub fn pg(ctx: &Ctx) -> Result<()> {
    ctx.require_env(EnvId::Example2, "pg")?;
    ctx.ensure_out()?;
    let env = ctx.env2()?;
    let cfg = ctx.config.pg.to_core()?;
    let result = pg::train(&env, &cfg)?;
    ctx.write("pg_trace.csv", &pg::pg_trace_csv(&result.trace))?;
    if let Some(reason) = &result.diverged {
        println!("pg: diverged ({reason}); trace written");
        ctx.manifest("pg", env.config_hash(), cfg.seed, &["pg_trace.csv"])?;
        return Err(Error::numeric(format!("pg training diverged: {reason}")));
    }
    let (_, grid) = fit_state_stats(&env, cfg.stats_episodes, cfg.seed, [
        ctx.config.sim.sd_bins,
        ctx.config.sim.mean_bins,
    ]);
    let regions = extract_regions(
        &env,
        &result.best,
        &grid,
        ctx.config.pg.region_episodes,
        cfg.seed,
    )?;
    ctx.write("pg_regions.csv", &regions.to_csv())?;
    std::fs::write(ctx.out_dir.join("pg_policy.bin"), result.best.net.to_bytes())?;
    ctx.write("pg_policy.csv", &result.best.net.to_csv())?;
    let std_meta = format!(
        "mean = [{}, {}]\nscale = [{}, {}]\n",
        fmt_f64(result.best.standardizer.mean[0]),
        fmt_f64(result.best.standardizer.mean[1]),
        fmt_f64(result.best.standardizer.scale[0]),
        fmt_f64(result.best.standardizer.scale[1]),
    );
    ctx.write("pg_policy_meta.toml", &std_meta)?;
    println!(
        "pg: best eval return {:.3} (se {:.3}) at batch {}, banding {:.2} -> pg_regions.csv",
        result.best_eval.mean_return,
        result.best_eval.se,
        result.best_eval.batch,
        banding_fraction(&regions)
    );
    ctx.manifest(
        "pg",
        env.config_hash(),
        cfg.seed,
        &["pg_trace.csv", "pg_regions.csv", "pg_policy.bin", "pg_policy.csv", "pg_policy_meta.toml"],
    )
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let manifests = read_manifests(&ctx.out_dir)?;
    if manifests.is_empty() {
        return Err(Error::data(
            None,
            format!(
                "no manifests in {}; run a producing subcommand (simulate, dp, ...) first",
                ctx.out_dir.display()
            ),
        ));
    }
    let report_dir = ctx.out_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let mut summary = String::from("artifact report\n===============\n");
    for manifest in &manifests {
        summary.push_str(&format!(
            "\n[{}] env={} config_hash={} seed={}\n",
            manifest.command, manifest.env_id, manifest.config_hash, manifest.seed
        ));
        for artifact in &manifest.artifacts {
            let path = ctx.out_dir.join(artifact);
            if !path.exists() {
                return Err(Error::data(
                    None,
                    format!(
                        "artifact {artifact} listed by `{}` is missing; rerun `seqstop {}`",
                        manifest.command, manifest.command
                    ),
                ));
            }
            summary.push_str(&format!("  {artifact}\n"));
            render_artifact(&path, artifact, &report_dir, &mut summary)?;
        }
    }
    std::fs::write(report_dir.join("summary.txt"), &summary)?;
    println!("report: {} manifests -> {}/summary.txt", manifests.len(), report_dir.display());
    Ok(())
}

/// Renders the SVG views a given artifact supports; unknown artifacts are
/// listed without rendering.
fn render_artifact(
    path: &Path,
    name: &str,
    report_dir: &Path,
    summary: &mut String,
) -> Result<()> {
    let render_table = |stem: &str, title: &str| -> Result<()> {
        let csv = std::fs::read_to_string(path)?;
        let policy_svg = render_heatmap(&csv, HeatmapStyle::Policy, &format!("{title}: policy"))?;
        std::fs::write(report_dir.join(format!("{stem}_policy.svg")), policy_svg)?;
        let value_svg = render_heatmap(
            &csv,
            HeatmapStyle::Value("v_stop2"),
            &format!("{title}: stop-success value"),
        )?;
        std::fs::write(report_dir.join(format!("{stem}_value.svg")), value_svg)?;
        Ok(())
    };
    match name {
        "dp_table.csv" => render_table("dp", "constrained backward induction")?,
        "qlearn_table.csv" => render_table("qlearn", "tabular q-learning")?,
        "dqn_table.csv" => render_table("dqn", "dqn value network")?,
        "oracle_table.csv" => render_table("oracle", "exact backward induction")?,
        "pg_regions.csv" => {
            let csv = std::fs::read_to_string(path)?;
            let svg = render_heatmap(&csv, HeatmapStyle::Regions, "policy-gradient regions")?;
            std::fs::write(report_dir.join("pg_regions.svg"), svg)?;
        }
        "dqn_trace.csv" => {
            let csv = std::fs::read_to_string(path)?;
            let svg = render_trace(&csv, "step", "mean_return", "dqn evaluation return")?;
            std::fs::write(report_dir.join("dqn_trace.svg"), svg)?;
        }
        "pg_trace.csv" => {
            let csv = std::fs::read_to_string(path)?;
            let svg = render_trace(&csv, "batch", "mean_return", "pg evaluation return")?;
            std::fs::write(report_dir.join("pg_trace.svg"), svg)?;
        }
        "boundary_table.csv" => {
            let csv = std::fs::read_to_string(path)?;
            if csv.starts_with("phi,") {
                let svg = render_trace(&csv, "phi", "value", "boundary value by phi")?;
                std::fs::write(report_dir.join("boundary_value.svg"), svg)?;
            }
        }
        "boundary_optimum.csv" => {
            let csv = std::fs::read_to_string(path)?;
            if let Some(line) = csv.lines().nth(1) {
                summary.push_str(&format!("    optimum: {line}\n"));
            }
        }
        _ => {}
    }
    Ok(())
}
