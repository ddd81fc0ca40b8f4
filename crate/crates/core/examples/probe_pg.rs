use std::time::Instant;
use seqstop::env::{Action, Summary};
use seqstop::boundary::{cartesian, evaluate_policy_value, fit_and_maximize, grid_search, linspace, Ex2Boundary};
use seqstop::example2::{Ex2Config, Ex2Env};
use seqstop::forward::{run_forward, ForwardOptions};
use seqstop::pg::{banding_fraction, extract_regions, fit_state_stats, train, PgConfig, PgModePolicy};

fn main() {
    let cfg = Ex2Config::default();
    let env = Ex2Env::new(cfg).unwrap();

    // Boundary side of criterion 7.
    let t0 = Instant::now();
    let ds = run_forward(&env, &cfg, &ForwardOptions { episodes: 1000, master_seed: 20240601, ..ForwardOptions::default() }).unwrap();
    println!("ex2 forward sim: {:.1}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let levels = vec![linspace(0.0, 3.0, 10), linspace(0.0, 3.0, 10), linspace(0.0, 1.0, 10)];
    let nodes = cartesian(&levels);
    let table = grid_search(&env, &ds, &["b1","b2","c"], &nodes, |p| Ex2Boundary::new(p[0], p[1], p[2])).unwrap();
    let fit = fit_and_maximize(&table, &[(0.0,3.0),(0.0,3.0),(0.0,1.0)]).unwrap();
    println!("grid search {:.1}s: b1={:.3} b2={:.3} c={:.3} fallback={} note={}",
        t0.elapsed().as_secs_f64(), fit.params[0], fit.params[1], fit.params[2], fit.fallback, fit.note);
    let best = &table.points[table.best_index()];
    println!("best node: {:?} value {:.2} se {:.2}", best.params, best.mean, best.se);
    let v = evaluate_policy_value(&env, &ds, &Ex2Boundary::new(fit.params[0], fit.params[1], fit.params[2]).unwrap()).unwrap();
    println!("U(phi*) on dataset: {:.3} (se {:.3})", v.mean, v.se);

    // PG side.
    let t0 = Instant::now();
    let result = train(&env, &PgConfig::default()).unwrap();
    println!("pg train {:.1}s: best {:.3} (se {:.3}) at batch {}", t0.elapsed().as_secs_f64(),
        result.best_eval.mean_return, result.best_eval.se, result.best_eval.batch);
    for p in result.trace.iter().take(25) {
        println!("  batch {} ret {:.2} se {:.2} H {:.3}", p.batch, p.mean_return, p.se, p.entropy);
    }
    let (_, grid) = fit_state_stats(&env, 200, 13, [50, 50]);
    let regions = extract_regions(&env, &result.best, &grid, 500, 13).unwrap();
    println!("banding fraction: {:.3}", banding_fraction(&regions));

    // Baselines for the pg train op example.
    let fresh = run_forward(&env, &cfg, &ForwardOptions { episodes: 4000, master_seed: 999, ..ForwardOptions::default() }).unwrap();
    let always = |_t: u32, _s: Summary| Action::Stop1;
    let never = |_t: u32, _s: Summary| Action::Continue;
    let v_pg = evaluate_policy_value(&env, &fresh, &PgModePolicy { policy: &result.best, env: &env }).unwrap();
    let v_always = evaluate_policy_value(&env, &fresh, &always).unwrap();
    let v_never = evaluate_policy_value(&env, &fresh, &never).unwrap();
    println!("pg fresh {:.3} (se {:.3}) | always-stop1 {:.3} | never-stop {:.3} (se {:.3})",
        v_pg.mean, v_pg.se, v_always.mean, v_never.mean, v_never.se);
}
