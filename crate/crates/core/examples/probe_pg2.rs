use std::time::Instant;
use seqstop::boundary::evaluate_policy_value;
use seqstop::example2::{Ex2Config, Ex2Env};
use seqstop::forward::{run_forward, ForwardOptions};
use seqstop::pg::{banding_fraction, extract_regions, fit_state_stats, train, PgConfig, PgModePolicy};

fn main() {
    let cfg = Ex2Config::default();
    let env = Ex2Env::new(cfg).unwrap();
    let fresh = run_forward(&env, &cfg, &ForwardOptions { episodes: 2000, master_seed: 999, ..ForwardOptions::default() }).unwrap();
    let variants: [(&str, f64, f64, f64, u32, u32, u32); 4] = [
        ("T1 bias5 b256 lr1e-3 n800", 5.0, 1e-3, 0.01, 256, 800, 10),
        ("T2 bias5 b256 lr3e-4 n2000", 5.0, 3e-4, 0.01, 256, 2000, 25),
        ("T3 bias6 b512 lr1e-3 n600", 6.0, 1e-3, 0.01, 512, 600, 10),
        ("T4 bias5 b128 lr3e-3 n600", 5.0, 3e-3, 0.01, 128, 600, 10),
    ];
    for (name, bias, lr, ent, epb, batches, evp) in variants {
        let pc = PgConfig {
            initial_continue_logit: bias,
            entropy_coef: ent,
            learning_rate: lr,
            episodes_per_batch: epb,
            batches,
            eval_period: evp,
            ..PgConfig::default()
        };
        let t0 = Instant::now();
        let r = train(&env, &pc).unwrap();
        let v = evaluate_policy_value(&env, &fresh, &PgModePolicy { policy: &r.best, env: &env }).unwrap();
        let (_, grid) = fit_state_stats(&env, 200, 13, [50, 50]);
        let regions = extract_regions(&env, &r.best, &grid, 500, 13).unwrap();
        println!("{name}: {:.0}s best-internal {:.2}@{} fresh {:.3} (se {:.3}) banding {:.2}",
            t0.elapsed().as_secs_f64(), r.best_eval.mean_return, r.best_eval.batch, v.mean, v.se,
            banding_fraction(&regions));
    }
}
