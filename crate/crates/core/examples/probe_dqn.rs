use std::time::Instant;
use seqstop::boundary::evaluate_policy_value;
use seqstop::example1::{Ex1Config, Ex1Env};
use seqstop::forward::{run_forward, ForwardOptions};
use seqstop::qlearn::{dqn_train, DqnConfig, NetPolicy};

fn main() {
    let cfg = Ex1Config::default();
    let env = Ex1Env::new(cfg).unwrap();
    let fresh = run_forward(&env, &cfg, &ForwardOptions { episodes: 4000, master_seed: 777001, ..ForwardOptions::default() }).unwrap();
    let variants = [
        ("E lr1e-3 eps->0.05@20%", 1e-3, 0.05, 0.2, 50_000),
        ("F lr1e-3 eps->0.15@50%", 1e-3, 0.15, 0.5, 50_000),
        ("G lr3e-4 eps->0.05@20%", 3e-4, 0.05, 0.2, 50_000),
        ("H lr1e-3 eps->0.10@30% buf20k", 1e-3, 0.10, 0.3, 20_000),
    ];
    for (name, lr, ef, df, cap) in variants {
        let dc = DqnConfig {
            total_steps: 200_000,
            learning_rate: lr,
            epsilon_final: ef,
            epsilon_decay_frac: df,
            buffer_capacity: cap,
            eval_episodes: 1000,
            ..DqnConfig::default()
        };
        let t0 = Instant::now();
        let r = dqn_train(&env, &dc).unwrap();
        let v = evaluate_policy_value(&env, &fresh, &NetPolicy { net: &r.best, env: &env }).unwrap();
        println!("{name}: {:.0}s best-internal {:.2}@{} fresh {:.3} (se {:.3})",
            t0.elapsed().as_secs_f64(), r.best_eval.mean_return, r.best_eval.step, v.mean, v.se);
    }
}
