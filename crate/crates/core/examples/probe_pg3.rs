use seqstop::env::Action;
use seqstop::example2::{Ex2Config, Ex2Env};
use seqstop::nn::{Adam, Mlp, OutputActivation};
use seqstop::env::SeedSpec;
use seqstop::pg::{fit_state_stats, pg_gradient, rollout, Baseline, PolicyNet};

fn main() {
    let cfg = Ex2Config::default();
    let env = Ex2Env::new(cfg).unwrap();
    let (standardizer, _) = fit_state_stats(&env, 200, 13, [50, 50]);
    let mut net = Mlp::new(&[2, 64, 64, 3], OutputActivation::Softmax, SeedSpec::new(13, (1<<62)+(1<<21))).unwrap();
    net.set_output_bias(0, 3.0);
    let mut policy = PolicyNet { net, standardizer };
    let mut opt = Adam::new(&policy.net, 1e-3);
    for b in 0..40u64 {
        let batch = rollout(&env, &policy, 64, 13, b * 64).unwrap();
        let mean = batch.mean_return();
        let mut freq = [0usize; 3];
        let mut steps = 0usize;
        let mut bombs = 0usize;
        let mut wins = 0usize;
        for ep in &batch.episodes {
            if ep.ret < -500.0 { bombs += 1; }
            if ep.ret > 0.0 { wins += 1; }
            for s in &ep.steps {
                freq[s.action.index()] += 1;
                steps += 1;
            }
        }
        let var = batch.episodes.iter().map(|e| (e.ret - mean).powi(2)).sum::<f64>() / 64.0;
        let scale = var.sqrt().max(1e-8);
        let (mut grads, entropy) = pg_gradient(&batch, &policy.net, Baseline::BatchMean, 0.03, false, scale).unwrap();
        grads.scale(-1.0);
        opt.step(&mut policy.net, &grads).unwrap();
        if b % 2 == 0 {
            println!("b{b}: mean {mean:>8.1} steps {steps:>4} freq C{:>4} S1{:>3} S2{:>3} bombs {bombs:>2} wins {wins:>2} H {entropy:.3}", freq[0], freq[1], freq[2]);
        }
        let _ = Action::Continue;
    }
}
