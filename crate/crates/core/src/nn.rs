//! Minimal feedforward network with reverse-mode gradients and an
//! adaptive-moment optimizer, in 64-bit floats throughout.
//!
//! The fixed topology is dense layers with rectifier hidden units and a
//! linear or softmax output. One network type serves both the action-value
//! head (linear) and the stochastic-policy head (softmax); policy-gradient
//! code can also inject gradients directly at the logits.

use rand::Rng;

use crate::env::SeedSpec;
use crate::error::{Error, Result};
use crate::forward::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Softmax,
}

/// One dense layer, weights row-major (out x in).
#[derive(Debug, Clone)]
struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

impl Layer {
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.fan_out {
            let row = &self.w[o * self.fan_in..(o + 1) * self.fan_in];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
    }
}

/// Dense feedforward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub output: OutputActivation,
}

/// Per-layer parameter gradients, mirroring the network's shapes.
#[derive(Debug, Clone)]
pub struct Grads {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Grads {
        Grads {
            dw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            db: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.dw.iter_mut().chain(self.db.iter_mut()) {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        for (i, g) in self.dw.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient in layer {i} weights"
                )));
            }
        }
        for (i, g) in self.db.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient in layer {i} biases"
                )));
            }
        }
        Ok(())
    }
}

/// Cached forward pass over a batch: inputs, every pre-activation, and
/// every post-activation, laid out per layer as row-major (rows x units).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    inputs: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Network outputs (post-activation of the last layer).
    pub fn outputs(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }

    /// Output-layer pre-activations (the logits of a softmax head).
    pub fn pre_logits(&self) -> Vec<f64> {
        self.pre.last().expect("at least one layer").clone()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl Mlp {
    /// Architecture `sizes[0] -> sizes[1] -> ... -> sizes.last()`, rectifier
    /// hidden units, fan-in-scaled uniform initialization.
    pub fn new(sizes: &[usize], output: OutputActivation, seed: SeedSpec) -> Result<Mlp> {
        if sizes.len() < 2 {
            return Err(Error::config("network needs input and output sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let mut rng = seed.rng();
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    w: (0..fan_in * fan_out)
                        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                        .collect(),
                    b: vec![0.0; fan_out],
                    fan_in,
                    fan_out,
                }
            })
            .collect();
        Ok(Mlp { layers, output })
    }

    /// Overwrites one output-layer bias (e.g. to start a policy near a
    /// chosen action).
    pub fn set_output_bias(&mut self, output: usize, value: f64) {
        let last = self.layers.len() - 1;
        self.layers[last].b[output] = value;
    }

    pub fn n_inputs(&self) -> usize {
        self.layers.first().expect("nonempty").fan_in
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.n_inputs()];
        v.extend(self.layers.iter().map(|l| l.fan_out));
        v
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass over a row-major batch (`rows x n_inputs`), caching
    /// activations for the backward pass.
    pub fn forward(&self, batch: &[f64]) -> ForwardCache {
        let n_in = self.n_inputs();
        assert!(
            !batch.is_empty() && batch.len() % n_in == 0,
            "batch length {} not a multiple of input size {n_in}",
            batch.len()
        );
        let rows = batch.len() / n_in;
        let n_layers = self.layers.len();
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut current: &[f64] = batch;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; rows * layer.fan_out];
            for r in 0..rows {
                layer.forward(
                    &current[r * layer.fan_in..(r + 1) * layer.fan_in],
                    &mut z[r * layer.fan_out..(r + 1) * layer.fan_out],
                );
            }
            let mut a = z.clone();
            let is_output = li == n_layers - 1;
            if !is_output {
                for v in &mut a {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            } else if self.output == OutputActivation::Softmax {
                for r in 0..rows {
                    softmax_in_place(&mut a[r * layer.fan_out..(r + 1) * layer.fan_out]);
                }
            }
            pre.push(z);
            post.push(a);
            current = &post[li];
        }
        ForwardCache {
            rows,
            inputs: batch.to_vec(),
            pre,
            post,
        }
    }

    /// Outputs only, for callers that do not need gradients.
    pub fn predict(&self, batch: &[f64]) -> Vec<f64> {
        let cache = self.forward(batch);
        cache.post.last().expect("layers").clone()
    }

    /// Backward pass from gradients with respect to the network outputs
    /// (post-activation). For a softmax output the gradient is pushed
    /// through the softmax Jacobian.
    pub fn backward(&self, cache: &ForwardCache, d_outputs: &[f64]) -> Result<Grads> {
        let last = self.layers.len() - 1;
        let n_out = self.layers[last].fan_out;
        assert_eq!(d_outputs.len(), cache.rows * n_out, "output grad shape");
        let d_logits = match self.output {
            OutputActivation::Linear => d_outputs.to_vec(),
            OutputActivation::Softmax => {
                let probs = &cache.post[last];
                let mut dz = vec![0.0; d_outputs.len()];
                for r in 0..cache.rows {
                    let range = r * n_out..(r + 1) * n_out;
                    let y = &probs[range.clone()];
                    let dy = &d_outputs[range.clone()];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for i in 0..n_out {
                        dz[r * n_out + i] = y[i] * (dy[i] - dot);
                    }
                }
                dz
            }
        };
        self.backward_from_logits(cache, &d_logits)
    }

    /// Backward pass from gradients with respect to the output layer's
    /// pre-activations (logits). This is the natural entry point for
    /// score-function gradients, where d_logits = pi - onehot.
    pub fn backward_from_logits(&self, cache: &ForwardCache, d_logits: &[f64]) -> Result<Grads> {
        let mut grads = Grads::zeros_like(self);
        let mut delta = d_logits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let below: &[f64] = if li == 0 {
                &cache.inputs
            } else {
                &cache.post[li - 1]
            };
            let dw = &mut grads.dw[li];
            let db = &mut grads.db[li];
            for r in 0..cache.rows {
                let d_row = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                let x_row = &below[r * layer.fan_in..(r + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = d_row[o];
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let w_row = &mut dw[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (wi, xi) in w_row.iter_mut().zip(x_row) {
                        *wi += d * xi;
                    }
                }
            }
            if li > 0 {
                // Propagate through the rectifier below.
                let mut next = vec![0.0; cache.rows * layer.fan_in];
                let pre_below = &cache.pre[li - 1];
                for r in 0..cache.rows {
                    let d_row = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                    let next_row = &mut next[r * layer.fan_in..(r + 1) * layer.fan_in];
                    for o in 0..layer.fan_out {
                        let d = d_row[o];
                        if d == 0.0 {
                            continue;
                        }
                        let w_row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (n, wi) in next_row.iter_mut().zip(w_row) {
                            *n += d * wi;
                        }
                    }
                    for (i, n) in next_row.iter_mut().enumerate() {
                        if pre_below[r * layer.fan_in + i] <= 0.0 {
                            *n = 0.0;
                        }
                    }
                }
                delta = next;
            }
        }
        grads.check_finite()?;
        Ok(grads)
    }

    /// Flat binary layout: magic, layer count, per-layer shapes, then
    /// row-major weights and biases as little-endian 64-bit floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(match self.output {
            OutputActivation::Linear => 0,
            OutputActivation::Softmax => 1,
        });
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Mlp> {
        let bad = |msg: &str| Error::data(None, format!("network file: {msg}"));
        if bytes.len() < MAGIC.len() + 5 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut pos = MAGIC.len();
        let output = match bytes[pos] {
            0 => OutputActivation::Linear,
            1 => OutputActivation::Softmax,
            _ => return Err(bad("unknown output activation")),
        };
        pos += 1;
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let end = *pos + 4;
            if end > bytes.len() {
                return Err(bad("truncated header"));
            }
            let v = u32::from_le_bytes(bytes[*pos..end].try_into().unwrap());
            *pos = end;
            Ok(v)
        };
        let n_layers = read_u32(&mut pos)? as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = read_u32(&mut pos)? as usize;
            let fan_out = read_u32(&mut pos)? as usize;
            shapes.push((fan_in, fan_out));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (fan_in, fan_out) in shapes {
            let n = fan_in * fan_out + fan_out;
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated parameters"));
            }
            let vals: Vec<f64> = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            layers.push(Layer {
                w: vals[..fan_in * fan_out].to_vec(),
                b: vals[fan_in * fan_out..].to_vec(),
                fan_in,
                fan_out,
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if layers.is_empty() {
            return Err(bad("no layers"));
        }
        Ok(Mlp { layers, output })
    }

    /// Parameter dump for inspection: layer, kind (w/b), row, col, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,row,col,value\n");
        for (li, l) in self.layers.iter().enumerate() {
            for o in 0..l.fan_out {
                for i in 0..l.fan_in {
                    out.push_str(&format!("{li},w,{o},{i},{}\n", fmt_f64(l.w[o * l.fan_in + i])));
                }
            }
            for (o, v) in l.b.iter().enumerate() {
                out.push_str(&format!("{li},b,{o},0,{}\n", fmt_f64(*v)));
            }
        }
        out
    }
}

const MAGIC: &[u8] = b"MLPv1\n";

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Adaptive-moment optimizer state (first/second moment accumulators with
/// bias correction).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            v_w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            m_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            v_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    /// One descent step along `grads` (pass the negated gradient to
    /// ascend).
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        grads.check_finite()?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let hp = (self.learning_rate, self.beta1, self.beta2, self.epsilon);
        for li in 0..net.layers.len() {
            update_slice(
                &mut net.layers[li].w,
                &grads.dw[li],
                &mut self.m_w[li],
                &mut self.v_w[li],
                hp,
                bc1,
                bc2,
            );
            update_slice(
                &mut net.layers[li].b,
                &grads.db[li],
                &mut self.m_b[li],
                &mut self.v_b[li],
                hp,
                bc1,
                bc2,
            );
        }
        Ok(())
    }
}

fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    (lr, beta1, beta2, eps): (f64, f64, f64, f64),
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(n: u64) -> SeedSpec {
        SeedSpec::new(1_000_000 + n, 0)
    }

    /// Scalar test loss: sum of fixed random coefficients times outputs.
    fn loss(net: &Mlp, batch: &[f64], coeffs: &[f64]) -> f64 {
        net.predict(batch).iter().zip(coeffs).map(|(y, c)| y * c).sum()
    }

    fn analytic_grads(net: &Mlp, batch: &[f64], coeffs: &[f64]) -> Grads {
        let cache = net.forward(batch);
        net.backward(&cache, coeffs).unwrap()
    }

    /// Central finite differences on every parameter.
    fn numeric_grads(net: &Mlp, batch: &[f64], coeffs: &[f64], h: f64) -> Grads {
        let mut out = Grads::zeros_like(net);
        let mut probe = net.clone();
        for li in 0..net.layers.len() {
            for i in 0..net.layers[li].w.len() {
                let orig = net.layers[li].w[i];
                probe.layers[li].w[i] = orig + h;
                let up = loss(&probe, batch, coeffs);
                probe.layers[li].w[i] = orig - h;
                let down = loss(&probe, batch, coeffs);
                probe.layers[li].w[i] = orig;
                out.dw[li][i] = (up - down) / (2.0 * h);
            }
            for i in 0..net.layers[li].b.len() {
                let orig = net.layers[li].b[i];
                probe.layers[li].b[i] = orig + h;
                let up = loss(&probe, batch, coeffs);
                probe.layers[li].b[i] = orig - h;
                let down = loss(&probe, batch, coeffs);
                probe.layers[li].b[i] = orig;
                out.db[li][i] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    /// Smallest |pre-activation| across hidden units; configurations with a
    /// unit close to the rectifier kink would corrupt the finite-difference
    /// reference.
    fn min_hidden_preactivation(net: &Mlp, batch: &[f64]) -> f64 {
        let cache = net.forward(batch);
        let mut min = f64::INFINITY;
        for li in 0..net.layers.len() - 1 {
            for v in &cache.pre[li] {
                min = min.min(v.abs());
            }
        }
        min
    }

    #[test]
    fn gradients_match_central_differences_on_random_configurations() {
        let mut rng = SeedSpec::new(55, 0).rng();
        let mut checked = 0;
        let mut attempt = 0;
        while checked < 20 {
            attempt += 1;
            assert!(attempt < 200, "could not find enough clean configurations");
            let n_in = 1 + (rng.random::<f64>() * 3.0) as usize;
            let n_out = 1 + (rng.random::<f64>() * 3.0) as usize;
            let mut sizes = vec![n_in];
            for _ in 0..(1 + attempt % 2) {
                sizes.push(2 + (rng.random::<f64>() * 6.0) as usize);
            }
            sizes.push(n_out);
            let output = if attempt % 3 == 0 {
                OutputActivation::Softmax
            } else {
                OutputActivation::Linear
            };
            let net = Mlp::new(&sizes, output, seed(attempt as u64)).unwrap();
            let rows = 1 + attempt % 3;
            let batch: Vec<f64> = (0..rows * n_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            if min_hidden_preactivation(&net, &batch) < 1e-3 {
                continue;
            }
            let coeffs: Vec<f64> = (0..rows * n_out).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let analytic = analytic_grads(&net, &batch, &coeffs);
            let numeric = numeric_grads(&net, &batch, &coeffs, 1e-5);
            let mut worst = 0.0f64;
            for li in 0..analytic.dw.len() {
                for (a, n) in analytic.dw[li].iter().zip(&numeric.dw[li]) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
                for (a, n) in analytic.db[li].iter().zip(&numeric.db[li]) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                    worst = worst.max(rel);
                }
            }
            assert!(
                worst < 1e-4,
                "config {attempt} ({sizes:?}, {output:?}): worst rel err {worst:.3e}"
            );
            checked += 1;
        }
    }

    #[test]
    fn linear_net_gradient_is_regression_gradient() {
        // No hidden layers: d loss / dW = c x', d loss / db = c.
        let net = Mlp::new(&[3, 2], OutputActivation::Linear, seed(7)).unwrap();
        let x = [0.3, -1.2, 2.0];
        let c = [0.7, -0.4];
        let g = analytic_grads(&net, &x, &c);
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.dw[0][o * 3 + i] - c[o] * x[i]).abs() < 1e-15);
            }
            assert!((g.db[0][o] - c[o]).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut net = Mlp::new(&[2, 3], OutputActivation::Softmax, seed(8)).unwrap();
        for l in &mut net.layers {
            for v in &mut l.w {
                *v = 0.0;
            }
        }
        let y = net.predict(&[0.4, 0.6]);
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let total: f64 = y.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adam_reduces_quadratic_regression_loss_monotonically() {
        // Fixed task: fit y = x1^2 + x2 on 32 points, full-batch steps.
        let mut rng = SeedSpec::new(77, 0).rng();
        let n = 32;
        let mut xs = Vec::with_capacity(2 * n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.random::<f64>() * 2.0 - 1.0;
            let b = rng.random::<f64>() * 2.0 - 1.0;
            xs.extend_from_slice(&[a, b]);
            ys.push(a * a + b);
        }
        let mut net = Mlp::new(&[2, 16, 1], OutputActivation::Linear, seed(9)).unwrap();
        let mut opt = Adam::new(&net, 1e-3);
        let mse = |net: &Mlp| -> f64 {
            net.predict(&xs)
                .iter()
                .zip(&ys)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / n as f64
        };
        let mut prev = mse(&net);
        let first = prev;
        for _ in 0..100 {
            let cache = net.forward(&xs);
            let preds = cache.outputs().to_vec();
            let d: Vec<f64> = preds
                .iter()
                .zip(&ys)
                .map(|(p, y)| 2.0 * (p - y) / n as f64)
                .collect();
            let grads = net.backward(&cache, &d).unwrap();
            opt.step(&mut net, &grads).unwrap();
            let now = mse(&net);
            assert!(now <= prev + 1e-12, "loss rose: {prev} -> {now}");
            prev = now;
        }
        assert!(prev < first);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut net = Mlp::new(&[2, 8, 3], OutputActivation::Linear, seed(10)).unwrap();
            let mut opt = Adam::new(&net, 1e-3);
            let xs = [0.1, 0.9, -0.4, 0.2];
            for _ in 0..10 {
                let cache = net.forward(&xs);
                let d = vec![1.0; cache.outputs().len()];
                let g = net.backward(&cache, &d).unwrap();
                opt.step(&mut net, &g).unwrap();
            }
            net.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn binary_round_trip_preserves_parameters() {
        let net = Mlp::new(&[2, 5, 3], OutputActivation::Softmax, seed(11)).unwrap();
        let bytes = net.to_bytes();
        let back = Mlp::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.layer_sizes(), net.layer_sizes());
        assert_eq!(back.output, net.output);
        // Truncation is caught.
        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Mlp::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn non_finite_gradients_name_the_layer() {
        let net = Mlp::new(&[2, 4, 2], OutputActivation::Linear, seed(12)).unwrap();
        let cache = net.forward(&[0.5, 0.5]);
        let err = net.backward(&cache, &[f64::NAN, 1.0]).unwrap_err();
        assert!(err.to_string().contains("layer"), "{err}");
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [0.2, -1.5, 3.0];
        let ls = log_softmax(&logits);
        let mut sm = logits.to_vec();
        softmax_in_place(&mut sm);
        for (a, b) in ls.iter().zip(&sm) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}
