//! Residual MLP drift `a_θ(t, x, v)` with hand-written backpropagation.
//!
//! ```text
//! z   = [sin(π 2^k τ), cos(π 2^k τ)]_{k<F} ++ (x - x_shift) / x_scale ++ (v - v_shift) / v_scale,  τ = t / T
//! h   = W_in z + b_in
//! h  += W2 silu(W1 silu(h) + b1) + b2        (per block)
//! out = out_scale (W_out silu(h) + b_out)
//! ```
//!
//! Parameters live in one flat vector; batch gradients are accumulated in fixed
//! chunks and summed in order, so results do not depend on thread count.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::Drift;

const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub width: usize,
    pub blocks: usize,
    pub frequencies: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 128,
            blocks: 3,
            frequencies: 6,
        }
    }
}

/// Fixed affine maps applied around the trainable body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub horizon: f64,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub v_shift: Vec<f64>,
    pub v_scale: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize, horizon: f64) -> Self {
        Normalization {
            horizon,
            x_shift: vec![0.0; dim],
            x_scale: vec![1.0; dim],
            v_shift: vec![0.0; dim],
            v_scale: vec![1.0; dim],
            out_scale: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn size(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone)]
struct Layout {
    input: Dense,
    blocks: Vec<(Dense, Dense)>,
    output: Dense,
    len: usize,
}

impl Layout {
    fn new(in_dim: usize, width: usize, blocks: usize, out_dim: usize) -> Self {
        let mut at = 0;
        let mut dense = |inputs: usize, outputs: usize| {
            let d = Dense {
                w: at,
                b: at + inputs * outputs,
                inputs,
                outputs,
            };
            at += d.size();
            d
        };
        let input = dense(in_dim, width);
        let blocks = (0..blocks).map(|_| (dense(width, width), dense(width, width))).collect();
        let output = dense(width, out_dim);
        Layout {
            input,
            blocks,
            output,
            len: at,
        }
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[r] = W x[r] + b` for every row.
fn dense_forward(p: &[f64], l: Dense, x: &[f64], y: &mut [f64]) {
    let w = &p[l.w..l.b];
    let b = &p[l.b..l.b + l.outputs];
    for (xr, yr) in x.chunks(l.inputs).zip(y.chunks_mut(l.outputs)) {
        for j in 0..l.outputs {
            yr[j] = b[j] + dot(&w[j * l.inputs..(j + 1) * l.inputs], xr);
        }
    }
}

/// Accumulates parameter gradients and returns the input gradient.
fn dense_backward(p: &[f64], g: &mut [f64], l: Dense, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    let w = &p[l.w..l.b];
    {
        let (gw, gb) = g[l.w..l.b + l.outputs].split_at_mut(l.inputs * l.outputs);
        for (xr, dyr) in x.chunks(l.inputs).zip(dy.chunks(l.outputs)) {
            for j in 0..l.outputs {
                if dyr[j] != 0.0 {
                    axpy(dyr[j], xr, &mut gw[j * l.inputs..(j + 1) * l.inputs]);
                    gb[j] += dyr[j];
                }
            }
        }
    }
    if let Some(dx) = dx {
        dx.fill(0.0);
        for (dxr, dyr) in dx.chunks_mut(l.inputs).zip(dy.chunks(l.outputs)) {
            for j in 0..l.outputs {
                axpy(dyr[j], &w[j * l.inputs..(j + 1) * l.inputs], dxr);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriftNet {
    config: NetConfig,
    dim: usize,
    layout: Layout,
    pub norm: Normalization,
    pub params: Vec<f64>,
    pub shadow: Vec<f64>,
}

/// Forward activations kept for the backward pass.
struct Cache {
    z: Vec<f64>,
    /// Residual stream before each block, then the final stream.
    h: Vec<Vec<f64>>,
    /// Block pre-activations `W1 silu(h) + b1`.
    u: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

impl DriftNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, dim: usize, norm: Normalization, rng: &mut R) -> Result<Self> {
        if config.width == 0 || config.frequencies == 0 || dim == 0 {
            return Err(Error::config("train.net", "width, frequencies and dimension must be positive"));
        }
        if norm.x_shift.len() != dim || norm.x_scale.len() != dim || norm.v_shift.len() != dim || norm.v_scale.len() != dim || norm.out_scale.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: norm.x_shift.len(),
            });
        }
        let layout = Layout::new(Self::input_dim(config, dim), config.width, config.blocks, dim);
        let mut params = vec![0.0; layout.len];
        let mut init = |l: Dense, gain: f64, rng: &mut R| {
            let sd = gain / (l.inputs as f64).sqrt();
            for w in &mut params[l.w..l.b] {
                *w = sd * rng.sample::<f64, _>(StandardNormal);
            }
        };
        init(layout.input, 1.0, rng);
        for &(a, b) in &layout.blocks {
            init(a, 1.0, rng);
            init(b, 0.1, rng);
        }
        // Output weights start at zero so the untrained drift is exactly zero.
        let shadow = params.clone();
        Ok(DriftNet {
            config,
            dim,
            layout,
            norm,
            params,
            shadow,
        })
    }

    /// Rebuilds a network from stored weights.
    pub fn from_parts(config: NetConfig, dim: usize, norm: Normalization, params: Vec<f64>, shadow: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(Self::input_dim(config, dim), config.width, config.blocks, dim);
        if params.len() != layout.len || shadow.len() != layout.len {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this architecture, found {} / {}",
                layout.len,
                params.len(),
                shadow.len()
            )));
        }
        Ok(DriftNet {
            config,
            dim,
            layout,
            norm,
            params,
            shadow,
        })
    }

    fn input_dim(config: NetConfig, dim: usize) -> usize {
        2 * config.frequencies + 2 * dim
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    fn embed(&self, t: &[f64], x: &[f64], v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let f = self.config.frequencies;
        let k = 2 * f + 2 * d;
        let mut z = vec![0.0; t.len() * k];
        for (r, zr) in z.chunks_mut(k).enumerate() {
            let tau = t[r] / self.norm.horizon;
            for j in 0..f {
                let a = std::f64::consts::PI * (1u64 << j) as f64 * tau;
                zr[2 * j] = a.sin();
                zr[2 * j + 1] = a.cos();
            }
            for c in 0..d {
                zr[2 * f + c] = (x[r * d + c] - self.norm.x_shift[c]) / self.norm.x_scale[c];
                zr[2 * f + d + c] = (v[r * d + c] - self.norm.v_shift[c]) / self.norm.v_scale[c];
            }
        }
        z
    }

    fn forward_cached(&self, p: &[f64], t: &[f64], x: &[f64], v: &[f64]) -> Cache {
        let rows = t.len();
        let w = self.config.width;
        let z = self.embed(t, x, v);
        let mut h0 = vec![0.0; rows * w];
        dense_forward(p, self.layout.input, &z, &mut h0);
        let mut h = vec![h0];
        let mut u = Vec::with_capacity(self.layout.blocks.len());
        let mut act = vec![0.0; rows * w];
        let mut delta = vec![0.0; rows * w];
        for &(l1, l2) in &self.layout.blocks {
            let cur = h.last().expect("stream starts non-empty");
            for (a, c) in act.iter_mut().zip(cur) {
                *a = silu(*c);
            }
            let mut pre = vec![0.0; rows * w];
            dense_forward(p, l1, &act, &mut pre);
            for (a, c) in act.iter_mut().zip(&pre) {
                *a = silu(*c);
            }
            dense_forward(p, l2, &act, &mut delta);
            let next: Vec<f64> = cur.iter().zip(&delta).map(|(a, b)| a + b).collect();
            u.push(pre);
            h.push(next);
        }
        let last = h.last().expect("stream starts non-empty");
        for (a, c) in act.iter_mut().zip(last) {
            *a = silu(*c);
        }
        let mut raw = vec![0.0; rows * self.dim];
        dense_forward(p, self.layout.output, &act, &mut raw);
        Cache { z, h, u, raw }
    }

    fn scale_output(&self, raw: &mut [f64]) {
        for row in raw.chunks_mut(self.dim) {
            for (o, s) in row.iter_mut().zip(&self.norm.out_scale) {
                *o *= s;
            }
        }
    }

    /// Batched forward pass with the given parameter vector; inputs are row-major.
    pub fn forward_with(&self, p: &[f64], t: &[f64], x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = self.forward_cached(p, t, x, v).raw;
        self.scale_output(&mut out);
        out
    }

    pub fn forward(&self, t: &[f64], x: &[f64], v: &[f64]) -> Vec<f64> {
        self.forward_with(&self.params, t, x, v)
    }

    /// Gradient of `Σ_r <dout_r, a_θ(r)>` with respect to the parameters, added into `g`.
    fn backward(&self, p: &[f64], cache: &Cache, dout: &[f64], g: &mut [f64]) {
        let rows = dout.len() / self.dim;
        let w = self.config.width;
        let mut draw = dout.to_vec();
        self.scale_output(&mut draw);

        let last = cache.h.last().expect("stream starts non-empty");
        let act: Vec<f64> = last.iter().map(|c| silu(*c)).collect();
        let mut dact = vec![0.0; rows * w];
        dense_backward(p, g, self.layout.output, &act, &draw, Some(&mut dact));
        let mut dh: Vec<f64> = dact.iter().zip(last).map(|(d, c)| d * silu_grad(*c)).collect();

        let mut tmp = vec![0.0; rows * w];
        for (b, &(l1, l2)) in self.layout.blocks.iter().enumerate().rev() {
            let h_in = &cache.h[b];
            let pre = &cache.u[b];
            let a2: Vec<f64> = pre.iter().map(|c| silu(*c)).collect();
            dense_backward(p, g, l2, &a2, &dh, Some(&mut tmp));
            let dpre: Vec<f64> = tmp.iter().zip(pre).map(|(d, c)| d * silu_grad(*c)).collect();
            let a1: Vec<f64> = h_in.iter().map(|c| silu(*c)).collect();
            dense_backward(p, g, l1, &a1, &dpre, Some(&mut tmp));
            for ((d, t), c) in dh.iter_mut().zip(&tmp).zip(h_in) {
                *d += t * silu_grad(*c);
            }
        }
        dense_backward(p, g, self.layout.input, &cache.z, &dh, None);
    }
}

/// One batch of regression data, row-major.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub target: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `(1/B) Σ |target - a_θ(t, x, v)|²` with parameters `p`.
pub fn matching_loss_with(net: &DriftNet, p: &[f64], batch: &Batch) -> f64 {
    let out = net.forward_with(p, &batch.t, &batch.x, &batch.v);
    let sse: f64 = out.iter().zip(&batch.target).map(|(a, b)| (a - b) * (a - b)).sum();
    sse / batch.len() as f64
}

pub fn matching_loss(net: &DriftNet, batch: &Batch) -> f64 {
    matching_loss_with(net, &net.params, batch)
}

/// Loss and its gradient with respect to `net.params`; targets are constants.
pub fn matching_loss_and_grad(net: &DriftNet, batch: &Batch) -> (f64, Vec<f64>) {
    let d = net.dim;
    let b = batch.len();
    let p = &net.params;
    let parts: Vec<(f64, Vec<f64>)> = (0..b.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(b);
            let (t, x, v) = (
                &batch.t[rows.clone()],
                &batch.x[rows.start * d..rows.end * d],
                &batch.v[rows.start * d..rows.end * d],
            );
            let target = &batch.target[rows.start * d..rows.end * d];
            let cache = net.forward_cached(p, t, x, v);
            let mut out = cache.raw.clone();
            net.scale_output(&mut out);
            let mut sse = 0.0;
            let dout: Vec<f64> = out
                .iter()
                .zip(target)
                .map(|(a, y)| {
                    sse += (a - y) * (a - y);
                    2.0 * (a - y) / b as f64
                })
                .collect();
            let mut g = vec![0.0; p.len()];
            net.backward(p, &cache, &dout, &mut g);
            (sse, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (sse, g) in parts {
        loss += sse;
        axpy(1.0, &g, &mut grad);
    }
    (loss / b as f64, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n: usize) -> Self {
        AdamW {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

/// `shadow <- decay shadow + (1 - decay) params`.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

/// The EMA weights of a network, as a simulation drift.
pub struct ShadowDrift<'a>(pub &'a DriftNet);

impl Drift for ShadowDrift<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn accelerate(&self, t: f64, _: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let ts = vec![t; x.len() / self.0.dim];
        out.copy_from_slice(&self.0.forward_with(&self.0.shadow, &ts, x, v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> DriftNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetConfig { width: 8, blocks: 2, frequencies: 2 };
        let norm = Normalization {
            horizon: 2.0,
            x_shift: vec![0.1, -0.2],
            x_scale: vec![1.5, 0.7],
            v_shift: vec![0.3, 0.0],
            v_scale: vec![2.0, 1.0],
            out_scale: vec![1.3, 0.8],
        };
        let mut net = DriftNet::new(cfg, 2, norm, &mut rng).unwrap();
        for p in net.params.iter_mut() {
            *p = rng.sample::<f64, _>(StandardNormal) * 0.5;
        }
        net
    }

    fn batch(seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |k: usize| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        Batch {
            t: g(n).into_iter().map(|c| c.abs().min(1.9)).collect(),
            x: g(2 * n),
            v: g(2 * n),
            target: g(2 * n),
        }
    }

    #[test]
    fn untrained_net_is_zero_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DriftNet::new(NetConfig::default(), 3, Normalization::identity(3, 4.0), &mut rng).unwrap();
        let out = net.forward(&[0.3, 2.0], &[1.0; 6], &[0.5; 6]);
        assert_eq!(out, vec![0.0; 6]);
        let b = Batch { t: vec![0.1], x: vec![0.0; 3], v: vec![0.0; 3], target: vec![1.0; 3] };
        assert_eq!(matching_loss(&net, &b), 3.0);
    }

    #[test]
    fn zero_net_unit_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DriftNet::new(NetConfig::default(), 2, Normalization::identity(2, 1.0), &mut rng).unwrap();
        let b = Batch { t: vec![0.1, 0.5], x: vec![0.0; 4], v: vec![0.0; 4], target: vec![1.0; 4] };
        assert_eq!(matching_loss(&net, &b), 2.0);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let net = small_net(1);
        let mut b = batch(2, 5);
        b.target = net.forward(&b.t, &b.x, &b.v);
        assert_eq!(matching_loss(&net, &b), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = small_net(3);
        let b = batch(4, 37);
        let (loss, grad) = matching_loss_and_grad(&net, &b);
        assert!((loss - matching_loss(&net, &b)).abs() < 1e-12 * loss);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let i = rng.random_range(0..net.num_params());
            let h = 1e-5;
            let mut p = net.params.clone();
            p[i] += h;
            let up = matching_loss_with(&net, &p, &b);
            p[i] -= 2.0 * h;
            let down = matching_loss_with(&net, &p, &b);
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / scale < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn ema_with_zero_decay_copies() {
        let mut s = vec![1.0, 2.0];
        ema_update(&mut s, &[3.0, -1.0], 0.0);
        assert_eq!(s, vec![3.0, -1.0]);
        ema_update(&mut s, &[0.0, 0.0], 0.5);
        assert_eq!(s, vec![1.5, -0.5]);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 1e-2);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn rejects_mismatched_checkpoint_weights() {
        let net = small_net(0);
        assert!(DriftNet::from_parts(net.config(), 2, net.norm.clone(), vec![0.0; 3], vec![0.0; 3]).is_err());
        assert!(DriftNet::from_parts(net.config(), 2, net.norm.clone(), net.params.clone(), net.shadow.clone()).is_ok());
    }
}
