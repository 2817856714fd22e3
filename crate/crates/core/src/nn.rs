//! From-scratch MLP with ReLU hidden layers, batch normalization, a clamp
//! output stage, and the frozen Laguerre output layer.
//!
//! Layer order per hidden layer: affine -> batch norm -> ReLU. The output
//! layer is affine; heads map its raw activation `xi` to control inputs:
//! clamp(xi[0]) for the plain head, clamp(L xi + U_ss) / clamp(L_0^T xi +
//! u_ss) for the Laguerre heads. Training gradients are exact reverse-mode
//! derivatives including the batch-statistics path; ReLU uses subgradient 0
//! at the kink and clamp passes gradient 1 at its exact bounds.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laguerre::LaguerreBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Elementwise clamp, the hard input-constraint stage.
pub fn clamp(xi: f64, u_min: f64, u_max: f64) -> f64 {
    xi.min(u_max).max(u_min)
}

/// Subgradient of [`clamp`]: pass-through inside and at the bounds.
pub fn clamp_grad(xi: f64, u_min: f64, u_max: f64) -> f64 {
    if xi >= u_min && xi <= u_max {
        1.0
    } else {
        0.0
    }
}

pub fn clamp_vec(xs: &[f64], u_min: f64, u_max: f64) -> Result<Vec<f64>> {
    if u_min > u_max {
        return Err(Error::InvalidParameter("clamp needs u_min <= u_max".into()));
    }
    Ok(xs.iter().map(|&x| clamp(x, u_min, u_max)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampBounds {
    pub u_min: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// Row-major out_dim x in_dim.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    fn apply(&self, input: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(batch * self.out_dim, 0.0);
        for s in 0..batch {
            let x = &input[s * self.in_dim..(s + 1) * self.in_dim];
            let y = &mut out[s * self.out_dim..(s + 1) * self.out_dim];
            for o in 0..self.out_dim {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                y[o] = self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub affine: Affine,
    pub bn: BatchNorm,
}

/// All learnable parameters of the MLP trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<HiddenLayer>,
    pub output: Affine,
}

/// Frozen Laguerre output layer: `g_L(eta) = L eta + U_ss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaguerreHead {
    /// Row-major N x M.
    pub l: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub u_ss: f64,
    pub u_ss_seq: Vec<f64>,
}

impl LaguerreHead {
    pub fn from_basis(basis: &LaguerreBasis<f64>, u_ss: f64) -> Self {
        Self {
            l: basis.matrix().to_vec(),
            n: basis.horizon(),
            m: basis.size(),
            u_ss,
            u_ss_seq: vec![u_ss; basis.horizon()],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.l[i * self.m..(i + 1) * self.m]
    }

    pub fn row_dot(&self, i: usize, eta: &[f64]) -> f64 {
        self.row(i).iter().zip(eta).map(|(l, e)| l * e).sum()
    }
}

/// Forward scratch retained for the backward pass (train-mode statistics).
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    batch: usize,
    input: Vec<f64>,
    /// Per hidden layer: normalized activation, inverse std, post-ReLU output.
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpParams {
    /// He-style uniform fan-in initialization; biases zero, batch-norm identity.
    pub fn init(input_dim: usize, hidden_sizes: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |in_dim: usize, out_dim: usize| {
            let bound = (6.0 / in_dim as f64).sqrt();
            Affine {
                w: (0..in_dim * out_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
                b: vec![0.0; out_dim],
                in_dim,
                out_dim,
            }
        };
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &n in hidden_sizes {
            hidden.push(HiddenLayer {
                affine: layer(prev, n),
                bn: BatchNorm::new(n),
            });
            prev = n;
        }
        let output = layer(prev, output_dim);
        Self { hidden, output }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.output.in_dim, |l| l.affine.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_dim
    }

    fn check_input(&self, xs: &[f64], batch: usize) -> Result<()> {
        if xs.len() != batch * self.input_dim() || batch == 0 {
            return Err(Error::DimensionMismatch {
                expected: batch * self.input_dim(),
                got: xs.len(),
            });
        }
        Ok(())
    }

    /// Raw output-layer activation `xi` for a batch (row-major batch x out).
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics; infer mode uses running statistics only.
    pub fn trunk_forward(
        &mut self,
        xs: &[f64],
        batch: usize,
        mode: Mode,
        mut cache: Option<&mut ForwardCache>,
    ) -> Result<Vec<f64>> {
        self.check_input(xs, batch)?;
        if let Some(c) = cache.as_deref_mut() {
            c.batch = batch;
            c.input = xs.to_vec();
            c.xhat.clear();
            c.inv_std.clear();
            c.post.clear();
        }
        let mut act = xs.to_vec();
        let mut pre = Vec::new();
        for layer in &mut self.hidden {
            let dim = layer.affine.out_dim;
            layer.affine.apply(&act, batch, &mut pre);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; dim];
                    let mut var = vec![0.0; dim];
                    for s in 0..batch {
                        for k in 0..dim {
                            mean[k] += pre[s * dim + k];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= batch as f64);
                    for s in 0..batch {
                        for k in 0..dim {
                            let d = pre[s * dim + k] - mean[k];
                            var[k] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= batch as f64);
                    let mom = layer.bn.momentum;
                    for k in 0..dim {
                        layer.bn.running_mean[k] =
                            (1.0 - mom) * layer.bn.running_mean[k] + mom * mean[k];
                        layer.bn.running_var[k] =
                            (1.0 - mom) * layer.bn.running_var[k] + mom * var[k];
                    }
                    (mean, var)
                }
                Mode::Infer => (layer.bn.running_mean.clone(), layer.bn.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + layer.bn.eps).sqrt()).collect();
            let mut xhat = vec![0.0; batch * dim];
            let mut post = vec![0.0; batch * dim];
            for s in 0..batch {
                for k in 0..dim {
                    let xh = (pre[s * dim + k] - mean[k]) * inv_std[k];
                    xhat[s * dim + k] = xh;
                    post[s * dim + k] = (layer.bn.gamma[k] * xh + layer.bn.beta[k]).max(0.0);
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.xhat.push(xhat);
                c.inv_std.push(inv_std);
                c.post.push(post.clone());
            }
            act = post;
        }
        let mut xi = Vec::new();
        self.output.apply(&act, batch, &mut xi);
        Ok(xi)
    }

    /// Plain head: `clamp(xi[0])` for a single state.
    pub fn forward_nmpc(&mut self, x: &[f64], mode: Mode, bounds: &ClampBounds) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.output_dim(),
            });
        }
        let xi = self.trunk_forward(x, 1, mode, None)?;
        Ok(clamp(xi[0], bounds.u_min, bounds.u_max))
    }

    /// Laguerre head: `clamp(L eta_hat + U_ss)` elementwise over the horizon.
    pub fn forward_lagnmpc(
        &mut self,
        head: &LaguerreHead,
        x: &[f64],
        mode: Mode,
        bounds: &ClampBounds,
    ) -> Result<Vec<f64>> {
        if self.output_dim() != head.m {
            return Err(Error::DimensionMismatch {
                expected: head.m,
                got: self.output_dim(),
            });
        }
        let eta = self.trunk_forward(x, 1, mode, None)?;
        Ok((0..head.n)
            .map(|i| clamp(head.row_dot(i, &eta) + head.u_ss, bounds.u_min, bounds.u_max))
            .collect())
    }

    /// Reduced Laguerre head: `clamp(L_0^T eta_hat + u_ss)`.
    pub fn forward_lagnmpc_first(
        &mut self,
        head: &LaguerreHead,
        x: &[f64],
        mode: Mode,
        bounds: &ClampBounds,
    ) -> Result<f64> {
        if self.output_dim() != head.m {
            return Err(Error::DimensionMismatch {
                expected: head.m,
                got: self.output_dim(),
            });
        }
        let eta = self.trunk_forward(x, 1, mode, None)?;
        Ok(clamp(head.row_dot(0, &eta) + head.u_ss, bounds.u_min, bounds.u_max))
    }

    /// Reverse-mode pass from `d(loss)/d(xi)` (batch x out_dim) to the flat
    /// trainable-parameter gradient. Requires the cache of a preceding
    /// train-mode forward on the same batch.
    pub fn backward(&self, cache: &ForwardCache, dxi: &[f64]) -> Result<Vec<f64>> {
        let batch = cache.batch;
        if batch == 0 || cache.xhat.len() != self.hidden.len() {
            return Err(Error::InvalidParameter(
                "backward requires a train-mode forward cache for this batch".into(),
            ));
        }
        if dxi.len() != batch * self.output.out_dim {
            return Err(Error::DimensionMismatch {
                expected: batch * self.output.out_dim,
                got: dxi.len(),
            });
        }
        let mut grad = vec![0.0; self.trainable_len()];
        let offsets = self.offsets();

        // Output layer.
        let out_in = if let Some(last) = cache.post.last() {
            last.as_slice()
        } else {
            cache.input.as_slice()
        };
        let (o_w, o_b) = offsets[self.hidden.len()];
        let (idim, odim) = (self.output.in_dim, self.output.out_dim);
        let mut dact = vec![0.0; batch * idim];
        for s in 0..batch {
            for o in 0..odim {
                let g = dxi[s * odim + o];
                grad[o_b + o] += g;
                for i in 0..idim {
                    grad[o_w + o * idim + i] += g * out_in[s * idim + i];
                    dact[s * idim + i] += self.output.w[o * idim + i] * g;
                }
            }
        }

        // Hidden layers, reverse.
        for l in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[l];
            let dim = layer.affine.out_dim;
            let xhat = &cache.xhat[l];
            let inv_std = &cache.inv_std[l];
            let post = &cache.post[l];
            let (w_off, b_off) = offsets[l];
            let g_off = b_off + dim;
            let be_off = g_off + dim;

            // ReLU then batch-norm scale/shift.
            let mut dy = vec![0.0; batch * dim];
            for s in 0..batch {
                for k in 0..dim {
                    let idx = s * dim + k;
                    if post[idx] > 0.0 {
                        dy[idx] = dact[idx];
                    }
                }
            }
            let mut sum_dy = vec![0.0; dim];
            let mut sum_dy_xhat = vec![0.0; dim];
            for s in 0..batch {
                for k in 0..dim {
                    let idx = s * dim + k;
                    grad[g_off + k] += dy[idx] * xhat[idx];
                    grad[be_off + k] += dy[idx];
                    sum_dy[k] += dy[idx];
                    sum_dy_xhat[k] += dy[idx] * xhat[idx];
                }
            }
            // Batch-statistics path of the normalization.
            let bf = batch as f64;
            let mut dpre = vec![0.0; batch * dim];
            for s in 0..batch {
                for k in 0..dim {
                    let idx = s * dim + k;
                    let dxh = dy[idx] * layer.bn.gamma[k];
                    dpre[idx] = inv_std[k]
                        * (dxh
                            - layer.bn.gamma[k] * sum_dy[k] / bf
                            - xhat[idx] * layer.bn.gamma[k] * sum_dy_xhat[k] / bf);
                }
            }

            // Affine backward.
            let prev: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            let pin = layer.affine.in_dim;
            let mut dprev = vec![0.0; batch * pin];
            for s in 0..batch {
                for k in 0..dim {
                    let g = dpre[s * dim + k];
                    grad[b_off + k] += g;
                    for i in 0..pin {
                        grad[w_off + k * pin + i] += g * prev[s * pin + i];
                        dprev[s * pin + i] += layer.affine.w[k * pin + i] * g;
                    }
                }
            }
            dact = dprev;
        }
        Ok(grad)
    }

    /// Flat layout: per hidden layer [w, b, gamma, beta], then output [w, b].
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        let mut cursor = 0;
        for layer in &self.hidden {
            let w = cursor;
            let b = w + layer.affine.w.len();
            offsets.push((w, b));
            cursor = b + layer.affine.b.len() + 2 * layer.bn.gamma.len();
        }
        offsets.push((cursor, cursor + self.output.w.len()));
        offsets
    }

    pub fn trainable_len(&self) -> usize {
        let mut n = self.output.w.len() + self.output.b.len();
        for layer in &self.hidden {
            n += layer.affine.w.len() + layer.affine.b.len() + 2 * layer.bn.gamma.len();
        }
        n
    }

    pub fn copy_trainable(&self, out: &mut [f64]) {
        let mut c = 0;
        let mut put = |src: &[f64], c: &mut usize| {
            out[*c..*c + src.len()].copy_from_slice(src);
            *c += src.len();
        };
        for layer in &self.hidden {
            put(&layer.affine.w, &mut c);
            put(&layer.affine.b, &mut c);
            put(&layer.bn.gamma, &mut c);
            put(&layer.bn.beta, &mut c);
        }
        put(&self.output.w, &mut c);
        put(&self.output.b, &mut c);
    }

    pub fn load_trainable(&mut self, src: &[f64]) {
        let mut c = 0;
        let take = |dst: &mut [f64], c: &mut usize| {
            dst.copy_from_slice(&src[*c..*c + dst.len()]);
            *c += dst.len();
        };
        for layer in &mut self.hidden {
            take(&mut layer.affine.w, &mut c);
            take(&mut layer.affine.b, &mut c);
            take(&mut layer.bn.gamma, &mut c);
            take(&mut layer.bn.beta, &mut c);
        }
        take(&mut self.output.w, &mut c);
        take(&mut self.output.b, &mut c);
    }

    /// True for entries subject to decoupled weight decay (affine W and b;
    /// batch-norm scale/shift and running statistics are exempt).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.trainable_len());
        for layer in &self.hidden {
            mask.extend(std::iter::repeat(true).take(layer.affine.w.len() + layer.affine.b.len()));
            mask.extend(std::iter::repeat(false).take(2 * layer.bn.gamma.len()));
        }
        mask.extend(std::iter::repeat(true).take(self.output.w.len() + self.output.b.len()));
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW optimizer state over the flat trainable-parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay_mask: Vec<bool>,
    scratch: Vec<f64>,
}

impl AdamW {
    pub fn new(params: &MlpParams, cfg: AdamWConfig) -> Result<Self> {
        if cfg.lr <= 0.0 {
            return Err(Error::InvalidParameter("learning rate must be positive".into()));
        }
        let n = params.trainable_len();
        Ok(Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay_mask: params.decay_mask(),
            scratch: vec![0.0; n],
        })
    }

    /// One decoupled-weight-decay Adam step with bias correction.
    pub fn step(&mut self, params: &mut MlpParams, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        params.copy_trainable(&mut self.scratch);
        for i in 0..grads.len() {
            if self.decay_mask[i] {
                self.scratch[i] -= c.lr * c.weight_decay * self.scratch[i];
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grads[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            self.scratch[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        params.load_trainable(&self.scratch);
        Ok(())
    }
}

/// Self-describing weight file: trunk parameters, optional Laguerre head, and
/// the clamp bounds. JSON floats round-trip f64 bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    /// Provenance lines (config hash, tool version).
    #[serde(default)]
    pub header: Vec<String>,
    pub params: MlpParams,
    pub head: Option<LaguerreHead>,
    pub clamp: ClampBounds,
}

impl NetworkFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
