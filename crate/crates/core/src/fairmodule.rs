//! The Fairness Module: `g(x) = n + W2 relu(W1 n + b1) + b2` with
//! `n = x / |x|`, a set of K learnable centroids, hand-written gradients of
//! the module pseudo-score `cos(g(x), mu_k)`, and Adam.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::centroids::CentroidSet;
use crate::curves::{dot, norm, unit_vector};
use crate::error::{Error, Result};

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";

/// Block offsets into the flat parameter vector
/// `[W1 (2d x d) | b1 (2d) | W2 (d x 2d) | b2 (d) | centroids (K x d)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub k: usize,
}

impl Layout {
    pub fn hidden(&self) -> usize {
        2 * self.d
    }

    pub fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden() * self.d
    }

    pub fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden()
    }

    pub fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.d * self.hidden()
    }

    pub fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.d
    }

    pub fn centroids(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.k * self.d
    }

    pub fn centroid(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.centroids().start + k * self.d;
        s..s + self.d
    }

    pub fn len(&self) -> usize {
        self.centroids().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named blocks, in storage order.
    pub fn blocks(&self) -> [(&'static str, std::ops::Range<usize>); 5] {
        [
            ("W1", self.w1()),
            ("b1", self.b1()),
            ("W2", self.w2()),
            ("b2", self.b2()),
            ("mu", self.centroids()),
        ]
    }
}

/// MLP weights plus learnable centroids, all in one flat `f64` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleParams {
    layout: Layout,
    values: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModuleParams;

impl ModuleParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        let layout = Layout { d, k };
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(d: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        let layout = Layout { d, k };
        if values.len() != layout.len() {
            return Err(Error::invalid(format!(
                "{} parameter values for d = {d}, k = {k} (expected {})",
                values.len(),
                layout.len()
            )));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("parameter {p} is not finite")));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn d(&self) -> usize {
        self.layout.d
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[self.layout.w1()]
    }

    pub fn b1(&self) -> &[f64] {
        &self.values[self.layout.b1()]
    }

    pub fn w2(&self) -> &[f64] {
        &self.values[self.layout.w2()]
    }

    pub fn b2(&self) -> &[f64] {
        &self.values[self.layout.b2()]
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.values[self.layout.centroid(k)]
    }

    pub fn block_mut(&mut self, range: std::ops::Range<usize>) -> &mut [f64] {
        &mut self.values[range]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

/// Zero MLP (so the module outputs the normalized input) and centroids
/// copied from the pre-trained estimate.
pub fn init_from_pretrained(cs: &CentroidSet) -> ModuleParams {
    let mut p = ModuleParams::zeros(cs.d(), cs.k());
    let range = p.layout.centroids();
    p.values[range].copy_from_slice(cs.as_slice());
    p
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub normalized: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn forward_cached(p: &ModuleParams, x: &[f64]) -> Result<ForwardCache> {
    let (d, h) = (p.d(), p.layout.hidden());
    if x.len() != d {
        return Err(Error::invalid(format!("input has length {}, expected {d}", x.len())));
    }
    let nx = norm(x);
    if nx == 0.0 || !nx.is_finite() {
        return Err(Error::numerical(format!("cannot normalize input of norm {nx}")));
    }
    let normalized = unit_vector(x);
    let (w1, b1, w2, b2) = (p.w1(), p.b1(), p.w2(), p.b2());
    let pre_activation: Vec<f64> = (0..h)
        .map(|r| dot(&w1[r * d..(r + 1) * d], &normalized) + b1[r])
        .collect();
    let hidden: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
    let output = (0..d)
        .map(|r| normalized[r] + dot(&w2[r * h..(r + 1) * h], &hidden) + b2[r])
        .collect();
    Ok(ForwardCache {
        normalized,
        pre_activation,
        hidden,
        output,
    })
}

pub fn forward(p: &ModuleParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_cached(p, x)?.output)
}

/// Cosine and its partial derivatives with respect to both arguments:
/// `d cos / du = v / (|u||v|) - cos * u / |u|^2`, symmetric in `v`.
pub struct CosineGrad {
    pub value: f64,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<CosineGrad> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::numerical(format!("degenerate norms |u| = {nu}, |v| = {nv}")));
    }
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| vi * inv - c * ui / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| ui * inv - c * vi / (nv * nv))
        .collect();
    Ok(CosineGrad {
        value: c.clamp(-1.0, 1.0),
        du,
        dv,
    })
}

/// `cos(g(x), mu_k)`, clamped to `[-1, 1]`.
pub fn module_pseudo_score(p: &ModuleParams, x: &[f64], k: usize) -> Result<f64> {
    let g = forward(p, x)?;
    crate::curves::cosine_score(&g, p.centroid(k))
}

/// Accumulates `grad_output^T d g / d theta` for the MLP blocks into `grads`.
/// ReLU's subgradient at exactly zero is zero.
pub fn backprop_output(p: &ModuleParams, cache: &ForwardCache, grad_output: &[f64], grads: &mut Gradients) {
    let (d, h) = (p.d(), p.layout.hidden());
    let layout = p.layout;
    let w2 = p.w2();
    {
        let gb2 = &mut grads.values[layout.b2()];
        for (g, o) in gb2.iter_mut().zip(grad_output) {
            *g += o;
        }
    }
    {
        let gw2 = &mut grads.values[layout.w2()];
        for r in 0..d {
            let o = grad_output[r];
            if o == 0.0 {
                continue;
            }
            for (g, a) in gw2[r * h..(r + 1) * h].iter_mut().zip(&cache.hidden) {
                *g += o * a;
            }
        }
    }
    let grad_pre: Vec<f64> = (0..h)
        .map(|j| {
            if cache.pre_activation[j] > 0.0 {
                (0..d).map(|r| w2[r * h + j] * grad_output[r]).sum()
            } else {
                0.0
            }
        })
        .collect();
    {
        let gb1 = &mut grads.values[layout.b1()];
        for (g, z) in gb1.iter_mut().zip(&grad_pre) {
            *g += z;
        }
    }
    let gw1 = &mut grads.values[layout.w1()];
    for (j, &z) in grad_pre.iter().enumerate() {
        if z == 0.0 {
            continue;
        }
        for (g, n) in gw1[j * d..(j + 1) * d].iter_mut().zip(&cache.normalized) {
            *g += z * n;
        }
    }
}

/// Gradient of `residual_grad * cos(g(x), mu_k)` with respect to every
/// parameter (only centroid row `k` is nonzero among the centroids).
pub fn backward(p: &ModuleParams, x: &[f64], k: usize, residual_grad: f64) -> Result<Gradients> {
    let mut grads = ModuleParams::zeros(p.d(), p.k());
    if k >= p.k() {
        return Err(Error::invalid(format!("centroid {k} outside [0, {})", p.k())));
    }
    let cache = forward_cached(p, x)?;
    let cg = cosine_with_grad(&cache.output, p.centroid(k))?;
    let grad_output: Vec<f64> = cg.du.iter().map(|g| residual_grad * g).collect();
    for (g, dv) in grads.values[p.layout.centroid(k)].iter_mut().zip(&cg.dv) {
        *g += residual_grad * dv;
    }
    backprop_output(p, &cache, &grad_output, &mut grads);
    Ok(grads)
}

/// Adam moments and step counter. Constants are the usual
/// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: &ModuleParams) -> Self {
        Self {
            m: vec![0.0; p.values.len()],
            v: vec![0.0; p.values.len()],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter, centroids included.
/// Non-finite gradients are rejected before anything is modified.
pub fn adam_step(p: &mut ModuleParams, state: &mut AdamState, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.layout != p.layout || state.m.len() != p.values.len() || state.v.len() != p.values.len() {
        return Err(Error::invalid("parameter, gradient and optimizer shapes differ"));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("gradient entry {i} is not finite")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((w, g), m), v) in p
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub d: usize,
    pub k: usize,
    pub epoch: usize,
    pub loss: f64,
    pub checksum: u32,
}

/// Writes `checkpoint.bin` (little-endian f64 in W1, b1, W2, b2, centroids
/// order) and `checkpoint.json` into `dir`.
pub fn save_checkpoint(p: &ModuleParams, epoch: usize, loss: f64, dir: &Path) -> Result<()> {
    save_checkpoint_named(p, epoch, loss, dir, CHECKPOINT_BIN, CHECKPOINT_JSON)
}

pub fn save_checkpoint_named(
    p: &ModuleParams,
    epoch: usize,
    loss: f64,
    dir: &Path,
    bin_name: &str,
    json_name: &str,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::invalid(format!("checkpoint loss must be finite, got {loss}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = binio::f64_to_bytes(&p.values);
    let header = CheckpointHeader {
        d: p.d(),
        k: p.k(),
        epoch,
        loss,
        checksum: binio::crc32(&bytes),
    };
    binio::write_atomic(&dir.join(bin_name), &bytes)?;
    binio::write_json(&dir.join(json_name), &header)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModuleParams, CheckpointHeader)> {
    let json_path = dir.join(CHECKPOINT_JSON);
    let bin_path = dir.join(CHECKPOINT_BIN);
    let header: CheckpointHeader = binio::read_json(&json_path)?;
    let layout = Layout {
        d: header.d,
        k: header.k,
    };
    let bytes = binio::read_file(&bin_path)?;
    let values = binio::bytes_to_f64(&bin_path, &bytes, layout.len())?;
    binio::verify_checksum(&bin_path, &bytes, Some(header.checksum))?;
    let p = ModuleParams::from_values(header.d, header.k, values)
        .map_err(|e| Error::format(&bin_path, e.to_string()))?;
    Ok((p, header))
}
