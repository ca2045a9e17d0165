//! Contrastive variational autoencoder: a nonlinear counterpart of the
//! linear model, with separate decoders for shared and target-specific
//! factors, plus a plain VAE baseline for comparison.
//!
//! Target rows decode as `f_s(z) + f_t(t) + μx`, background rows as
//! `f_s(z) + μy`; both encoders are small ReLU MLPs with linear mean and
//! log-std heads. Everything is trained by reparameterized gradients
//! computed with exact manual backpropagation — no autodiff framework, so
//! the gradient tests pin down every term.

use nalgebra::{DMatrix, DVector};

use crate::data_model::ContrastivePair;
use crate::error::{ClvmError, Result};
use crate::num_core::rng::RngStream;
use crate::num_core::LN_2PI;
use crate::vi_engine::{adam_step, AdamState};

/// Log-std heads are clamped to this range; outside it the gradient is cut.
pub const LOGSTD_MIN: f64 = -6.0;
pub const LOGSTD_MAX: f64 = 3.0;

// ---------------------------------------------------------------------------
// MLP primitives
// ---------------------------------------------------------------------------

/// One dense layer, `out × in` weights plus bias.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: DMatrix::zeros(out_dim, in_dim),
            b: DVector::zeros(out_dim),
        }
    }

    /// Glorot-uniform initialization: entries in ±√(6/(fan_in+fan_out)).
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| rng.uniform_in(-a, a));
        Self {
            w,
            b: DVector::zeros(out_dim),
        }
    }

    /// Batch forward: rows are samples.
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.w.transpose();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] += self.b[j];
            }
        }
        out
    }

    /// Gradient of a scalar objective through this layer alone:
    /// returns (parameter gradients, gradient at the input).
    fn backward(&self, x: &DMatrix<f64>, d_out: &DMatrix<f64>) -> (LinearLayer, DMatrix<f64>) {
        let gw = d_out.transpose() * x;
        let gb = DVector::from_fn(self.b.len(), |j, _| d_out.column(j).sum());
        let dx = d_out * &self.w;
        (LinearLayer { w: gw, b: gb }, dx)
    }
}

/// Dense stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

/// Per-layer inputs and pre-activations retained for the backward pass.
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    preacts: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// `sizes` runs input → hidden… → output, so it has ≥ 2 entries.
    fn glorot(sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(ClvmError::Config(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(ClvmError::Config("MLP layer sizes must be positive".into()));
        }
        let layers = sizes
            .windows(2)
            .map(|wnd| LinearLayer::glorot(wnd[1], wnd[0], rng))
            .collect();
        Ok(Self { layers })
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let pre = layer.forward(&cur);
            cur = if li == last {
                pre.clone()
            } else {
                pre.map(|v| v.max(0.0))
            };
            preacts.push(pre);
        }
        (cur, MlpCache { inputs, preacts })
    }

    /// Exact reverse-mode pass; `d_out` is the gradient at the (linear)
    /// output. Returns per-layer gradients and the gradient at the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &DMatrix<f64>) -> (Mlp, DMatrix<f64>) {
        let last = self.layers.len() - 1;
        let mut grads = vec![LinearLayer::zeros(0, 0); self.layers.len()];
        let mut d_post = d_out.clone();
        for li in (0..self.layers.len()).rev() {
            let d_pre = if li == last {
                d_post
            } else {
                let mut dp = d_post;
                let pre = &cache.preacts[li];
                for i in 0..dp.nrows() {
                    for j in 0..dp.ncols() {
                        if pre[(i, j)] <= 0.0 {
                            dp[(i, j)] = 0.0;
                        }
                    }
                }
                dp
            };
            let (g, dx) = self.layers[li].backward(&cache.inputs[li], &d_pre);
            grads[li] = g;
            d_post = dx;
        }
        (Mlp { layers: grads }, d_post)
    }
}

// ---------------------------------------------------------------------------
// Parameter containers and flat (de)serialization for the optimizer
// ---------------------------------------------------------------------------

/// All trainable quantities of the contrastive autoencoder.
#[derive(Debug, Clone)]
pub struct CvaeParams {
    pub k: usize,
    pub t: usize,
    /// Target encoder trunk d → hidden…
    pub enc_x: Mlp,
    pub head_xz_mean: LinearLayer,
    pub head_xz_logstd: LinearLayer,
    pub head_xt_mean: LinearLayer,
    pub head_xt_logstd: LinearLayer,
    /// Background encoder trunk d → hidden…
    pub enc_y: Mlp,
    pub head_yz_mean: LinearLayer,
    pub head_yz_logstd: LinearLayer,
    /// Shared decoder k → … → d and target decoder t → … → d.
    pub dec_s: Mlp,
    pub dec_t: Mlp,
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub ln_sigma2: f64,
}

fn push_layer(out: &mut Vec<f64>, l: &LinearLayer) {
    out.extend_from_slice(l.w.as_slice());
    out.extend_from_slice(l.b.as_slice());
}

fn pull_layer(vals: &[f64], idx: &mut usize, l: &mut LinearLayer) {
    let wn = l.w.len();
    l.w.as_mut_slice().copy_from_slice(&vals[*idx..*idx + wn]);
    *idx += wn;
    let bn = l.b.len();
    l.b.as_mut_slice().copy_from_slice(&vals[*idx..*idx + bn]);
    *idx += bn;
}

fn push_mlp(out: &mut Vec<f64>, m: &Mlp) {
    for l in &m.layers {
        push_layer(out, l);
    }
}

fn pull_mlp(vals: &[f64], idx: &mut usize, m: &mut Mlp) {
    for l in &mut m.layers {
        pull_layer(vals, idx, l);
    }
}

impl CvaeParams {
    fn zeros_like(&self) -> Self {
        Self {
            k: self.k,
            t: self.t,
            enc_x: self.enc_x.zeros_like(),
            head_xz_mean: LinearLayer::zeros(self.head_xz_mean.w.nrows(), self.head_xz_mean.w.ncols()),
            head_xz_logstd: LinearLayer::zeros(self.head_xz_logstd.w.nrows(), self.head_xz_logstd.w.ncols()),
            head_xt_mean: LinearLayer::zeros(self.head_xt_mean.w.nrows(), self.head_xt_mean.w.ncols()),
            head_xt_logstd: LinearLayer::zeros(self.head_xt_logstd.w.nrows(), self.head_xt_logstd.w.ncols()),
            enc_y: self.enc_y.zeros_like(),
            head_yz_mean: LinearLayer::zeros(self.head_yz_mean.w.nrows(), self.head_yz_mean.w.ncols()),
            head_yz_logstd: LinearLayer::zeros(self.head_yz_logstd.w.nrows(), self.head_yz_logstd.w.ncols()),
            dec_s: self.dec_s.zeros_like(),
            dec_t: self.dec_t.zeros_like(),
            mu_x: DVector::zeros(self.mu_x.len()),
            mu_y: DVector::zeros(self.mu_y.len()),
            ln_sigma2: 0.0,
        }
    }

    /// Canonical flattening; gradients use the identical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_mlp(&mut out, &self.enc_x);
        push_layer(&mut out, &self.head_xz_mean);
        push_layer(&mut out, &self.head_xz_logstd);
        push_layer(&mut out, &self.head_xt_mean);
        push_layer(&mut out, &self.head_xt_logstd);
        push_mlp(&mut out, &self.enc_y);
        push_layer(&mut out, &self.head_yz_mean);
        push_layer(&mut out, &self.head_yz_logstd);
        push_mlp(&mut out, &self.dec_s);
        push_mlp(&mut out, &self.dec_t);
        out.extend_from_slice(self.mu_x.as_slice());
        out.extend_from_slice(self.mu_y.as_slice());
        out.push(self.ln_sigma2);
        out
    }

    pub fn read_flat(&mut self, vals: &[f64]) -> Result<()> {
        let mut idx = 0usize;
        pull_mlp(vals, &mut idx, &mut self.enc_x);
        pull_layer(vals, &mut idx, &mut self.head_xz_mean);
        pull_layer(vals, &mut idx, &mut self.head_xz_logstd);
        pull_layer(vals, &mut idx, &mut self.head_xt_mean);
        pull_layer(vals, &mut idx, &mut self.head_xt_logstd);
        pull_mlp(vals, &mut idx, &mut self.enc_y);
        pull_layer(vals, &mut idx, &mut self.head_yz_mean);
        pull_layer(vals, &mut idx, &mut self.head_yz_logstd);
        pull_mlp(vals, &mut idx, &mut self.dec_s);
        pull_mlp(vals, &mut idx, &mut self.dec_t);
        let d = self.mu_x.len();
        self.mu_x.as_mut_slice().copy_from_slice(&vals[idx..idx + d]);
        idx += d;
        self.mu_y.as_mut_slice().copy_from_slice(&vals[idx..idx + d]);
        idx += d;
        self.ln_sigma2 = vals[idx];
        idx += 1;
        if idx != vals.len() {
            return Err(ClvmError::Dimension(format!(
                "flat vector holds {} values but the model has {idx}",
                vals.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model construction and the training objective
// ---------------------------------------------------------------------------

/// Architecture and training knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CvaeOptions {
    pub k: usize,
    pub t: usize,
    /// Encoder trunk widths, input side first.
    pub enc_hidden: Vec<usize>,
    /// Decoder widths, latent side first.
    pub dec_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CvaeOptions {
    fn default() -> Self {
        Self {
            k: 8,
            t: 2,
            enc_hidden: vec![256, 128],
            dec_hidden: vec![128, 256],
            epochs: 80,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn mlp_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Encoder trunk runs data → hidden layers; the heads read its last width.
fn trunk_sizes(d: usize, enc_hidden: &[usize]) -> Result<Vec<usize>> {
    if enc_hidden.is_empty() {
        return Err(ClvmError::Config(
            "the encoder needs at least one hidden layer".into(),
        ));
    }
    let mut s = Vec::with_capacity(enc_hidden.len() + 1);
    s.push(d);
    s.extend_from_slice(enc_hidden);
    Ok(s)
}

/// Build randomly initialized parameters for data dimension `d`.
pub fn init_cvae(d: usize, opts: &CvaeOptions, rng: &mut RngStream) -> Result<CvaeParams> {
    if opts.k == 0 || opts.t == 0 {
        return Err(ClvmError::Config(
            "the contrastive autoencoder needs k ≥ 1 and t ≥ 1".into(),
        ));
    }
    let trunk = trunk_sizes(d, &opts.enc_hidden)?;
    let enc_x = Mlp::glorot(&trunk, rng)?;
    let enc_y = Mlp::glorot(&trunk, rng)?;
    let h = *trunk.last().unwrap();
    Ok(CvaeParams {
        k: opts.k,
        t: opts.t,
        head_xz_mean: LinearLayer::glorot(opts.k, h, rng),
        head_xz_logstd: LinearLayer::glorot(opts.k, h, rng),
        head_xt_mean: LinearLayer::glorot(opts.t, h, rng),
        head_xt_logstd: LinearLayer::glorot(opts.t, h, rng),
        head_yz_mean: LinearLayer::glorot(opts.k, h, rng),
        head_yz_logstd: LinearLayer::glorot(opts.k, h, rng),
        enc_x,
        enc_y,
        dec_s: Mlp::glorot(&mlp_sizes(opts.k, &opts.dec_hidden, d), rng)?,
        dec_t: Mlp::glorot(&mlp_sizes(opts.t, &opts.dec_hidden, d), rng)?,
        mu_x: DVector::zeros(d),
        mu_y: DVector::zeros(d),
        ln_sigma2: 0.0,
    })
}

fn clamp_logstd(raw: &DMatrix<f64>) -> DMatrix<f64> {
    raw.map(|v| v.clamp(LOGSTD_MIN, LOGSTD_MAX))
}

/// Zero the gradient wherever the clamp was active.
fn mask_clamped(d: &mut DMatrix<f64>, raw: &DMatrix<f64>) {
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            let r = raw[(i, j)];
            if !(LOGSTD_MIN..=LOGSTD_MAX).contains(&r) {
                d[(i, j)] = 0.0;
            }
        }
    }
}

/// KL(N(m, e^{2l}) ‖ N(0,1)) summed over a batch, plus its mean/log-std
/// gradients (allocated only when `want_grad`).
fn kl_block(
    means: &DMatrix<f64>,
    logstds: &DMatrix<f64>,
    want_grad: bool,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let mut kl = 0.0;
    let (r, c) = means.shape();
    let mut dm = DMatrix::zeros(if want_grad { r } else { 0 }, if want_grad { c } else { 0 });
    let mut dl = dm.clone();
    for i in 0..r {
        for j in 0..c {
            let m = means[(i, j)];
            let e2l = (2.0 * logstds[(i, j)]).exp();
            kl += 0.5 * (m * m + e2l - 1.0 - 2.0 * logstds[(i, j)]);
            if want_grad {
                dm[(i, j)] = m;
                dl[(i, j)] = e2l - 1.0;
            }
        }
    }
    (kl, dm, dl)
}

/// One minibatch objective evaluation.
///
/// Returns the minibatch estimate of the full-data bound (row sums scaled by
/// `n/|batch|` per set) and, optionally, exact gradients for every
/// parameter. `rng` supplies the reparameterization draws; calling twice
/// with the same stream and batches reproduces the value bit-for-bit.
pub fn cvae_batch_pass(
    params: &CvaeParams,
    x_batch: &DMatrix<f64>,
    y_batch: &DMatrix<f64>,
    scale_t: f64,
    scale_b: f64,
    rng: &mut RngStream,
    want_grad: bool,
) -> Result<(f64, Option<CvaeParams>)> {
    let d = params.mu_x.len();
    if x_batch.ncols() != d || y_batch.ncols() != d {
        return Err(ClvmError::Dimension(format!(
            "batches have {} / {} columns, model expects {d}",
            x_batch.ncols(),
            y_batch.ncols()
        )));
    }
    let (bt, bb) = (x_batch.nrows(), y_batch.nrows());
    if bt == 0 || bb == 0 {
        return Err(ClvmError::Config("batches must be non-empty".into()));
    }
    let sigma2 = params.ln_sigma2.exp();
    let mut grads = want_grad.then(|| params.zeros_like());
    let mut elbo = 0.0;

    // ---- target branch ----------------------------------------------------
    let (hx, cache_hx) = params.enc_x.forward(x_batch);
    let mz_raw = params.head_xz_mean.forward(&hx);
    let lz_raw = params.head_xz_logstd.forward(&hx);
    let mt_raw = params.head_xt_mean.forward(&hx);
    let lt_raw = params.head_xt_logstd.forward(&hx);
    let lz = clamp_logstd(&lz_raw);
    let lt = clamp_logstd(&lt_raw);

    let eps_z = DMatrix::from_fn(bt, params.k, |_, _| rng.normal());
    let eps_t = DMatrix::from_fn(bt, params.t, |_, _| rng.normal());
    let z = &mz_raw + lz.map(f64::exp).component_mul(&eps_z);
    let t_lat = &mt_raw + lt.map(f64::exp).component_mul(&eps_t);

    let (xs, cache_ds_t) = params.dec_s.forward(&z);
    let (xt, cache_dt) = params.dec_t.forward(&t_lat);
    let mut xhat = xs + xt;
    for i in 0..bt {
        for j in 0..d {
            xhat[(i, j)] += params.mu_x[j];
        }
    }

    let mut loglik_t = 0.0;
    let mut d_xhat = DMatrix::zeros(if want_grad { bt } else { 0 }, if want_grad { d } else { 0 });
    let mut d_lnsig = 0.0;
    for i in 0..bt {
        for j in 0..d {
            let r = x_batch[(i, j)] - xhat[(i, j)];
            loglik_t += -0.5 * (LN_2PI + params.ln_sigma2) - r * r / (2.0 * sigma2);
            if want_grad {
                d_xhat[(i, j)] = scale_t * r / sigma2;
                d_lnsig += scale_t * (-0.5 + r * r / (2.0 * sigma2));
            }
        }
    }
    let (kl_z, dm_z_kl, dl_z_kl) = kl_block(&mz_raw, &lz, want_grad);
    let (kl_t, dm_t_kl, dl_t_kl) = kl_block(&mt_raw, &lt, want_grad);
    elbo += scale_t * (loglik_t - kl_z - kl_t);

    if let Some(g) = grads.as_mut() {
        // Decoders.
        let (g_dt, d_tlat) = params.dec_t.backward(&cache_dt, &d_xhat);
        let (g_ds, d_z) = params.dec_s.backward(&cache_ds_t, &d_xhat);
        add_mlp(&mut g.dec_t, &g_dt);
        add_mlp(&mut g.dec_s, &g_ds);
        for j in 0..d {
            g.mu_x[j] += d_xhat.column(j).sum();
        }
        // Reparameterization into the heads.
        let mut dmz = d_z.clone();
        for i in 0..bt {
            for j in 0..params.k {
                dmz[(i, j)] -= scale_t * dm_z_kl[(i, j)];
            }
        }
        let mut dlz = d_z.component_mul(&lz.map(f64::exp)).component_mul(&eps_z);
        for i in 0..bt {
            for j in 0..params.k {
                dlz[(i, j)] -= scale_t * dl_z_kl[(i, j)];
            }
        }
        mask_clamped(&mut dlz, &lz_raw);
        let mut dmt = d_tlat.clone();
        let mut dlt = d_tlat.component_mul(&lt.map(f64::exp)).component_mul(&eps_t);
        for i in 0..bt {
            for j in 0..params.t {
                dmt[(i, j)] -= scale_t * dm_t_kl[(i, j)];
                dlt[(i, j)] -= scale_t * dl_t_kl[(i, j)];
            }
        }
        mask_clamped(&mut dlt, &lt_raw);
        // Heads, then the trunk.
        let (g_hzm, dh1) = params.head_xz_mean.backward(&hx, &dmz);
        let (g_hzl, dh2) = params.head_xz_logstd.backward(&hx, &dlz);
        let (g_htm, dh3) = params.head_xt_mean.backward(&hx, &dmt);
        let (g_htl, dh4) = params.head_xt_logstd.backward(&hx, &dlt);
        add_layer(&mut g.head_xz_mean, &g_hzm);
        add_layer(&mut g.head_xz_logstd, &g_hzl);
        add_layer(&mut g.head_xt_mean, &g_htm);
        add_layer(&mut g.head_xt_logstd, &g_htl);
        let dh = dh1 + dh2 + dh3 + dh4;
        let (g_enc, _) = params.enc_x.backward(&cache_hx, &dh);
        add_mlp(&mut g.enc_x, &g_enc);
    }

    // ---- background branch --------------------------------------------------
    let (hy, cache_hy) = params.enc_y.forward(y_batch);
    let mzy_raw = params.head_yz_mean.forward(&hy);
    let lzy_raw = params.head_yz_logstd.forward(&hy);
    let lzy = clamp_logstd(&lzy_raw);
    let eps_zy = DMatrix::from_fn(bb, params.k, |_, _| rng.normal());
    let zy = &mzy_raw + lzy.map(f64::exp).component_mul(&eps_zy);
    let (ys, cache_ds_b) = params.dec_s.forward(&zy);
    let mut yhat = ys;
    for i in 0..bb {
        for j in 0..d {
            yhat[(i, j)] += params.mu_y[j];
        }
    }
    let mut loglik_b = 0.0;
    let mut d_yhat = DMatrix::zeros(if want_grad { bb } else { 0 }, if want_grad { d } else { 0 });
    for i in 0..bb {
        for j in 0..d {
            let r = y_batch[(i, j)] - yhat[(i, j)];
            loglik_b += -0.5 * (LN_2PI + params.ln_sigma2) - r * r / (2.0 * sigma2);
            if want_grad {
                d_yhat[(i, j)] = scale_b * r / sigma2;
                d_lnsig += scale_b * (-0.5 + r * r / (2.0 * sigma2));
            }
        }
    }
    let (kl_zy, dm_zy_kl, dl_zy_kl) = kl_block(&mzy_raw, &lzy, want_grad);
    elbo += scale_b * (loglik_b - kl_zy);

    if let Some(g) = grads.as_mut() {
        let (g_ds, d_zy) = params.dec_s.backward(&cache_ds_b, &d_yhat);
        add_mlp(&mut g.dec_s, &g_ds);
        for j in 0..d {
            g.mu_y[j] += d_yhat.column(j).sum();
        }
        let mut dmzy = d_zy.clone();
        let mut dlzy = d_zy.component_mul(&lzy.map(f64::exp)).component_mul(&eps_zy);
        for i in 0..bb {
            for j in 0..params.k {
                dmzy[(i, j)] -= scale_b * dm_zy_kl[(i, j)];
                dlzy[(i, j)] -= scale_b * dl_zy_kl[(i, j)];
            }
        }
        mask_clamped(&mut dlzy, &lzy_raw);
        let (g_hm, dh1) = params.head_yz_mean.backward(&hy, &dmzy);
        let (g_hl, dh2) = params.head_yz_logstd.backward(&hy, &dlzy);
        add_layer(&mut g.head_yz_mean, &g_hm);
        add_layer(&mut g.head_yz_logstd, &g_hl);
        let (g_enc, _) = params.enc_y.backward(&cache_hy, &(dh1 + dh2));
        add_mlp(&mut g.enc_y, &g_enc);
        g.ln_sigma2 = d_lnsig;
    }

    if !elbo.is_finite() {
        return Err(ClvmError::NonFinite(
            "autoencoder bound is not finite".into(),
        ));
    }
    Ok((elbo, grads))
}

fn add_layer(acc: &mut LinearLayer, g: &LinearLayer) {
    acc.w += &g.w;
    acc.b += &g.b;
}

fn add_mlp(acc: &mut Mlp, g: &Mlp) {
    for (a, l) in acc.layers.iter_mut().zip(&g.layers) {
        add_layer(a, l);
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CvaeFit {
    pub params: CvaeParams,
    /// Mean minibatch bound per epoch.
    pub trace: Vec<f64>,
    /// Encoder posterior means for the target rows, n×(t+k), t first.
    pub target_latents: DMatrix<f64>,
    /// Encoder posterior means for the background rows, m×k.
    pub background_latents: DMatrix<f64>,
}

const TAG_INIT: u64 = 0x4956;
const TAG_SHUFFLE: u64 = 0x5348;
const TAG_EPS: u64 = 0x4550;

/// Train the contrastive autoencoder with Adam on shuffled minibatches.
/// Fully deterministic given `opts.seed`.
pub fn fit_cvae(pair: &ContrastivePair, opts: &CvaeOptions) -> Result<CvaeFit> {
    if pair.has_missing() {
        return Err(ClvmError::MissingData(
            "the autoencoder path needs complete data; impute first".into(),
        ));
    }
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(ClvmError::Config("epochs and batch must be positive".into()));
    }
    let (n, m, d) = (pair.n(), pair.m(), pair.d());
    let root = RngStream::new(opts.seed);
    let mut params = init_cvae(d, opts, &mut root.derive(TAG_INIT))?;

    // Data-driven intercept and noise initialization.
    for j in 0..d {
        params.mu_x[j] = pair.target.column(j).mean();
        params.mu_y[j] = pair.background.column(j).mean();
    }
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..d {
            let r = pair.target[(i, j)] - params.mu_x[j];
            var += r * r;
        }
    }
    for i in 0..m {
        for j in 0..d {
            let r = pair.background[(i, j)] - params.mu_y[j];
            var += r * r;
        }
    }
    params.ln_sigma2 = (var / ((n + m) * d) as f64).max(1e-6).ln();

    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len(), opts.lr);
    let bt = opts.batch.min(n);
    let bb = opts.batch.min(m);
    let steps = (n.max(m) + opts.batch - 1) / opts.batch;
    let mut trace = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut shuffle_rng = root.derive2(TAG_SHUFFLE, epoch as u64);
        let perm_t = shuffle_rng.permutation(n);
        let perm_b = shuffle_rng.permutation(m);
        let mut epoch_elbo = 0.0;
        for step in 0..steps {
            let xb = gather_rows(&pair.target, &perm_t, step * bt, bt);
            let yb = gather_rows(&pair.background, &perm_b, step * bb, bb);
            let mut eps_rng = root
                .derive2(TAG_EPS, epoch as u64)
                .derive(step as u64);
            let (elbo, grads) = cvae_batch_pass(
                &params,
                &xb,
                &yb,
                n as f64 / xb.nrows() as f64,
                m as f64 / yb.nrows() as f64,
                &mut eps_rng,
                true,
            )
            .map_err(|e| {
                ClvmError::NonFinite(format!(
                    "training diverged at epoch {epoch}, step {step}: {e}"
                ))
            })?;
            let g = grads.expect("gradients requested").to_flat();
            adam_step(&mut adam, &mut flat, &g)?;
            params.read_flat(&flat)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(ClvmError::NonFinite(format!(
                    "training diverged at epoch {epoch}, step {step}: non-finite parameter"
                )));
            }
            epoch_elbo += elbo;
        }
        trace.push(epoch_elbo / steps as f64);
    }

    let target_latents = encode_target(&params, &pair.target);
    let background_latents = encode_background(&params, &pair.background);
    Ok(CvaeFit {
        params,
        trace,
        target_latents,
        background_latents,
    })
}

/// Rows `perm[start..start+len]` (indices wrapping around) as a matrix.
fn gather_rows(data: &DMatrix<f64>, perm: &[usize], start: usize, len: usize) -> DMatrix<f64> {
    let n = perm.len();
    DMatrix::from_fn(len, data.ncols(), |i, j| {
        data[(perm[(start + i) % n], j)]
    })
}

/// Posterior means `(t | z)` for target rows.
pub fn encode_target(params: &CvaeParams, rows: &DMatrix<f64>) -> DMatrix<f64> {
    let (h, _) = params.enc_x.forward(rows);
    let mt = params.head_xt_mean.forward(&h);
    let mz = params.head_xz_mean.forward(&h);
    let mut out = DMatrix::zeros(rows.nrows(), params.t + params.k);
    for i in 0..rows.nrows() {
        for p in 0..params.t {
            out[(i, p)] = mt[(i, p)];
        }
        for q in 0..params.k {
            out[(i, params.t + q)] = mz[(i, q)];
        }
    }
    out
}

/// Posterior means of the shared factor for background rows.
pub fn encode_background(params: &CvaeParams, rows: &DMatrix<f64>) -> DMatrix<f64> {
    let (h, _) = params.enc_y.forward(rows);
    params.head_yz_mean.forward(&h)
}

/// Draw synthetic rows from the fitted generative model.
pub fn sample_generative(
    params: &CvaeParams,
    n_target: usize,
    n_background: usize,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = RngStream::new(seed);
    let d = params.mu_x.len();
    let sigma = params.ln_sigma2.exp().sqrt();
    let z = rng.normal_matrix(n_target, params.k);
    let t = rng.normal_matrix(n_target, params.t);
    let (xs, _) = params.dec_s.forward(&z);
    let (xt, _) = params.dec_t.forward(&t);
    let mut target = xs + xt;
    for i in 0..n_target {
        for j in 0..d {
            target[(i, j)] += params.mu_x[j] + sigma * rng.normal();
        }
    }
    let zb = rng.normal_matrix(n_background, params.k);
    let (ys, _) = params.dec_s.forward(&zb);
    let mut background = ys;
    for i in 0..n_background {
        for j in 0..d {
            background[(i, j)] += params.mu_y[j] + sigma * rng.normal();
        }
    }
    (target, background)
}

// ---------------------------------------------------------------------------
// Plain VAE baseline
// ---------------------------------------------------------------------------

/// A standard VAE on a single matrix; the comparison point that shows what
/// contrastive structure buys.
#[derive(Debug, Clone)]
pub struct VaeParams {
    pub latent: usize,
    pub enc: Mlp,
    pub head_mean: LinearLayer,
    pub head_logstd: LinearLayer,
    pub dec: Mlp,
    pub mu: DVector<f64>,
    pub ln_sigma2: f64,
}

impl VaeParams {
    fn zeros_like(&self) -> Self {
        Self {
            latent: self.latent,
            enc: self.enc.zeros_like(),
            head_mean: LinearLayer::zeros(self.head_mean.w.nrows(), self.head_mean.w.ncols()),
            head_logstd: LinearLayer::zeros(self.head_logstd.w.nrows(), self.head_logstd.w.ncols()),
            dec: self.dec.zeros_like(),
            mu: DVector::zeros(self.mu.len()),
            ln_sigma2: 0.0,
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push_mlp(&mut out, &self.enc);
        push_layer(&mut out, &self.head_mean);
        push_layer(&mut out, &self.head_logstd);
        push_mlp(&mut out, &self.dec);
        out.extend_from_slice(self.mu.as_slice());
        out.push(self.ln_sigma2);
        out
    }

    fn read_flat(&mut self, vals: &[f64]) -> Result<()> {
        let mut idx = 0usize;
        pull_mlp(vals, &mut idx, &mut self.enc);
        pull_layer(vals, &mut idx, &mut self.head_mean);
        pull_layer(vals, &mut idx, &mut self.head_logstd);
        pull_mlp(vals, &mut idx, &mut self.dec);
        let d = self.mu.len();
        self.mu.as_mut_slice().copy_from_slice(&vals[idx..idx + d]);
        idx += d;
        self.ln_sigma2 = vals[idx];
        idx += 1;
        if idx != vals.len() {
            return Err(ClvmError::Dimension(format!(
                "flat vector holds {} values but the model has {idx}",
                vals.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VaeFit {
    pub params: VaeParams,
    pub trace: Vec<f64>,
    /// Posterior means, n×latent.
    pub latents: DMatrix<f64>,
}

fn vae_batch_pass(
    params: &VaeParams,
    x_batch: &DMatrix<f64>,
    scale: f64,
    rng: &mut RngStream,
    want_grad: bool,
) -> Result<(f64, Option<VaeParams>)> {
    let d = params.mu.len();
    let b = x_batch.nrows();
    let sigma2 = params.ln_sigma2.exp();
    let (h, cache_h) = params.enc.forward(x_batch);
    let m_raw = params.head_mean.forward(&h);
    let l_raw = params.head_logstd.forward(&h);
    let l = clamp_logstd(&l_raw);
    let eps = DMatrix::from_fn(b, params.latent, |_, _| rng.normal());
    let u = &m_raw + l.map(f64::exp).component_mul(&eps);
    let (xr, cache_dec) = params.dec.forward(&u);
    let mut xhat = xr;
    for i in 0..b {
        for j in 0..d {
            xhat[(i, j)] += params.mu[j];
        }
    }
    let mut loglik = 0.0;
    let mut d_xhat = DMatrix::zeros(if want_grad { b } else { 0 }, if want_grad { d } else { 0 });
    let mut d_lnsig = 0.0;
    for i in 0..b {
        for j in 0..d {
            let r = x_batch[(i, j)] - xhat[(i, j)];
            loglik += -0.5 * (LN_2PI + params.ln_sigma2) - r * r / (2.0 * sigma2);
            if want_grad {
                d_xhat[(i, j)] = scale * r / sigma2;
                d_lnsig += scale * (-0.5 + r * r / (2.0 * sigma2));
            }
        }
    }
    let (kl, dm_kl, dl_kl) = kl_block(&m_raw, &l, want_grad);
    let elbo = scale * (loglik - kl);
    if !elbo.is_finite() {
        return Err(ClvmError::NonFinite(
            "autoencoder bound is not finite".into(),
        ));
    }
    if !want_grad {
        return Ok((elbo, None));
    }
    let mut g = params.zeros_like();
    let (g_dec, d_u) = params.dec.backward(&cache_dec, &d_xhat);
    add_mlp(&mut g.dec, &g_dec);
    for j in 0..d {
        g.mu[j] += d_xhat.column(j).sum();
    }
    let mut dm = d_u.clone();
    let mut dl = d_u.component_mul(&l.map(f64::exp)).component_mul(&eps);
    for i in 0..b {
        for j in 0..params.latent {
            dm[(i, j)] -= scale * dm_kl[(i, j)];
            dl[(i, j)] -= scale * dl_kl[(i, j)];
        }
    }
    mask_clamped(&mut dl, &l_raw);
    let (g_hm, dh1) = params.head_mean.backward(&h, &dm);
    let (g_hl, dh2) = params.head_logstd.backward(&h, &dl);
    add_layer(&mut g.head_mean, &g_hm);
    add_layer(&mut g.head_logstd, &g_hl);
    let (g_enc, _) = params.enc.backward(&cache_h, &(dh1 + dh2));
    add_mlp(&mut g.enc, &g_enc);
    g.ln_sigma2 = d_lnsig;
    Ok((elbo, Some(g)))
}

/// Train a plain VAE on one matrix with `latent` factors; architecture and
/// schedule mirror [`fit_cvae`] so comparisons are like-for-like.
pub fn fit_vae(data: &DMatrix<f64>, latent: usize, opts: &CvaeOptions) -> Result<VaeFit> {
    if latent == 0 {
        return Err(ClvmError::Config("latent dimension must be positive".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ClvmError::MissingData(
            "the autoencoder path needs complete data; impute first".into(),
        ));
    }
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(ClvmError::Config("epochs and batch must be positive".into()));
    }
    let (n, d) = data.shape();
    let root = RngStream::new(opts.seed);
    let mut rng = root.derive(TAG_INIT);
    let trunk = trunk_sizes(d, &opts.enc_hidden)?;
    let h = *trunk.last().unwrap();
    let mut params = VaeParams {
        latent,
        enc: Mlp::glorot(&trunk, &mut rng)?,
        head_mean: LinearLayer::glorot(latent, h, &mut rng),
        head_logstd: LinearLayer::glorot(latent, h, &mut rng),
        dec: Mlp::glorot(&mlp_sizes(latent, &opts.dec_hidden, d), &mut rng)?,
        mu: DVector::zeros(d),
        ln_sigma2: 0.0,
    };
    for j in 0..d {
        params.mu[j] = data.column(j).mean();
    }
    let mut var = 0.0;
    for i in 0..n {
        for j in 0..d {
            let r = data[(i, j)] - params.mu[j];
            var += r * r;
        }
    }
    params.ln_sigma2 = (var / (n * d) as f64).max(1e-6).ln();

    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len(), opts.lr);
    let b = opts.batch.min(n);
    let steps = (n + opts.batch - 1) / opts.batch;
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut shuffle_rng = root.derive2(TAG_SHUFFLE, epoch as u64);
        let perm = shuffle_rng.permutation(n);
        let mut epoch_elbo = 0.0;
        for step in 0..steps {
            let xb = gather_rows(data, &perm, step * b, b);
            let mut eps_rng = root.derive2(TAG_EPS, epoch as u64).derive(step as u64);
            let (elbo, grads) =
                vae_batch_pass(&params, &xb, n as f64 / b as f64, &mut eps_rng, true).map_err(
                    |e| {
                        ClvmError::NonFinite(format!(
                            "training diverged at epoch {epoch}, step {step}: {e}"
                        ))
                    },
                )?;
            let g = grads.expect("gradients requested").to_flat();
            adam_step(&mut adam, &mut flat, &g)?;
            params.read_flat(&flat)?;
            epoch_elbo += elbo;
        }
        trace.push(epoch_elbo / steps as f64);
    }
    let (h_all, _) = params.enc.forward(data);
    let latents = params.head_mean.forward(&h_all);
    Ok(VaeFit {
        params,
        trace,
        latents,
    })
}

// ---------------------------------------------------------------------------
// Benchmark data: class signal buried in strong shared structure
// ---------------------------------------------------------------------------

/// Synthetic 16-dimensional benchmark where the target classes live in a
/// 2-dimensional target-only plane while a much stronger 6-dimensional
/// correlated factor runs through both matrices.
///
/// Target rows are `x = A s + B v + 0.5 ε` with `s ∈ R²` drawn around one of
/// four class means at (±2, ±2) with within-class scatter 0.4, `v ~ N(0, I₆)`
/// the shared factor, and `A` orthonormal so class geometry survives into
/// observation space. Background rows are `y = B v + 0.5 ε`. The shared
/// loading `B` is ~1.6× stronger than the class plane, so a model that cannot
/// subtract it dilutes the class clusters with shared variance.
pub fn generate_signal_noise(
    n_per_class: usize,
    m_background: usize,
    seed: u64,
) -> Result<ContrastivePair> {
    if n_per_class == 0 || m_background == 0 {
        return Err(ClvmError::Config("sample counts must be positive".into()));
    }
    const D: usize = 16;
    const CLASSES: usize = 4;
    const CLASS_MEANS: [(f64, f64); CLASSES] = [(2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)];
    let root = RngStream::new(seed);
    let mut rng_load = root.derive(0x4c44);
    // Class plane: 16×2 with orthonormal columns (Gram–Schmidt on a random
    // draw), so distances among class means carry over to observations.
    let raw = rng_load.normal_matrix(D, 2);
    let a0 = raw.column(0).normalize();
    let mut a1 = raw.column(1) - &a0 * raw.column(1).dot(&a0);
    a1.normalize_mut();
    let mut class_plane = DMatrix::zeros(D, 2);
    class_plane.set_column(0, &a0);
    class_plane.set_column(1, &a1);
    // Shared loading: 16×6, strong.
    let shared = rng_load.normal_matrix(D, 6) * 1.6;
    let mut rng_t = root.derive(0x5447);
    let mut rng_b = root.derive(0x4247);

    let n = n_per_class * CLASSES;
    let mut target = DMatrix::zeros(n, D);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        labels.push(class as i64);
        let (cx, cy) = CLASS_MEANS[class];
        let s = DVector::from_column_slice(&[
            cx + 0.4 * rng_t.normal(),
            cy + 0.4 * rng_t.normal(),
        ]);
        let v = DVector::from_fn(6, |_, _| rng_t.normal());
        let mean = &class_plane * s + &shared * v;
        for j in 0..D {
            target[(i, j)] = mean[j] + 0.5 * rng_t.normal();
        }
    }
    let mut background = DMatrix::zeros(m_background, D);
    for i in 0..m_background {
        let v = DVector::from_fn(6, |_, _| rng_b.normal());
        let mean = &shared * v;
        for j in 0..D {
            background[(i, j)] = mean[j] + 0.5 * rng_b.normal();
        }
    }
    let mut pair = ContrastivePair::new(target, background)?;
    pair.target_labels = Some(labels);
    Ok(pair)
}
