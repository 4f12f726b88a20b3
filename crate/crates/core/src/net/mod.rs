//! Convolutional embedding network mapping a channel to an uplink power
//! vector.
//!
//! The input is the `2 x (Nt K)` real image of `vec(H)` (real parts on row 0,
//! imaginary parts on row 1, user-major), divided by the largest column
//! norm. Two blocks of `3x3` convolution (8 kernels, stride 1, padding 1),
//! batch normalisation and ReLU are followed by a fully-connected layer to
//! `K` logits, a sigmoid, and a rescaling onto the simplex
//! `{q >= 0, sum q = P}`.
//!
//! Trainable parameters live in one flat vector; [`Tensor`] names the slices.
//! Convolutions carry no bias since the following batch normalisation shift
//! absorbs it.

mod rate;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{channel_scale, Dataset};
use crate::error::{Error, Result};
use crate::linalg::CMat;

pub use rate::sumrate_and_grad_q;
pub use train::{
    train, Adam, AdamConfig, EarlyStop, Objective, ParamGroup, TrainConfig, TrainOutcome,
};

/// Kernels per convolutional layer.
pub const CHANNELS: usize = 8;
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

pub const MODEL_FORMAT: &str = "beamadapt-embedding";
pub const MODEL_VERSION: u32 = 1;

/// Antenna and user counts fixing every tensor shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub nt: usize,
    pub k: usize,
}

impl Arch {
    pub fn new(nt: usize, k: usize) -> Self {
        Self { nt, k }
    }

    /// Image width `Nt K`.
    pub fn width(&self) -> usize {
        self.nt * self.k
    }

    /// Pixels per channel, `2 Nt K`.
    pub fn pixels(&self) -> usize {
        2 * self.width()
    }

    /// Length of the flattened second feature map.
    pub fn flat_features(&self) -> usize {
        CHANNELS * self.pixels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Conv1Weight,
    Bn1Gamma,
    Bn1Beta,
    Conv2Weight,
    Bn2Gamma,
    Bn2Beta,
    FcWeight,
    FcBias,
}

impl Tensor {
    pub const ALL: [Tensor; 8] = [
        Tensor::Conv1Weight,
        Tensor::Bn1Gamma,
        Tensor::Bn1Beta,
        Tensor::Conv2Weight,
        Tensor::Bn2Gamma,
        Tensor::Bn2Beta,
        Tensor::FcWeight,
        Tensor::FcBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Conv1Weight => "conv1.weight",
            Tensor::Bn1Gamma => "bn1.gamma",
            Tensor::Bn1Beta => "bn1.beta",
            Tensor::Conv2Weight => "conv2.weight",
            Tensor::Bn2Gamma => "bn2.gamma",
            Tensor::Bn2Beta => "bn2.beta",
            Tensor::FcWeight => "fc.weight",
            Tensor::FcBias => "fc.bias",
        }
    }

    pub fn shape(self, arch: Arch) -> Vec<usize> {
        match self {
            Tensor::Conv1Weight => vec![CHANNELS, 1, 3, 3],
            Tensor::Conv2Weight => vec![CHANNELS, CHANNELS, 3, 3],
            Tensor::Bn1Gamma | Tensor::Bn1Beta | Tensor::Bn2Gamma | Tensor::Bn2Beta => {
                vec![CHANNELS]
            }
            Tensor::FcWeight => vec![arch.k, arch.flat_features()],
            Tensor::FcBias => vec![arch.k],
        }
    }

    pub fn len(self, arch: Arch) -> usize {
        self.shape(arch).iter().product()
    }

    /// Position of this tensor inside the flat parameter vector.
    pub fn range(self, arch: Arch) -> Range<usize> {
        let mut start = 0;
        for t in Tensor::ALL {
            let len = t.len(arch);
            if t == self {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }
}

/// Trainable parameter counts by layer type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub conv: usize,
    pub batch_norm: usize,
    pub fc: usize,
    pub total: usize,
}

impl ParamCount {
    /// `72 + 576` conv weights, `4 x 8` BN scales/shifts and
    /// `K (16 Nt K) + K` FC weights and biases.
    pub fn analytic(arch: Arch) -> Self {
        let conv = CHANNELS * 9 + CHANNELS * CHANNELS * 9;
        let batch_norm = 4 * CHANNELS;
        let fc = arch.k * 2 * CHANNELS * arch.width() + arch.k;
        Self {
            conv,
            batch_norm,
            fc,
            total: conv + batch_norm + fc,
        }
    }
}

/// Network input: a `2 x (Nt K)` image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub arch: Arch,
    pub data: Vec<f64>,
}

impl NetInput {
    /// Splits `vec(H) / max_k ||h_k||` into real and imaginary rows.
    pub fn from_channel(h: &CMat) -> Result<Self> {
        let arch = Arch::new(h.rows(), h.cols());
        let scale = channel_scale(h);
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::DegenerateChannel { user: 0 });
        }
        let width = arch.width();
        let mut data = vec![0.0; 2 * width];
        for k in 0..arch.k {
            for n in 0..arch.nt {
                let z = h[(n, k)] / scale;
                data[k * arch.nt + n] = z.re;
                data[width + k * arch.nt + n] = z.im;
            }
        }
        Ok(Self { arch, data })
    }
}

/// Batch-normalisation statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; the caller may fold them into the running averages.
    Train,
    /// Stored running statistics; a pure function of parameters and input.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh() -> Self {
        Self {
            mean: vec![0.0; CHANNELS],
            var: vec![1.0; CHANNELS],
        }
    }
}

/// Full parameter set of the embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub arch: Arch,
    /// Budget `P` of the output simplex, in watts.
    pub power_budget: f64,
    pub theta: Vec<f64>,
    pub bn1: RunningStats,
    pub bn2: RunningStats,
}

impl EmbeddingParams {
    /// Every trainable parameter zero; running statistics at `(0, 1)`.
    pub fn zeros(arch: Arch, power_budget: f64) -> Self {
        Self {
            arch,
            power_budget,
            theta: vec![0.0; ParamCount::analytic(arch).total],
            bn1: RunningStats::fresh(),
            bn2: RunningStats::fresh(),
        }
    }

    /// He-normal convolutions, unit BN scales, `N(0, 1/fan_in)` FC weights.
    pub fn init(arch: Arch, power_budget: f64, seed: u64) -> Self {
        let mut p = Self::zeros(arch, power_budget);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |p: &mut Self, t: Tensor, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in &mut p.theta[t.range(arch)] {
                *x = normal.sample(&mut rng);
            }
        };
        fill(&mut p, Tensor::Conv1Weight, (2.0 / 9.0f64).sqrt());
        fill(&mut p, Tensor::Conv2Weight, (2.0 / (9.0 * CHANNELS as f64)).sqrt());
        fill(&mut p, Tensor::FcWeight, (1.0 / arch.flat_features() as f64).sqrt());
        for t in [Tensor::Bn1Gamma, Tensor::Bn2Gamma] {
            p.theta[t.range(arch)].fill(1.0);
        }
        p
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.theta[t.range(self.arch)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = t.range(self.arch);
        &mut self.theta[r]
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::analytic(self.arch)
    }

    /// Flat range of the fully-connected layer (weights then bias).
    pub fn fc_range(&self) -> Range<usize> {
        Tensor::FcWeight.range(self.arch).start..Tensor::FcBias.range(self.arch).end
    }

    fn check_input(&self, x: &NetInput) -> Result<()> {
        if x.arch != self.arch || x.data.len() != 2 * self.arch.width() {
            return Err(Error::DimensionMismatch(format!(
                "network built for Nt={}, K={}, input has Nt={}, K={}",
                self.arch.nt, self.arch.k, x.arch.nt, x.arch.k
            )));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite network input".into()));
        }
        Ok(())
    }

    /// Eval-mode output for one input.
    pub fn predict(&self, x: &NetInput) -> Result<Vec<f64>> {
        Ok(self.forward_batch(std::slice::from_ref(x), Mode::Eval)?.q)
    }

    /// Single-input forward pass. Train mode folds the batch statistics into
    /// the running averages.
    pub fn forward(&mut self, x: &NetInput, mode: Mode) -> Result<Vec<f64>> {
        let cache = self.forward_batch(std::slice::from_ref(x), mode)?;
        if mode == Mode::Train {
            self.update_running_stats(&cache);
        }
        Ok(cache.q)
    }

    /// Forward pass over a batch, keeping every intermediate needed by
    /// [`EmbeddingParams::backward`]. Parameters are not modified.
    pub fn forward_batch(&self, xs: &[NetInput], mode: Mode) -> Result<ForwardCache> {
        if xs.is_empty() {
            return Err(Error::Empty("network batch"));
        }
        for x in xs {
            self.check_input(x)?;
        }
        let arch = self.arch;
        let (b, px, kk) = (xs.len(), arch.pixels(), arch.k);
        let width = arch.width();
        let fmap = CHANNELS * px;

        let mut x = Vec::with_capacity(b * px);
        for xi in xs {
            x.extend_from_slice(&xi.data);
        }

        let mut z1 = vec![0.0; b * fmap];
        for s in 0..b {
            conv3x3(
                &x[s * px..(s + 1) * px],
                1,
                self.tensor(Tensor::Conv1Weight),
                width,
                &mut z1[s * fmap..(s + 1) * fmap],
            );
        }
        let bn1 = batch_norm(
            &z1,
            b,
            px,
            self.tensor(Tensor::Bn1Gamma),
            self.tensor(Tensor::Bn1Beta),
            mode,
            &self.bn1,
        );
        let a1: Vec<f64> = bn1.y.iter().map(|&v| v.max(0.0)).collect();

        let mut z2 = vec![0.0; b * fmap];
        for s in 0..b {
            conv3x3(
                &a1[s * fmap..(s + 1) * fmap],
                CHANNELS,
                self.tensor(Tensor::Conv2Weight),
                width,
                &mut z2[s * fmap..(s + 1) * fmap],
            );
        }
        let bn2 = batch_norm(
            &z2,
            b,
            px,
            self.tensor(Tensor::Bn2Gamma),
            self.tensor(Tensor::Bn2Beta),
            mode,
            &self.bn2,
        );
        let a2: Vec<f64> = bn2.y.iter().map(|&v| v.max(0.0)).collect();

        let fw = self.tensor(Tensor::FcWeight);
        let fb = self.tensor(Tensor::FcBias);
        let mut s_out = vec![0.0; b * kk];
        let mut q = vec![0.0; b * kk];
        for s in 0..b {
            let feat = &a2[s * fmap..(s + 1) * fmap];
            for k in 0..kk {
                let row = &fw[k * fmap..(k + 1) * fmap];
                let logit = fb[k] + row.iter().zip(feat).map(|(w, a)| w * a).sum::<f64>();
                s_out[s * kk + k] = sigmoid(logit);
            }
            let total: f64 = s_out[s * kk..(s + 1) * kk].iter().sum();
            for k in 0..kk {
                q[s * kk + k] = self.power_budget * s_out[s * kk + k] / total;
            }
        }

        Ok(ForwardCache {
            mode,
            batch: b,
            x,
            bn1,
            a1,
            bn2,
            a2,
            s: s_out,
            q,
        })
    }

    /// Folds the batch statistics of a Train-mode pass into the running
    /// averages (unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = (cache.batch * self.arch.pixels()) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (run, bn) in [(&mut self.bn1, &cache.bn1), (&mut self.bn2, &cache.bn2)] {
            for c in 0..CHANNELS {
                run.mean[c] = BN_MOMENTUM * run.mean[c] + (1.0 - BN_MOMENTUM) * bn.mean[c];
                run.var[c] = BN_MOMENTUM * run.var[c] + (1.0 - BN_MOMENTUM) * bn.var[c] * unbias;
            }
        }
    }

    /// Gradient of a loss with respect to `theta`, given `g_q`, the loss
    /// gradient with respect to every output (`batch x K`, row-major).
    pub fn backward(&self, cache: &ForwardCache, g_q: &[f64]) -> Vec<f64> {
        let arch = self.arch;
        let (b, px, kk) = (cache.batch, arch.pixels(), arch.k);
        let fmap = CHANNELS * px;
        let width = arch.width();
        let p = self.power_budget;
        let mut grad = vec![0.0; self.theta.len()];

        // Simplex scaling and sigmoid.
        let mut g_logit = vec![0.0; b * kk];
        for s in 0..b {
            let sv = &cache.s[s * kk..(s + 1) * kk];
            let gq = &g_q[s * kk..(s + 1) * kk];
            let total: f64 = sv.iter().sum();
            let dot: f64 = gq.iter().zip(sv).map(|(g, v)| g * v).sum();
            for k in 0..kk {
                let g_s = p * gq[k] / total - p * dot / (total * total);
                g_logit[s * kk + k] = g_s * sv[k] * (1.0 - sv[k]);
            }
        }

        // Fully-connected layer.
        let fw_range = Tensor::FcWeight.range(arch);
        let fb_range = Tensor::FcBias.range(arch);
        let fw = &self.theta[fw_range.clone()];
        let mut g_a2 = vec![0.0; b * fmap];
        for s in 0..b {
            let feat = &cache.a2[s * fmap..(s + 1) * fmap];
            let ga = &mut g_a2[s * fmap..(s + 1) * fmap];
            for k in 0..kk {
                let gl = g_logit[s * kk + k];
                grad[fb_range.start + k] += gl;
                let gw = &mut grad[fw_range.start + k * fmap..fw_range.start + (k + 1) * fmap];
                for (g, a) in gw.iter_mut().zip(feat) {
                    *g += gl * a;
                }
                for (g, w) in ga.iter_mut().zip(&fw[k * fmap..(k + 1) * fmap]) {
                    *g += gl * w;
                }
            }
        }

        // Second block.
        relu_backward(&mut g_a2, &cache.bn2.y);
        let g_z2 = batch_norm_backward(
            &g_a2,
            &cache.bn2,
            b,
            px,
            self.tensor(Tensor::Bn2Gamma),
            cache.mode,
            &mut grad,
            Tensor::Bn2Gamma.range(arch),
            Tensor::Bn2Beta.range(arch),
        );
        let c2 = Tensor::Conv2Weight.range(arch);
        let mut g_a1 = vec![0.0; b * fmap];
        for s in 0..b {
            conv3x3_backward(
                &cache.a1[s * fmap..(s + 1) * fmap],
                CHANNELS,
                self.tensor(Tensor::Conv2Weight),
                width,
                &g_z2[s * fmap..(s + 1) * fmap],
                &mut grad[c2.clone()],
                Some(&mut g_a1[s * fmap..(s + 1) * fmap]),
            );
        }

        // First block.
        relu_backward(&mut g_a1, &cache.bn1.y);
        let g_z1 = batch_norm_backward(
            &g_a1,
            &cache.bn1,
            b,
            px,
            self.tensor(Tensor::Bn1Gamma),
            cache.mode,
            &mut grad,
            Tensor::Bn1Gamma.range(arch),
            Tensor::Bn1Beta.range(arch),
        );
        let c1 = Tensor::Conv1Weight.range(arch);
        for s in 0..b {
            conv3x3_backward(
                &cache.x[s * px..(s + 1) * px],
                1,
                self.tensor(Tensor::Conv1Weight),
                width,
                &g_z1[s * fmap..(s + 1) * fmap],
                &mut grad[c1.clone()],
                None,
            );
        }
        grad
    }

    /// Loss and gradient for one batch. Supervised batches need labels;
    /// the sum-rate objective uses the raw channels and `noise`.
    pub fn loss_and_grad(
        &self,
        objective: Objective,
        batch: &[&TrainSample],
        noise: &[f64],
        mode: Mode,
    ) -> Result<(f64, Vec<f64>, ForwardCache)> {
        let inputs: Vec<NetInput> = batch.iter().map(|s| s.input.clone()).collect();
        let cache = self.forward_batch(&inputs, mode)?;
        let (loss, g_q) = self.output_loss(objective, batch, &cache.q, noise)?;
        let grad = self.backward(&cache, &g_q);
        Ok((loss, grad, cache))
    }

    /// Loss of the given outputs and its gradient with respect to them.
    pub fn output_loss(
        &self,
        objective: Objective,
        batch: &[&TrainSample],
        q: &[f64],
        noise: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let kk = self.arch.k;
        let norm = (batch.len() * kk) as f64;
        let mut g_q = vec![0.0; q.len()];
        let mut loss = 0.0;
        match objective {
            Objective::SupervisedMse => {
                for (s, sample) in batch.iter().enumerate() {
                    let label = sample
                        .label
                        .as_ref()
                        .ok_or(Error::Empty("label of a supervised sample"))?;
                    for k in 0..kk {
                        let d = q[s * kk + k] - label[k];
                        loss += d * d / (2.0 * norm);
                        g_q[s * kk + k] = d / norm;
                    }
                }
            }
            Objective::UnsupervisedSumRate => {
                for (s, sample) in batch.iter().enumerate() {
                    let (rate, g) = sumrate_and_grad_q(&sample.channel, &q[s * kk..(s + 1) * kk], noise)?;
                    loss -= rate / (2.0 * norm);
                    for k in 0..kk {
                        g_q[s * kk + k] = -g[k] / (2.0 * norm);
                    }
                }
            }
        }
        Ok((loss, g_q))
    }

    /// Mean Eval-mode loss over a set.
    pub fn eval_loss(&self, objective: Objective, data: &[&TrainSample], noise: &[f64]) -> Result<f64> {
        let inputs: Vec<NetInput> = data.iter().map(|s| s.input.clone()).collect();
        let cache = self.forward_batch(&inputs, Mode::Eval)?;
        Ok(self.output_loss(objective, data, &cache.q, noise)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&ModelFile::from(self))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        file.try_into()
    }
}

/// Gradient of the mean-squared-error loss `(1/(2LK)) sum ||q - q_hat||^2`
/// over a labelled batch, with batch statistics.
pub fn backward_supervised(theta: &EmbeddingParams, batch: &[&TrainSample]) -> Result<Vec<f64>> {
    Ok(theta
        .loss_and_grad(Objective::SupervisedMse, batch, &[], Mode::Train)?
        .1)
}

/// Gradient of the negative scaled sum rate `-(1/(2LK)) sum rate` over a
/// batch, with batch statistics.
pub fn backward_unsupervised(
    theta: &EmbeddingParams,
    batch: &[&TrainSample],
    noise: &[f64],
) -> Result<Vec<f64>> {
    Ok(theta
        .loss_and_grad(Objective::UnsupervisedSumRate, batch, noise, Mode::Train)?
        .1)
}

/// A network input together with its raw channel and optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: NetInput,
    pub channel: CMat,
    pub label: Option<Vec<f64>>,
}

impl TrainSample {
    pub fn new(channel: CMat, label: Option<Vec<f64>>) -> Result<Self> {
        Ok(Self {
            input: NetInput::from_channel(&channel)?,
            channel,
            label,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Vec<Self>> {
        ds.samples
            .iter()
            .map(|s| Self::new(s.channel.clone(), s.label.clone()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    /// Statistics used for normalisation (batch or running).
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub xhat: Vec<f64>,
    pub y: Vec<f64>,
}

/// Intermediates of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub mode: Mode,
    pub batch: usize,
    x: Vec<f64>,
    pub bn1: BnCache,
    a1: Vec<f64>,
    pub bn2: BnCache,
    a2: Vec<f64>,
    s: Vec<f64>,
    /// Outputs, `batch x K` row-major.
    pub q: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self, i: usize) -> &[f64] {
        let k = self.q.len() / self.batch;
        &self.q[i * k..(i + 1) * k]
    }

    /// Signs of every pre-activation, used to detect ReLU kinks.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.bn1.y.iter().chain(&self.bn2.y).map(|&v| v > 0.0).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `3x3` convolution, stride 1, zero padding 1, on height-2 maps.
/// `input` is `cin x 2 x width`, `out` is `CHANNELS x 2 x width`.
fn conv3x3(input: &[f64], cin: usize, w: &[f64], width: usize, out: &mut [f64]) {
    let px = 2 * width;
    out.fill(0.0);
    for co in 0..CHANNELS {
        let o = &mut out[co * px..(co + 1) * px];
        for ci in 0..cin {
            let inp = &input[ci * px..(ci + 1) * px];
            let kern = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for y in 0..2 {
                for dy in 0..3 {
                    let yy = y as isize + dy as isize - 1;
                    if !(0..2).contains(&yy) {
                        continue;
                    }
                    let row = &inp[yy as usize * width..(yy as usize + 1) * width];
                    for dx in 0..3 {
                        let kv = kern[dy * 3 + dx];
                        let orow = &mut o[y * width..(y + 1) * width];
                        // out[x] += k * in[x + dx - 1]
                        let (lo, hi) = match dx {
                            0 => (1, width),
                            1 => (0, width),
                            _ => (0, width.saturating_sub(1)),
                        };
                        for x in lo..hi {
                            orow[x] += kv * row[x + dx - 1];
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    w: &[f64],
    width: usize,
    g_out: &[f64],
    g_w: &mut [f64],
    mut g_in: Option<&mut [f64]>,
) {
    let px = 2 * width;
    for co in 0..CHANNELS {
        let go = &g_out[co * px..(co + 1) * px];
        for ci in 0..cin {
            let inp = &input[ci * px..(ci + 1) * px];
            let widx = (co * cin + ci) * 9;
            for y in 0..2 {
                for dy in 0..3 {
                    let yy = y as isize + dy as isize - 1;
                    if !(0..2).contains(&yy) {
                        continue;
                    }
                    let yy = yy as usize;
                    for dx in 0..3 {
                        let (lo, hi) = match dx {
                            0 => (1, width),
                            1 => (0, width),
                            _ => (0, width.saturating_sub(1)),
                        };
                        let mut acc = 0.0;
                        for x in lo..hi {
                            acc += go[y * width + x] * inp[yy * width + x + dx - 1];
                        }
                        g_w[widx + dy * 3 + dx] += acc;
                        if let Some(gi) = g_in.as_deref_mut() {
                            let kv = w[widx + dy * 3 + dx];
                            let gi = &mut gi[ci * px..(ci + 1) * px];
                            for x in lo..hi {
                                gi[yy * width + x + dx - 1] += kv * go[y * width + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel normalisation over batch and pixels.
fn batch_norm(
    z: &[f64],
    b: usize,
    px: usize,
    gamma: &[f64],
    beta: &[f64],
    mode: Mode,
    running: &RunningStats,
) -> BnCache {
    let fmap = CHANNELS * px;
    let n = (b * px) as f64;
    let (mean, var) = match mode {
        Mode::Eval => (running.mean.clone(), running.var.clone()),
        Mode::Train => {
            let mut mean = vec![0.0; CHANNELS];
            let mut var = vec![0.0; CHANNELS];
            for c in 0..CHANNELS {
                let vals = (0..b).flat_map(|s| &z[s * fmap + c * px..s * fmap + (c + 1) * px]);
                let m = vals.clone().sum::<f64>() / n;
                mean[c] = m;
                var[c] = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            }
            (mean, var)
        }
    };
    let mut xhat = vec![0.0; z.len()];
    let mut y = vec![0.0; z.len()];
    for s in 0..b {
        for c in 0..CHANNELS {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            for i in s * fmap + c * px..s * fmap + (c + 1) * px {
                xhat[i] = (z[i] - mean[c]) * inv;
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    BnCache { mean, var, xhat, y }
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_backward(
    g_y: &[f64],
    cache: &BnCache,
    b: usize,
    px: usize,
    gamma: &[f64],
    mode: Mode,
    grad: &mut [f64],
    gamma_range: Range<usize>,
    beta_range: Range<usize>,
) -> Vec<f64> {
    let fmap = CHANNELS * px;
    let n = (b * px) as f64;
    let mut g_z = vec![0.0; g_y.len()];
    for c in 0..CHANNELS {
        let idx = || (0..b).flat_map(move |s| s * fmap + c * px..s * fmap + (c + 1) * px);
        let sum_g: f64 = idx().map(|i| g_y[i]).sum();
        let sum_gx: f64 = idx().map(|i| g_y[i] * cache.xhat[i]).sum();
        grad[gamma_range.start + c] += sum_gx;
        grad[beta_range.start + c] += sum_g;
        let inv = 1.0 / (cache.var[c] + BN_EPS).sqrt();
        match mode {
            Mode::Eval => {
                for i in idx() {
                    g_z[i] = gamma[c] * inv * g_y[i];
                }
            }
            Mode::Train => {
                for i in idx() {
                    g_z[i] = gamma[c] * inv / n * (n * g_y[i] - sum_g - cache.xhat[i] * sum_gx);
                }
            }
        }
    }
    g_z
}

fn relu_backward(g: &mut [f64], pre: &[f64]) {
    for (gi, &p) in g.iter_mut().zip(pre) {
        if p <= 0.0 {
            *gi = 0.0;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    arch: Arch,
    power_budget: f64,
    normalization: String,
    bn_eps: f64,
    bn_momentum: f64,
    tensors: BTreeMap<String, NamedTensor>,
    running: BTreeMap<String, RunningStats>,
}

impl From<&EmbeddingParams> for ModelFile {
    fn from(p: &EmbeddingParams) -> Self {
        let tensors = Tensor::ALL
            .iter()
            .map(|&t| {
                (
                    t.name().to_string(),
                    NamedTensor {
                        shape: t.shape(p.arch),
                        data: p.tensor(t).to_vec(),
                    },
                )
            })
            .collect();
        let running = [("bn1".to_string(), p.bn1.clone()), ("bn2".to_string(), p.bn2.clone())]
            .into_iter()
            .collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            arch: p.arch,
            power_budget: p.power_budget,
            normalization: crate::dataset::NORMALIZATION.into(),
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            tensors,
            running,
        }
    }
}

impl TryFrom<ModelFile> for EmbeddingParams {
    type Error = Error;

    fn try_from(mut f: ModelFile) -> Result<Self> {
        if f.format != MODEL_FORMAT {
            return Err(Error::Format(format!("expected {MODEL_FORMAT}, found {}", f.format)));
        }
        if f.version != MODEL_VERSION {
            return Err(Error::Version {
                found: f.version,
                expected: MODEL_VERSION,
            });
        }
        let mut p = EmbeddingParams::zeros(f.arch, f.power_budget);
        for t in Tensor::ALL {
            let named = f
                .tensors
                .remove(t.name())
                .ok_or_else(|| Error::Format(format!("missing tensor {}", t.name())))?;
            if named.shape != t.shape(f.arch) || named.data.len() != t.len(f.arch) {
                return Err(Error::Format(format!("bad shape for {}", t.name())));
            }
            p.tensor_mut(t).copy_from_slice(&named.data);
        }
        for (name, slot) in [("bn1", &mut p.bn1), ("bn2", &mut p.bn2)] {
            let stats = f
                .running
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing running stats {name}")))?;
            if stats.mean.len() != CHANNELS
                || stats.var.len() != CHANNELS
                || stats.var.iter().any(|&v| !(v > 0.0))
            {
                return Err(Error::Format(format!("bad running stats {name}")));
            }
            *slot = stats;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests;
