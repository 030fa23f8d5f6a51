//! VAE/C-VAE normalization: a small MLP encoder/decoder trained on the
//! variational lower bound; the latent mean is the normalized embedding.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numstats::Matrix;

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out x in.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
}

impl MlpNetwork {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.weights.matvec(&a);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            for zi in &mut z {
                *zi = layer.activation.apply(*zi);
            }
            a = z;
        }
        a
    }

    /// Forward pass keeping per-layer pre-activations and activations
    /// (activations[0] is the input) for backprop.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for layer in &self.layers {
            let mut z = layer.weights.matvec(post.last().unwrap());
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        (pre, post)
    }

    fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    /// Backpropagates dL/d(output activations); adds parameter gradients into
    /// `grads` (this network's flat layout starting at `offset`) and returns
    /// dL/d(input).
    fn backprop(
        &self,
        pre: &[Vec<f64>],
        post: &[Vec<f64>],
        out_grad: &[f64],
        grads: &mut [f64],
        offset: usize,
    ) -> Vec<f64> {
        // Per-layer offsets into the flat layout (weights then bias).
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = offset;
        for l in &self.layers {
            offsets.push(at);
            at += l.weights.rows() * l.weights.cols() + l.bias.len();
        }
        let last_act = self.layers.last().unwrap().activation;
        let mut delta: Vec<f64> = out_grad
            .iter()
            .zip(pre.last().unwrap())
            .map(|(g, z)| g * last_act.derivative(*z))
            .collect();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let (rows, cols) = (layer.weights.rows(), layer.weights.cols());
            let input = &post[li];
            let base = offsets[li];
            for r in 0..rows {
                let dr = delta[r];
                let wrow = base + r * cols;
                for c in 0..cols {
                    grads[wrow + c] += dr * input[c];
                }
            }
            let bias_base = base + rows * cols;
            for r in 0..rows {
                grads[bias_base + r] += delta[r];
            }
            if li == 0 {
                let mut dx = vec![0.0; cols];
                for r in 0..rows {
                    let dr = delta[r];
                    let row = layer.weights.row(r);
                    for c in 0..cols {
                        dx[c] += dr * row[c];
                    }
                }
                return dx;
            }
            let prev = &self.layers[li - 1];
            let prev_pre = &pre[li - 1];
            let mut next_delta = vec![0.0; cols];
            for r in 0..rows {
                let dr = delta[r];
                let row = layer.weights.row(r);
                for c in 0..cols {
                    next_delta[c] += dr * row[c];
                }
            }
            for (nd, z) in next_delta.iter_mut().zip(prev_pre) {
                *nd *= prev.activation.derivative(*z);
            }
            delta = next_delta;
        }
        unreachable!("loop returns at layer 0");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    Retrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    /// d -> 2k: latent mean then per-dimension log-variance.
    pub encoder: MlpNetwork,
    /// k -> d.
    pub decoder: MlpNetwork,
    pub latent_dim: usize,
    /// 0 = plain VAE; > 0 = C-VAE.
    pub cohesive_weight: f64,
    pub train_seed: u64,
    /// Per-dimension standardization applied before the encoder.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// None until the model has been adapted.
    pub adapt_mode: Option<AdaptMode>,
}

impl VaeModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Latent mean of a single already-standardized vector.
    fn latent_mean_std(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.encoder.forward(x);
        h.truncate(self.latent_dim);
        h
    }
}

/// Latent means, deterministically, with no sampling; labels and utterance
/// ids carry through.
pub fn normalize(model: &VaeModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "set dimension {} does not match model dimension {}",
            set.dim(),
            model.input_dim()
        )));
    }
    let vectors = set
        .records()
        .iter()
        .map(|r| model.latent_mean_std(&model.standardize(&r.vector)))
        .collect();
    set.with_vectors(model.latent_dim, vectors)
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: usize, learning_rate: f64) -> AdamState {
        AdamState {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam shapes disagree: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= state.learning_rate * mh / (vh.sqrt() + state.epsilon);
    }
    Ok(())
}

fn flatten_into(net: &MlpNetwork, out: &mut Vec<f64>) {
    for l in &net.layers {
        out.extend_from_slice(l.weights.data());
        out.extend_from_slice(&l.bias);
    }
}

/// Flat parameter vector: encoder layers then decoder layers, each layer's
/// weights (row-major) then bias. Gradients use the same layout.
pub fn flatten_params(model: &VaeModel) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.encoder.param_count() + model.decoder.param_count());
    flatten_into(&model.encoder, &mut out);
    flatten_into(&model.decoder, &mut out);
    out
}

fn load_net(net: &mut MlpNetwork, flat: &[f64], mut at: usize) -> usize {
    for l in &mut net.layers {
        let (rows, cols) = (l.weights.rows(), l.weights.cols());
        let n = rows * cols;
        let w = Matrix::from_vec(rows, cols, flat[at..at + n].to_vec()).unwrap();
        l.weights = w;
        at += n;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&flat[at..at + nb]);
        at += nb;
    }
    at
}

pub fn load_params(model: &mut VaeModel, flat: &[f64]) -> Result<()> {
    let want = model.encoder.param_count() + model.decoder.param_count();
    if flat.len() != want {
        return Err(Error::invalid(format!(
            "parameter vector of length {} for a model with {want} parameters",
            flat.len()
        )));
    }
    let at = load_net(&mut model.encoder, flat, 0);
    load_net(&mut model.decoder, flat, at);
    Ok(())
}

/// Loss and exact analytic gradients of the negative per-batch ELBO (plus the
/// cohesive term when `cohesive_weight > 0`), for inputs already in the
/// network's standardized coordinates.
///
/// loss = mean_i [ KL(q(z|x_i) || N(0,I)) + 1/2 ||x_i - f(z_i)||^2 ]
///        + lambda * mean_i ||mu_i - c_spk(i)||^2,
/// z_i = mu_i + sigma_i (.) noise_i, KL per dim = 1/2 (mu^2 + sigma^2 - ln sigma^2 - 1).
pub fn elbo_loss_and_grads(
    model: &VaeModel,
    batch: &[Vec<f64>],
    labels: Option<&[usize]>,
    noise: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let k = model.latent_dim;
    let d = model.input_dim();
    if n == 0 {
        return Err(Error::invalid("elbo on an empty batch"));
    }
    if noise.len() != n || noise.iter().any(|e| e.len() != k) {
        return Err(Error::invalid("noise shape must be batch x latent_dim"));
    }
    if batch.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("batch vectors do not match model dimension"));
    }
    let lambda = model.cohesive_weight;
    if lambda > 0.0 && labels.is_none() {
        return Err(Error::invalid(
            "cohesive weight > 0 requires speaker labels",
        ));
    }
    if let Some(ls) = labels {
        if ls.len() != n {
            return Err(Error::invalid("labels length must match batch length"));
        }
    }

    let total_params = model.encoder.param_count() + model.decoder.param_count();
    let enc_offset = 0;
    let dec_offset = model.encoder.param_count();
    let mut grads = vec![0.0; total_params];

    // Forward everything first; the cohesive term needs all latent means
    // before any backward pass.
    let mut enc_traces = Vec::with_capacity(n);
    let mut dec_traces = Vec::with_capacity(n);
    let mut mus: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut lvs_raw: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigmas: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut loss = 0.0;
    for (x, eps) in batch.iter().zip(noise) {
        let (pre, post) = model.encoder.forward_trace(x);
        let head = post.last().unwrap();
        let mu = head[..k].to_vec();
        let lv_raw = head[k..].to_vec();
        let sigma: Vec<f64> = lv_raw
            .iter()
            .map(|&lv| (0.5 * lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp())
            .collect();
        let z: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .zip(eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        let (dpre, dpost) = model.decoder.forward_trace(&z);
        let xhat = dpost.last().unwrap();
        let mut kl = 0.0;
        for (m, &lv) in mu.iter().zip(&lv_raw) {
            let lvc = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            kl += 0.5 * (m * m + lvc.exp() - lvc - 1.0);
        }
        let mut recon = 0.0;
        for (xi, xh) in x.iter().zip(xhat) {
            let r = xi - xh;
            recon += 0.5 * r * r;
        }
        loss += kl + recon;
        enc_traces.push((pre, post));
        dec_traces.push((dpre, dpost));
        mus.push(mu);
        lvs_raw.push(lv_raw);
        sigmas.push(sigma);
    }
    loss /= n as f64;

    // Within-batch latent-mean centroid per speaker.
    let mut centroids: HashMap<usize, Vec<f64>> = HashMap::new();
    if lambda > 0.0 {
        let ls = labels.unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for (mu, &l) in mus.iter().zip(ls) {
            let c = centroids.entry(l).or_insert_with(|| vec![0.0; k]);
            for (ci, m) in c.iter_mut().zip(mu) {
                *ci += m;
            }
            *counts.entry(l).or_insert(0) += 1;
        }
        for (l, c) in centroids.iter_mut() {
            for ci in c.iter_mut() {
                *ci /= counts[l] as f64;
            }
        }
        let mut coh = 0.0;
        for (mu, &l) in mus.iter().zip(ls) {
            for (m, c) in mu.iter().zip(&centroids[&l]) {
                let r = m - c;
                coh += r * r;
            }
        }
        loss += lambda * coh / n as f64;
    }

    for i in 0..n {
        let x = &batch[i];
        let eps = &noise[i];
        let (dpre, dpost) = &dec_traces[i];
        let xhat = dpost.last().unwrap();
        let d_xhat: Vec<f64> = xhat.iter().zip(x).map(|(xh, xi)| xh - xi).collect();
        let d_z = model
            .decoder
            .backprop(dpre, dpost, &d_xhat, &mut grads, dec_offset);

        // Head gradient: mean path is identity into z plus the KL term (plus
        // cohesive, whose centroid cross-terms cancel exactly); the logvar
        // path goes through sigma with d sigma / d logvar = sigma / 2 and is
        // cut outside the clamp.
        let mu = &mus[i];
        let sigma = &sigmas[i];
        let lv_raw = &lvs_raw[i];
        let mut head_grad = vec![0.0; 2 * k];
        for j in 0..k {
            let mut dmu = d_z[j] + mu[j];
            if lambda > 0.0 {
                let c = &centroids[&labels.unwrap()[i]];
                dmu += 2.0 * lambda * (mu[j] - c[j]);
            }
            head_grad[j] = dmu;
            let inside = lv_raw[j].abs() < LOGVAR_CLAMP;
            if inside {
                let s2 = sigma[j] * sigma[j];
                // KL: 1/2 (e^lv - 1); recon: d_z * eps * sigma/2.
                head_grad[k + j] = 0.5 * (s2 - 1.0) + d_z[j] * eps[j] * 0.5 * sigma[j];
            }
        }
        let (pre, post) = &enc_traces[i];
        model
            .encoder
            .backprop(pre, post, &head_grad, &mut grads, enc_offset);
    }
    for g in &mut grads {
        *g /= n as f64;
    }

    if !loss.is_finite() {
        return Err(Error::numeric(first_non_finite(
            model, &mus, &lvs_raw, &dec_traces,
        )));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient at parameter {pos}"
        )));
    }
    Ok((loss, grads))
}

#[allow(clippy::type_complexity)]
fn first_non_finite(
    model: &VaeModel,
    mus: &[Vec<f64>],
    lvs: &[Vec<f64>],
    dec_traces: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
) -> String {
    if flatten_params(model).iter().any(|v| !v.is_finite()) {
        return "non-finite model parameters".into();
    }
    if mus.iter().flatten().any(|v| !v.is_finite()) {
        return "non-finite latent mean".into();
    }
    if lvs.iter().flatten().any(|v| !v.is_finite()) {
        return "non-finite latent log-variance".into();
    }
    if dec_traces
        .iter()
        .any(|(_, post)| post.last().unwrap().iter().any(|v| !v.is_finite()))
    {
        return "non-finite reconstruction".into();
    }
    "non-finite loss".into()
}

#[derive(Clone, Debug)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cohesive_weight: f64,
    pub seed: u64,
}

impl VaeConfig {
    /// Desk-scale preset for 32-dimensional synthetic embeddings.
    pub fn desk(seed: u64) -> VaeConfig {
        VaeConfig {
            latent_dim: 8,
            hidden: vec![64, 64],
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            cohesive_weight: 0.0,
            seed,
        }
    }

    pub fn desk_cohesive(seed: u64) -> VaeConfig {
        VaeConfig {
            cohesive_weight: 0.1,
            ..VaeConfig::desk(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.cohesive_weight.is_finite() && self.cohesive_weight >= 0.0) {
            return Err(Error::invalid("cohesive_weight must be nonnegative"));
        }
        Ok(())
    }
}

fn glorot_layer(
    rng: &mut ChaCha20Rng,
    fan_out: usize,
    fan_in: usize,
    activation: Activation,
) -> Layer {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_out * fan_in)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Layer {
        weights: Matrix::from_vec(fan_out, fan_in, data).unwrap(),
        bias: vec![0.0; fan_out],
        activation,
    }
}

fn init_model(dim: usize, config: &VaeConfig, rng: &mut ChaCha20Rng) -> VaeModel {
    let k = config.latent_dim;
    let mut enc_dims = vec![dim];
    enc_dims.extend(&config.hidden);
    let mut enc_layers = Vec::new();
    for w in enc_dims.windows(2) {
        enc_layers.push(glorot_layer(rng, w[1], w[0], Activation::Tanh));
    }
    enc_layers.push(glorot_layer(
        rng,
        2 * k,
        *enc_dims.last().unwrap(),
        Activation::Linear,
    ));
    let mut dec_dims = vec![k];
    dec_dims.extend(config.hidden.iter().rev());
    let mut dec_layers = Vec::new();
    for w in dec_dims.windows(2) {
        dec_layers.push(glorot_layer(rng, w[1], w[0], Activation::Tanh));
    }
    dec_layers.push(glorot_layer(
        rng,
        dim,
        *dec_dims.last().unwrap(),
        Activation::Linear,
    ));
    VaeModel {
        encoder: MlpNetwork { layers: enc_layers },
        decoder: MlpNetwork { layers: dec_layers },
        latent_dim: k,
        cohesive_weight: config.cohesive_weight,
        train_seed: config.seed,
        input_mean: vec![0.0; dim],
        input_std: vec![1.0; dim],
        adapt_mode: None,
    }
}

fn standardization(vectors: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = vectors[0].len();
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            let r = x - m;
            *s += r * r;
        }
    }
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd < 1e-12 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

fn label_indices(set: &EmbeddingSet) -> Vec<usize> {
    let speakers = set.speakers();
    let index: HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    set.records()
        .iter()
        .map(|r| index[r.speaker_id.as_str()])
        .collect()
}

/// Shared epoch loop; `data` is already standardized. Returns per-epoch mean
/// losses (sample-weighted).
fn run_epochs(
    model: &mut VaeModel,
    data: &[Vec<f64>],
    labels: Option<&[usize]>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>> {
    let k = model.latent_dim;
    let mut params = flatten_params(model);
    let mut adam = AdamState::new(params.len(), learning_rate);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let batch_labels: Option<Vec<usize>> =
                labels.map(|ls| chunk.iter().map(|&i| ls[i]).collect());
            let noise: Vec<Vec<f64>> = (0..batch.len())
                .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let (loss, grads) =
                elbo_loss_and_grads(model, &batch, batch_labels.as_deref(), &noise).map_err(
                    |e| Error::Training {
                        epoch,
                        message: e.to_string(),
                    },
                )?;
            adam_step(&mut params, &grads, &mut adam)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite parameters after optimizer step".into(),
                });
            }
            load_params(model, &params)?;
            loss_sum += loss * batch.len() as f64;
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }
    Ok(epoch_losses)
}

/// Trains a fresh model; returns it with the per-epoch loss curve.
pub fn train_vae(set: &EmbeddingSet, config: &VaeConfig) -> Result<(VaeModel, Vec<f64>)> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.cohesive_weight > 0.0 && !set.is_labeled() {
        return Err(Error::invalid(
            "cohesive weight > 0 requires a fully labeled training set",
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut model = init_model(set.dim(), config, &mut rng);
    let (mean, std) = standardization(&set.vectors());
    model.input_mean = mean;
    model.input_std = std;
    let data: Vec<Vec<f64>> = set
        .records()
        .iter()
        .map(|r| model.standardize(&r.vector))
        .collect();
    let labels = if config.cohesive_weight > 0.0 {
        Some(label_indices(set))
    } else {
        None
    };
    let losses = run_epochs(
        &mut model,
        &data,
        labels.as_deref(),
        config.epochs,
        config.batch_size,
        config.learning_rate,
        &mut rng,
    )?;
    Ok((model, losses))
}

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Finetune only: recompute the input standardization on the adaptation
    /// set before continuing optimization.
    pub refresh_standardization: bool,
}

impl AdaptConfig {
    /// Retraining from scratch, as the default adaptation mode.
    pub fn retrain(seed: u64) -> AdaptConfig {
        AdaptConfig {
            mode: AdaptMode::Retrain,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            seed,
            refresh_standardization: false,
        }
    }

    /// Continue optimization at a reduced learning rate.
    pub fn finetune(seed: u64) -> AdaptConfig {
        AdaptConfig {
            mode: AdaptMode::Finetune,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            seed,
            refresh_standardization: false,
        }
    }
}

fn hidden_sizes(model: &VaeModel) -> Vec<usize> {
    model
        .encoder
        .layers
        .iter()
        .take(model.encoder.layers.len() - 1)
        .map(|l| l.weights.rows())
        .collect()
}

/// Adapts the normalization model on out-of-domain data; with 0 finetune
/// epochs the model is returned untouched (metadata included).
pub fn adapt_vae(
    model: &VaeModel,
    ood_set: &EmbeddingSet,
    config: &AdaptConfig,
) -> Result<(VaeModel, Vec<f64>)> {
    if ood_set.is_empty() {
        return Err(Error::invalid("adaptation set is empty"));
    }
    if ood_set.dim() != model.input_dim() {
        return Err(Error::invalid(format!(
            "adaptation set dimension {} does not match model dimension {}",
            ood_set.dim(),
            model.input_dim()
        )));
    }
    match config.mode {
        AdaptMode::Retrain => {
            let train_config = VaeConfig {
                latent_dim: model.latent_dim,
                hidden: hidden_sizes(model),
                epochs: config.epochs,
                batch_size: config.batch_size,
                learning_rate: config.learning_rate,
                cohesive_weight: model.cohesive_weight,
                seed: config.seed,
            };
            let (mut adapted, losses) = train_vae(ood_set, &train_config)?;
            adapted.adapt_mode = Some(AdaptMode::Retrain);
            Ok((adapted, losses))
        }
        AdaptMode::Finetune => {
            if config.epochs == 0 {
                return Ok((model.clone(), Vec::new()));
            }
            if model.cohesive_weight > 0.0 && !ood_set.is_labeled() {
                return Err(Error::invalid(
                    "cohesive weight > 0 requires a fully labeled adaptation set",
                ));
            }
            let mut adapted = model.clone();
            if config.refresh_standardization {
                let (mean, std) = standardization(&ood_set.vectors());
                adapted.input_mean = mean;
                adapted.input_std = std;
            }
            let data: Vec<Vec<f64>> = ood_set
                .records()
                .iter()
                .map(|r| adapted.standardize(&r.vector))
                .collect();
            let labels = if model.cohesive_weight > 0.0 {
                Some(label_indices(ood_set))
            } else {
                None
            };
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            let losses = run_epochs(
                &mut adapted,
                &data,
                labels.as_deref(),
                config.epochs,
                config.batch_size,
                config.learning_rate,
                &mut rng,
            )?;
            adapted.adapt_mode = Some(AdaptMode::Finetune);
            Ok((adapted, losses))
        }
    }
}

/// Per-epoch loss curve as CSV; the constant dropped from the optimized
/// reconstruction term is recorded up front so full ELBO values can be
/// reconstructed.
pub fn loss_log_csv(losses: &[f64], dim: usize) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let constant = 0.5 * dim as f64 * crate::numstats::LN_2PI;
    let _ = writeln!(
        out,
        "# loss omits the constant (d/2) ln 2pi = {constant:.12} per sample"
    );
    out.push_str("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:.12e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EmbeddingRecord;
    use rand_chacha::ChaCha8Rng;

    fn zero_layer(out: usize, inp: usize, activation: Activation) -> Layer {
        Layer {
            weights: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
            activation,
        }
    }

    fn manual_model(enc: Vec<Layer>, dec: Vec<Layer>, k: usize, lambda: f64) -> VaeModel {
        let d = enc[0].weights.cols();
        VaeModel {
            encoder: MlpNetwork { layers: enc },
            decoder: MlpNetwork { layers: dec },
            latent_dim: k,
            cohesive_weight: lambda,
            train_seed: 0,
            input_mean: vec![0.0; d],
            input_std: vec![1.0; d],
            adapt_mode: None,
        }
    }

    fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, speakers: usize) -> EmbeddingSet {
        let records = (0..n)
            .map(|i| EmbeddingRecord {
                utterance_id: format!("u{i}"),
                speaker_id: format!("s{}", i % speakers),
                vector: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
        EmbeddingSet::from_records(dim, records).unwrap()
    }

    #[test]
    fn zero_encoder_has_zero_kl() {
        let model = manual_model(
            vec![zero_layer(4, 2, Activation::Linear)],
            vec![zero_layer(2, 2, Activation::Linear)],
            2,
            0.0,
        );
        let x = vec![0.6, -0.8];
        let (loss, _) =
            elbo_loss_and_grads(&model, &[x.clone()], None, &[vec![0.0, 0.0]]).unwrap();
        let recon = 0.5 * (x[0] * x[0] + x[1] * x[1]);
        assert!((loss - recon).abs() < 1e-15, "{loss} vs {recon}");
    }

    #[test]
    fn frozen_unit_gaussian_kl_is_half() {
        // mu fixed at 1, logvar at 0 via the bias; zero input and decoder
        // leave only the KL term.
        let mut enc = zero_layer(2, 1, Activation::Linear);
        enc.bias = vec![1.0, 0.0];
        let model = manual_model(vec![enc], vec![zero_layer(1, 1, Activation::Linear)], 1, 0.0);
        let (loss, _) = elbo_loss_and_grads(&model, &[vec![0.0]], None, &[vec![0.0]]).unwrap();
        assert!((loss - 0.5).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (mu, sigma) in [(1.0, 1.0), (0.3, 0.1), (-1.2, 2.5), (0.0, 3.0), (2.0, 0.7)] {
            let closed = 0.5 * (mu * mu + sigma * sigma - (sigma * sigma as f64).ln() - 1.0);
            let mut mc = 0.0;
            let n = 1_000_000;
            for _ in 0..n {
                let z: f64 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                let ln_q = -0.5 * crate::numstats::LN_2PI
                    - sigma.ln()
                    - (z - mu) * (z - mu) / (2.0 * sigma * sigma);
                let ln_p = -0.5 * crate::numstats::LN_2PI - z * z / 2.0;
                mc += ln_q - ln_p;
            }
            mc /= n as f64;
            let scale = closed.abs().max(0.05);
            assert!(
                (closed - mc).abs() < 1e-2 * scale.max(1.0),
                "mu={mu} sigma={sigma}: {closed} vs {mc}"
            );
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let config = VaeConfig {
            latent_dim: 2,
            hidden: vec![4],
            epochs: 0,
            batch_size: 8,
            learning_rate: 1e-3,
            cohesive_weight: 0.1,
            seed: 31,
        };
        let model = init_model(3, &config, &mut rng);
        let batch: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels = vec![0usize, 0, 1, 1, 0];
        let noise: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let (_, grads) = elbo_loss_and_grads(&model, &batch, Some(&labels), &noise).unwrap();
        let params = flatten_params(&model);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut probe = model.clone();
            let mut p = params.clone();
            p[i] = params[i] + h;
            load_params(&mut probe, &p).unwrap();
            let (lp, _) = elbo_loss_and_grads(&probe, &batch, Some(&labels), &noise).unwrap();
            p[i] = params[i] - h;
            load_params(&mut probe, &p).unwrap();
            let (lm, _) = elbo_loss_and_grads(&probe, &batch, Some(&labels), &noise).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = (grads[i].abs() + fd.abs()).max(1e-6);
            assert!(
                (grads[i] - fd).abs() / denom < 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn cohesive_term_vanishes_for_identical_latents() {
        // Zero encoder: every latent mean is zero, so all centroids coincide.
        let plain = manual_model(
            vec![zero_layer(4, 2, Activation::Linear)],
            vec![zero_layer(2, 2, Activation::Linear)],
            2,
            0.0,
        );
        let mut cohesive = plain.clone();
        cohesive.cohesive_weight = 0.5;
        let batch = vec![vec![0.6, -0.8], vec![1.0, 2.0], vec![-0.5, 0.1]];
        let noise = vec![vec![0.0, 0.0]; 3];
        let labels = vec![0usize, 0, 1];
        let (l0, _) = elbo_loss_and_grads(&plain, &batch, None, &noise).unwrap();
        let (l1, _) = elbo_loss_and_grads(&cohesive, &batch, Some(&labels), &noise).unwrap();
        assert_eq!(l0.to_bits(), l1.to_bits());
    }

    #[test]
    fn cohesive_term_positive_for_spread_latents() {
        // Identity mean head: latents differ within speaker 0.
        let mut w = Matrix::zeros(4, 2);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let enc = Layer {
            weights: w,
            bias: vec![0.0; 4],
            activation: Activation::Linear,
        };
        let plain = manual_model(
            vec![enc],
            vec![zero_layer(2, 2, Activation::Linear)],
            2,
            0.0,
        );
        let mut cohesive = plain.clone();
        cohesive.cohesive_weight = 0.5;
        let batch = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.3, 0.3]];
        let noise = vec![vec![0.0, 0.0]; 3];
        let labels = vec![0usize, 0, 1];
        let (l0, _) = elbo_loss_and_grads(&plain, &batch, None, &noise).unwrap();
        let (l1, _) = elbo_loss_and_grads(&cohesive, &batch, Some(&labels), &noise).unwrap();
        // Speaker 0 latents are (+-1, 0) about centroid (0,0): cohesive
        // contribution = 0.5 * (1 + 1) / 3.
        assert!((l1 - l0 - 0.5 * 2.0 / 3.0).abs() < 1e-12, "{}", l1 - l0);
    }

    #[test]
    fn cohesive_without_labels_is_rejected() {
        let model = manual_model(
            vec![zero_layer(4, 2, Activation::Linear)],
            vec![zero_layer(2, 2, Activation::Linear)],
            2,
            0.1,
        );
        let err = elbo_loss_and_grads(&model, &[vec![0.0, 0.0]], None, &[vec![0.0, 0.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn reconstruction_estimate_scales_as_root_n() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let config = VaeConfig {
            latent_dim: 2,
            hidden: vec![6],
            epochs: 0,
            batch_size: 8,
            learning_rate: 1e-3,
            cohesive_weight: 0.0,
            seed: 77,
        };
        let model = init_model(3, &config, &mut rng);
        let x = vec![0.4, -1.1, 0.7];
        // KL does not depend on the noise draw, so per-draw loss differences
        // are purely the reconstruction term.
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                elbo_loss_and_grads(&model, &[x.clone()], None, &[eps]).unwrap().0
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / draws.len() as f64;
        let block_means: Vec<f64> = draws
            .chunks(100)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let bvar = block_means
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / block_means.len() as f64;
        // Block means of 100 draws should have ~1/100 the variance.
        let ratio = bvar / (var / 100.0);
        assert!((0.5..2.0).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.5, -2.0, 0.0];
        let before = params.clone();
        let mut st = AdamState::new(3, 1e-3);
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut st).unwrap();
        adam_step(&mut params, &[0.0, 0.0, 0.0], &mut st).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn adam_first_step_follows_gradient_sign() {
        let mut params = vec![0.0, 0.0];
        let mut st = AdamState::new(2, 0.01);
        adam_step(&mut params, &[3.0, -0.5], &mut st).unwrap();
        assert!((params[0] + 0.01).abs() < 1e-7, "{}", params[0]);
        assert!((params[1] - 0.01).abs() < 1e-7, "{}", params[1]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![0.2, -0.4];
            let mut st = AdamState::new(2, 5e-3);
            for i in 0..20 {
                let g = [0.1 * i as f64, -0.05];
                adam_step(&mut params, &g, &mut st).unwrap();
            }
            params
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![0.0, 0.0];
        let mut st = AdamState::new(2, 1e-3);
        assert!(adam_step(&mut params, &[1.0], &mut st).is_err());
        let mut st3 = AdamState::new(3, 1e-3);
        assert!(adam_step(&mut params, &[1.0, 1.0], &mut st3).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = gaussian_set(&mut rng, 256, 2, 8);
        let config = VaeConfig {
            latent_dim: 2,
            hidden: vec![8],
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            cohesive_weight: 0.0,
            seed: 1,
        };
        let (_, losses) = train_vae(&set, &config).unwrap();
        assert_eq!(losses.len(), 15);
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = gaussian_set(&mut rng, 64, 2, 4);
        let mut config = VaeConfig::desk(3);
        config.latent_dim = 2;
        config.hidden = vec![6];
        config.epochs = 0;
        let (a, losses) = train_vae(&set, &config).unwrap();
        assert!(losses.is_empty());
        let (b, _) = train_vae(&set, &config).unwrap();
        assert_eq!(a, b);
        config.epochs = 1;
        let (c, _) = train_vae(&set, &config).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cohesive_training_requires_labeled_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = gaussian_set(&mut rng, 32, 2, 4).unlabeled();
        let mut config = VaeConfig::desk_cohesive(5);
        config.latent_dim = 2;
        config.hidden = vec![4];
        config.epochs = 1;
        assert!(train_vae(&set, &config).is_err());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = gaussian_set(&mut rng, 64, 2, 4);
        let config = VaeConfig {
            latent_dim: 2,
            hidden: vec![4],
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e160,
            cohesive_weight: 0.0,
            seed: 6,
        };
        match train_vae(&set, &config) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn normalize_zero_encoder_gives_zeros() {
        let model = manual_model(
            vec![zero_layer(4, 3, Activation::Linear)],
            vec![zero_layer(3, 2, Activation::Linear)],
            2,
            0.0,
        );
        let set = EmbeddingSet::from_records(
            3,
            vec![EmbeddingRecord {
                utterance_id: "u0".into(),
                speaker_id: "s0".into(),
                vector: vec![1.0, -2.0, 3.0],
            }],
        )
        .unwrap();
        let out = normalize(&model, &set).unwrap();
        assert_eq!(out.dim(), 2);
        assert_eq!(out.records()[0].vector, vec![0.0, 0.0]);
        assert_eq!(out.records()[0].speaker_id, "s0");
    }

    #[test]
    fn normalize_identity_construction_returns_input() {
        let mut w = Matrix::zeros(4, 2);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let enc = Layer {
            weights: w,
            bias: vec![0.0; 4],
            activation: Activation::Linear,
        };
        let model = manual_model(vec![enc], vec![zero_layer(2, 2, Activation::Linear)], 2, 0.0);
        let set = EmbeddingSet::from_records(
            2,
            vec![EmbeddingRecord {
                utterance_id: "u0".into(),
                speaker_id: String::new(),
                vector: vec![0.25, -1.5],
            }],
        )
        .unwrap();
        let out = normalize(&model, &set).unwrap();
        assert_eq!(out.records()[0].vector, vec![0.25, -1.5]);
    }

    #[test]
    fn normalize_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = gaussian_set(&mut rng, 16, 3, 2);
        let mut config = VaeConfig::desk(9);
        config.latent_dim = 2;
        config.hidden = vec![5];
        config.epochs = 2;
        config.batch_size = 8;
        let (model, _) = train_vae(&set, &config).unwrap();
        let a = normalize(&model, &set).unwrap();
        let b = normalize(&model, &set).unwrap();
        assert_eq!(a.vectors(), b.vectors());
    }

    #[test]
    fn normalize_rejects_dim_mismatch() {
        let model = manual_model(
            vec![zero_layer(4, 3, Activation::Linear)],
            vec![zero_layer(3, 2, Activation::Linear)],
            2,
            0.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = gaussian_set(&mut rng, 4, 2, 2);
        assert!(normalize(&model, &set).is_err());
    }

    #[test]
    fn relu_activation_behaves() {
        assert_eq!(Activation::Relu.apply(-1.5), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Relu.derivative(-1.5), 0.0);
        assert_eq!(Activation::Relu.derivative(2.0), 1.0);
    }

    #[test]
    fn flatten_load_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let config = VaeConfig::desk(12);
        let model = init_model(6, &config, &mut rng);
        let mut copy = model.clone();
        let params = flatten_params(&model);
        load_params(&mut copy, &params).unwrap();
        assert_eq!(model, copy);
        assert!(load_params(&mut copy, &params[1..]).is_err());
    }

    #[test]
    fn retrain_with_same_seed_reproduces_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let set = gaussian_set(&mut rng, 96, 3, 6);
        let config = VaeConfig {
            latent_dim: 2,
            hidden: vec![6],
            epochs: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            cohesive_weight: 0.0,
            seed: 14,
        };
        let (base, _) = train_vae(&set, &config).unwrap();
        let adapt = AdaptConfig {
            mode: AdaptMode::Retrain,
            epochs: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 14,
            refresh_standardization: false,
        };
        let (re, _) = adapt_vae(&base, &set, &adapt).unwrap();
        assert_eq!(re.adapt_mode, Some(AdaptMode::Retrain));
        assert_eq!(flatten_params(&re), flatten_params(&base));
        assert_eq!(re.input_mean, base.input_mean);
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let set = gaussian_set(&mut rng, 48, 2, 4);
        let mut config = VaeConfig::desk(17);
        config.latent_dim = 2;
        config.hidden = vec![5];
        config.epochs = 2;
        config.batch_size = 16;
        let (model, _) = train_vae(&set, &config).unwrap();
        let mut adapt = AdaptConfig::finetune(18);
        adapt.epochs = 0;
        adapt.refresh_standardization = true;
        let (same, losses) = adapt_vae(&model, &set, &adapt).unwrap();
        assert!(losses.is_empty());
        assert_eq!(same, model);
    }

    #[test]
    fn finetune_is_deterministic_and_moves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let train = gaussian_set(&mut rng, 64, 2, 4);
        let ood = gaussian_set(&mut rng, 64, 2, 4);
        let mut config = VaeConfig::desk(21);
        config.latent_dim = 2;
        config.hidden = vec![5];
        config.epochs = 2;
        config.batch_size = 16;
        let (model, _) = train_vae(&train, &config).unwrap();
        let mut adapt = AdaptConfig::finetune(22);
        adapt.epochs = 2;
        adapt.batch_size = 16;
        let (a, _) = adapt_vae(&model, &ood, &adapt).unwrap();
        let (b, _) = adapt_vae(&model, &ood, &adapt).unwrap();
        assert_eq!(a, b);
        assert_ne!(flatten_params(&a), flatten_params(&model));
        assert_eq!(a.adapt_mode, Some(AdaptMode::Finetune));
        // Standardization stays frozen unless explicitly refreshed.
        assert_eq!(a.input_mean, model.input_mean);
        adapt.refresh_standardization = true;
        let (c, _) = adapt_vae(&model, &ood, &adapt).unwrap();
        let (want_mean, _) = standardization(&ood.vectors());
        assert_eq!(c.input_mean, want_mean);
    }

    #[test]
    fn loss_log_records_dropped_constant() {
        let csv = loss_log_csv(&[1.5, 1.25], 32);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# loss omits the constant"));
        assert_eq!(lines.next().unwrap(), "epoch,loss");
        assert!(lines.next().unwrap().starts_with("0,1.5"));
        assert_eq!(lines.count(), 1);
    }
}
