//! Multilayer perceptrons with hand-written backpropagation, the Gaussian
//! encoder, the Bernoulli or Gaussian decoder, the ELBO under a latent tree
//! prior, and Adam.
//!
//! Matrices are `batch × units`; layer weights are `out × in`. Gradients are
//! of the objective being maximized, and [`Adam`] ascends them.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::em::SufficientStats;
use crate::error::{Error, Result};
use crate::inference::{CliqueTree, Messages};
use crate::rng::{seeded, standard_normal, Rng};
use crate::tree::{LayerRecord, NetworkRecord, TreeParameters};

const LOGIT_CLAMP: f64 = 15.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients shaped like an [`MlpNetwork`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn zeros_like(net: &MlpNetwork) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }

    /// Flattened in parameter order (layer by layer, weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Activations retained by a forward pass: `values[0]` is the input and
/// `values[k + 1]` the output of layer `k`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub values: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("input present")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
}

impl MlpNetwork {
    /// Dense network with the given unit counts. Hidden layers use `hidden`,
    /// the last layer `output`. Weights are uniform in `±1/√fan_in`, biases 0.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 == n { output } else { hidden },
                }
            })
            .collect();
        MlpNetwork { layers }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("non-empty").n_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> ForwardCache {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_owned());
        for layer in &self.layers {
            let mut h = values.last().expect("input").dot(&layer.weights.t());
            h += &layer.bias;
            let act = layer.activation;
            h.mapv_inplace(|v| act.apply(v));
            values.push(h);
        }
        ForwardCache { values }
    }

    /// Output only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = h.dot(&layer.weights.t());
            h += &layer.bias;
            let act = layer.activation;
            h.mapv_inplace(|v| act.apply(v));
        }
        h
    }

    /// Backpropagates `grad_out = ∂F/∂output` and returns the parameter
    /// gradients together with `∂F/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> (NetGrads, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.values[k + 1];
            let act = layer.activation;
            if act != Activation::Identity {
                delta.zip_mut_with(out, |d, &y| *d *= act.slope_from_output(y));
            }
            let input = &cache.values[k];
            grads.push(LayerGrad {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();
        (NetGrads { layers: grads }, delta)
    }

    /// Flattened parameters in the order used by [`NetGrads::flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_params());
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().expect("length"));
        }
    }

    pub fn to_record(&self) -> NetworkRecord {
        NetworkRecord {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    shape: [l.n_out(), l.n_in()],
                    activation: l.activation.name().to_string(),
                    weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_record(record: &NetworkRecord) -> Result<Self> {
        if record.layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        let mut layers = Vec::with_capacity(record.layers.len());
        for (k, l) in record.layers.iter().enumerate() {
            let [out, inp] = l.shape;
            if l.weights.len() != out || l.weights.iter().any(|r| r.len() != inp) || l.bias.len() != out {
                return Err(Error::Format(format!("layer {k}: arrays do not match shape [{out}, {inp}]")));
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.n_out() != inp {
                    return Err(Error::Format(format!(
                        "layer {k}: input size {inp} does not follow output size {}",
                        prev.n_out()
                    )));
                }
            }
            let flat: Vec<f64> = l.weights.iter().flatten().copied().collect();
            if flat.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("layer {k}: non-finite weight")));
            }
            layers.push(Layer {
                weights: Array2::from_shape_vec((out, inp), flat).expect("checked shape"),
                bias: Array1::from(l.bias.clone()),
                activation: l.activation.parse()?,
            });
        }
        Ok(MlpNetwork { layers })
    }
}

/// Observation model of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Decoder outputs logits of independent Bernoullis.
    Bernoulli,
    /// Decoder outputs means of unit-variance Gaussians.
    Gaussian,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Bernoulli => "bernoulli",
            Head::Gaussian => "gaussian",
        }
    }

    /// Checks that `x` lies in the head's support.
    pub fn check(self, x: ArrayView2<f64>) -> Result<()> {
        for (i, row) in x.rows().into_iter().enumerate() {
            for &v in row {
                let ok = match self {
                    Head::Bernoulli => (0.0..=1.0).contains(&v),
                    Head::Gaussian => v.is_finite(),
                };
                if !ok {
                    return Err(Error::Domain(format!(
                        "row {i}: value {v} outside the {} support",
                        self.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `log p(x | output)` of one row.
    pub fn loglik(self, output: &[f64], x: &[f64]) -> f64 {
        match self {
            Head::Bernoulli => output
                .iter()
                .zip(x)
                .map(|(&l, &xi)| {
                    let l = l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                    xi * l - softplus(l)
                })
                .sum(),
            Head::Gaussian => output
                .iter()
                .zip(x)
                .map(|(&m, &xi)| -HALF_LN_2PI - 0.5 * (xi - m) * (xi - m))
                .sum(),
        }
    }

    /// `∂ log p(x | output) / ∂output`, written into `grad`.
    fn loglik_grad(self, output: &[f64], x: &[f64], grad: &mut [f64]) {
        for ((g, &o), &xi) in grad.iter_mut().zip(output).zip(x) {
            *g = match self {
                Head::Bernoulli => {
                    if o.abs() >= LOGIT_CLAMP {
                        0.0
                    } else {
                        xi - sigmoid(o)
                    }
                }
                Head::Gaussian => xi - o,
            };
        }
    }

    /// Decoder output mapped to the data scale (probabilities or means).
    fn mean(self, output: f64) -> f64 {
        match self {
            Head::Bernoulli => sigmoid(output.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)),
            Head::Gaussian => output,
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Head::Bernoulli),
            "gaussian" => Ok(Head::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown decoder head {other:?}"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoder, decoder and observation model.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    /// Outputs `2J` values: `μ` then `log σ`.
    pub encoder: MlpNetwork,
    /// Maps `z` to head outputs.
    pub decoder: MlpNetwork,
    pub head: Head,
}

impl Vae {
    /// Encoder `d–h₁–…–2J` and mirrored decoder `J–…–h₁–d`, relu hidden
    /// units, linear outputs.
    pub fn new(x_dim: usize, hidden: &[usize], z_dim: usize, head: Head, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut enc = vec![x_dim];
        enc.extend_from_slice(hidden);
        enc.push(2 * z_dim);
        let mut dec = vec![z_dim];
        dec.extend(hidden.iter().rev());
        dec.push(x_dim);
        Vae {
            encoder: MlpNetwork::new(&enc, Activation::Relu, Activation::Identity, &mut rng),
            decoder: MlpNetwork::new(&dec, Activation::Relu, Activation::Identity, &mut rng),
            head,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.decoder.n_in()
    }

    pub fn x_dim(&self) -> usize {
        self.decoder.n_out()
    }

    /// Encoder means and log standard deviations.
    pub fn encode_params(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        split_encoder_output(&self.encoder.predict(x), self.z_dim())
    }

    /// Decoder outputs on the data scale: Bernoulli probabilities or
    /// Gaussian means.
    pub fn decode_mean(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let head = self.head;
        self.decoder.predict(z).mapv(|o| head.mean(o))
    }

    /// Per-row `log p(x | z)`.
    pub fn decode_loglik(&self, z: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.head.check(x)?;
        check_cols(x.ncols(), self.x_dim())?;
        let out = self.decoder.predict(z);
        Ok(out
            .rows()
            .into_iter()
            .zip(x.rows())
            .map(|(o, xi)| self.head.loglik(o.as_slice().expect("row-major"), &xi.to_vec()))
            .collect())
    }
}

fn check_cols(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn split_encoder_output(out: &Array2<f64>, j: usize) -> (Array2<f64>, Array2<f64>) {
    let mu = out.slice(ndarray::s![.., ..j]).to_owned();
    let log_sigma = out.slice(ndarray::s![.., j..]).to_owned();
    (mu, log_sigma)
}

/// Encoder outputs with reparameterized samples and the noise behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub mu: Array2<f64>,
    pub log_sigma: Array2<f64>,
    /// `M` arrays of shape `batch × J`.
    pub z_samples: Vec<Array2<f64>>,
    pub eps: Vec<Array2<f64>>,
}

/// `z = μ + exp(log σ) · ε` elementwise.
pub fn reparameterize(mu: &Array2<f64>, log_sigma: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let mut z = eps.clone();
    ndarray::Zip::from(&mut z)
        .and(mu)
        .and(log_sigma)
        .for_each(|z, &m, &ls| *z = m + ls.exp() * *z);
    z
}

/// `M` standard-normal arrays of shape `rows × cols`.
pub fn draw_eps(rng: &mut Rng, m: usize, rows: usize, cols: usize) -> Vec<Array2<f64>> {
    (0..m)
        .map(|_| Array2::from_shape_simple_fn((rows, cols), || standard_normal(rng)))
        .collect()
}

pub fn encode(vae: &Vae, x: ArrayView2<f64>, m: usize, rng: &mut Rng) -> Result<EncodedBatch> {
    check_cols(x.ncols(), vae.encoder.n_in())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite input".into()));
    }
    let (mu, log_sigma) = vae.encode_params(x);
    let eps = draw_eps(rng, m, x.nrows(), vae.z_dim());
    let z_samples = eps.iter().map(|e| reparameterize(&mu, &log_sigma, e)).collect();
    Ok(EncodedBatch {
        mu,
        log_sigma,
        z_samples,
        eps,
    })
}

/// Entropy of `N(μ, diag σ²)` from one row of `log σ`.
pub fn entropy_term(log_sigma: &[f64]) -> f64 {
    let j = log_sigma.len() as f64;
    j * HALF_LN_2PI + 0.5 * log_sigma.iter().map(|ls| 1.0 + 2.0 * ls).sum::<f64>()
}

/// `log q(z | x)` for `z = μ + σ ε`.
pub fn log_q(log_sigma: &[f64], eps: &[f64]) -> f64 {
    log_sigma
        .iter()
        .zip(eps)
        .map(|(ls, e)| -HALF_LN_2PI - ls - 0.5 * e * e)
        .sum()
}

/// Batch-mean ELBO terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub prior: f64,
    pub entropy: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(recon: f64, prior: f64, entropy: f64) -> Self {
        ElboBreakdown {
            recon,
            prior,
            entropy,
            total: recon + prior + entropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeGradients {
    pub encoder: NetGrads,
    pub decoder: NetGrads,
}

/// Latent tree prior `p_S(z)` with its inference scaffold.
#[derive(Clone, Debug)]
pub struct TreePrior<'a> {
    pub params: &'a TreeParameters,
    pub clique_tree: CliqueTree,
}

impl<'a> TreePrior<'a> {
    pub fn new(structure: &crate::tree::LatentStructure, params: &'a TreeParameters) -> Self {
        TreePrior {
            params,
            clique_tree: CliqueTree::new(structure),
        }
    }
}

/// ELBO of a batch and its gradients with respect to every encoder and
/// decoder parameter, drawing `M = eps.len()` noise arrays.
///
/// Both the value and the gradients are averaged over the batch. When
/// `stats` is given, the posterior of every sampled `z` is added to it.
pub fn elbo_and_gradients(
    vae: &Vae,
    prior: &TreePrior<'_>,
    x: ArrayView2<f64>,
    eps: &[Array2<f64>],
    mut stats: Option<&mut SufficientStats>,
) -> Result<(ElboBreakdown, VaeGradients)> {
    let b = x.nrows();
    let j = vae.z_dim();
    if b == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    if eps.is_empty() {
        return Err(Error::InvalidArgument("at least one Monte-Carlo sample is needed".into()));
    }
    check_cols(x.ncols(), vae.x_dim())?;
    check_cols(prior.clique_tree.n_vars(), j)?;
    vae.head.check(x)?;

    let enc_cache = vae.encoder.forward(x);
    let (mu, log_sigma) = split_encoder_output(enc_cache.output(), j);
    let m = eps.len() as f64;
    let ct = &prior.clique_tree;
    let root = ct.model_root();
    let mut msgs = Messages::new(ct);

    let mut recon = 0.0;
    let mut prior_sum = 0.0;
    let mut grad_mu = Array2::<f64>::zeros((b, j));
    let mut grad_ls = Array2::<f64>::zeros((b, j));
    let mut dec_grads = NetGrads::zeros_like(&vae.decoder);
    let mut grad_head = vec![0.0; vae.x_dim()];

    for e in eps {
        let z = reparameterize(&mu, &log_sigma, e);
        let dec_cache = vae.decoder.forward(z.view());
        let out = dec_cache.output();
        let mut g_out = Array2::<f64>::zeros(out.raw_dim());
        for i in 0..b {
            let o = out.row(i);
            let o = o.as_slice().expect("row-major");
            let xi: Vec<f64> = x.row(i).to_vec();
            recon += vae.head.loglik(o, &xi);
            vae.head.loglik_grad(o, &xi, &mut grad_head);
            g_out.row_mut(i).iter_mut().zip(&grad_head).for_each(|(g, h)| *g = *h);
        }
        let (g_dec, mut g_z) = vae.decoder.backward(&dec_cache, g_out.view());
        dec_grads.add_assign(&g_dec);

        for i in 0..b {
            let zi = z.row(i).to_vec();
            let post = ct.posterior_with(prior.params, &zi, &mut msgs)?;
            prior_sum += post.loglik;
            let gp = ct.grad_z(prior.params, &zi, &post);
            if let Some(s) = stats.as_deref_mut() {
                s.add_posterior(ct, root, &post, &zi);
            }
            g_z.row_mut(i).iter_mut().zip(&gp).for_each(|(g, p)| *g += p);
        }
        // Chain through z = μ + exp(log σ) ε.
        ndarray::Zip::from(&mut grad_mu).and(&g_z).for_each(|a, &g| *a += g);
        ndarray::Zip::from(&mut grad_ls)
            .and(&g_z)
            .and(&log_sigma)
            .and(e)
            .for_each(|a, &g, &ls, &ep| *a += g * ls.exp() * ep);
    }
    let entropy: f64 = log_sigma
        .rows()
        .into_iter()
        .map(|r| entropy_term(r.as_slice().expect("row-major")))
        .sum();

    grad_mu /= m;
    grad_ls /= m;
    // ∂H/∂log σ = 1.
    grad_ls += 1.0;
    let mut g_enc_out = Array2::<f64>::zeros((b, 2 * j));
    g_enc_out.slice_mut(ndarray::s![.., ..j]).assign(&grad_mu);
    g_enc_out.slice_mut(ndarray::s![.., j..]).assign(&grad_ls);
    let (mut enc_grads, _) = vae.encoder.backward(&enc_cache, g_enc_out.view());

    let inv_b = 1.0 / b as f64;
    enc_grads.scale(inv_b);
    dec_grads.scale(inv_b / m);
    let breakdown = ElboBreakdown::new(recon / (m * b as f64), prior_sum / (m * b as f64), entropy * inv_b);
    Ok((
        breakdown,
        VaeGradients {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    ))
}

/// Mean reconstruction loglikelihood of a deterministic autoencoder
/// (`z = μ_x`) and its gradients; the `log σ` outputs receive none.
pub fn reconstruction_and_gradients(vae: &Vae, x: ArrayView2<f64>) -> Result<(f64, VaeGradients)> {
    let b = x.nrows();
    let j = vae.z_dim();
    if b == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    check_cols(x.ncols(), vae.x_dim())?;
    vae.head.check(x)?;
    let enc_cache = vae.encoder.forward(x);
    let (mu, _) = split_encoder_output(enc_cache.output(), j);
    let dec_cache = vae.decoder.forward(mu.view());
    let out = dec_cache.output();
    let mut g_out = Array2::<f64>::zeros(out.raw_dim());
    let mut total = 0.0;
    let mut grad_head = vec![0.0; vae.x_dim()];
    for i in 0..b {
        let o = out.row(i);
        let o = o.as_slice().expect("row-major");
        let xi = x.row(i).to_vec();
        total += vae.head.loglik(o, &xi);
        vae.head.loglik_grad(o, &xi, &mut grad_head);
        g_out.row_mut(i).iter_mut().zip(&grad_head).for_each(|(g, h)| *g = *h);
    }
    let (mut dec_grads, g_mu) = vae.decoder.backward(&dec_cache, g_out.view());
    let mut g_enc_out = Array2::<f64>::zeros((b, 2 * j));
    g_enc_out.slice_mut(ndarray::s![.., ..j]).assign(&g_mu);
    let (mut enc_grads, _) = vae.encoder.backward(&enc_cache, g_enc_out.view());
    let inv_b = 1.0 / b as f64;
    enc_grads.scale(inv_b);
    dec_grads.scale(inv_b);
    Ok((
        total * inv_b,
        VaeGradients {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    ))
}

/// Adam on a flat parameter vector, ascending the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// `θ ← θ + lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam over both networks of a [`Vae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeOptimizer {
    pub encoder: Adam,
    pub decoder: Adam,
}

impl VaeOptimizer {
    pub fn new(vae: &Vae, lr: f64) -> Self {
        VaeOptimizer {
            encoder: Adam::new(vae.encoder.n_params(), lr),
            decoder: Adam::new(vae.decoder.n_params(), lr),
        }
    }

    pub fn step(&mut self, vae: &mut Vae, grads: &VaeGradients) {
        adam_step_net(&mut self.encoder, &mut vae.encoder, &grads.encoder);
        adam_step_net(&mut self.decoder, &mut vae.decoder, &grads.decoder);
    }
}

fn adam_step_net(adam: &mut Adam, net: &mut MlpNetwork, grads: &NetGrads) {
    let mut flat = net.flat();
    adam.step(&mut flat, &grads.flat());
    net.set_flat(&flat);
}
