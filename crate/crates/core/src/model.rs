//! Dual-path hierarchical VAE.
//!
//! Layer `l` (1-based) runs at `1/2^(l-1)` of the input resolution. Two
//! encoder trunks share a layout but not weights: the content trunk feeds the
//! deterministic heads `e^l`, the degradation trunk feeds the Gaussian
//! posterior heads. A top-down prior state `s_l` is computed from the
//! degradation samples of the layer above and is shared by the posterior and
//! the prior. The decoder maps `z^N` (clean) or `z^N` plus `z_n^N` (noisy) back
//! to image space with every parameter shared except the noise input
//! projection.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use uvae_autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub kernel: usize,
    pub count: usize,
}

impl Default for ConvBlock {
    fn default() -> Self {
        Self { kernel: 3, count: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub input_channels: usize,
    pub base_channels: usize,
    /// Hidden width multiplier per layer; layer `l` has `base * growth^(l-1)` channels.
    pub channel_growth: usize,
    pub latent_channels_per_layer: Vec<usize>,
    pub conv_block: ConvBlock,
    pub fuse_kernel: usize,
    pub log_sigma_clamp: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            input_channels: 3,
            base_channels: 64,
            channel_growth: 1,
            latent_channels_per_layer: vec![64, 64, 64],
            conv_block: ConvBlock::default(),
            fuse_kernel: 1,
            log_sigma_clamp: [-10.0, 3.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.input_channels == 0 || self.base_channels == 0 || self.channel_growth == 0 {
            return bad("channel counts must be at least 1".into());
        }
        if self.latent_channels_per_layer.len() != self.num_layers {
            return bad(format!(
                "latent_channels_per_layer has {} entries for {} layers",
                self.latent_channels_per_layer.len(),
                self.num_layers
            ));
        }
        if self.latent_channels_per_layer.contains(&0) {
            return bad("latent channel counts must be at least 1".into());
        }
        if self.conv_block.kernel % 2 == 0 || self.fuse_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        let [lo, hi] = self.log_sigma_clamp;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("log_sigma_clamp must satisfy min < max, got [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// Hidden channels at layer `l` (1-based).
    pub fn hidden_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_growth.pow(l as u32 - 1)
    }

    pub fn latent_channels(&self, l: usize) -> usize {
        self.latent_channels_per_layer[l - 1]
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_layers - 1)
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(CoreError::Dimension(format!(
                "input {h}x{w} must have both sides divisible by 2^(N-1) = {d} for N = {}",
                self.num_layers
            )));
        }
        Ok(())
    }

    /// `(height, width)` of layer `l` for an input of `h x w`.
    pub fn layer_spatial(&self, l: usize, h: usize, w: usize) -> (usize, usize) {
        (h >> (l - 1), w >> (l - 1))
    }
}

/// Deterministic content code, one NCHW tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentContent<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentContent<T> {
    pub fn top(&self) -> &Tensor<T> {
        self.layers.last().expect("at least one layer")
    }
}

/// Statistics and sample of one degradation layer.
///
/// Posterior statistics are present only when the layer was inferred from a
/// corrupted image. Layer 1 prior statistics are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationLayer<T> {
    pub mu_q: Option<Tensor<T>>,
    pub log_sigma_q: Option<Tensor<T>>,
    pub mu_p: Tensor<T>,
    pub log_sigma_p: Tensor<T>,
    pub sample: Tensor<T>,
    pub eps: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDegradation<T> {
    pub layers: Vec<DegradationLayer<T>>,
}

impl<T: Scalar> LatentDegradation<T> {
    pub fn top_sample(&self) -> &Tensor<T> {
        &self.layers.last().expect("at least one layer").sample
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Trunk {
    stem: Conv,
    blocks: Vec<Vec<Conv>>,
    /// `down[i]` maps layer `i + 1` features to layer `i + 2`.
    down: Vec<Conv>,
}

#[derive(Clone, Debug)]
struct Layout {
    content: Trunk,
    content_heads: Vec<Conv>,
    degradation: Trunk,
    post_mu: Vec<Conv>,
    post_ls: Vec<Conv>,
    /// Indexed by `l - 2` for layers `l >= 2`.
    prior_in: Vec<Conv>,
    prior_blocks: Vec<Vec<Conv>>,
    prior_mu: Vec<Conv>,
    prior_ls: Vec<Conv>,
    dec_in_content: Conv,
    dec_in_noise: ParamId,
    /// Indexed by `l - 1`.
    dec_blocks: Vec<Vec<Conv>>,
    /// `dec_up[i]` maps layer `i + 2` to layer `i + 1`.
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Random,
    Zeros,
}

#[derive(Clone, Copy)]
enum Gain {
    Relu,
    Linear,
    Zero,
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    init: Init,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn weight(&mut self, name: &str, cout: usize, cin: usize, k: usize, gain: Gain) -> Result<ParamId> {
        let fan_in = (cin * k * k) as f64;
        let std = match (self.init, gain) {
            (Init::Zeros, _) | (_, Gain::Zero) => 0.0,
            (_, Gain::Relu) => (2.0 / fan_in).sqrt(),
            (_, Gain::Linear) => (1.0 / fan_in).sqrt(),
        };
        let shape = [cout, cin, k, k];
        let t = if std == 0.0 {
            Tensor::zeros(&shape)
        } else {
            let dist = Normal::new(0.0, std).expect("positive std");
            let rng = &mut *self.rng;
            Tensor::from_fn(&shape, |_| T::from_f64(dist.sample(rng)))
        };
        Ok(self.store.insert(name, t)?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: Gain) -> Result<Conv> {
        let w = self.weight(&format!("{name}.w"), cout, cin, k, gain)?;
        let b = self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b })
    }

    fn block(&mut self, name: &str, ch: usize, cfg: &ModelConfig) -> Result<Vec<Conv>> {
        (0..cfg.conv_block.count)
            .map(|i| self.conv(&format!("{name}.{i}"), ch, ch, cfg.conv_block.kernel, Gain::Relu))
            .collect()
    }

    fn trunk(&mut self, name: &str, cfg: &ModelConfig) -> Result<Trunk> {
        let k = cfg.conv_block.kernel;
        let f = cfg.fuse_kernel;
        let stem = self.conv(&format!("{name}.stem"), cfg.input_channels, cfg.hidden_channels(1), k, Gain::Relu)?;
        let mut blocks = Vec::new();
        let mut down = Vec::new();
        for l in 1..=cfg.num_layers {
            if l >= 2 {
                let cin = 4 * cfg.hidden_channels(l - 1);
                down.push(self.conv(&format!("{name}.down{l}"), cin, cfg.hidden_channels(l), f, Gain::Relu)?);
            }
            blocks.push(self.block(&format!("{name}.block{l}"), cfg.hidden_channels(l), cfg)?);
        }
        Ok(Trunk { stem, blocks, down })
    }
}

/// The full model: configuration, named parameters and their wiring.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model. Prior heads start at zero so every prior
    /// is standard normal at iteration 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Init::Random, seed)
    }

    /// Every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, Init::Zeros, 0)
    }

    fn build(config: ModelConfig, init: Init, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), init, rng: &mut rng };
        let cfg = &config;
        let n = cfg.num_layers;
        let f = cfg.fuse_kernel;
        let k = cfg.conv_block.kernel;

        let content = b.trunk("content", cfg)?;
        let content_heads = (1..=n)
            .map(|l| {
                b.conv(&format!("content.head{l}"), cfg.hidden_channels(l), cfg.latent_channels(l), f, Gain::Linear)
            })
            .collect::<Result<Vec<_>>>()?;

        let degradation = b.trunk("degradation", cfg)?;
        let mut post_mu = Vec::new();
        let mut post_ls = Vec::new();
        for l in 1..=n {
            let cin = if l == 1 { cfg.hidden_channels(1) } else { 2 * cfg.hidden_channels(l) };
            post_mu.push(b.conv(&format!("posterior.mu{l}"), cin, cfg.latent_channels(l), f, Gain::Linear)?);
            post_ls.push(b.conv(&format!("posterior.log_sigma{l}"), cin, cfg.latent_channels(l), f, Gain::Linear)?);
        }

        let mut prior_in = Vec::new();
        let mut prior_blocks = Vec::new();
        let mut prior_mu = Vec::new();
        let mut prior_ls = Vec::new();
        for l in 2..=n {
            let ctx =
                if l == 2 { cfg.latent_channels(1) } else { cfg.hidden_channels(l - 1) + cfg.latent_channels(l - 1) };
            let ch = cfg.hidden_channels(l);
            prior_in.push(b.conv(&format!("prior.in{l}"), 4 * ctx, ch, f, Gain::Relu)?);
            prior_blocks.push(b.block(&format!("prior.block{l}"), ch, cfg)?);
            prior_mu.push(b.conv(&format!("prior.mu{l}"), ch, cfg.latent_channels(l), f, Gain::Zero)?);
            prior_ls.push(b.conv(&format!("prior.log_sigma{l}"), ch, cfg.latent_channels(l), f, Gain::Zero)?);
        }

        let top = cfg.hidden_channels(n);
        let dec_in_content = b.conv("decoder.in_content", cfg.latent_channels(n), top, f, Gain::Relu)?;
        let dec_in_noise = b.weight("decoder.in_noise.w", top, cfg.latent_channels(n), f, Gain::Zero)?;
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        for l in 1..=n {
            dec_blocks.push(b.block(&format!("decoder.block{l}"), cfg.hidden_channels(l), cfg)?);
            if l < n {
                let cout = 4 * cfg.hidden_channels(l);
                dec_up.push(b.conv(&format!("decoder.up{l}"), cfg.hidden_channels(l + 1), cout, f, Gain::Relu)?);
            }
        }
        let dec_out = b.conv("decoder.out", cfg.hidden_channels(1), cfg.input_channels, k, Gain::Linear)?;

        let params = b.store;
        let layout = Layout {
            content,
            content_heads,
            degradation,
            post_mu,
            post_ls,
            prior_in,
            prior_blocks,
            prior_mu,
            prior_ls,
            dec_in_content,
            dec_in_noise,
            dec_blocks,
            dec_up,
            dec_out,
        };
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        if params.len() != model.params.len() {
            return Err(CoreError::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (_, name, tensor) in params.iter() {
            let id = model
                .params
                .lookup(name)
                .ok_or_else(|| CoreError::Incompatible(format!("unknown parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(CoreError::Incompatible(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    // ---- graph building blocks -------------------------------------------------

    fn conv(&self, g: &mut Graph<T>, c: Conv, x: Var) -> Result<Var> {
        let w = g.param(&self.params, c.w);
        let b = g.param(&self.params, c.b);
        Ok(g.conv2d(x, w, b)?)
    }

    fn conv_relu(&self, g: &mut Graph<T>, c: Conv, x: Var) -> Result<Var> {
        let y = self.conv(g, c, x)?;
        Ok(g.relu(y))
    }

    fn block(&self, g: &mut Graph<T>, convs: &[Conv], mut x: Var) -> Result<Var> {
        for &c in convs {
            x = self.conv_relu(g, c, x)?;
        }
        Ok(x)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.input_channels {
            return Err(CoreError::Dimension(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        self.config.check_spatial(h, w)
    }

    fn trunk(&self, g: &mut Graph<T>, trunk: &Trunk, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        let mut feats = Vec::with_capacity(self.config.num_layers);
        let mut h = self.conv_relu(g, trunk.stem, x)?;
        for l in 1..=self.config.num_layers {
            if l >= 2 {
                let u = g.pixel_unshuffle(h)?;
                h = self.conv_relu(g, trunk.down[l - 2], u)?;
            }
            h = self.block(g, &trunk.blocks[l - 1], h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Content codes `z^1..z^N` of an NCHW batch already passed through `h`.
    pub fn content_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let feats = self.trunk(g, &self.layout.content, x)?;
        feats.into_iter().zip(&self.layout.content_heads).map(|(f, &c)| self.conv(g, c, f)).collect()
    }

    /// Top-down prior state `s_l` for `l >= 2` from the context of layer `l - 1`.
    fn prior_state(&self, g: &mut Graph<T>, l: usize, ctx: Var) -> Result<Var> {
        let u = g.pixel_unshuffle(ctx)?;
        let s = self.conv_relu(g, self.layout.prior_in[l - 2], u)?;
        self.block(g, &self.layout.prior_blocks[l - 2], s)
    }

    fn prior_heads(&self, g: &mut Graph<T>, l: usize, s: Var) -> Result<(Var, Var)> {
        let mu = self.conv(g, self.layout.prior_mu[l - 2], s)?;
        let ls = self.conv(g, self.layout.prior_ls[l - 2], s)?;
        let [lo, hi] = self.config.log_sigma_clamp;
        Ok((mu, g.clamp(ls, lo, hi)))
    }

    fn draw_eps<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let e: f64 = StandardNormal.sample(rng);
            T::from_f64(e)
        })
    }

    /// `mu + temperature * exp(ls) * eps` on the graph; returns the sample and the `eps` node.
    fn reparam(g: &mut Graph<T>, mu: Var, ls: Var, eps: Tensor<T>, temperature: f64) -> Result<(Var, Var)> {
        let sigma = g.exp(ls);
        let e = g.constant(eps);
        let mut noise = g.mul(sigma, e)?;
        if temperature != 1.0 {
            noise = g.scale(noise, temperature);
        }
        Ok((g.add(mu, noise)?, e))
    }

    fn next_context(&self, g: &mut Graph<T>, l: usize, s: Option<Var>, z: Var) -> Result<Var> {
        match (l, s) {
            (1, _) | (_, None) => Ok(z),
            (_, Some(s)) => Ok(g.concat(s, z)?),
        }
    }

    fn check_finite(g: &Graph<T>, v: Var, stage: &'static str, layer: usize) -> Result<()> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(CoreError::Numeric { stage, layer })
        }
    }

    /// Posterior pass over a corrupted NCHW batch with one reparametrized
    /// sample per layer. Noise is drawn layer by layer from `rng`.
    pub fn posterior_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        y: Var,
        rng: &mut R,
    ) -> Result<Vec<DegradationVars>> {
        let feats = self.trunk(g, &self.layout.degradation, y)?;
        let [lo, hi] = self.config.log_sigma_clamp;
        let mut out: Vec<DegradationVars> = Vec::with_capacity(self.config.num_layers);
        let mut ctx: Option<Var> = None;
        for l in 1..=self.config.num_layers {
            let f = feats[l - 1];
            Self::check_finite(g, f, "degradation encoder", l)?;
            let (input, s) = if l == 1 {
                (f, None)
            } else {
                let s = self.prior_state(g, l, ctx.expect("context from previous layer"))?;
                (g.concat(f, s)?, Some(s))
            };
            let mq = self.conv(g, self.layout.post_mu[l - 1], input)?;
            let lq_raw = self.conv(g, self.layout.post_ls[l - 1], input)?;
            let lq = g.clamp(lq_raw, lo, hi);
            let (mp, lp) = match s {
                None => {
                    let zero = Tensor::zeros(g.shape(mq));
                    (g.constant(zero.clone()), g.constant(zero))
                }
                Some(s) => self.prior_heads(g, l, s)?,
            };
            for v in [mq, lq, mp, lp] {
                Self::check_finite(g, v, "degradation statistics", l)?;
            }
            let eps = Self::draw_eps(g.shape(mq), rng);
            let (z, eps) = Self::reparam(g, mq, lq, eps, 1.0)?;
            ctx = Some(self.next_context(g, l, s, z)?);
            out.push(DegradationVars {
                mu_q: Some(mq),
                log_sigma_q: Some(lq),
                mu_p: mp,
                log_sigma_p: lp,
                sample: z,
                eps,
            });
        }
        Ok(out)
    }

    /// Ancestral sample from the hierarchical prior for a batch whose input
    /// images would be `batch x C x h x w`.
    pub fn prior_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: usize,
        h: usize,
        w: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<DegradationVars>> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(CoreError::Argument(format!("temperature must be finite and >= 0, got {temperature}")));
        }
        self.config.check_spatial(h, w)?;
        let mut out: Vec<DegradationVars> = Vec::with_capacity(self.config.num_layers);
        let mut ctx: Option<Var> = None;
        for l in 1..=self.config.num_layers {
            let (lh, lw) = self.config.layer_spatial(l, h, w);
            let shape = [batch, self.config.latent_channels(l), lh, lw];
            let (mp, lp, s) = if l == 1 {
                (g.constant(Tensor::zeros(&shape)), g.constant(Tensor::zeros(&shape)), None)
            } else {
                let s = self.prior_state(g, l, ctx.expect("context from previous layer"))?;
                let (mp, lp) = self.prior_heads(g, l, s)?;
                (mp, lp, Some(s))
            };
            Self::check_finite(g, mp, "prior statistics", l)?;
            Self::check_finite(g, lp, "prior statistics", l)?;
            let eps = Self::draw_eps(&shape, rng);
            let (z, eps) = Self::reparam(g, mp, lp, eps, temperature)?;
            ctx = Some(self.next_context(g, l, s, z)?);
            out.push(DegradationVars { mu_q: None, log_sigma_q: None, mu_p: mp, log_sigma_p: lp, sample: z, eps });
        }
        Ok(out)
    }

    /// Decoder `d(z^N)` or `d(z^N, z_n^N)`.
    pub fn decode_graph(&self, g: &mut Graph<T>, z_top: Var, zn_top: Option<Var>) -> Result<Var> {
        let n = self.config.num_layers;
        let mut h = self.conv(g, self.layout.dec_in_content, z_top)?;
        if let Some(zn) = zn_top {
            if g.shape(zn)[2..] != g.shape(z_top)[2..] || g.shape(zn)[0] != g.shape(z_top)[0] {
                return Err(CoreError::Dimension(format!(
                    "layer-{n} shapes differ: content {:?}, degradation {:?}",
                    g.shape(z_top),
                    g.shape(zn)
                )));
            }
            let w = g.param(&self.params, self.layout.dec_in_noise);
            let zero_bias = g.constant(Tensor::zeros(&[self.config.hidden_channels(n)]));
            let hn = g.conv2d(zn, w, zero_bias)?;
            h = g.add(h, hn)?;
        }
        h = g.relu(h);
        h = self.block(g, &self.layout.dec_blocks[n - 1], h)?;
        for l in (1..n).rev() {
            let u = self.conv(g, self.layout.dec_up[l - 1], h)?;
            let s = g.pixel_shuffle(u)?;
            h = g.relu(s);
            h = self.block(g, &self.layout.dec_blocks[l - 1], h)?;
        }
        self.conv(g, self.layout.dec_out, h)
    }

    // ---- tensor-level operations ---------------------------------------------

    pub fn encode_content_batch(&self, x: &Tensor<T>) -> Result<LatentContent<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let zs = self.content_graph(&mut g, xv)?;
        Ok(LatentContent { layers: zs.into_iter().map(|v| g.value(v).clone()).collect() })
    }

    pub fn encode_degradation_batch<R: Rng + ?Sized>(
        &self,
        y: &Tensor<T>,
        rng: &mut R,
    ) -> Result<LatentDegradation<T>> {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let vars = self.posterior_graph(&mut g, yv, rng)?;
        Ok(DegradationVars::collect(&g, vars))
    }

    pub fn sample_prior_batch<R: Rng + ?Sized>(
        &self,
        batch: usize,
        h: usize,
        w: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<LatentDegradation<T>> {
        let mut g = Graph::new();
        let vars = self.prior_graph(&mut g, batch, h, w, temperature, rng)?;
        Ok(DegradationVars::collect(&g, vars))
    }

    fn check_layers(&self, n: usize, what: &str) -> Result<()> {
        if n != self.config.num_layers {
            return Err(CoreError::Dimension(format!("{what} has {n} layers, model has {}", self.config.num_layers)));
        }
        Ok(())
    }

    pub fn decode_clean_batch(&self, content: &LatentContent<T>) -> Result<Tensor<T>> {
        self.check_layers(content.layers.len(), "content code")?;
        let mut g = Graph::new();
        let z = g.constant(content.top().clone());
        let out = self.decode_graph(&mut g, z, None)?;
        Ok(g.value(out).clone())
    }

    pub fn decode_noisy_batch(
        &self,
        content: &LatentContent<T>,
        degradation: &LatentDegradation<T>,
    ) -> Result<Tensor<T>> {
        self.check_layers(content.layers.len(), "content code")?;
        self.check_layers(degradation.layers.len(), "degradation code")?;
        let mut g = Graph::new();
        let z = g.constant(content.top().clone());
        let zn = g.constant(degradation.top_sample().clone());
        let out = self.decode_graph(&mut g, z, Some(zn))?;
        Ok(g.value(out).clone())
    }

    // ---- image-level operations ----------------------------------------------

    /// Deterministic content code of one pre-processed image.
    pub fn encode_content(&self, image: &ImageTensor) -> Result<LatentContent<T>> {
        self.encode_content_batch(&image.to_tensor())
    }

    /// Posterior statistics and one reparametrized sample per layer.
    pub fn encode_degradation<R: Rng + ?Sized>(
        &self,
        image: &ImageTensor,
        rng: &mut R,
    ) -> Result<LatentDegradation<T>> {
        self.encode_degradation_batch(&image.to_tensor(), rng)
    }

    /// Ancestral prior sample for an input of `height x width`.
    pub fn sample_degradation_prior<R: Rng + ?Sized>(
        &self,
        height: usize,
        width: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<LatentDegradation<T>> {
        self.sample_prior_batch(1, height, width, temperature, rng)
    }

    /// `d(z^N)`, unclamped.
    pub fn decode_clean(&self, content: &LatentContent<T>) -> Result<ImageTensor> {
        ImageTensor::from_tensor(&self.decode_clean_batch(content)?, 0)
    }

    /// `d(z^N, z_n^N)`, unclamped.
    pub fn decode_noisy(&self, content: &LatentContent<T>, degradation: &LatentDegradation<T>) -> Result<ImageTensor> {
        ImageTensor::from_tensor(&self.decode_noisy_batch(content, degradation)?, 0)
    }

    // ---- introspection --------------------------------------------------------

    fn probe_shape(&self) -> [usize; 4] {
        let d = self.config.divisor();
        [1, self.config.input_channels, d, d]
    }

    /// Parameters read by `decode_clean`, found by tracing a decode.
    pub fn decode_clean_params(&self) -> BTreeSet<ParamId> {
        let mut g = Graph::new();
        let n = self.config.num_layers;
        let z = g.constant(Tensor::zeros(&[1, self.config.latent_channels(n), 1, 1]));
        self.decode_graph(&mut g, z, None).expect("probe decode");
        g.bound_params().into_iter().collect()
    }

    /// Parameters read by `decode_noisy`, found by tracing a decode.
    pub fn decode_noisy_params(&self) -> BTreeSet<ParamId> {
        let mut g = Graph::new();
        let n = self.config.num_layers;
        let shape = [1, self.config.latent_channels(n), 1, 1];
        let z = g.constant(Tensor::zeros(&shape));
        let zn = g.constant(Tensor::zeros(&shape));
        self.decode_graph(&mut g, z, Some(zn)).expect("probe decode");
        g.bound_params().into_iter().collect()
    }

    /// Parameters read by the content encoder.
    pub fn content_encoder_params(&self) -> BTreeSet<ParamId> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&self.probe_shape()));
        self.content_graph(&mut g, x).expect("probe encode");
        g.bound_params().into_iter().collect()
    }

    /// Parameters read by the degradation encoder and posterior heads.
    pub fn degradation_encoder_params(&self) -> BTreeSet<ParamId> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&self.probe_shape()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.posterior_graph(&mut g, x, &mut rng).expect("probe encode");
        g.bound_params().into_iter().collect()
    }

    /// Parameters read by the prior.
    pub fn prior_params(&self) -> BTreeSet<ParamId> {
        let mut g = Graph::new();
        let d = self.config.divisor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.prior_graph(&mut g, 1, d, d, 1.0, &mut rng).expect("probe prior");
        g.bound_params().into_iter().collect()
    }
}

/// Graph handles for one degradation layer.
#[derive(Clone, Debug)]
pub struct DegradationVars {
    pub mu_q: Option<Var>,
    pub log_sigma_q: Option<Var>,
    pub mu_p: Var,
    pub log_sigma_p: Var,
    pub sample: Var,
    /// Standard normal draw, before temperature scaling.
    pub eps: Var,
}

impl DegradationVars {
    fn collect<T: Scalar>(g: &Graph<T>, vars: Vec<DegradationVars>) -> LatentDegradation<T> {
        let layers = vars
            .into_iter()
            .map(|v| DegradationLayer {
                mu_q: v.mu_q.map(|m| g.value(m).clone()),
                log_sigma_q: v.log_sigma_q.map(|m| g.value(m).clone()),
                mu_p: g.value(v.mu_p).clone(),
                log_sigma_p: g.value(v.log_sigma_p).clone(),
                sample: g.value(v.sample).clone(),
                eps: g.value(v.eps).clone(),
            })
            .collect();
        LatentDegradation { layers }
    }
}
