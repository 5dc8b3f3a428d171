//! U-Net style encoder `f`, projection head `g` and the mirrored decoder.
//!
//! Stage `i < L` of the encoder is a conv block producing skip `i` followed
//! by 2x2 max pooling; stage `L` is the bottleneck block. The decoder walks
//! back up with 2x2 transposed convolutions, concatenating the matching skip
//! before each block, and ends with a 1x1 convolution to one logit channel.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, leaky_gain, split_channels,
    Conv2d, ConvTranspose2x2, InstanceNorm, LeakyRelu, Linear, MaxPool2, Tensor,
};
use super::{join, ModelError, NamedParams, Parameterized};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Unet,
    Resunet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// One width per stage; the last entry is the bottleneck width.
    pub stage_widths: Vec<usize>,
    pub downsamples: usize,
    pub backbone: Backbone,
    pub negative_slope: f32,
    pub norm: Norm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_widths: vec![16, 32, 64, 128],
            downsamples: 3,
            backbone: Backbone::Unet,
            negative_slope: 0.2,
            norm: Norm::Instance,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 {
            return Err(ModelError::InvalidConfig("in_channels must be positive".into()));
        }
        if self.stage_widths.len() != self.downsamples + 1 {
            return Err(ModelError::InvalidConfig(format!(
                "{} stage widths given for {} downsamples (need downsamples + 1)",
                self.stage_widths.len(),
                self.downsamples
            )));
        }
        if self.stage_widths.contains(&0) {
            return Err(ModelError::InvalidConfig("stage widths must be positive".into()));
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return Err(ModelError::InvalidConfig("negative_slope must be >= 0".into()));
        }
        Ok(())
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.stage_widths.last().expect("validated widths")
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.in_channels,
                got: c,
            });
        }
        let m = 1usize << self.downsamples;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(ModelError::IndivisibleInput {
                height: h,
                width: w,
                downsamples: self.downsamples,
            });
        }
        Ok(())
    }
}

/// conv3x3 -> norm -> leaky ReLU, twice. The residual variant adds a 1x1
/// projection of the input before the last activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv2d,
    norm1: Option<InstanceNorm>,
    act1: LeakyRelu,
    conv2: Conv2d,
    norm2: Option<InstanceNorm>,
    act2: LeakyRelu,
    residual: Option<Conv2d>,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let gain = leaky_gain(cfg.negative_slope);
        let with_norm = cfg.norm == Norm::Instance;
        // A bias in front of instance norm is cancelled by the mean subtraction.
        let bias = !with_norm;
        Self {
            conv1: Conv2d::new(cin, cout, 3, bias, gain, rng),
            norm1: with_norm.then(InstanceNorm::new),
            act1: LeakyRelu::new(cfg.negative_slope),
            conv2: Conv2d::new(cout, cout, 3, bias, gain, rng),
            norm2: with_norm.then(InstanceNorm::new),
            act2: LeakyRelu::new(cfg.negative_slope),
            residual: (cfg.backbone == Backbone::Resunet)
                .then(|| Conv2d::new(cin, cout, 1, true, 1.0, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = self.conv1.forward(x, train);
        if let Some(n) = &mut self.norm1 {
            h = n.forward(&h, train);
        }
        h = self.act1.forward(&h, train);
        h = self.conv2.forward(&h, train);
        if let Some(n) = &mut self.norm2 {
            h = n.forward(&h, train);
        }
        if let Some(r) = &mut self.residual {
            h += &r.forward(x, train);
        }
        self.act2.forward(&h, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.act2.backward(g);
        let skip = self.residual.as_mut().map(|r| r.backward(&g));
        let mut g = match &mut self.norm2 {
            Some(n) => n.backward(&g),
            None => g,
        };
        g = self.conv2.backward(&g);
        g = self.act1.backward(&g);
        if let Some(n) = &mut self.norm1 {
            g = n.backward(&g);
        }
        let mut dx = self.conv1.backward(&g);
        if let Some(s) = skip {
            dx += &s;
        }
        dx
    }
}

impl Parameterized for ConvBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        conv_params(&mut self.conv1, &join(prefix, "conv1"), out);
        conv_params(&mut self.conv2, &join(prefix, "conv2"), out);
        if let Some(r) = &mut self.residual {
            conv_params(r, &join(prefix, "residual"), out);
        }
    }
}

fn conv_params<'a>(c: &'a mut Conv2d, prefix: &str, out: &mut NamedParams<'a>) {
    out.push((join(prefix, "weight"), &mut c.weight));
    if let Some(b) = &mut c.bias {
        out.push((join(prefix, "bias"), b));
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    blocks: Vec<ConvBlock>,
    pools: Vec<MaxPool2>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(config.stage_widths.len());
        for &w in &config.stage_widths {
            blocks.push(ConvBlock::new(cin, w, &config, rng));
            cin = w;
        }
        let pools = (0..config.downsamples).map(|_| MaxPool2::default()).collect();
        Ok(Self {
            config,
            blocks,
            pools,
        })
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<EncoderOutput, ModelError> {
        self.config.check_input(x)?;
        let mut skips = Vec::with_capacity(self.pools.len());
        let mut h = x.clone();
        for (block, pool) in self.blocks.iter_mut().zip(self.pools.iter_mut()) {
            let s = block.forward(&h, train);
            h = pool.forward(&s, train);
            skips.push(s);
        }
        let bottleneck = self
            .blocks
            .last_mut()
            .expect("bottleneck block")
            .forward(&h, train);
        Ok(EncoderOutput { skips, bottleneck })
    }

    /// Backpropagates into the encoder weights. `skip_grads` may be empty
    /// (contrastive training) or hold one gradient per skip.
    pub fn backward(&mut self, skip_grads: &[Tensor], bottleneck_grad: &Tensor) {
        let l = self.pools.len();
        let mut g = self.blocks[l].backward(bottleneck_grad);
        for i in (0..l).rev() {
            g = self.pools[i].backward(&g);
            if let Some(sg) = skip_grads.get(i) {
                g += sg;
            }
            g = self.blocks[i].backward(&g);
        }
    }
}

impl Parameterized for Encoder {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// Global average pool followed by one fully connected layer, no
/// activation.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
    input_dims: Option<(usize, usize, usize, usize)>,
}

impl ProjectionHead {
    pub fn new(channels: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(channels, dim, rng),
            input_dims: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.fout
    }

    pub fn forward(&mut self, bottleneck: &Tensor, train: bool) -> Array2<f32> {
        let pooled = global_avg_pool(bottleneck);
        if train {
            self.input_dims = Some(bottleneck.dim());
        }
        self.linear.forward(&pooled, train)
    }

    pub fn backward(&mut self, grad: &Array2<f32>) -> Tensor {
        let dims = self.input_dims.take().expect("head backward without forward");
        let g = self.linear.backward(grad);
        global_avg_pool_backward(&g, dims)
    }
}

impl Parameterized for ProjectionHead {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        out.push((join(prefix, "linear.weight"), &mut self.linear.weight));
        out.push((join(prefix, "linear.bias"), &mut self.linear.bias));
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    ups: Vec<ConvTranspose2x2>,
    blocks: Vec<ConvBlock>,
    head: Conv2d,
    widths: Vec<usize>,
}

impl Decoder {
    pub fn new(config: &EncoderConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let w = &config.stage_widths;
        let l = config.downsamples;
        let ups = (0..l)
            .map(|i| ConvTranspose2x2::new(w[i + 1], w[i], 1.0, rng))
            .collect();
        let blocks = (0..l)
            .map(|i| ConvBlock::new(2 * w[i], w[i], config, rng))
            .collect();
        Ok(Self {
            ups,
            blocks,
            head: Conv2d::new(w[0], 1, 1, true, 1.0, rng),
            widths: w.clone(),
        })
    }

    pub fn forward(
        &mut self,
        skips: &[Tensor],
        bottleneck: &Tensor,
        train: bool,
    ) -> Result<Tensor, ModelError> {
        let l = self.ups.len();
        if skips.len() != l {
            return Err(ModelError::SkipCountMismatch {
                expected: l,
                got: skips.len(),
            });
        }
        let mut h = bottleneck.clone();
        for i in (0..l).rev() {
            let up = self.ups[i].forward(&h, train);
            let (n, _, uh, uw) = up.dim();
            let expected = (n, self.widths[i], uh, uw);
            if skips[i].dim() != expected {
                return Err(ModelError::SkipShapeMismatch {
                    stage: i,
                    expected,
                    got: skips[i].dim(),
                });
            }
            let cat = concat_channels(&skips[i], &up);
            h = self.blocks[i].forward(&cat, train);
        }
        Ok(self.head.forward(&h, train))
    }

    /// Returns the gradients for each skip and for the bottleneck.
    pub fn backward(&mut self, grad_logits: &Tensor) -> (Vec<Tensor>, Tensor) {
        let l = self.ups.len();
        let mut g = self.head.backward(grad_logits);
        let mut skip_grads = vec![Tensor::zeros((0, 0, 0, 0)); l];
        for i in 0..l {
            let gc = self.blocks[i].backward(&g);
            let (gs, gu) = split_channels(&gc, self.widths[i]);
            skip_grads[i] = gs;
            g = self.ups[i].backward(&gu);
        }
        (skip_grads, g)
    }
}

impl Parameterized for Decoder {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{i}"));
            out.push((join(&p, "weight"), &mut u.weight));
            out.push((join(&p, "bias"), &mut u.bias));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
        conv_params(&mut self.head, &join(prefix, "head"), out);
    }
}

/// Encoder plus projection head, trained contrastively.
#[derive(Debug, Clone)]
pub struct ContrastiveModel {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl ContrastiveModel {
    pub fn new(config: EncoderConfig, proj_dim: usize, rng: &mut Rng) -> Result<Self, ModelError> {
        let encoder = Encoder::new(config, rng)?;
        let head = ProjectionHead::new(encoder.config.bottleneck_width(), proj_dim, rng);
        Ok(Self { encoder, head })
    }

    pub fn embed(&mut self, x: &Tensor, train: bool) -> Result<Array2<f32>, ModelError> {
        let out = self.encoder.forward(x, train)?;
        Ok(self.head.forward(&out.bottleneck, train))
    }

    pub fn backward(&mut self, grad_embeddings: &Array2<f32>) {
        let g = self.head.backward(grad_embeddings);
        self.encoder.backward(&[], &g);
    }
}

impl Parameterized for ContrastiveModel {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

/// Encoder plus decoder producing per-pixel logits.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl SegmentationModel {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let encoder = Encoder::new(config, rng)?;
        Self::from_encoder(encoder, rng)
    }

    /// Attaches a freshly initialized decoder to an existing encoder.
    pub fn from_encoder(encoder: Encoder, rng: &mut Rng) -> Result<Self, ModelError> {
        let decoder = Decoder::new(&encoder.config, rng)?;
        Ok(Self { encoder, decoder })
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, ModelError> {
        let enc = self.encoder.forward(x, train)?;
        self.decoder.forward(&enc.skips, &enc.bottleneck, train)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) {
        let (skip_grads, g) = self.decoder.backward(grad_logits);
        self.encoder.backward(&skip_grads, &g);
    }
}

impl Parameterized for SegmentationModel {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        self.decoder.collect_params(&join(prefix, "decoder"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            stage_widths: vec![4, 8, 8],
            downsamples: 2,
            ..EncoderConfig::default()
        }
    }

    fn input(n: usize, hw: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        Tensor::from_shape_fn((n, 1, hw, hw), |_| r.random_range(0.0..1.0))
    }

    #[test]
    fn bottleneck_size_256_with_four_downsamples() {
        let cfg = EncoderConfig {
            stage_widths: vec![2, 2, 2, 2, 2],
            downsamples: 4,
            ..EncoderConfig::default()
        };
        let mut enc = Encoder::new(cfg, &mut rng::seeded(0)).unwrap();
        let out = enc.forward(&Tensor::zeros((2, 1, 256, 256)), false).unwrap();
        assert_eq!(out.bottleneck.dim(), (2, 2, 16, 16));
        assert_eq!(out.skips.len(), 4);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = EncoderConfig {
            stage_widths: vec![2, 2, 2, 2, 2],
            downsamples: 4,
            ..EncoderConfig::default()
        };
        let mut enc = Encoder::new(cfg, &mut rng::seeded(0)).unwrap();
        let err = enc.forward(&Tensor::zeros((1, 1, 250, 250)), false).unwrap_err();
        assert!(matches!(err, ModelError::IndivisibleInput { .. }));
    }

    #[test]
    fn zero_weights_give_zero_bottleneck() {
        let mut enc = Encoder::new(small(), &mut rng::seeded(1)).unwrap();
        for (_, p) in enc.params() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = enc.forward(&input(2, 16, 2), false).unwrap();
        assert!(out.bottleneck.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head_returns_gap_vector() {
        let mut head = ProjectionHead::new(3, 3, &mut rng::seeded(0));
        head.linear.weight.value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| (c * 10 + y * 2 + x) as f32);
        let z = head.forward(&x, false);
        assert_eq!(z.row(0).to_vec(), vec![1.5, 11.5, 21.5]);
    }

    #[test]
    fn head_is_spatial_permutation_invariant() {
        let mut head = ProjectionHead::new(2, 4, &mut rng::seeded(3));
        let x = Tensor::from_shape_fn((1, 2, 2, 3), |(_, c, y, x)| (c + 1) as f32 * (y * 3 + x) as f32);
        let mut flipped = x.clone();
        flipped.invert_axis(ndarray::Axis(2));
        flipped.invert_axis(ndarray::Axis(3));
        let a = head.forward(&x, false);
        let b = head.forward(&flipped.as_standard_layout().to_owned(), false);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn segmentation_output_matches_input_and_is_deterministic() {
        let mut m = SegmentationModel::new(small(), &mut rng::seeded(4)).unwrap();
        let x = input(2, 16, 5);
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(a.dim(), (2, 1, 16, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn missing_skip_is_an_error() {
        let mut m = SegmentationModel::new(small(), &mut rng::seeded(4)).unwrap();
        let enc = m.encoder.forward(&input(1, 16, 6), false).unwrap();
        let err = m
            .decoder
            .forward(&enc.skips[1..], &enc.bottleneck, false)
            .unwrap_err();
        assert_eq!(err, ModelError::SkipCountMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn forward_is_finite_on_constant_inputs() {
        for backbone in [Backbone::Unet, Backbone::Resunet] {
            let cfg = EncoderConfig {
                backbone,
                ..small()
            };
            let mut m = SegmentationModel::new(cfg, &mut rng::seeded(7)).unwrap();
            for v in [0.0f32, 1.0] {
                let out = m.forward(&Tensor::from_elem((1, 1, 16, 16), v), false).unwrap();
                assert!(out.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn decoder_size_independent_of_pretraining() {
        let mut a = Decoder::new(&small(), &mut rng::seeded(1)).unwrap();
        let mut pre = ContrastiveModel::new(small(), 16, &mut rng::seeded(2)).unwrap();
        let enc = pre.encoder.clone();
        let mut seg = SegmentationModel::from_encoder(enc, &mut rng::seeded(3)).unwrap();
        assert_eq!(a.num_params(), seg.decoder.num_params());
        let _ = pre.num_params();
    }

    /// Whole-model check: analytic gradient of sum(logits * probe) against
    /// central differences on a few weights.
    #[test]
    fn segmentation_weight_gradients() {
        for backbone in [Backbone::Unet, Backbone::Resunet] {
            let cfg = EncoderConfig {
                backbone,
                ..small()
            };
            let mut m = SegmentationModel::new(cfg, &mut rng::seeded(8)).unwrap();
            let x = input(2, 8, 9);
            let out = m.forward(&x, true).unwrap();
            let probe = out.mapv(|v| (v * 3.0).sin());
            m.zero_grad();
            m.backward(&probe);
            let snapshot: Vec<(String, Vec<f32>)> = m
                .params()
                .into_iter()
                .map(|(n, p)| (n, p.grad.clone()))
                .collect();
            for (pi, (name, grad)) in snapshot.iter().enumerate().step_by(3) {
                let idx = grad.len() / 2;
                let eps = 1e-2f32;
                let loss = |m: &mut SegmentationModel, delta: f32| {
                    m.params()[pi].1.value[idx] += delta;
                    let l = (m.forward(&x, false).unwrap() * &probe).sum();
                    m.params()[pi].1.value[idx] -= delta;
                    l
                };
                let fd = (loss(&mut m, eps) - loss(&mut m, -eps)) / (2.0 * eps);
                let an = grad[idx];
                assert!(
                    (fd - an).abs() <= 5e-2 * (1.0 + fd.abs()),
                    "{name}[{idx}]: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        use rand::Rng as _;
        let mut model = SegmentationModel::new(small(), &mut rng::seeded(4)).unwrap();
        let x = input(2, 16, 5);
        let mut r = rng::seeded(6);
        let weights = Tensor::from_shape_fn((2, 1, 16, 16), |_| r.random_range(-1.0f32..1.0));
        let loss = |m: &mut SegmentationModel| -> f64 {
            let y = m.forward(&x, true).unwrap();
            y.iter().zip(weights.iter()).map(|(a, b)| f64::from(a * b)).sum()
        };
        model.zero_grad();
        loss(&mut model);
        model.backward(&weights);
        let n_params = model.params().len();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let h = 3e-3f32;
        for pi in 0..n_params {
            for k in [0usize, 3] {
                let (grad, len) = {
                    let ps = model.params();
                    (ps[pi].1.grad.get(k).copied(), ps[pi].1.len())
                };
                let Some(g) = grad else { continue };
                if k >= len {
                    continue;
                }
                let shift = |m: &mut SegmentationModel, d: f32| m.params()[pi].1.value[k] += d;
                shift(&mut model, h);
                let up = loss(&mut model);
                shift(&mut model, -2.0 * h);
                let down = loss(&mut model);
                shift(&mut model, h);
                analytic.push(f64::from(g));
                numeric.push((up - down) / (2.0 * f64::from(h)));
            }
        }
        let dot: f64 = analytic.iter().zip(&numeric).map(|(a, b)| a * b).sum();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = dot / (na * nn);
        assert!(cos > 0.999, "cosine {cos} over {} entries", analytic.len());
        assert!((na / nn - 1.0).abs() < 0.02, "norms {na} {nn}");
    }
}
