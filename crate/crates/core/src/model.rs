//! Residual CNN encoder, transformer bridge over bottleneck tokens, skip-connected
//! decoder and a softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::labels::NUM_CLASSES;
use crate::nn::{
    join, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, softmax_channels,
    softmax_channels_backward, Conv3d, ConvTranspose3d, GroupNorm, GroupNormCache, LayerNorm, LayerNormCache,
    Linear, MaxPoolCache, Module, Param, TransformerLayer, TransformerLayerCache,
};
use crate::patch::{self, PatchError, PatchModel, PATCH_SIZE};
use crate::tensor::{FeatureMap, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("skip {stage}: expected {expected:?}, got {got:?}")]
    SkipShapeMismatch { stage: usize, expected: (usize, [usize; 3]), got: (usize, [usize; 3]) },
    #[error("expected input of side {expected}, got {got:?}")]
    InputShape { expected: usize, got: [usize; 3] },
    #[error("expected {expected} tokens of width {width}, got {got_rows}x{got_cols}")]
    TokenShape { expected: usize, width: usize, got_rows: usize, got_cols: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How decoder stages merge the upsampled features with the encoder skip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipFusion {
    #[default]
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub encoder_stages: usize,
    pub base_width: usize,
    pub width_multiplier: usize,
    pub norm_groups: usize,
    pub token_embed_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub mlp_dim: usize,
    /// Side of the final classification convolution, 1 or 3.
    pub head_kernel: usize,
    pub skip_fusion: SkipFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            patch_size: PATCH_SIZE,
            encoder_stages: 4,
            base_width: 16,
            width_multiplier: 2,
            norm_groups: 8,
            token_embed_dim: 512,
            transformer_layers: 8,
            transformer_heads: 16,
            mlp_dim: 2048,
            head_kernel: 1,
            skip_fusion: SkipFusion::Concat,
        }
    }
}

impl ModelConfig {
    /// Small preset used for CPU overfitting runs.
    pub fn reduced() -> Self {
        Self {
            base_width: 4,
            norm_groups: 2,
            token_embed_dim: 64,
            transformer_layers: 2,
            transformer_heads: 4,
            mlp_dim: 256,
            ..Self::default()
        }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width * self.width_multiplier.pow(stage as u32)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width(self.encoder_stages - 1)
    }

    pub fn bottleneck_side(&self) -> usize {
        self.patch_size >> self.encoder_stages
    }

    pub fn bottleneck_positions(&self) -> usize {
        self.bottleneck_side().pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 || self.num_classes < 2 {
            return fail(format!("in_channels {} / num_classes {}", self.in_channels, self.num_classes));
        }
        if self.encoder_stages == 0 || self.encoder_stages > 8 {
            return fail(format!("encoder_stages {} outside 1..=8", self.encoder_stages));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << self.encoder_stages) {
            return fail(format!(
                "patch side {} not divisible by 2^{}",
                self.patch_size, self.encoder_stages
            ));
        }
        if self.width_multiplier == 0 || self.norm_groups == 0 || !self.base_width.is_multiple_of(self.norm_groups) {
            return fail(format!(
                "base_width {} not divisible by norm_groups {}",
                self.base_width, self.norm_groups
            ));
        }
        if self.transformer_heads == 0 || !self.token_embed_dim.is_multiple_of(self.transformer_heads) {
            return fail(format!(
                "token_embed_dim {} not divisible by transformer_heads {}",
                self.token_embed_dim, self.transformer_heads
            ));
        }
        if self.mlp_dim == 0 {
            return fail("mlp_dim must be positive".into());
        }
        if self.head_kernel != 1 && self.head_kernel != 3 {
            return fail(format!("head_kernel {} (expected 1 or 3)", self.head_kernel));
        }
        Ok(())
    }
}

/// `bottleneck_positions × token_embed_dim`, rows in lexicographic bottleneck order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(Matrix);

impl TokenSequence {
    pub fn new(m: Matrix, cfg: &ModelConfig) -> Result<Self> {
        if m.rows != cfg.bottleneck_positions() || m.cols != cfg.token_embed_dim {
            return Err(ModelError::TokenShape {
                expected: cfg.bottleneck_positions(),
                width: cfg.token_embed_dim,
                got_rows: m.rows,
                got_cols: m.cols,
            });
        }
        if !m.is_finite() {
            return Err(ModelError::NonFinite("tokens"));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }
}

/// conv3 → GN → ReLU → conv3 → GN, plus identity or 1³-projected skip, then ReLU.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub norm1: GroupNorm,
    pub conv2: Conv3d,
    pub norm2: GroupNorm,
    pub proj: Option<Conv3d>,
}

pub struct ResidualCache {
    x: FeatureMap,
    r1: FeatureMap,
    n1: GroupNormCache,
    n2: GroupNormCache,
    y: FeatureMap,
}

impl ResidualBlock {
    pub fn new(cin: usize, width: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv3d::new(cin, width, 3, rng),
            norm1: GroupNorm::new(groups, width),
            conv2: Conv3d::new(width, width, 3, rng),
            norm2: GroupNorm::new(groups, width),
            proj: (cin != width).then(|| Conv3d::new(cin, width, 1, rng)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.cin
    }

    pub fn width(&self) -> usize {
        self.conv1.cout
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(ModelError::ChannelMismatch { expected: self.in_channels(), got: x.channels() });
        }
        Ok(())
    }

    fn skip(&self, x: &FeatureMap) -> FeatureMap {
        match &self.proj {
            Some(p) => p.forward(x),
            None => x.clone(),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        let mut h = self.norm1.forward(&self.conv1.forward(x));
        relu_inplace(h.as_mut_slice());
        let mut y = self.norm2.forward(&self.conv2.forward(&h));
        y.add_assign(&self.skip(x));
        relu_inplace(y.as_mut_slice());
        Ok(y)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, ResidualCache)> {
        self.check(x)?;
        let (mut r1, n1) = self.norm1.forward_train(&self.conv1.forward(x));
        relu_inplace(r1.as_mut_slice());
        let (mut y, n2) = self.norm2.forward_train(&self.conv2.forward(&r1));
        y.add_assign(&self.skip(x));
        relu_inplace(y.as_mut_slice());
        Ok((y.clone(), ResidualCache { x: x.clone(), r1, n1, n2, y }))
    }

    pub fn backward(&mut self, cache: &ResidualCache, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let mut g = dy.clone();
        relu_backward_inplace(cache.y.as_slice(), g.as_mut_slice());
        let da2 = self.norm2.backward(&cache.n2, &g);
        let mut dr1 = self.conv2.backward(&cache.r1, &da2, true).expect("input grad requested");
        relu_backward_inplace(cache.r1.as_slice(), dr1.as_mut_slice());
        let da1 = self.norm1.backward(&cache.n1, &dr1);
        let dx = self.conv1.backward(&cache.x, &da1, need_input_grad);
        let dskip = match &mut self.proj {
            Some(p) => p.backward(&cache.x, &g, need_input_grad),
            None => Some(g),
        };
        dx.map(|mut d| {
            if let Some(s) = dskip {
                d.add_assign(&s);
            }
            d
        })
    }
}

impl Module for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        if let Some(p) = &self.proj {
            p.visit(&join(prefix, "proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        if let Some(p) = &mut self.proj {
            p.visit_mut(&join(prefix, "proj"), f);
        }
    }
}

/// Everything the backward pass needs from one training forward.
pub struct Tape {
    encoder: Vec<(ResidualCache, MaxPoolCache)>,
    bottleneck: Matrix,
    layers: Vec<TransformerLayerCache>,
    final_norm: LayerNormCache,
    transformed: Matrix,
    decoder: Vec<(FeatureMap, ResidualCache)>,
    decoded: FeatureMap,
    pub probs: FeatureMap,
}

// Independent init streams so resizing one part leaves the others' weights unchanged.
const STREAM_ENCODER: u64 = 1;
const STREAM_TOKENIZER: u64 = 2;
const STREAM_TRANSFORMER: u64 = 3;
const STREAM_DECODER: u64 = 4;
const STREAM_HEAD: u64 = 5;

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    pub encoder: Vec<ResidualBlock>,
    pub tokenizer: Linear,
    /// Learned per-position embedding, zero at init.
    pub pos_embed: Param,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub detokenizer: Linear,
    pub upsample: Vec<ConvTranspose3d>,
    pub decoder: Vec<ResidualBlock>,
    pub head: Conv3d,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut rng = stream(STREAM_ENCODER);
        let encoder = (0..c.encoder_stages)
            .map(|i| {
                let cin = if i == 0 { c.in_channels } else { c.width(i - 1) };
                ResidualBlock::new(cin, c.width(i), c.norm_groups, &mut rng)
            })
            .collect();
        let mut rng = stream(STREAM_TOKENIZER);
        let tokenizer = Linear::new(c.bottleneck_channels(), c.token_embed_dim, &mut rng);
        let detokenizer = Linear::new(c.token_embed_dim, c.bottleneck_channels(), &mut rng);
        let mut rng = stream(STREAM_TRANSFORMER);
        let layers = (0..c.transformer_layers)
            .map(|_| TransformerLayer::new(c.token_embed_dim, c.transformer_heads, c.mlp_dim, &mut rng))
            .collect();
        let mut rng = stream(STREAM_DECODER);
        let mut upsample = Vec::new();
        let mut decoder = Vec::new();
        for i in (0..c.encoder_stages).rev() {
            let cur = if i + 1 == c.encoder_stages { c.bottleneck_channels() } else { c.width(i + 1) };
            upsample.push(ConvTranspose3d::new(cur, c.width(i), &mut rng));
            let fused = match c.skip_fusion {
                SkipFusion::Concat => 2 * c.width(i),
                SkipFusion::Sum => c.width(i),
            };
            decoder.push(ResidualBlock::new(fused, c.width(i), c.norm_groups, &mut rng));
        }
        let mut rng = stream(STREAM_HEAD);
        let head = Conv3d::new(c.base_width, c.num_classes, c.head_kernel, &mut rng);
        Ok(Self {
            pos_embed: Param::zeros(&[c.bottleneck_positions(), c.token_embed_dim]),
            final_norm: LayerNorm::new(c.token_embed_dim),
            config,
            encoder,
            tokenizer,
            layers,
            detokenizer,
            upsample,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.num_params()
    }

    fn patch_map(&self, patch: &Grid<f32>) -> Result<FeatureMap> {
        let p = self.config.patch_size;
        if patch.dims() != [p; 3] {
            return Err(ModelError::InputShape { expected: p, got: patch.dims() });
        }
        if self.config.in_channels != 1 {
            return Err(ModelError::ChannelMismatch { expected: self.config.in_channels, got: 1 });
        }
        if patch.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("patch"));
        }
        Ok(FeatureMap::from_vec(1, patch.dims(), patch.as_slice().to_vec()).expect("one channel"))
    }

    /// Returns the bottleneck and the pre-pool skip of every stage (finest first).
    pub fn encode(&self, x: &FeatureMap) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let s = block.forward(&cur)?;
            cur = max_pool2(&s).0;
            skips.push(s);
        }
        Ok((cur, skips))
    }

    /// Flattens the bottleneck, projects each position and adds its positional embedding.
    pub fn tokenize(&self, bottleneck: &FeatureMap) -> Result<TokenSequence> {
        let m = self.project_tokens(bottleneck)?;
        TokenSequence::new(m, &self.config)
    }

    fn project_tokens(&self, bottleneck: &FeatureMap) -> Result<Matrix> {
        let c = &self.config;
        let (ch, side) = (c.bottleneck_channels(), c.bottleneck_side());
        if bottleneck.channels() != ch || bottleneck.dims() != [side; 3] {
            return Err(ModelError::SkipShapeMismatch {
                stage: c.encoder_stages,
                expected: (ch, [side; 3]),
                got: (bottleneck.channels(), bottleneck.dims()),
            });
        }
        let mut m = self.tokenizer.forward(&to_rows(bottleneck));
        for (v, p) in m.data.iter_mut().zip(&self.pos_embed.value) {
            *v += p;
        }
        Ok(m)
    }

    pub fn transform(&self, tokens: &TokenSequence) -> TokenSequence {
        let mut m = tokens.0.clone();
        for layer in &self.layers {
            m = layer.forward(&m);
        }
        TokenSequence(self.final_norm.forward(&m))
    }

    /// Per-layer attention weights (`heads × tokens × tokens` each) for `tokens`.
    pub fn attention_maps(&self, tokens: &TokenSequence) -> Vec<Vec<f32>> {
        let mut m = tokens.0.clone();
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            maps.push(layer.attn.attention_weights(&layer.norm1.forward(&m)));
            m = layer.forward(&m);
        }
        maps
    }

    fn check_skips(&self, skips: &[FeatureMap]) -> Result<()> {
        let c = &self.config;
        if skips.len() != c.encoder_stages {
            return Err(ModelError::SkipShapeMismatch {
                stage: skips.len(),
                expected: (c.encoder_stages, [0; 3]),
                got: (skips.len(), [0; 3]),
            });
        }
        for (i, s) in skips.iter().enumerate() {
            let side = c.patch_size >> i;
            if s.channels() != c.width(i) || s.dims() != [side; 3] {
                return Err(ModelError::SkipShapeMismatch {
                    stage: i,
                    expected: (c.width(i), [side; 3]),
                    got: (s.channels(), s.dims()),
                });
            }
        }
        Ok(())
    }

    fn fuse(&self, up: &FeatureMap, skip: &FeatureMap) -> FeatureMap {
        match self.config.skip_fusion {
            SkipFusion::Concat => FeatureMap::concat(up, skip),
            SkipFusion::Sum => {
                let mut f = up.clone();
                f.add_assign(skip);
                f
            }
        }
    }

    /// Back to a `base_width × patch³` feature grid through the skip-connected decoder.
    pub fn decode(&self, tokens: &TokenSequence, skips: &[FeatureMap]) -> Result<FeatureMap> {
        self.check_skips(skips)?;
        let side = self.config.bottleneck_side();
        let mut cur = from_rows(&self.detokenizer.forward(&tokens.0), [side; 3]);
        for (k, (up, block)) in self.upsample.iter().zip(&self.decoder).enumerate() {
            let stage = self.config.encoder_stages - 1 - k;
            let u = up.forward(&cur);
            cur = block.forward(&self.fuse(&u, &skips[stage]))?;
        }
        Ok(cur)
    }

    fn head_probs(&self, decoded: &FeatureMap) -> FeatureMap {
        softmax_channels(&self.head.forward(decoded))
    }

    /// `num_classes × patch³` per-voxel class probabilities.
    pub fn forward(&self, patch: &Grid<f32>) -> Result<FeatureMap> {
        let x = self.patch_map(patch)?;
        let (bottleneck, skips) = self.encode(&x)?;
        let tokens = self.transform(&self.tokenize(&bottleneck)?);
        let decoded = self.decode(&tokens, &skips)?;
        let probs = self.head_probs(&decoded);
        if !probs.is_finite() {
            return Err(ModelError::NonFinite("probabilities"));
        }
        Ok(probs)
    }

    pub fn forward_train(&self, patch: &Grid<f32>) -> Result<Tape> {
        let mut cur = self.patch_map(patch)?;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (s, rc) = block.forward_train(&cur)?;
            let (pooled, pc) = max_pool2(&s);
            cur = pooled;
            skips.push(s);
            encoder.push((rc, pc));
        }
        let bottleneck = to_rows(&cur);
        let mut m = self.project_tokens(&cur)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, lc) = layer.forward_train(&m);
            m = y;
            layers.push(lc);
        }
        let (transformed, final_norm) = self.final_norm.forward_train(&m);
        let side = self.config.bottleneck_side();
        let mut cur = from_rows(&self.detokenizer.forward(&transformed), [side; 3]);
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for (k, (up, block)) in self.upsample.iter().zip(&self.decoder).enumerate() {
            let stage = self.config.encoder_stages - 1 - k;
            let u = up.forward(&cur);
            let (y, rc) = block.forward_train(&self.fuse(&u, &skips[stage]))?;
            decoder.push((cur, rc));
            cur = y;
        }
        let probs = self.head_probs(&cur);
        Ok(Tape { encoder, bottleneck, layers, final_norm, transformed, decoder, decoded: cur, probs })
    }

    /// Accumulates parameter gradients for `d loss / d probs`.
    pub fn backward(&mut self, tape: &Tape, dprobs: &FeatureMap) {
        let dlogits = softmax_channels_backward(&tape.probs, dprobs);
        let mut dcur = self.head.backward(&tape.decoded, &dlogits, true).expect("input grad requested");
        let stages = self.config.encoder_stages;
        let mut dskips: Vec<Option<FeatureMap>> = vec![None; stages];
        for k in (0..stages).rev() {
            let (up_in, rc) = &tape.decoder[k];
            let dfused = self.decoder[k].backward(rc, &dcur, true).expect("input grad requested");
            let stage = stages - 1 - k;
            let (du, dskip) = match self.config.skip_fusion {
                SkipFusion::Concat => dfused.split(self.config.width(stage)),
                SkipFusion::Sum => (dfused.clone(), dfused),
            };
            dskips[stage] = Some(dskip);
            dcur = self.upsample[k].backward(up_in, &du);
        }
        let dtransformed = self.detokenizer.backward(&tape.transformed, &to_rows(&dcur));
        let mut dm = self.final_norm.backward(&tape.final_norm, &dtransformed);
        for (layer, lc) in self.layers.iter_mut().zip(&tape.layers).rev() {
            dm = layer.backward(lc, &dm);
        }
        for (g, d) in self.pos_embed.grad.iter_mut().zip(&dm.data) {
            *g += d;
        }
        let side = self.config.bottleneck_side();
        let mut dcur = from_rows(&self.tokenizer.backward(&tape.bottleneck, &dm), [side; 3]);
        for (i, (block, (rc, pc))) in self.encoder.iter_mut().zip(&tape.encoder).enumerate().rev() {
            let mut ds = max_pool2_backward(pc, &dcur);
            ds.add_assign(dskips[i].as_ref().expect("every stage has a skip"));
            match block.backward(rc, &ds, i > 0) {
                Some(dx) => dcur = dx,
                None => break,
            }
        }
    }
}

impl Module for Network {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.tokenizer.visit(&join(prefix, "tokenizer.proj"), f);
        f(&join(prefix, "tokenizer.pos_embed"), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("transformer.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "transformer.norm"), f);
        self.detokenizer.visit(&join(prefix, "decoder.proj"), f);
        for (i, (u, b)) in self.upsample.iter().zip(&self.decoder).enumerate() {
            u.visit(&join(prefix, &format!("decoder.{i}.up")), f);
            b.visit(&join(prefix, &format!("decoder.{i}.block")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.tokenizer.visit_mut(&join(prefix, "tokenizer.proj"), f);
        f(&join(prefix, "tokenizer.pos_embed"), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("transformer.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "transformer.norm"), f);
        self.detokenizer.visit_mut(&join(prefix, "decoder.proj"), f);
        for (i, (u, b)) in self.upsample.iter_mut().zip(&mut self.decoder).enumerate() {
            u.visit_mut(&join(prefix, &format!("decoder.{i}.up")), f);
            b.visit_mut(&join(prefix, &format!("decoder.{i}.block")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl PatchModel for Network {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, patch: &Grid<f32>, _origin: [usize; 3]) -> patch::Result<FeatureMap> {
        self.forward(patch).map_err(|e| PatchError::Model(e.to_string()))
    }
}

/// Channel-major map → `positions × channels` matrix.
fn to_rows(x: &FeatureMap) -> Matrix {
    let (c, n) = (x.channels(), x.spatial_len());
    let mut m = Matrix::zeros(n, c);
    for ch in 0..c {
        for (t, &v) in x.channel(ch).iter().enumerate() {
            m.data[t * c + ch] = v;
        }
    }
    m
}

fn from_rows(m: &Matrix, dims: [usize; 3]) -> FeatureMap {
    let mut x = FeatureMap::zeros(m.cols, dims);
    for ch in 0..m.cols {
        for (t, v) in x.channel_mut(ch).iter_mut().enumerate() {
            *v = m.data[t * m.cols + ch];
        }
    }
    x
}
