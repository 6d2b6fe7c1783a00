//! Dense-block UNet generator and conditional discriminator.
//!
//! Everything is generic over [`Ops`], so the same construction code runs on
//! a real [`Graph`](crate::autodiff::Graph) or on a shape-only tracer.
//!
//! Dense block with `L` layers on an input of `R0` channels: layer 0 maps the
//! input to `x0` (`R0` channels), layer `j` maps `[x0, .., x_{j-1}]` to `x_j`
//! (`R` channels), and the block emits `[x0, .., x_{L-1}]` with
//! `R0 + R * (L - 1)` channels.

use crate::autodiff::{
    AutodiffError, BatchNormParams, Ops, Padding, ParamId, ParamKind, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            eps: 1e-3,
        }
    }
}

/// Seeded parameter factory with fan-in scaled normal init.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    bn: BnConfig,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, bn: BnConfig) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn,
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut self.rng));
        self.store.add(name, ParamKind::Weight, t)
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> ParamId {
        self.weight(name, &[k, k, cin, cout], k * k * cin)
    }

    pub fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.store.add(name, ParamKind::Bias, Tensor::zeros(&[n]))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: self.store.add(
                format!("{name}.gamma"),
                ParamKind::BnScale,
                Tensor::full(&[c], 1.0),
            ),
            beta: self.store.add(
                format!("{name}.beta"),
                ParamKind::BnShift,
                Tensor::zeros(&[c]),
            ),
            running_mean: self.store.add(
                format!("{name}.mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&[c]),
            ),
            running_var: self.store.add(
                format!("{name}.var"),
                ParamKind::RunningVar,
                Tensor::full(&[c], 1.0),
            ),
            momentum: self.bn.momentum,
            eps: self.bn.eps,
        }
    }
}

/// BN-ReLU-Conv1x1(bottleneck)-BN-ReLU-Conv3x3(out) with optional dropout.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    bn1: BatchNormParams,
    w1: ParamId,
    bn2: BatchNormParams,
    w2: ParamId,
    dropout: f64,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        bottleneck: usize,
        cout: usize,
        dropout: f64,
    ) -> Self {
        Self {
            bn1: b.batch_norm(&format!("{name}.bn1"), cin),
            w1: b.conv(&format!("{name}.conv1"), 1, cin, bottleneck),
            bn2: b.batch_norm(&format!("{name}.bn2"), bottleneck),
            w2: b.conv(&format!("{name}.conv3"), 3, bottleneck, cout),
            dropout,
            out_channels: cout,
        }
    }

    pub fn forward<O: Ops>(&self, g: &mut O, x: Var) -> Result<Var> {
        let h = g.batch_norm(x, &self.bn1)?;
        let h = g.relu(h)?;
        let w1 = g.param(self.w1);
        let h = g.conv2d(h, w1, 1, Padding::Same)?;
        let h = g.batch_norm(h, &self.bn2)?;
        let h = g.relu(h)?;
        let w2 = g.param(self.w2);
        let h = g.conv2d(h, w2, 1, Padding::Same)?;
        if self.dropout > 0.0 {
            Ok(g.dropout(h, self.dropout)?)
        } else {
            Ok(h)
        }
    }
}

/// Generator ConvBlock emitting `r` channels through a `4r` bottleneck.
pub fn build_conv_block_g(b: &mut Builder, name: &str, in_channels: usize, r: usize) -> ConvBlock {
    ConvBlock::new(b, name, in_channels, 4 * r, r, 0.0)
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<ConvBlock>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        dropout: f64,
    ) -> Self {
        let mut blocks = Vec::with_capacity(layers);
        let mut width = 0;
        for j in 0..layers {
            let (cin, cout) = if j == 0 {
                (in_channels, in_channels)
            } else {
                (width, growth)
            };
            blocks.push(ConvBlock::new(
                b,
                &format!("{name}.l{j}"),
                cin,
                4 * growth,
                cout,
                dropout,
            ));
            width += cout;
        }
        Self {
            layers: blocks,
            in_channels,
            growth,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth * (self.layers.len() - 1)
    }

    /// Channel count of the running concatenation after each layer.
    pub fn concat_sequence(&self) -> Vec<usize> {
        (0..self.layers.len())
            .map(|j| self.in_channels + j * self.growth)
            .collect()
    }

    pub fn forward<O: Ops>(&self, g: &mut O, x: Var) -> Result<Var> {
        self.forward_ablated(g, x, None)
    }

    /// Forward pass with the connection from output `source` into layer
    /// `layer` replaced by zeros (`(layer, source)`, `source < layer`).
    pub fn forward_ablated<O: Ops>(
        &self,
        g: &mut O,
        x: Var,
        cut: Option<(usize, usize)>,
    ) -> Result<Var> {
        let mut outs = vec![self.layers[0].forward(g, x)?];
        for (j, layer) in self.layers.iter().enumerate().skip(1) {
            let mut inputs = outs.clone();
            if let Some((l, s)) = cut {
                if l == j && s < j {
                    let shape = g.shape(inputs[s]).to_vec();
                    inputs[s] = g.input(Tensor::zeros(&shape));
                }
            }
            let joined = g.concat(&inputs)?;
            outs.push(layer.forward(g, joined)?);
        }
        Ok(g.concat(&outs)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    Down,
    Up,
}

/// Conv1x1-BN-ReLU then a stride-2 Conv3x3 (down) or Deconv3x3 (up).
#[derive(Clone, Debug)]
struct TransitionBlock {
    kind: Transition,
    w1: ParamId,
    bn: BatchNormParams,
    w2: ParamId,
}

impl TransitionBlock {
    fn new(b: &mut Builder, name: &str, kind: Transition, cin: usize, cout: usize) -> Self {
        let w1 = b.conv(&format!("{name}.conv1"), 1, cin, cout);
        let bn = b.batch_norm(&format!("{name}.bn"), cout);
        let w2 = match kind {
            Transition::Down => b.conv(&format!("{name}.conv3"), 3, cout, cout),
            // deconv kernels are k x k x C_big x C_small
            Transition::Up => b.weight(&format!("{name}.deconv3"), &[3, 3, cout, cout], 9 * cout),
        };
        Self { kind, w1, bn, w2 }
    }

    fn forward<O: Ops>(&self, g: &mut O, x: Var) -> Result<Var> {
        let w1 = g.param(self.w1);
        let h = g.conv2d(x, w1, 1, Padding::Same)?;
        let h = g.batch_norm(h, &self.bn)?;
        let h = g.relu(h)?;
        let w2 = g.param(self.w2);
        Ok(match self.kind {
            Transition::Down => g.conv2d(h, w2, 2, Padding::Same)?,
            Transition::Up => g.deconv2d(h, w2, 2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub alpha: usize,
    pub stage_sizes: Vec<usize>,
    pub block_layers: Vec<usize>,
    pub growth: usize,
    pub r0: usize,
    pub dropout: f64,
    pub bn: BnConfig,
}

/// Where one dense block sits in the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub size: usize,
    pub transition: Option<Transition>,
    /// Encoder block whose output is concatenated before this block.
    pub skip_from: Option<usize>,
    pub saves_skip: bool,
}

impl GeneratorConfig {
    pub fn full(alpha: usize) -> Self {
        Self {
            alpha,
            stage_sizes: vec![80, 40, 20, 10, 20, 40, 80, 160, 320],
            block_layers: vec![4, 5, 7, 10, 12, 10, 7, 5, 4, 4, 4],
            growth: 12,
            r0: 46,
            dropout: 0.0,
            bn: BnConfig::default(),
        }
    }

    pub fn desk(alpha: usize) -> Self {
        Self {
            alpha,
            stage_sizes: vec![16, 8, 4, 8, 16, 32, 64],
            block_layers: vec![2; 7],
            growth: 8,
            r0: 16,
            dropout: 0.0,
            bn: BnConfig::default(),
        }
    }

    /// Plain UNet: every dense block is a single ConvBlock.
    pub fn unet(alpha: usize, stage_sizes: Vec<usize>, r0: usize) -> Self {
        let n = stage_sizes.len();
        Self {
            alpha,
            stage_sizes,
            block_layers: vec![1; n],
            growth: r0,
            r0,
            dropout: 0.0,
            bn: BnConfig::default(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.stage_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.stage_sizes.last().unwrap()
    }

    pub fn plan(&self) -> Result<Vec<BlockPlan>> {
        let bad = |m: String| Err(NetworkError::Config(m));
        let s = &self.stage_sizes;
        if self.alpha == 0 || self.growth == 0 || self.r0 == 0 {
            return bad("alpha, growth and r0 must be positive".into());
        }
        if s.is_empty() || self.block_layers.len() < s.len() {
            return bad(format!(
                "{} blocks cannot fill {} stages",
                self.block_layers.len(),
                s.len()
            ));
        }
        if self.block_layers.contains(&0) {
            return bad("every dense block needs at least one layer".into());
        }
        let bottom = (0..s.len()).min_by_key(|&i| (s[i], i)).unwrap();
        for i in 1..s.len() {
            let ok = if i <= bottom {
                s[i] * 2 == s[i - 1]
            } else {
                s[i] == s[i - 1] * 2
            };
            if !ok {
                return bad(format!(
                    "stage sizes {s:?} must halve down to the bottleneck and then double"
                ));
            }
        }
        Ok((0..self.block_layers.len())
            .map(|i| {
                if i >= s.len() {
                    return BlockPlan {
                        size: s[s.len() - 1],
                        transition: None,
                        skip_from: None,
                        saves_skip: false,
                    };
                }
                let transition = match i {
                    0 => None,
                    _ if i <= bottom => Some(Transition::Down),
                    _ => Some(Transition::Up),
                };
                let skip_from = if i > bottom {
                    (0..bottom).find(|&e| s[e] == s[i])
                } else {
                    None
                };
                BlockPlan {
                    size: s[i],
                    transition,
                    skip_from,
                    saves_skip: i < bottom,
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    input_shift: ParamId,
    input_scale: ParamId,
    init_w: ParamId,
    init_bn: BatchNormParams,
    plan: Vec<BlockPlan>,
    transitions: Vec<Option<TransitionBlock>>,
    blocks: Vec<DenseBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Generator {
    pub fn build(b: &mut Builder, cfg: &GeneratorConfig) -> Result<Self> {
        let plan = cfg.plan()?;
        // per-channel input standardization, fitted to data, never trained
        let input_shift = b.store.add(
            "g.input.shift",
            ParamKind::RunningMean,
            Tensor::zeros(&[cfg.alpha]),
        );
        let input_scale = b.store.add(
            "g.input.scale",
            ParamKind::RunningVar,
            Tensor::full(&[cfg.alpha], 1.0),
        );
        let init_w = b.conv("g.init.conv3", 3, cfg.alpha, cfg.r0);
        let init_bn = b.batch_norm("g.init.bn", cfg.r0);
        let mut transitions = Vec::new();
        let mut blocks: Vec<DenseBlock> = Vec::new();
        let mut width = cfg.r0;
        for (i, p) in plan.iter().enumerate() {
            let t = p
                .transition
                .map(|kind| TransitionBlock::new(b, &format!("g.t{i}"), kind, width, cfg.r0));
            if t.is_some() {
                width = cfg.r0;
            }
            if let Some(e) = p.skip_from {
                width += blocks[e].out_channels();
            }
            let block = DenseBlock::new(
                b,
                &format!("g.b{i}"),
                width,
                cfg.block_layers[i],
                cfg.growth,
                cfg.dropout,
            );
            width = block.out_channels();
            transitions.push(t);
            blocks.push(block);
        }
        let head_w = b.conv("g.head.conv1", 1, width, 1);
        let head_b = b.bias("g.head.bias", 1);
        Ok(Self {
            cfg: cfg.clone(),
            input_shift,
            input_scale,
            init_w,
            init_bn,
            plan,
            transitions,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Applies `(x - shift) * scale` per channel to channel-last data.
    pub fn normalize_input(&self, store: &ParamStore, data: &mut [f64]) {
        let shift = store.value(self.input_shift).data();
        let scale = store.value(self.input_scale).data();
        for px in data.chunks_mut(self.cfg.alpha) {
            for ((v, s), k) in px.iter_mut().zip(shift).zip(scale) {
                *v = (*v - s) * k;
            }
        }
    }

    /// Fits the input standardization to channel-last samples: zero mean and
    /// unit standard deviation per channel (unit scale for flat channels).
    pub fn fit_input(&self, store: &mut ParamStore, data: &[f64]) {
        let a = self.cfg.alpha;
        let n = (data.len() / a).max(1) as f64;
        let mut mean = vec![0.0; a];
        for px in data.chunks(a) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; a];
        for px in data.chunks(a) {
            var.iter_mut()
                .zip(px)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        store.get_mut(self.input_shift).value = Tensor::new(&[a], mean).expect("alpha values");
        store.get_mut(self.input_scale).value = Tensor::new(&[a], scale).expect("alpha values");
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn plan(&self) -> &[BlockPlan] {
        &self.plan
    }

    /// `N x S x S x alpha` to `N x S_out x S_out x 1`.
    pub fn forward<O: Ops>(&self, g: &mut O, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let s = self.cfg.input_size();
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != self.cfg.alpha {
            return Err(NetworkError::Config(format!(
                "generator expects N x {s} x {s} x {}, got {shape:?}",
                self.cfg.alpha
            )));
        }
        let w = g.param(self.init_w);
        let h = g.conv2d(x, w, 1, Padding::Same)?;
        let h = g.batch_norm(h, &self.init_bn)?;
        let mut h = g.relu(h)?;
        let mut skips: Vec<Option<Var>> = vec![None; self.blocks.len()];
        for (i, (p, block)) in self.plan.iter().zip(&self.blocks).enumerate() {
            if let Some(t) = &self.transitions[i] {
                h = t.forward(g, h)?;
            }
            if let Some(e) = p.skip_from {
                let skip = skips[e].expect("encoder skip saved before use");
                h = g.concat(&[h, skip])?;
            }
            h = block.forward(g, h)?;
            if p.saves_skip {
                skips[i] = Some(h);
            }
        }
        let w = g.param(self.head_w);
        let h = g.conv2d(h, w, 1, Padding::Same)?;
        let bias = g.param(self.head_b);
        Ok(g.add_bias(h, bias)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Phase channel plus `alpha` upsampled intensity channels.
    pub in_channels: usize,
    pub input_size: usize,
    pub conv_stack: Vec<ConvSpec>,
    pub fc_sizes: Vec<usize>,
    pub minibatch_grid: usize,
    pub dropout: f64,
    pub bn: BnConfig,
}

fn stack(channels: &[usize]) -> Vec<ConvSpec> {
    channels
        .iter()
        .map(|&c| ConvSpec {
            kernel: 3,
            channels: c,
            stride: 2,
        })
        .collect()
}

impl DiscriminatorConfig {
    pub fn full(alpha: usize) -> Self {
        Self {
            in_channels: 1 + alpha,
            input_size: 320,
            conv_stack: stack(&[64, 128, 256, 512]),
            fc_sizes: vec![1024, 256, 2],
            minibatch_grid: 4,
            dropout: 0.5,
            bn: BnConfig::default(),
        }
    }

    pub fn desk(alpha: usize) -> Self {
        Self {
            in_channels: 1 + alpha,
            input_size: 64,
            conv_stack: stack(&[16, 32, 64]),
            fc_sizes: vec![64, 32, 2],
            minibatch_grid: 4,
            dropout: 0.5,
            bn: BnConfig::default(),
        }
    }

    fn check(&self) -> Result<usize> {
        let g = self.minibatch_grid;
        if g == 0 || !self.input_size.is_multiple_of(g) {
            return Err(NetworkError::Config(format!(
                "{} px input is not divisible by grid {g}",
                self.input_size
            )));
        }
        if self.fc_sizes.last() != Some(&2) {
            return Err(NetworkError::Config(
                "the last FC layer must have 2 outputs".into(),
            ));
        }
        let mut s = self.input_size / g;
        for c in &self.conv_stack {
            if c.stride == 0 || c.kernel == 0 {
                return Err(NetworkError::Config("zero kernel or stride".into()));
            }
            let pad = Padding::Same.amount(c.kernel);
            if s + 2 * pad < c.kernel {
                return Err(NetworkError::Config(
                    "discriminator input too small for its conv stack".into(),
                ));
            }
            s = (s + 2 * pad - c.kernel) / c.stride + 1;
        }
        let ch = self
            .conv_stack
            .last()
            .map_or(self.in_channels, |c| c.channels);
        Ok(s * s * ch)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    convs: Vec<(ParamId, BatchNormParams, usize)>,
    fcs: Vec<(ParamId, ParamId)>,
}

impl Discriminator {
    pub fn build(b: &mut Builder, cfg: &DiscriminatorConfig) -> Result<Self> {
        let flat = cfg.check()?;
        let mut cin = cfg.in_channels;
        let mut convs = Vec::new();
        for (i, c) in cfg.conv_stack.iter().enumerate() {
            let w = b.conv(&format!("d.c{i}.conv"), c.kernel, cin, c.channels);
            let bn = b.batch_norm(&format!("d.c{i}.bn"), c.channels);
            convs.push((w, bn, c.stride));
            cin = c.channels;
        }
        let mut fin = flat;
        let mut fcs = Vec::new();
        for (i, &n) in cfg.fc_sizes.iter().enumerate() {
            let w = b.weight(&format!("d.fc{i}.w"), &[fin, n], fin);
            let bias = b.bias(&format!("d.fc{i}.b"), n);
            fcs.push((w, bias));
            fin = n;
        }
        Ok(Self {
            cfg: cfg.clone(),
            convs,
            fcs,
        })
    }

    /// Class probabilities `[N, 2]` (column 0 = real) for assembled inputs.
    pub fn probs<O: Ops>(&self, g: &mut O, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, bn, stride) in &self.convs {
            let wv = g.param(*w);
            h = g.conv2d(h, wv, *stride, Padding::Same)?;
            h = g.batch_norm(h, bn)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let s = g.shape(h).to_vec();
        h = g.reshape(h, &[s[0], s[1..].iter().product()])?;
        let last = self.fcs.len() - 1;
        for (i, (w, b)) in self.fcs.iter().enumerate() {
            let wv = g.param(*w);
            h = g.matmul(h, wv)?;
            let bv = g.param(*b);
            h = g.add_bias(h, bv)?;
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
                if self.cfg.dropout > 0.0 {
                    h = g.dropout(h, self.cfg.dropout)?;
                }
            }
        }
        Ok(g.softmax(h)?)
    }

    /// Concatenates phase `N x P x P x 1` with upsampled intensity
    /// `N x P x P x alpha` along channels.
    pub fn condition<O: Ops>(&self, g: &mut O, phase: Var, intensity: Var) -> Result<Var> {
        let (ps, is) = (g.shape(phase).to_vec(), g.shape(intensity).to_vec());
        let p = self.cfg.input_size;
        if ps.len() != 4 || ps[1..] != [p, p, 1] || is.len() != 4 || is[..3] != ps[..3] {
            return Err(NetworkError::Config(format!(
                "conditional pair {ps:?} / {is:?} does not fit a {p} px input"
            )));
        }
        if ps[3] + is[3] != self.cfg.in_channels {
            return Err(NetworkError::Config(format!(
                "{} conditional channels, expected {}",
                ps[3] + is[3],
                self.cfg.in_channels
            )));
        }
        Ok(g.concat(&[phase, intensity])?)
    }

    /// Mean real-class probability over the `g x g` sub-regions, shape `[N]`.
    pub fn discriminate_minibatch<O: Ops>(
        &self,
        g: &mut O,
        phase: Var,
        intensity: Var,
    ) -> Result<Var> {
        let x = self.condition(g, phase, intensity)?;
        let n = g.shape(x)[0];
        let grid = self.cfg.minibatch_grid;
        let tiles = g.space_to_batch(x, grid)?;
        let probs = self.probs(g, tiles)?;
        let real = g.select_last(probs, 0)?;
        let per_sample = g.reshape(real, &[n, grid * grid])?;
        Ok(g.mean_last_axis(per_sample)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Architecture {
    pub fn desk(alpha: usize) -> Self {
        Self {
            generator: GeneratorConfig::desk(alpha),
            discriminator: DiscriminatorConfig::desk(alpha),
        }
    }

    pub fn full(alpha: usize) -> Self {
        Self {
            generator: GeneratorConfig::full(alpha),
            discriminator: DiscriminatorConfig::full(alpha),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| NetworkError::Config(format!("architecture record: {e}")))
    }

    pub fn alpha(&self) -> usize {
        self.generator.alpha
    }
}

/// Generator, discriminator and the parameter store they index into.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Model {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.discriminator.in_channels != arch.generator.alpha + 1 {
            return Err(NetworkError::Config(
                "discriminator channels must be alpha + 1".into(),
            ));
        }
        if arch.discriminator.input_size != arch.generator.output_size() {
            return Err(NetworkError::Config(
                "discriminator input must match generator output".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, seed, arch.generator.bn);
        let generator = Generator::build(&mut b, &arch.generator)?;
        b.bn = arch.discriminator.bn;
        let discriminator = Discriminator::build(&mut b, &arch.discriminator)?;
        Ok(Self {
            arch: arch.clone(),
            store,
            generator,
            discriminator,
        })
    }

    /// Rebuilds the layer handles for an existing store (checkpoint restore).
    pub fn from_store(arch: &Architecture, store: ParamStore) -> Result<Self> {
        let fresh = Self::build(arch, 0)?;
        if fresh.store.len() != store.len() {
            return Err(NetworkError::Config(format!(
                "checkpoint has {} parameters, architecture needs {}",
                store.len(),
                fresh.store.len()
            )));
        }
        for ((_, a), (_, b)) in fresh.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.kind != b.kind {
                return Err(NetworkError::Config(format!(
                    "parameter {} does not match the architecture",
                    b.name
                )));
            }
        }
        Ok(Self { store, ..fresh })
    }
}

/// Number of trainable scalars under a name prefix.
pub fn param_count(store: &ParamStore, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.kind.trainable() && p.name.starts_with(prefix))
        .map(|(_, p)| p.value.len())
        .sum()
}
