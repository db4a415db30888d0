//! Encoder-decoder with skip connections, per-block density regression heads
//! (the experts), and the gating nets that fuse them.
//!
//! Layout of one forward pass on a `[3,H,W]` image:
//!
//! ```text
//! encoder stages (3x3 conv + ReLU)*, 2x2 max pool between stages
//!   -> bottleneck, plus the pre-pool activations of the last two pooled stages
//! decoder block b: [x2 bilinear upsample] [concat skip] (3x3 conv + ReLU) x2
//!   -> head: (1x1 conv + ReLU) x2 -> bilinear resize to HxW  = expert E_b
//! G1:        (3x3 conv + ReLU) x2 on the bottleneck -> M*N logits
//! attention: (3x3 conv + ReLU) x2, 3x3 conv + sigmoid -> A
//! G2:        (3x3 conv + ReLU) x6 on bottleneck * A -> M logits
//! gating logits are resized to HxW, then softmaxed per group.
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{self, enumerate_groups, GroupPlan};
use crate::tensor::{Element, Tensor};

/// Init std of each density head's output layer; keeps initial counts
/// near annotation scale instead of thousands of heads per image.
pub const HEAD_OUTPUT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    #[serde(rename = "vgg16bn-shape")]
    Vgg16BnShape,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "vgg16bn-shape" => Ok(Preset::Vgg16BnShape),
            other => Err(Error::arg(format!("unknown preset `{other}`"))),
        }
    }
}

/// How expert density maps are combined into the final output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Two-level hierarchical mixture over overlapping groups.
    Hmode,
    /// One pixel-wise gating net over all K experts.
    Moe,
    /// Plain per-pixel mean of the experts.
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmode" => Ok(FusionMode::Hmode),
            "moe" => Ok(FusionMode::Moe),
            "average" => Ok(FusionMode::Average),
            other => Err(Error::arg(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: Preset,
    pub encoder_stage_channels: Vec<usize>,
    pub encoder_stage_convs: Vec<usize>,
    /// Whether the last encoder stage is followed by a pooling layer.
    pub pool_last_stage: bool,
    /// One entry per decoder block; its length is the expert count K.
    pub decoder_block_channels: Vec<usize>,
    pub gating_channels: usize,
    pub k: usize,
    pub n: usize,
    pub input_size: (usize, usize),
    pub fusion: FusionMode,
}

impl BackboneConfig {
    /// Three pooled stages (8, 16, 32 channels), downsampling by 8.
    pub fn toy(k: usize, n: usize) -> Self {
        let mut decoder = vec![32, 16, 8];
        decoder.resize(k.max(1), 8);
        decoder.truncate(k);
        Self {
            preset: Preset::Toy,
            encoder_stage_channels: vec![8, 16, 32],
            encoder_stage_convs: vec![2, 2, 2],
            pool_last_stage: true,
            decoder_block_channels: decoder,
            gating_channels: 16,
            k,
            n,
            input_size: (128, 128),
            fusion: FusionMode::Hmode,
        }
    }

    /// Channel widths and pooling positions of the first 13 VGG-16 conv
    /// layers (no batch norm, random weights).
    pub fn vgg16bn_shape(k: usize, n: usize) -> Self {
        let mut decoder = vec![512, 256, 128];
        decoder.resize(k.max(1), 64);
        decoder.truncate(k);
        Self {
            preset: Preset::Vgg16BnShape,
            encoder_stage_channels: vec![64, 128, 256, 512, 512],
            encoder_stage_convs: vec![2, 2, 3, 3, 3],
            pool_last_stage: false,
            decoder_block_channels: decoder,
            gating_channels: 64,
            k,
            n,
            input_size: (256, 256),
            fusion: FusionMode::Hmode,
        }
    }

    pub fn from_preset(preset: Preset, k: usize, n: usize) -> Self {
        match preset {
            Preset::Toy => Self::toy(k, n),
            Preset::Vgg16BnShape => Self::vgg16bn_shape(k, n),
        }
    }

    pub fn with_fusion(mut self, fusion: FusionMode) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn pool_count(&self) -> usize {
        let stages = self.encoder_stage_channels.len();
        if self.pool_last_stage {
            stages
        } else {
            stages - 1
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.pool_count()
    }

    /// Number of groups `M = C(K, N)`; 1 for single-level fusion.
    pub fn groups(&self) -> usize {
        match self.fusion {
            FusionMode::Hmode => fusion::binomial(self.k, self.n),
            FusionMode::Moe | FusionMode::Average => 0,
        }
    }

    /// Density outputs that receive `L_Des + L_Rel`: K experts, M groups, final.
    pub fn supervised_outputs(&self) -> usize {
        self.k + self.groups() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.k < 2 {
            return bad(format!("K must be at least 2, got {}", self.k));
        }
        if self.fusion == FusionMode::Hmode && (self.n == 0 || self.n >= self.k) {
            return bad(format!("N must satisfy 1 <= N < K, got N={} K={}", self.n, self.k));
        }
        if self.decoder_block_channels.len() != self.k {
            return bad(format!(
                "{} decoder blocks configured for K={}",
                self.decoder_block_channels.len(),
                self.k
            ));
        }
        let stages = self.encoder_stage_channels.len();
        if stages == 0 || self.encoder_stage_convs.len() != stages || self.encoder_stage_convs.contains(&0) {
            return bad("encoder stages need matching channel and conv counts".into());
        }
        if self.pool_count() < 2 {
            return bad("encoder needs at least two pooled stages for skip connections".into());
        }
        if self.k > self.pool_count() + 1 {
            return bad(format!("K={} decoder blocks exceed the input resolution", self.k));
        }
        let (h, w) = self.input_size;
        let f = self.downsampling();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("input {h}x{w} must be a multiple of {f}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    pad: usize,
}

/// Expert maps, group outputs and final output, all `[1,H,W]` on the tape.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    pub experts: Vec<Var>,
    pub group_outputs: Vec<Var>,
    pub final_output: Var,
}

impl ExpertSet {
    /// Every supervised density output: experts, then groups, then final.
    pub fn supervised(&self) -> Vec<Var> {
        let mut v = self.experts.clone();
        v.extend(&self.group_outputs);
        v.push(self.final_output);
        v
    }
}

/// Per-pixel weight maps at input resolution.
#[derive(Clone, Debug)]
pub struct GatingOutputs {
    /// `level1[i][j]` weighs the j-th expert of group i. For single-level
    /// fusion this holds one group of K weights.
    pub level1: Vec<Vec<Var>>,
    pub level2: Vec<Var>,
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub experts: ExpertSet,
    pub gating: Option<GatingOutputs>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: BackboneConfig,
    plan: Option<GroupPlan>,
    params: Vec<Param<T>>,
    encoder: Vec<Vec<ConvLayer>>,
    decoder: Vec<[ConvLayer; 2]>,
    heads: Vec<[ConvLayer; 2]>,
    g1: Vec<ConvLayer>,
    attention: Vec<ConvLayer>,
    g2: Vec<ConvLayer>,
}

struct Builder<'a, T> {
    params: &'a mut Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvLayer {
        let fan_in = (c_in * k * k) as f64;
        self.conv_std(name, c_in, c_out, k, (2.0 / fan_in).sqrt())
    }

    fn conv_std(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, std: f64) -> ConvLayer {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..c_out * c_in * k * k).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        let weight = self.push(format!("{name}.weight"), Tensor::new(&[c_out, c_in, k, k], data).expect("sized"));
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]).expect("sized"));
        ConvLayer { weight, bias, pad: k / 2 }
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }
}

impl<T: Element> Model<T> {
    /// Builds the network with Kaiming fan-in normal kernels (density head
    /// outputs use [`HEAD_OUTPUT_STD`]) and zero biases.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let mut encoder = Vec::new();
        let mut c_prev = 3;
        let mut pre_pool_channels = Vec::new();
        for (s, (&ch, &convs)) in config
            .encoder_stage_channels
            .iter()
            .zip(&config.encoder_stage_convs)
            .enumerate()
        {
            let layers = (0..convs)
                .map(|j| {
                    let l = b.conv(&format!("enc.s{s}.c{j}"), if j == 0 { c_prev } else { ch }, ch, 3);
                    l
                })
                .collect();
            encoder.push(layers);
            if s < config.pool_count() {
                pre_pool_channels.push(ch);
            }
            c_prev = ch;
        }
        let bottleneck_channels = c_prev;
        // deepest skip first: feeds decoder block 1, the next one block 2
        let skips: Vec<usize> = pre_pool_channels.iter().rev().take(2).copied().collect();

        let mut decoder = Vec::new();
        let mut c_in = bottleneck_channels;
        for (i, &ch) in config.decoder_block_channels.iter().enumerate() {
            let skip = if i >= 1 { skips.get(i - 1).copied().unwrap_or(0) } else { 0 };
            let c0 = b.conv(&format!("dec.b{i}.c0"), c_in + skip, ch, 3);
            let c1 = b.conv(&format!("dec.b{i}.c1"), ch, ch, 3);
            decoder.push([c0, c1]);
            c_in = ch;
        }
        let heads = config
            .decoder_block_channels
            .iter()
            .enumerate()
            .map(|(i, &ch)| {
                let hidden = (ch / 2).max(4);
                [
                    b.conv(&format!("head.{i}.c0"), ch, hidden, 1),
                    b.conv_std(&format!("head.{i}.c1"), hidden, 1, 1, HEAD_OUTPUT_STD),
                ]
            })
            .collect();

        let gc = config.gating_channels;
        let (mut g1, mut attention, mut g2) = (Vec::new(), Vec::new(), Vec::new());
        let plan = match config.fusion {
            FusionMode::Hmode => {
                let plan = enumerate_groups(config.k, config.n)?;
                let mn = plan.m() * plan.n;
                g1.push(b.conv("g1.c0", bottleneck_channels, gc, 3));
                g1.push(b.conv("g1.c1", gc, mn, 3));
                attention.push(b.conv("att.c0", bottleneck_channels, gc, 3));
                attention.push(b.conv("att.c1", gc, gc, 3));
                attention.push(b.conv("att.c2", gc, 1, 3));
                for j in 0..6 {
                    let c_in = if j == 0 { bottleneck_channels } else { gc };
                    let c_out = if j == 5 { plan.m() } else { gc };
                    g2.push(b.conv(&format!("g2.c{j}"), c_in, c_out, 3));
                }
                Some(plan)
            }
            FusionMode::Moe => {
                g1.push(b.conv("moe.c0", bottleneck_channels, gc, 3));
                g1.push(b.conv("moe.c1", gc, config.k, 3));
                None
            }
            FusionMode::Average => None,
        };

        Ok(Self {
            config,
            plan,
            params,
            encoder,
            decoder,
            heads,
            g1,
            attention,
            g2,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn plan(&self) -> Option<&GroupPlan> {
        self.plan.as_ref()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on the tape, in declaration order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    fn conv(&self, tape: &mut Tape<T>, p: &[Var], l: ConvLayer, x: Var) -> Result<Var> {
        tape.conv2d(x, p[l.weight], p[l.bias], l.pad)
    }

    fn conv_relu(&self, tape: &mut Tape<T>, p: &[Var], l: ConvLayer, x: Var) -> Result<Var> {
        let y = self.conv(tape, p, l, x)?;
        Ok(tape.relu(y))
    }

    /// Returns the bottleneck and the pre-pool activations of the last two
    /// pooled stages, deepest first.
    pub fn forward_encoder(&self, tape: &mut Tape<T>, p: &[Var], image: Var) -> Result<(Var, Vec<Var>)> {
        let (c, h, w) = crate::tensor::chw(tape.shape(image))?;
        let f = self.config.downsampling();
        if c != 3 {
            return Err(Error::shape(format!("image must have 3 channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not a multiple of {f}")));
        }
        let mut x = image;
        let mut pre_pool = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate() {
            for &l in stage {
                x = self.conv_relu(tape, p, l, x)?;
            }
            if s < self.config.pool_count() {
                pre_pool.push(x);
                x = tape.max_pool2x2(x)?;
            }
        }
        let skips = pre_pool.into_iter().rev().take(2).collect();
        Ok((x, skips))
    }

    /// One density map per decoder block, each resized to `target`.
    pub fn forward_decoder_experts(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        bottleneck: Var,
        skips: &[Var],
        target: (usize, usize),
    ) -> Result<Vec<Var>> {
        let mut x = bottleneck;
        let mut experts = Vec::with_capacity(self.decoder.len());
        for (i, (block, head)) in self.decoder.iter().zip(&self.heads).enumerate() {
            if i > 0 {
                let (_, h, w) = crate::tensor::chw(tape.shape(x))?;
                x = tape.upsample_bilinear(x, (2 * h, 2 * w))?;
                if let Some(&skip) = skips.get(i - 1) {
                    x = tape.concat(&[x, skip])?;
                }
            }
            x = self.conv_relu(tape, p, block[0], x)?;
            x = self.conv_relu(tape, p, block[1], x)?;
            let hd = self.conv_relu(tape, p, head[0], x)?;
            let d = self.conv_relu(tape, p, head[1], hd)?;
            experts.push(tape.upsample_bilinear(d, target)?);
        }
        Ok(experts)
    }

    /// Resize logits to `target` and softmax consecutive runs of `group` channels.
    fn grouped_weights(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        group: usize,
        target: (usize, usize),
    ) -> Result<Vec<Vec<Var>>> {
        let up = tape.upsample_bilinear(logits, target)?;
        let groups = tape.shape(up)[0] / group;
        (0..groups)
            .map(|i| {
                let g = tape.slice_channels(up, i * group, group)?;
                let s = tape.softmax_channels(g)?;
                (0..group).map(|j| tape.slice_channels(s, j, 1)).collect()
            })
            .collect()
    }

    pub fn forward_gating(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        bottleneck: Var,
        target: (usize, usize),
    ) -> Result<Option<GatingOutputs>> {
        match self.config.fusion {
            FusionMode::Average => Ok(None),
            FusionMode::Moe => {
                let mut x = bottleneck;
                for &l in &self.g1 {
                    x = self.conv_relu(tape, p, l, x)?;
                }
                let level1 = self.grouped_weights(tape, x, self.config.k, target)?;
                Ok(Some(GatingOutputs {
                    level1,
                    level2: Vec::new(),
                    attention: None,
                }))
            }
            FusionMode::Hmode => {
                let plan = self.plan.as_ref().expect("hmode model has a plan");
                let mut x = bottleneck;
                for &l in &self.g1 {
                    x = self.conv_relu(tape, p, l, x)?;
                }
                let level1 = self.grouped_weights(tape, x, plan.n, target)?;

                let mut a = bottleneck;
                let (last, hidden) = self.attention.split_last().expect("attention layers");
                for &l in hidden {
                    a = self.conv_relu(tape, p, l, a)?;
                }
                let a = self.conv(tape, p, *last, a)?;
                let a = tape.sigmoid(a);
                let channels = tape.shape(bottleneck)[0];
                let a_full = tape.broadcast_channels(a, channels)?;
                let mut y = tape.mul(bottleneck, a_full)?;
                for &l in &self.g2 {
                    y = self.conv_relu(tape, p, l, y)?;
                }
                let level2 = self
                    .grouped_weights(tape, y, plan.m(), target)?
                    .pop()
                    .expect("one level-2 group");
                let attention = Some(tape.upsample_bilinear(a, target)?);
                Ok(Some(GatingOutputs {
                    level1,
                    level2,
                    attention,
                }))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], image: Var) -> Result<ForwardOutputs> {
        let (_, h, w) = crate::tensor::chw(tape.shape(image))?;
        let (bottleneck, skips) = self.forward_encoder(tape, p, image)?;
        let experts = self.forward_decoder_experts(tape, p, bottleneck, &skips, (h, w))?;
        let gating = self.forward_gating(tape, p, bottleneck, (h, w))?;
        let (group_outputs, final_output) = match (&gating, self.config.fusion) {
            (Some(g), FusionMode::Hmode) => {
                let plan = self.plan.as_ref().expect("hmode model has a plan");
                let groups = fusion::fuse_level1(tape, &experts, &g.level1, plan)?;
                let out = fusion::fuse_level2(tape, &groups, &g.level2)?;
                (groups, out)
            }
            (Some(g), FusionMode::Moe) => (Vec::new(), fusion::fuse_single_level_moe(tape, &experts, &g.level1[0])?),
            _ => (Vec::new(), fusion::fuse_baseline_average(tape, &experts)?),
        };
        Ok(ForwardOutputs {
            experts: ExpertSet {
                experts,
                group_outputs,
                final_output,
            },
            gating,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, h, w], (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn run(model: &Model<f64>, image: Tensor<f64>) -> (Tape<f64>, ForwardOutputs) {
        let mut tape = Tape::new();
        let p = model.register(&mut tape);
        let x = tape.constant(image);
        let out = model.forward(&mut tape, &p, x).unwrap();
        (tape, out)
    }

    #[test]
    fn toy_encoder_downsamples_by_eight() {
        let model = Model::<f64>::new(BackboneConfig::toy(3, 2), 1).unwrap();
        let mut tape = Tape::new();
        let p = model.register(&mut tape);
        let x = tape.constant(random_image(128, 128, 1));
        let (b, skips) = model.forward_encoder(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(b), [32, 16, 16]);
        assert_eq!(tape.shape(skips[0]), [32, 32, 32]);
        assert_eq!(tape.shape(skips[1]), [16, 64, 64]);
        let odd = tape.constant(random_image(20, 24, 1));
        assert!(matches!(model.forward_encoder(&mut tape, &p, odd), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn vgg_shape_encoder_matches_reference_strides() {
        let model = Model::<f32>::new(BackboneConfig::vgg16bn_shape(3, 2).with_input_size(32, 32), 0).unwrap();
        let convs: usize = model.config().encoder_stage_convs.iter().sum();
        assert_eq!(convs, 13);
        assert_eq!(model.config().downsampling(), 16);
        let mut tape = Tape::new();
        let p = model.register(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 32, 32]).unwrap());
        let (b, skips) = model.forward_encoder(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(b), [512, 2, 2]);
        assert_eq!(tape.shape(skips[0]), [512, 4, 4]);
        assert_eq!(tape.shape(skips[1]), [256, 8, 8]);
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let model = Model::<f64>::new(BackboneConfig::toy(3, 2).with_input_size(32, 32), 2).unwrap();
        let (tape, out) = run(&model, Tensor::zeros(&[3, 32, 32]).unwrap());
        for v in out.experts.supervised() {
            assert!(tape.value(v).is_finite());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Model::<f32>::new(BackboneConfig::toy(3, 2).with_input_size(32, 32), 3).unwrap();
        let b = Model::<f32>::new(BackboneConfig::toy(3, 2).with_input_size(32, 32), 3).unwrap();
        assert_eq!(a.params(), b.params());
        let img: Tensor<f32> = random_image(32, 32, 3).cast();
        let go = |m: &Model<f32>| {
            let mut tape = Tape::new();
            let p = m.register(&mut tape);
            let x = tape.constant(img.clone());
            let o = m.forward(&mut tape, &p, x).unwrap();
            tape.value(o.experts.final_output).clone()
        };
        assert_eq!(go(&a), go(&b));
    }

    #[test]
    fn experts_share_input_resolution_and_are_nonnegative() {
        let model = Model::<f64>::new(BackboneConfig::toy(3, 2).with_input_size(64, 32), 4).unwrap();
        let (tape, out) = run(&model, random_image(64, 32, 4));
        assert_eq!(out.experts.experts.len(), 3);
        assert_eq!(out.experts.group_outputs.len(), 3);
        for v in out.experts.supervised() {
            assert_eq!(tape.shape(v), [1, 64, 32]);
            assert!(tape.value(v).data().iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn gating_shapes_and_normalization() {
        let model = Model::<f64>::new(BackboneConfig::toy(3, 2).with_input_size(32, 32), 5).unwrap();
        let (tape, out) = run(&model, random_image(32, 32, 5));
        let g = out.gating.unwrap();
        assert_eq!(g.level1.len(), 3);
        assert!(g.level1.iter().all(|grp| grp.len() == 2));
        assert_eq!(g.level2.len(), 3);
        let a = g.attention.unwrap();
        assert!(tape.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
        for p in 0..32 * 32 {
            for grp in &g.level1 {
                let s: f64 = grp.iter().map(|&w| tape.value(w).data()[p]).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
            let s: f64 = g.level2.iter().map(|&w| tape.value(w).data()[p]).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn toy_parameter_count() {
        // Hand count per layer: weights c_out*c_in*k*k plus c_out biases.
        let encoder = (3 * 8 * 9 + 8) + (8 * 8 * 9 + 8) + (8 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 32 * 9 + 32) + (32 * 32 * 9 + 32);
        let decoder = 2 * (32 * 32 * 9 + 32) + (64 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (32 * 8 * 9 + 8) + (8 * 8 * 9 + 8);
        let heads = (32 * 16 + 16 + 16 + 1) + (16 * 8 + 8 + 8 + 1) + (8 * 4 + 4 + 4 + 1);
        let g1 = (32 * 16 * 9 + 16) + (16 * 6 * 9 + 6);
        let att = (32 * 16 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 9 + 1);
        let g2 = (32 * 16 * 9 + 16) + 4 * (16 * 16 * 9 + 16) + (16 * 3 * 9 + 3);
        let expected = encoder + decoder + heads + g1 + att + g2;
        assert_eq!(expected, 78_781);
        let model = Model::<f32>::new(BackboneConfig::toy(3, 2), 0).unwrap();
        assert_eq!(model.param_count(), expected);
        let avg = Model::<f32>::new(BackboneConfig::toy(3, 2).with_fusion(FusionMode::Average), 0).unwrap();
        assert_eq!(avg.param_count(), encoder + decoder + heads);
    }

    #[test]
    fn backbone_init_is_shared_across_fusion_modes() {
        let h = Model::<f32>::new(BackboneConfig::toy(3, 2), 9).unwrap();
        let a = Model::<f32>::new(BackboneConfig::toy(3, 2).with_fusion(FusionMode::Average), 9).unwrap();
        assert_eq!(&h.params()[..a.params().len()], a.params());
    }

    #[test]
    fn widened_configs() {
        for (k, n, m) in [(4, 2, 6), (4, 3, 4)] {
            let model = Model::<f64>::new(BackboneConfig::toy(k, n).with_input_size(16, 16), 6).unwrap();
            let (tape, out) = run(&model, random_image(16, 16, 6));
            assert_eq!(out.experts.experts.len(), k);
            assert_eq!(out.experts.group_outputs.len(), m);
            assert_eq!(model.config().supervised_outputs(), k + m + 1);
            assert!(tape.value(out.experts.final_output).is_finite());
        }
        assert!(Model::<f64>::new(BackboneConfig::toy(3, 3), 0).is_err());
        assert!(Model::<f64>::new(BackboneConfig::toy(5, 2), 0).is_err());
    }

    #[test]
    fn moe_and_average_modes() {
        for mode in [FusionMode::Moe, FusionMode::Average] {
            let cfg = BackboneConfig::toy(3, 2).with_fusion(mode).with_input_size(16, 16);
            assert_eq!(cfg.supervised_outputs(), 4);
            let model = Model::<f64>::new(cfg, 7).unwrap();
            let (tape, out) = run(&model, random_image(16, 16, 7));
            assert!(out.experts.group_outputs.is_empty());
            if mode == FusionMode::Average {
                assert!(out.gating.is_none());
                let e = &out.experts.experts;
                for p in 0..256 {
                    let mean = e.iter().map(|&v| tape.value(v).data()[p]).sum::<f64>() / 3.0;
                    assert!((tape.value(out.experts.final_output).data()[p] - mean).abs() < 1e-12);
                }
            } else {
                let g = out.gating.unwrap();
                assert_eq!(g.level1.len(), 1);
                assert_eq!(g.level1[0].len(), 3);
            }
        }
    }
}
