//! Cascaded segmentation networks.
//!
//! A [`UNet`] is a shape-preserving encoder/decoder with skip connections.
//! The [`HUNetCompound`] chains two of them: the lung stage segments the lung
//! cavity, and its sigmoid output is concatenated with the image as an extra
//! soft channel for the class stage. Both stages sit on one tape, so the class
//! loss reaches the lung stage's weights.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pooling levels.
    pub depth: usize,
    pub base_channels: usize,
    /// Channels entering the adapter.
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl UNetConfig {
    pub fn lung_stage(depth: usize, base_channels: usize) -> Self {
        UNetConfig {
            depth,
            base_channels,
            in_channels: 1,
            out_channels: 1,
            kernel_size: 3,
        }
    }

    pub fn class_stage(depth: usize, base_channels: usize) -> Self {
        UNetConfig {
            depth,
            base_channels,
            in_channels: 2,
            out_channels: NUM_CLASSES,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("U-Net depth must be at least 1"));
        }
        if self.depth > 8 {
            return Err(Error::config(format!("U-Net depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    padding: usize,
}

impl Conv {
    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.weight], vars[self.bias], 1, self.padding)
    }

    fn apply_relu(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = self.apply(tape, vars, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    adapter: Conv,
    encoder: Vec<[Conv; 2]>,
    bottleneck: [Conv; 2],
    decoder: Vec<[Conv; 2]>,
    head: Conv,
}

struct ParamBuilder<'a> {
    params: &'a mut Vec<Param>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl ParamBuilder<'_> {
    fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize) -> Conv {
        let fan_in = in_ch * k * k;
        let numel = out_ch * fan_in;
        let weights = match self.rng.as_deref_mut() {
            Some(rng) => {
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                (0..numel).map(|_| normal.sample(rng)).collect()
            }
            None => vec![0.0; numel],
        };
        self.params.push(Param {
            name: format!("{name}.weight"),
            value: Tensor::from_parts(vec![out_ch, in_ch, k, k], weights),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            value: Tensor::zeros(&[out_ch]),
        });
        Conv {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
            padding: k / 2,
        }
    }
}

impl UNet {
    fn build(prefix: &str, config: UNetConfig, builder: &mut ParamBuilder<'_>) -> Self {
        let k = config.kernel_size;
        let base = config.base_channels;
        let adapter = builder.conv(&format!("{prefix}.adapter"), base, config.in_channels, 1);
        let mut encoder = Vec::with_capacity(config.depth);
        let mut prev = base;
        for level in 0..config.depth {
            let width = config.width(level);
            let c1 = builder.conv(&format!("{prefix}.enc{level}.conv1"), width, prev, k);
            let c2 = builder.conv(&format!("{prefix}.enc{level}.conv2"), width, width, k);
            encoder.push([c1, c2]);
            prev = width;
        }
        let deepest = config.width(config.depth);
        let bottleneck = [
            builder.conv(&format!("{prefix}.bottleneck.conv1"), deepest, prev, k),
            builder.conv(&format!("{prefix}.bottleneck.conv2"), deepest, deepest, k),
        ];
        let mut decoder = Vec::with_capacity(config.depth);
        let mut below = deepest;
        for level in (0..config.depth).rev() {
            let width = config.width(level);
            let c1 = builder.conv(&format!("{prefix}.dec{level}.conv1"), width, width + below, k);
            let c2 = builder.conv(&format!("{prefix}.dec{level}.conv2"), width, width, k);
            decoder.push([c1, c2]);
            below = width;
        }
        let head = builder.conv(&format!("{prefix}.head"), config.out_channels, base, 1);
        UNet {
            config,
            adapter,
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    /// Raw logits, same spatial size as the input.
    fn forward(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        let mut x = self.adapter.apply(tape, vars, input)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for [c1, c2] in &self.encoder {
            x = c1.apply_relu(tape, vars, x)?;
            x = c2.apply_relu(tape, vars, x)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        x = self.bottleneck[0].apply_relu(tape, vars, x)?;
        x = self.bottleneck[1].apply_relu(tape, vars, x)?;
        for ([c1, c2], skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = tape.upsample_nearest2(x)?;
            x = tape.concat_channels(skip, up)?;
            x = c1.apply_relu(tape, vars, x)?;
            x = c2.apply_relu(tape, vars, x)?;
        }
        self.head.apply(tape, vars, x)
    }
}

/// Lung stage + class stage, or the class stage alone for the flat ablation.
#[derive(Clone, Debug)]
pub struct HUNetCompound {
    lnet: Option<UNet>,
    cnet: UNet,
    params: Vec<Param>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, 1, H, W]` lung probability; absent for the flat model.
    pub lung: Option<Var>,
    /// `[N, 4, H, W]` class distribution.
    pub classes: Var,
    /// Tape handles of the parameters, in [`HUNetCompound::params`] order.
    pub params: Vec<Var>,
}

impl HUNetCompound {
    /// Builds the cascade with He-initialized kernels and zero biases.
    pub fn build(lnet: UNetConfig, cnet: UNetConfig, seed: u64) -> Result<Self> {
        Self::check_cascade(&lnet, &cnet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::assemble(Some(lnet), cnet, Some(&mut rng)))
    }

    /// Class stage only, reading the image directly.
    pub fn build_flat(cnet: UNetConfig, seed: u64) -> Result<Self> {
        Self::check_flat(&cnet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::assemble(None, cnet, Some(&mut rng)))
    }

    fn check_cascade(lnet: &UNetConfig, cnet: &UNetConfig) -> Result<()> {
        lnet.validate()?;
        cnet.validate()?;
        if lnet.in_channels != 1 || lnet.out_channels != 1 {
            return Err(Error::config("lung stage must map 1 input channel to 1 output channel"));
        }
        if cnet.in_channels != 1 + lnet.out_channels {
            return Err(Error::config(format!(
                "class stage must take image + lung channel (2 inputs), got {}",
                cnet.in_channels
            )));
        }
        if cnet.out_channels != NUM_CLASSES {
            return Err(Error::config(format!("class stage must emit {NUM_CLASSES} channels")));
        }
        Ok(())
    }

    fn check_flat(cnet: &UNetConfig) -> Result<()> {
        cnet.validate()?;
        if cnet.in_channels != 1 || cnet.out_channels != NUM_CLASSES {
            return Err(Error::config(format!(
                "flat class network must map 1 input channel to {NUM_CLASSES} outputs"
            )));
        }
        Ok(())
    }

    fn assemble(lnet: Option<UNetConfig>, cnet: UNetConfig, rng: Option<&mut ChaCha8Rng>) -> Self {
        let mut params = Vec::new();
        let mut builder = ParamBuilder { params: &mut params, rng };
        let lnet = lnet.map(|cfg| UNet::build("lnet", cfg, &mut builder));
        let cnet = UNet::build("cnet", cnet, &mut builder);
        HUNetCompound { lnet, cnet, params }
    }

    /// Same architecture with caller-supplied parameter values, checked by
    /// name and shape.
    pub(crate) fn from_params(lnet: Option<UNetConfig>, cnet: UNetConfig, params: Vec<Param>) -> Result<Self> {
        match &lnet {
            Some(l) => Self::check_cascade(l, &cnet)?,
            None => Self::check_flat(&cnet)?,
        }
        let mut skeleton = Self::assemble(lnet, cnet, None);
        if skeleton.params.len() != params.len() {
            return Err(Error::config(format!(
                "architecture needs {} tensors, got {}",
                skeleton.params.len(),
                params.len()
            )));
        }
        for (slot, given) in skeleton.params.iter_mut().zip(params) {
            if slot.name != given.name || slot.value.shape() != given.value.shape() {
                return Err(Error::config(format!(
                    "expected tensor {} {:?}, found {} {:?}",
                    slot.name,
                    slot.value.shape(),
                    given.name,
                    given.value.shape()
                )));
            }
            *slot = given;
        }
        Ok(skeleton)
    }

    pub fn is_hierarchical(&self) -> bool {
        self.lnet.is_some()
    }

    pub fn lnet_config(&self) -> Option<UNetConfig> {
        self.lnet.as_ref().map(UNet::config)
    }

    pub fn cnet_config(&self) -> UNetConfig {
        self.cnet.config()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces the value of parameter `index`; the shape must not change.
    pub fn set_param(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::Usage(format!("no parameter {index}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, update has {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        let l = self.lnet.as_ref().map_or(1, |n| n.config.divisor());
        l.max(self.cnet.config.divisor())
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [_, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::dim(format!("image batch must be [N,1,H,W], got {shape:?}"))),
        };
        if c != 1 {
            return Err(Error::dim(format!("image batch must have 1 channel, got {shape:?}")));
        }
        let d = self.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::geometry(format!(
                "image size {h}x{w} is not a multiple of {d}"
            )));
        }
        Ok(())
    }

    /// Runs both stages on `image` (`[N, 1, H, W]`), registering every
    /// parameter on the tape as a trainable leaf.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<ForwardOutput> {
        self.check_input_shape(tape.value(image).shape())?;
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        self.forward_with(tape, image, vars)
    }

    /// Forward pass without gradient tracking on the parameters.
    pub fn forward_inference(&self, tape: &mut Tape, image: Var) -> Result<ForwardOutput> {
        self.check_input_shape(tape.value(image).shape())?;
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        self.forward_with(tape, image, vars)
    }

    fn forward_with(&self, tape: &mut Tape, image: Var, vars: Vec<Var>) -> Result<ForwardOutput> {
        let (lung, class_input) = match &self.lnet {
            Some(lnet) => {
                let logits = lnet.forward(tape, &vars, image)?;
                let lung = tape.sigmoid(logits);
                (Some(lung), tape.concat_channels(image, lung)?)
            }
            None => (None, image),
        };
        let logits = self.cnet.forward(tape, &vars, class_input)?;
        let classes = tape.softmax_channels(logits)?;
        Ok(ForwardOutput {
            lung,
            classes,
            params: vars,
        })
    }

    /// Convenience inference on a single `[1, 1, H, W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<(Option<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward_inference(&mut tape, x)?;
        Ok((out.lung.map(|v| tape.value(v).clone()), tape.value(out.classes).clone()))
    }
}
