//! Network builders and forward passes for the three roles in the
//! translation-plus-segmentation setup: image-to-image generators, patch
//! discriminators, and the pixel-wise segmenter.
//!
//! A `Network` owns its parameters (`Param` cells shared with the
//! optimizer) plus an ordered layer list. Forwards come in two flavours:
//! `forward_train` introduces parameters on a tape so they receive
//! gradients, `forward_frozen` feeds them in as constants so gradient
//! flows through the network into its *input* only — that is how a
//! generator trains against a fixed discriminator, and how a frozen
//! generator feeds a second-stage segmenter.

use crate::error::{Error, Result};
use crate::rng::NamedStream;
use crate::tensor::{
    add, conv2d, conv_transpose2d, instance_norm2d, leaky_relu, log_softmax, relu, tanh_op,
    PadMode, Param, Tape, Tensor,
};
use std::rc::Rc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
    Segmenter,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub n_res_blocks: usize,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::Config("n_res_blocks must be >= 1".into()));
        }
        if self.base_filters < 4 {
            return Err(Error::Config("base_filters must be >= 4".into()));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

struct ConvSpec {
    w: Rc<Param>,
    b: Rc<Param>,
    stride: usize,
    pad: usize,
    mode: PadMode,
    output_pad: usize, // transposed convs only
}

enum Layer {
    Conv(ConvSpec),
    ConvT(ConvSpec),
    Norm { gamma: Rc<Param>, beta: Rc<Param> },
    Relu,
    LeakyRelu(f32),
    Tanh,
    LogSoftmax,
    /// Additive skip around the inner stack: out = x + stack(x).
    Residual(Vec<Layer>),
}

pub struct Network {
    role: Role,
    in_channels: usize,
    out_channels: usize,
    layers: Vec<Layer>,
    params: Vec<Rc<Param>>,
}

/// How parameters enter the graph during a forward pass.
#[derive(Clone, Copy)]
enum ParamMode<'t> {
    Train(&'t Tape),
    Frozen,
}

impl<'t> ParamMode<'t> {
    fn get(&self, p: &Rc<Param>) -> Tensor {
        match self {
            ParamMode::Train(tape) => tape.leaf(p),
            ParamMode::Frozen => p.as_tensor(),
        }
    }
}

fn run(layers: &[Layer], x: Tensor, mode: ParamMode) -> Result<Tensor> {
    let mut cur = x;
    for layer in layers {
        cur = match layer {
            Layer::Conv(c) => {
                conv2d(&cur, &mode.get(&c.w), &mode.get(&c.b), c.stride, c.mode, c.pad)?
            }
            Layer::ConvT(c) => conv_transpose2d(
                &cur,
                &mode.get(&c.w),
                &mode.get(&c.b),
                c.stride,
                c.pad,
                c.output_pad,
            )?,
            Layer::Norm { gamma, beta } => {
                instance_norm2d(&cur, &mode.get(gamma), &mode.get(beta), 1e-5)?
            }
            Layer::Relu => relu(&cur),
            Layer::LeakyRelu(s) => leaky_relu(&cur, *s),
            Layer::Tanh => tanh_op(&cur),
            Layer::LogSoftmax => log_softmax(&cur)?,
            Layer::Residual(inner) => {
                let y = run(inner, cur.clone(), mode)?;
                add(&y, &cur)?
            }
        };
    }
    Ok(cur)
}

impl Network {
    fn new(role: Role, in_channels: usize, out_channels: usize, layers: Vec<Layer>) -> Network {
        let mut params = Vec::new();
        collect_params(&layers, &mut params);
        debug_assert!(
            {
                let mut names: Vec<&str> = params.iter().map(|p| p.name()).collect();
                names.sort_unstable();
                names.windows(2).all(|w| w[0] != w[1])
            },
            "parameter names must be unique"
        );
        Network { role, in_channels, out_channels, layers, params }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Parameters in construction order (stable across runs).
    pub fn params(&self) -> &[Rc<Param>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Rc<Param>> {
        self.params.iter().find(|p| p.name() == name)
    }

    /// Total number of stored f32 values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                format!("{}", c),
            ));
        }
        Ok(())
    }

    /// Forward with parameters on the tape: their grads accumulate on
    /// backward.
    pub fn forward_train(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        run(&self.layers, x.clone(), ParamMode::Train(tape))
    }

    /// Forward with parameters held constant. Gradient still flows
    /// through to a tracked input; with an untracked input this is plain
    /// inference recording nothing.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        run(&self.layers, x.clone(), ParamMode::Frozen)
    }
}

fn collect_params(layers: &[Layer], out: &mut Vec<Rc<Param>>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) | Layer::ConvT(c) => {
                out.push(Rc::clone(&c.w));
                out.push(Rc::clone(&c.b));
            }
            Layer::Norm { gamma, beta } => {
                out.push(Rc::clone(gamma));
                out.push(Rc::clone(beta));
            }
            Layer::Residual(inner) => collect_params(inner, out),
            _ => {}
        }
    }
}

/// Conv weights start zero-mean Gaussian (std 0.02), biases zero.
fn conv_param(name: &str, o: usize, i: usize, k: usize, rng: &mut NamedStream) -> ConvSpec {
    ConvSpec {
        w: Param::new(format!("{name}.w"), vec![o, i, k, k], rng.normal_f32_vec(o * i * k * k, 0.02)),
        b: Param::new(format!("{name}.b"), vec![o], vec![0.0; o]),
        stride: 1,
        pad: 0,
        mode: PadMode::Zero,
        output_pad: 0,
    }
}

/// Transposed conv: weight is (O = consumed, I = produced, k, k), so the
/// bias length follows I, not O.
fn convt_param(name: &str, o: usize, i: usize, k: usize, rng: &mut NamedStream) -> ConvSpec {
    ConvSpec {
        w: Param::new(format!("{name}.w"), vec![o, i, k, k], rng.normal_f32_vec(o * i * k * k, 0.02)),
        b: Param::new(format!("{name}.b"), vec![i], vec![0.0; i]),
        stride: 1,
        pad: 0,
        mode: PadMode::Zero,
        output_pad: 0,
    }
}

fn norm_layer(name: &str, c: usize) -> Layer {
    Layer::Norm {
        gamma: Param::new(format!("{name}.gamma"), vec![c], vec![1.0; c]),
        beta: Param::new(format!("{name}.beta"), vec![c], vec![0.0; c]),
    }
}

/// Shared generator/segmenter trunk; only the head differs by role.
fn build_resnet(cfg: GeneratorConfig, role: Role, rng: &mut NamedStream) -> Result<Network> {
    cfg.validate()?;
    if role == Role::Segmenter && cfg.out_channels < 2 {
        return Err(Error::Config("segmenter needs >= 2 output classes".into()));
    }
    let bf = cfg.base_filters;
    let mut layers = Vec::new();

    let mut stem = conv_param("stem.conv", bf, cfg.in_channels, 7, rng);
    stem.pad = 3;
    stem.mode = PadMode::Reflect;
    layers.push(Layer::Conv(stem));
    layers.push(norm_layer("stem.norm", bf));
    layers.push(Layer::Relu);

    let mut ch = bf;
    for d in 1..=2 {
        let mut down = conv_param(&format!("down{d}.conv"), ch * 2, ch, 3, rng);
        down.stride = 2;
        down.pad = 1;
        layers.push(Layer::Conv(down));
        layers.push(norm_layer(&format!("down{d}.norm"), ch * 2));
        layers.push(Layer::Relu);
        ch *= 2;
    }

    for r in 1..=cfg.n_res_blocks {
        let mut inner = Vec::new();
        for half in 1..=2 {
            let mut c = conv_param(&format!("res{r}.conv{half}"), ch, ch, 3, rng);
            c.pad = 1;
            c.mode = PadMode::Reflect;
            inner.push(Layer::Conv(c));
            inner.push(norm_layer(&format!("res{r}.norm{half}"), ch));
            if half == 1 {
                inner.push(Layer::Relu);
            }
        }
        layers.push(Layer::Residual(inner));
    }

    for u in 1..=2 {
        let mut up = convt_param(&format!("up{u}.conv"), ch, ch / 2, 3, rng);
        up.stride = 2;
        up.pad = 1;
        up.output_pad = 1;
        layers.push(Layer::ConvT(up));
        layers.push(norm_layer(&format!("up{u}.norm"), ch / 2));
        layers.push(Layer::Relu);
        ch /= 2;
    }

    let mut head = conv_param("head.conv", cfg.out_channels, ch, 7, rng);
    head.pad = 3;
    head.mode = PadMode::Reflect;
    layers.push(Layer::Conv(head));
    layers.push(match role {
        Role::Generator => Layer::Tanh,
        Role::Segmenter => Layer::LogSoftmax,
        Role::Discriminator => unreachable!("discriminators use their own builder"),
    });

    Ok(Network::new(role, cfg.in_channels, cfg.out_channels, layers))
}

/// Image-to-image generator: 7x7 stem, two stride-2 downsamplers, residual
/// trunk, two stride-2 upsamplers, 7x7 head, tanh output in (-1, 1).
/// Output spatial size equals input spatial size for inputs divisible by 4.
pub fn build_generator(cfg: GeneratorConfig, rng: &mut NamedStream) -> Result<Network> {
    build_resnet(cfg, Role::Generator, rng)
}

/// Same trunk as the generator; the head emits `out_channels` class planes
/// of per-pixel log-probabilities instead of a tanh image.
pub fn build_segmenter(cfg: GeneratorConfig, rng: &mut NamedStream) -> Result<Network> {
    build_resnet(cfg, Role::Segmenter, rng)
}

/// Patch discriminator: `n_layers` stride-2 4x4 convs (channels doubling,
/// no norm on the first), one stride-1 4x4 conv, then a 1-channel 4x4
/// stride-1 head. Raw scores; the loss applies the sigmoid.
pub fn build_discriminator(
    in_channels: usize,
    base_filters: usize,
    n_layers: usize,
    rng: &mut NamedStream,
) -> Result<Network> {
    if n_layers < 1 {
        return Err(Error::Config("discriminator needs n_layers >= 1".into()));
    }
    if base_filters < 4 || in_channels < 1 {
        return Err(Error::Config("base_filters >= 4 and in_channels >= 1 required".into()));
    }
    let mut layers = Vec::new();
    let mut ch = in_channels;
    let mut next = base_filters;
    for l in 1..=n_layers {
        let mut c = conv_param(&format!("layer{l}.conv"), next, ch, 4, rng);
        c.stride = 2;
        c.pad = 1;
        layers.push(Layer::Conv(c));
        if l > 1 {
            layers.push(norm_layer(&format!("layer{l}.norm"), next));
        }
        layers.push(Layer::LeakyRelu(0.2));
        ch = next;
        next = ch * 2;
    }
    let mut pre = conv_param("pre.conv", next, ch, 4, rng);
    pre.pad = 1;
    layers.push(Layer::Conv(pre));
    layers.push(norm_layer("pre.norm", next));
    layers.push(Layer::LeakyRelu(0.2));
    let mut out = conv_param("out.conv", 1, next, 4, rng);
    out.pad = 1;
    layers.push(Layer::Conv(out));
    Ok(Network::new(Role::Discriminator, in_channels, 1, layers))
}

/// Patch-grid extent produced by the discriminator stack on an `h`-pixel
/// axis (mirrors the conv size formula layer by layer).
pub fn discriminator_grid(h: usize, n_layers: usize) -> usize {
    let mut s = h;
    for _ in 0..n_layers {
        s = (s + 2 - 4) / 2 + 1;
    }
    s = s + 2 - 4 + 1; // pre
    s + 2 - 4 + 1 // out
}
