//! The segmentation network: encoder blocks (two 3x3 convs + ReLU + 2x2 max
//! pool), a bottleneck that is either the k-NN graph module or a plain conv
//! block (the controlled baseline), a decoder of 2x2/stride-2 transposed
//! convolutions fused with additive skips, and a 1x1 classification head
//! followed by channel softmax.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{self, GraphConvParams, GridGraph};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Which bottleneck the network runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    UnetGnn,
    UnetBaseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::UnetGnn => "unet_gnn",
            Variant::UnetBaseline => "unet_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet_gnn" => Ok(Variant::UnetGnn),
            "unet_baseline" => Ok(Variant::UnetBaseline),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected unet_gnn or unet_baseline"
            ))),
        }
    }
}

/// Neighbor aggregation mode of the graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Plain neighborhood sum.
    Sum,
    /// Sum divided by the neighbor count.
    Mean,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?}; expected sum or mean"
            ))),
        }
    }
}

/// Graph-bottleneck settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub k: usize,
    pub num_gnn_layers: usize,
    pub d_pe: usize,
    pub learnable_warp: bool,
    pub aggregation: Aggregation,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            k: 8,
            num_gnn_layers: 2,
            d_pe: 32,
            learnable_warp: false,
            aggregation: Aggregation::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub bottleneck: BottleneckConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            depth: 4,
            base_channels: 16,
            bottleneck: BottleneckConfig::default(),
            variant: Variant::UnetGnn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.bottleneck.num_gnn_layers < 1 {
            return Err(Error::Config("num_gnn_layers must be >= 1".into()));
        }
        if self.bottleneck.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.bottleneck.d_pe % 2 != 0 || self.bottleneck.d_pe < 4 {
            return Err(Error::Config("d_pe must be even and >= 4".into()));
        }
        Ok(())
    }

    /// Channels produced by encoder block `l` (1-based).
    pub fn encoder_width(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    /// Channel width of the bottleneck feature map.
    pub fn bottleneck_width(&self) -> usize {
        self.encoder_width(self.depth)
    }

    /// Channels produced by decoder level `l`'s refinement conv.
    pub fn decoder_out_width(&self, l: usize) -> usize {
        self.base_channels << l.saturating_sub(2)
    }

    /// Errors unless `h x w` divides evenly through all pooling stages.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

/// One convolution's learnables plus its fixed geometry.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || ks[2] < 1 || ks[3] < 1 {
            return Err(Error::Shape(format!(
                "conv kernel must be [out,in,kh,kw] with kh,kw >= 1, got {ks:?}"
            )));
        }
        if stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?}, expected [{}]",
                bias.shape(),
                ks[0]
            )));
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn num_scalars(&self) -> u64 {
        (self.kernel.numel() + self.bias.numel()) as u64
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

#[derive(Debug, Clone)]
pub struct DecoderBlockParams {
    pub up: ConvParams,
    pub refine: ConvParams,
}

#[derive(Debug, Clone)]
pub enum BottleneckParams {
    Gnn {
        layers: Vec<GraphConvParams>,
        /// [2, d_pe] linear map from encodings to coordinate offsets.
        projection: Tensor,
    },
    Conv {
        conv1: ConvParams,
        conv2: ConvParams,
    },
}

/// Every learnable tensor of the network. Encoder and decoder shapes are
/// identical across the two variants; only the bottleneck differs.
#[derive(Debug, Clone)]
pub struct UNetGnnParams {
    pub encoder: Vec<EncoderBlockParams>,
    pub bottleneck: BottleneckParams,
    pub decoder: Vec<DecoderBlockParams>,
    pub head: ConvParams,
}

impl UNetGnnParams {
    /// Canonical (name, tensor) traversal. Checkpoints, the optimizer, and
    /// gradient collection all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            let l = i + 1;
            out.push((format!("enc{l}.conv1.kernel"), &b.conv1.kernel));
            out.push((format!("enc{l}.conv1.bias"), &b.conv1.bias));
            out.push((format!("enc{l}.conv2.kernel"), &b.conv2.kernel));
            out.push((format!("enc{l}.conv2.bias"), &b.conv2.bias));
        }
        match &self.bottleneck {
            BottleneckParams::Gnn { layers, projection } => {
                for (i, layer) in layers.iter().enumerate() {
                    let t = i + 1;
                    out.push((format!("bottleneck.gnn{t}.weight"), &layer.weight));
                    out.push((format!("bottleneck.gnn{t}.bias"), &layer.bias));
                }
                out.push(("bottleneck.projection".to_string(), projection));
            }
            BottleneckParams::Conv { conv1, conv2 } => {
                out.push(("bottleneck.conv1.kernel".to_string(), &conv1.kernel));
                out.push(("bottleneck.conv1.bias".to_string(), &conv1.bias));
                out.push(("bottleneck.conv2.kernel".to_string(), &conv2.kernel));
                out.push(("bottleneck.conv2.bias".to_string(), &conv2.bias));
            }
        }
        for (i, b) in self.decoder.iter().enumerate() {
            let l = self.decoder.len() - i;
            out.push((format!("dec{l}.up.kernel"), &b.up.kernel));
            out.push((format!("dec{l}.up.bias"), &b.up.bias));
            out.push((format!("dec{l}.refine.kernel"), &b.refine.kernel));
            out.push((format!("dec{l}.refine.bias"), &b.refine.bias));
        }
        out.push(("head.kernel".to_string(), &self.head.kernel));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let l = i + 1;
            out.push((format!("enc{l}.conv1.kernel"), &mut b.conv1.kernel));
            out.push((format!("enc{l}.conv1.bias"), &mut b.conv1.bias));
            out.push((format!("enc{l}.conv2.kernel"), &mut b.conv2.kernel));
            out.push((format!("enc{l}.conv2.bias"), &mut b.conv2.bias));
        }
        match &mut self.bottleneck {
            BottleneckParams::Gnn { layers, projection } => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    let t = i + 1;
                    out.push((format!("bottleneck.gnn{t}.weight"), &mut layer.weight));
                    out.push((format!("bottleneck.gnn{t}.bias"), &mut layer.bias));
                }
                out.push(("bottleneck.projection".to_string(), projection));
            }
            BottleneckParams::Conv { conv1, conv2 } => {
                out.push(("bottleneck.conv1.kernel".to_string(), &mut conv1.kernel));
                out.push(("bottleneck.conv1.bias".to_string(), &mut conv1.bias));
                out.push(("bottleneck.conv2.kernel".to_string(), &mut conv2.kernel));
                out.push(("bottleneck.conv2.bias".to_string(), &mut conv2.bias));
            }
        }
        let depth = self.decoder.len();
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let l = depth - i;
            out.push((format!("dec{l}.up.kernel"), &mut b.up.kernel));
            out.push((format!("dec{l}.up.bias"), &mut b.up.bias));
            out.push((format!("dec{l}.refine.kernel"), &mut b.refine.kernel));
            out.push((format!("dec{l}.refine.bias"), &mut b.refine.bias));
        }
        out.push(("head.kernel".to_string(), &mut self.head.kernel));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }

    /// Learnable scalar count by enumeration. The warp projection counts
    /// only when it is configured learnable.
    pub fn learnable_scalars(&self, learnable_warp: bool) -> u64 {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| learnable_warp || name != "bottleneck.projection")
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }
}

/// Exact learnable scalar count in closed form.
pub fn count_params(config: &ModelConfig) -> u64 {
    let mut total = 0u64;
    for l in 1..=config.depth {
        let w = config.encoder_width(l) as u64;
        let input = if l == 1 {
            config.in_channels as u64
        } else {
            config.encoder_width(l - 1) as u64
        };
        total += w * input * 9 + w; // conv1
        total += w * w * 9 + w; // conv2
    }
    let c_l = config.bottleneck_width() as u64;
    match config.variant {
        Variant::UnetGnn => {
            total += config.bottleneck.num_gnn_layers as u64 * (c_l * c_l + c_l);
            if config.bottleneck.learnable_warp {
                total += 2 * config.bottleneck.d_pe as u64;
            }
        }
        Variant::UnetBaseline => {
            total += 2 * (c_l * c_l * 9 + c_l);
        }
    }
    for l in (1..=config.depth).rev() {
        let ch = config.encoder_width(l) as u64;
        let out = config.decoder_out_width(l) as u64;
        total += ch * ch * 4 + ch; // transposed conv
        total += out * ch * 9 + out; // refinement conv
    }
    total += config.num_classes as u64 * config.base_channels as u64 + config.num_classes as u64;
    total
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as Real).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<Real> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
        .expect("shape matches")
        .requires_grad(true)
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::zeros(&[n]).requires_grad(true)
}

fn init_conv(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> ConvParams {
    let kernel = fan_in_uniform(rng, &[out_ch, in_ch, kh, kw], in_ch * kh * kw);
    ConvParams::new(kernel, zero_bias(out_ch), stride, padding).expect("valid geometry")
}

/// Draws all parameters from fan-in-scaled uniform distributions with zero
/// biases and a zero warp projection, deterministically per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<UNetGnnParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut encoder = Vec::with_capacity(config.depth);
    for l in 1..=config.depth {
        let w = config.encoder_width(l);
        let input = if l == 1 {
            config.in_channels
        } else {
            config.encoder_width(l - 1)
        };
        encoder.push(EncoderBlockParams {
            conv1: init_conv(&mut rng, w, input, 3, 3, 1, 1),
            conv2: init_conv(&mut rng, w, w, 3, 3, 1, 1),
        });
    }

    let c_l = config.bottleneck_width();
    let bottleneck = match config.variant {
        Variant::UnetGnn => {
            let layers = (0..config.bottleneck.num_gnn_layers)
                .map(|_| {
                    GraphConvParams::new(fan_in_uniform(&mut rng, &[c_l, c_l], c_l), zero_bias(c_l))
                        .expect("square")
                })
                .collect();
            let projection = Tensor::zeros(&[2, config.bottleneck.d_pe])
                .requires_grad(config.bottleneck.learnable_warp);
            BottleneckParams::Gnn { layers, projection }
        }
        Variant::UnetBaseline => BottleneckParams::Conv {
            conv1: init_conv(&mut rng, c_l, c_l, 3, 3, 1, 1),
            conv2: init_conv(&mut rng, c_l, c_l, 3, 3, 1, 1),
        },
    };

    let mut decoder = Vec::with_capacity(config.depth);
    for l in (1..=config.depth).rev() {
        let ch = config.encoder_width(l);
        let out = config.decoder_out_width(l);
        decoder.push(DecoderBlockParams {
            up: init_conv(&mut rng, ch, ch, 2, 2, 2, 0),
            refine: init_conv(&mut rng, out, ch, 3, 3, 1, 1),
        });
    }

    let head = init_conv(&mut rng, config.num_classes, config.base_channels, 1, 1, 1, 0);

    Ok(UNetGnnParams {
        encoder,
        bottleneck,
        decoder,
        head,
    })
}

/// Tape handles for one registered convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: VarId,
    pub bias: VarId,
    pub stride: usize,
    pub padding: usize,
}

pub enum BottleneckVars {
    Gnn(Vec<(VarId, VarId)>),
    Conv(ConvVars, ConvVars),
}

/// All parameters of one forward pass, registered on its tape.
pub struct ParamVars {
    pub encoder: Vec<(ConvVars, ConvVars)>,
    pub bottleneck: BottleneckVars,
    pub decoder: Vec<(ConvVars, ConvVars)>,
    pub head: ConvVars,
    /// Every tensor's VarId in [`UNetGnnParams::named_tensors`] order.
    pub flat: Vec<VarId>,
}

impl UNetGnnParams {
    /// Copies every parameter onto the tape, in canonical order.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut flat = Vec::new();
        let reg_conv = |tape: &mut Tape, flat: &mut Vec<VarId>, c: &ConvParams| {
            let kernel = tape.leaf(&c.kernel);
            let bias = tape.leaf(&c.bias);
            flat.push(kernel);
            flat.push(bias);
            ConvVars {
                kernel,
                bias,
                stride: c.stride,
                padding: c.padding,
            }
        };

        let encoder = self
            .encoder
            .iter()
            .map(|b| {
                (
                    reg_conv(tape, &mut flat, &b.conv1),
                    reg_conv(tape, &mut flat, &b.conv2),
                )
            })
            .collect();
        let bottleneck = match &self.bottleneck {
            BottleneckParams::Gnn { layers, projection } => {
                let vars = layers
                    .iter()
                    .map(|l| {
                        let w = tape.leaf(&l.weight);
                        let b = tape.leaf(&l.bias);
                        flat.push(w);
                        flat.push(b);
                        (w, b)
                    })
                    .collect();
                // The projection shapes the graph, not the tape; k-NN
                // selection carries no gradient. Registered for slot parity.
                flat.push(tape.leaf_detached(projection));
                BottleneckVars::Gnn(vars)
            }
            BottleneckParams::Conv { conv1, conv2 } => BottleneckVars::Conv(
                reg_conv(tape, &mut flat, conv1),
                reg_conv(tape, &mut flat, conv2),
            ),
        };
        let decoder = self
            .decoder
            .iter()
            .map(|b| {
                (
                    reg_conv(tape, &mut flat, &b.up),
                    reg_conv(tape, &mut flat, &b.refine),
                )
            })
            .collect();
        let head = reg_conv(tape, &mut flat, &self.head);

        ParamVars {
            encoder,
            bottleneck,
            decoder,
            head,
            flat,
        }
    }
}

impl ParamVars {
    /// After backward: one gradient buffer per parameter in canonical order,
    /// zeros where no gradient flowed.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Vec<Real>> {
        self.flat
            .iter()
            .map(|&id| match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(id).numel()],
            })
            .collect()
    }
}

fn conv_relu(tape: &mut Tape, x: VarId, conv: &ConvVars) -> Result<VarId> {
    let y = tape.conv2d(x, conv.kernel, conv.bias, conv.stride, conv.padding)?;
    Ok(tape.relu(y))
}

/// Runs all encoder blocks. Returns the bottleneck input and the pre-pool
/// skip maps S_1..S_L in capture order.
pub fn encoder_forward(
    tape: &mut Tape,
    x: VarId,
    vars: &ParamVars,
    config: &ModelConfig,
) -> Result<(VarId, Vec<VarId>)> {
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[0] != config.in_channels {
        return Err(Error::Shape(format!(
            "encoder input must be [{}, H, W], got {shape:?}",
            config.in_channels
        )));
    }
    config.check_spatial(shape[1], shape[2])?;
    let mut h = x;
    let mut skips = Vec::with_capacity(config.depth);
    for (c1, c2) in &vars.encoder {
        h = conv_relu(tape, h, c1)?;
        h = conv_relu(tape, h, c2)?;
        skips.push(h);
        h = tape.maxpool2(h)?;
    }
    Ok((h, skips))
}

/// Runs all decoder levels: upsample, add the matching skip, ReLU, then the
/// refinement conv pair. Consumes skips in reverse capture order.
pub fn decoder_forward(
    tape: &mut Tape,
    bottleneck_out: VarId,
    skips: &[VarId],
    vars: &ParamVars,
    config: &ModelConfig,
) -> Result<VarId> {
    if skips.len() != config.depth {
        return Err(Error::Shape(format!(
            "expected {} skip maps, got {}",
            config.depth,
            skips.len()
        )));
    }
    let mut h = bottleneck_out;
    for (i, (up, refine)) in vars.decoder.iter().enumerate() {
        let skip = skips[config.depth - 1 - i];
        let u = tape.conv_transpose2(h, up.kernel, up.bias)?;
        if tape.shape(u) != tape.shape(skip) {
            return Err(Error::Shape(format!(
                "decoder level {}: upsampled {:?} vs skip {:?}",
                config.depth - i,
                tape.shape(u),
                tape.shape(skip)
            )));
        }
        let fused = tape.add(u, skip)?;
        let fused = tape.relu(fused);
        h = conv_relu(tape, fused, refine)?;
    }
    Ok(h)
}

/// Output handles of a full traced forward pass.
pub struct TraceOutput {
    /// Pre-softmax head output [num_classes, H, W].
    pub logits: VarId,
    /// Per-pixel class distribution [num_classes, H, W].
    pub probs: VarId,
    pub vars: ParamVars,
}

/// A configured network with its parameters. Bottleneck graphs are cached
/// per grid size while the warp projection is frozen and rebuilt on every
/// pass when it is learnable.
pub struct Model {
    config: ModelConfig,
    params: UNetGnnParams,
    frozen_graphs: Mutex<HashMap<(usize, usize), Arc<GridGraph>>>,
}

impl Model {
    pub fn new(config: ModelConfig, params: UNetGnnParams) -> Result<Self> {
        config.validate()?;
        match (&config.variant, &params.bottleneck) {
            (Variant::UnetGnn, BottleneckParams::Gnn { layers, .. }) => {
                if layers.len() != config.bottleneck.num_gnn_layers {
                    return Err(Error::Config(format!(
                        "config wants {} GNN layers, params carry {}",
                        config.bottleneck.num_gnn_layers,
                        layers.len()
                    )));
                }
            }
            (Variant::UnetBaseline, BottleneckParams::Conv { .. }) => {}
            _ => {
                return Err(Error::Config(
                    "params bottleneck kind does not match the config variant".into(),
                ))
            }
        }
        Ok(Model {
            config,
            params,
            frozen_graphs: Mutex::new(HashMap::new()),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &UNetGnnParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut UNetGnnParams {
        &mut self.params
    }

    fn bottleneck_graph(&self, h: usize, w: usize) -> Result<Arc<GridGraph>> {
        let bc = &self.config.bottleneck;
        let projection = match &self.params.bottleneck {
            BottleneckParams::Gnn { projection, .. } => projection,
            BottleneckParams::Conv { .. } => {
                return Err(Error::Config("baseline variant has no graph".into()))
            }
        };
        if bc.learnable_warp {
            return Ok(Arc::new(graph::build_bottleneck_graph(
                h, w, bc.k, bc.d_pe, projection, true,
            )?));
        }
        let mut cache = self.frozen_graphs.lock().expect("graph cache lock");
        if let Some(g) = cache.get(&(h, w)) {
            return Ok(Arc::clone(g));
        }
        let g = Arc::new(graph::build_bottleneck_graph(
            h, w, bc.k, bc.d_pe, projection, false,
        )?);
        cache.insert((h, w), Arc::clone(&g));
        Ok(g)
    }

    /// Full forward pass on a caller-provided tape. The input leaf honors
    /// the tensor's requires_grad flag.
    pub fn trace(&self, tape: &mut Tape, image: &Tensor) -> Result<TraceOutput> {
        let vars = self.params.register(tape);
        let x = tape.leaf(image);
        let (bott_in, skips) = encoder_forward(tape, x, &vars, &self.config)?;
        let bott_shape = tape.shape(bott_in).to_vec();
        let bott_out = match &vars.bottleneck {
            BottleneckVars::Gnn(layers) => {
                let graph = self.bottleneck_graph(bott_shape[1], bott_shape[2])?;
                let mean = self.config.bottleneck.aggregation == Aggregation::Mean;
                graph::bottleneck_forward(tape, bott_in, &graph, layers, mean)?
            }
            BottleneckVars::Conv(c1, c2) => {
                let h = conv_relu(tape, bott_in, c1)?;
                conv_relu(tape, h, c2)?
            }
        };
        let dec = decoder_forward(tape, bott_out, &skips, &vars, &self.config)?;
        let logits = tape.conv2d(dec, vars.head.kernel, vars.head.bias, 1, 0)?;
        let probs = tape.softmax_channels(logits)?;
        Ok(TraceOutput {
            logits,
            probs,
            vars,
        })
    }

    /// Forward-only segmentation: per-pixel class distribution.
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.trace(&mut tape, image)?;
        Ok(tape.value(out.probs).clone())
    }

    /// Forward-only pre-softmax head output.
    pub fn segment_logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.trace(&mut tape, image)?;
        Ok(tape.value(out.logits).clone())
    }
}
