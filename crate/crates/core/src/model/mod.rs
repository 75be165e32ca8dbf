//! The scanpath network: a convolutional feature pyramid, a foveated working
//! memory encoded by a transformer, task queries aggregated against that
//! memory, and per-task fixation heatmap and termination heads.

pub mod checkpoint;
mod embed;
mod probe;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Fixation, ImageRaster};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embed::SpatialEmbeddingTable;
pub use probe::ModelProbe;

/// Stride of the coarsest pyramid level.
pub const PERIPHERAL_STRIDE: usize = 32;
/// Stride of the finest pyramid level.
pub const FOVEAL_STRIDE: usize = 4;
/// Parameter-name prefix of the convolutional pixel encoder.
pub const PIXEL_ENCODER: &str = "pixel_encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(height, width)`; both divisible by 32.
    pub canvas: (usize, usize),
    /// Model width C.
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the transformer feed-forward blocks.
    pub ffn_hidden: usize,
    /// Hidden width of the task-embedding perceptron.
    pub mlp_hidden: usize,
    pub n_tasks: usize,
    /// Largest fixation index the temporal embedding table covers.
    pub max_fixations: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(canvas: (usize, usize), channels: usize, n_tasks: usize) -> Self {
        ModelConfig {
            canvas,
            channels,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 6,
            ffn_hidden: 4 * channels,
            mlp_hidden: 512,
            n_tasks,
            max_fixations: 20,
            freeze_encoder: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 || h % PERIPHERAL_STRIDE != 0 || w % PERIPHERAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "canvas {h}x{w} must be a positive multiple of 32 on both axes"
            )));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of 4",
                self.channels
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} attention heads",
                self.channels, self.heads
            )));
        }
        if self.n_tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        if self.decoder_layers == 0 || self.ffn_hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("decoder depth and hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Peripheral token count `H/32 · W/32`.
    pub fn peripheral_tokens(&self) -> usize {
        (self.canvas.0 / PERIPHERAL_STRIDE) * (self.canvas.1 / PERIPHERAL_STRIDE)
    }

    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.canvas.0 / stride, self.canvas.1 / stride)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_cross: LayerNorm,
    cross: MultiHeadAttention,
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<Conv2d>,
    /// 1×1 lateral projections of encoder stages 5, 4, 3, 2.
    laterals: Vec<Conv2d>,
    /// 3×3 convolutions producing P2, P3, P4.
    smooth: Vec<Conv2d>,
    scale_peripheral: ParamId,
    scale_foveal: ParamId,
    temporal: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    task_mlp: [Linear; 3],
    termination: Linear,
}

/// A model instance: configuration, parameter layout and values.
#[derive(Clone, Debug)]
pub struct Hat<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamStore<T>,
    table: SpatialEmbeddingTable,
    peripheral_spatial: Tensor<T>,
}

/// The four pyramid levels as graph nodes, each `[C×h×w]`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub p1: Var,
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
}

/// Pyramid values, computed outside any training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    pub p1: Tensor<T>,
    pub p2: Tensor<T>,
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
}

/// Per-image graph nodes shared by every fixation step on that image.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// Peripheral tokens `[λp×C]`, embeddings included.
    pub peripheral: Var,
    /// P4 as `[C × h4·w4]`.
    pub p4_flat: Var,
    /// P4 as `[h4·w4 × C]`.
    pub p4_tokens: Var,
}

/// Per-image values reused across generation steps.
#[derive(Clone, Debug)]
pub struct ImageContext<T: Scalar = f32> {
    pub peripheral: Tensor<T>,
    pub p4_flat: Tensor<T>,
    pub p4_tokens: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AggregateOut {
    /// Updated queries `[N×C]`.
    pub queries: Var,
    /// Last decoder layer's cross-attention `[heads×N×λ]`.
    pub cross_attention: Var,
    /// Every attention map of the decoder, in layer order.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StepVars {
    /// Encoder self-attention maps, one per layer.
    pub encoder_attention: Vec<Var>,
    pub aggregate: AggregateOut,
    /// Post-sigmoid heatmaps at stride 4, `[N × h4·w4]`.
    pub heat_low: Var,
    /// `[N×1]`
    pub tau: Var,
}

/// Outputs for all tasks at one step.
#[derive(Clone, Debug)]
pub struct PredictionSet<T: Scalar = f32> {
    /// `[N×H×W]`, values in `[0, 1]`.
    pub heatmaps: Tensor<T>,
    /// `[N]`, values in `(0, 1)`.
    pub tau: Vec<T>,
    /// `[heads×N×λ]`
    pub cross_attention: Tensor<T>,
}

/// Outputs for one task at one step.
#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar = f32> {
    /// `[H×W]`
    pub heatmap: Tensor<T>,
    pub tau: T,
    /// `[heads×N×λ]`
    pub cross_attention: Tensor<T>,
}

impl<T: Scalar> Hat<T> {
    /// Builds a freshly initialized model; initialization is a function of
    /// `config.seed` only.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let rng = &mut rng;

        let stages = (0..5)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { c };
                Conv2d::new(
                    &mut store,
                    &format!("{PIXEL_ENCODER}stage{}", i + 1),
                    c_in,
                    c,
                    3,
                    2,
                    rng,
                )
            })
            .collect();
        let laterals = [5, 4, 3, 2]
            .iter()
            .map(|s| Conv2d::new(&mut store, &format!("pixel_decoder.lateral{s}"), c, c, 1, 1, rng))
            .collect();
        let smooth = [2, 3, 4]
            .iter()
            .map(|p| Conv2d::new(&mut store, &format!("pixel_decoder.p{p}"), c, c, 3, 1, rng))
            .collect();

        let scale_peripheral = store.add_uniform("memory.scale_peripheral", &[c], c, rng);
        let scale_foveal = store.add_uniform("memory.scale_foveal", &[c], c, rng);
        let temporal = store.add_uniform("memory.temporal", &[config.max_fixations + 1, c], c, rng);

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let p = format!("memory_encoder.layer{l}");
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(&mut store, &format!("{p}.norm_attn"), c),
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), c, config.heads, rng)?,
                norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), c),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), c, config.ffn_hidden, rng),
            });
        }
        let encoder_norm = LayerNorm::new(&mut store, "memory_encoder.norm", c);

        let queries = store.add_uniform("aggregator.queries", &[config.n_tasks, c], c, rng);
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let p = format!("aggregator.layer{l}");
            decoder.push(DecoderLayer {
                norm_cross: LayerNorm::new(&mut store, &format!("{p}.norm_cross"), c),
                cross: MultiHeadAttention::new(&mut store, &format!("{p}.cross"), c, config.heads, rng)?,
                norm_self: LayerNorm::new(&mut store, &format!("{p}.norm_self"), c),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self"), c, config.heads, rng)?,
                norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), c),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), c, config.ffn_hidden, rng),
            });
        }
        let decoder_norm = LayerNorm::new(&mut store, "aggregator.norm", c);

        let hid = config.mlp_hidden;
        let task_mlp = [
            Linear::new(&mut store, "head.task_mlp0", c, hid, rng),
            Linear::new(&mut store, "head.task_mlp1", hid, hid, rng),
            Linear::new(&mut store, "head.task_mlp2", hid, c, rng),
        ];
        let termination = Linear::new(&mut store, "head.termination", c, 1, rng);

        if config.freeze_encoder {
            store.set_frozen(PIXEL_ENCODER, true);
        }
        let table = SpatialEmbeddingTable::new(config.canvas.0, config.canvas.1, c)?;
        let (h1, w1) = config.grid(PERIPHERAL_STRIDE);
        let peripheral_spatial = table.grid(h1, w1, PERIPHERAL_STRIDE);
        Ok(Hat {
            config,
            layout: Layout {
                stages,
                laterals,
                smooth,
                scale_peripheral,
                scale_foveal,
                temporal,
                encoder,
                encoder_norm,
                queries,
                decoder,
                decoder_norm,
                task_mlp,
                termination,
            },
            params: store,
            table,
            peripheral_spatial,
        })
    }

    /// A model with the given parameter values, which must match the layout
    /// of `config` in names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_map(&params.to_map())?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self) -> &SpatialEmbeddingTable {
        &self.table
    }

    pub fn cast<U: Scalar>(&self) -> Hat<U> {
        Hat {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            table: self.table.clone(),
            peripheral_spatial: self.peripheral_spatial.cast(),
        }
    }

    pub fn queries_param(&self) -> ParamId {
        self.layout.queries
    }

    pub fn termination_params(&self) -> (ParamId, ParamId) {
        (self.layout.termination.weight, self.layout.termination.bias)
    }

    pub fn temporal_param(&self) -> ParamId {
        self.layout.temporal
    }

    /// The image as a `[3×H×W]` tensor centered on zero. Grayscale input is
    /// replicated to three channels.
    pub fn image_tensor(&self, image: &ImageRaster) -> Result<Tensor<T>> {
        if (image.height, image.width) != self.config.canvas {
            return Err(Error::Config(format!(
                "image is {}x{}, model canvas is {}x{}; resize first",
                image.height, image.width, self.config.canvas.0, self.config.canvas.1
            )));
        }
        let plane = image.height * image.width;
        let data: Vec<T> = (0..3)
            .flat_map(|c| {
                let src = if image.channels == 3 { c } else { 0 };
                image.values[src * plane..(src + 1) * plane]
                    .iter()
                    .map(|&v| T::of(v as f64 - 0.5))
            })
            .collect();
        Tensor::new(vec![3, image.height, image.width], data)
    }

    /// Encoder (5 stride-2 stages) then decoder: `P1 = lateral(E5)`, and for
    /// each finer level `P = conv3x3(relu(up2(P_prev) + lateral(E)))`.
    pub fn pyramid_graph(&self, g: &mut Graph<T>, image: Var) -> Result<PyramidVars> {
        let (_, h, w) = g.value(image).dims3("extract_pyramid")?;
        if h % PERIPHERAL_STRIDE != 0 || w % PERIPHERAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 32; resize first"
            )));
        }
        let p = &self.params;
        let mut feats = Vec::with_capacity(5);
        let mut x = image;
        for stage in &self.layout.stages {
            let y = stage.forward(g, p, x)?;
            x = g.relu(y);
            feats.push(x);
        }
        let l = &self.layout;
        let p1 = l.laterals[0].forward(g, p, feats[4])?;
        let mut levels = vec![p1];
        for (k, e) in [3usize, 2, 1].iter().enumerate() {
            let up = g.upsample(*levels.last().expect("non-empty"), 2)?;
            let lat = l.laterals[k + 1].forward(g, p, feats[*e])?;
            let sum = g.add(up, lat)?;
            let act = g.relu(sum);
            levels.push(l.smooth[k].forward(g, p, act)?);
        }
        Ok(PyramidVars {
            p1: levels[0],
            p2: levels[1],
            p3: levels[2],
            p4: levels[3],
        })
    }

    /// The pyramid of `image` as plain values.
    pub fn extract_pyramid(&self, image: &ImageRaster) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::inference();
        let x = g.constant(self.image_tensor(image)?);
        let pv = self.pyramid_graph(&mut g, x)?;
        Ok(FeaturePyramid {
            p1: g.value(pv.p1).clone(),
            p2: g.value(pv.p2).clone(),
            p3: g.value(pv.p3).clone(),
            p4: g.value(pv.p4).clone(),
        })
    }

    /// Peripheral tokens and P4 views shared by all steps on one image.
    pub fn image_features(&self, g: &mut Graph<T>, p1: Var, p4: Var) -> Result<ImageFeatures> {
        let c = self.config.channels;
        let (_, h1, w1) = g.value(p1).dims3("peripheral_tokens")?;
        let (_, h4, w4) = g.value(p4).dims3("foveal_tokens")?;
        let flat1 = g.reshape(p1, &[c, h1 * w1])?;
        let tokens1 = g.transpose(flat1)?;
        let scale = g.param(&self.params, self.layout.scale_peripheral);
        let tokens1 = g.add_row(tokens1, scale)?;
        let spatial = g.constant(self.peripheral_spatial.clone());
        let peripheral = g.add(tokens1, spatial)?;
        let p4_flat = g.reshape(p4, &[c, h4 * w4])?;
        let p4_tokens = g.transpose(p4_flat)?;
        Ok(ImageFeatures {
            peripheral,
            p4_flat,
            p4_tokens,
        })
    }

    /// P4 cell `(round(y/4), round(x/4))` of a fixation, clamped to the grid.
    pub fn foveal_cell(&self, f: &Fixation) -> Result<(usize, usize)> {
        let (h, w) = self.config.canvas;
        if !(f.x >= 0.0 && f.x < w as f64 && f.y >= 0.0 && f.y < h as f64) {
            return Err(Error::Bounds(format!(
                "fixation {} at ({}, {}) is outside the {h}x{w} canvas",
                f.index, f.x, f.y
            )));
        }
        let (h4, w4) = self.config.grid(FOVEAL_STRIDE);
        let i = ((f.y / FOVEAL_STRIDE as f64).round() as usize).min(h4 - 1);
        let j = ((f.x / FOVEAL_STRIDE as f64).round() as usize).min(w4 - 1);
        Ok((i, j))
    }

    /// Working memory `[λ×C]`: peripheral tokens, then one foveal token per
    /// fixation in order. A foveal token is the P4 feature at the fixation's
    /// cell plus the foveal scale embedding, the spatial embedding of that
    /// cell and the temporal embedding of the fixation's index.
    pub fn working_memory(&self, g: &mut Graph<T>, feats: &ImageFeatures, fixations: &[Fixation]) -> Result<Var> {
        if fixations.is_empty() {
            return Ok(feats.peripheral);
        }
        let (_, w4) = self.config.grid(FOVEAL_STRIDE);
        let c = self.config.channels;
        let mut cells = Vec::with_capacity(fixations.len());
        let mut spatial = Vec::with_capacity(fixations.len() * c);
        let mut order = Vec::with_capacity(fixations.len());
        for f in fixations {
            let (i, j) = self.foveal_cell(f)?;
            if f.index > self.config.max_fixations {
                return Err(Error::Config(format!(
                    "fixation index {} exceeds the temporal embedding table ({} entries)",
                    f.index,
                    self.config.max_fixations + 1
                )));
            }
            cells.push(i * w4 + j);
            spatial.extend(self.table.lookup::<T>(i, j, FOVEAL_STRIDE));
            order.push(f.index);
        }
        let k = fixations.len();
        let tokens = g.gather_rows(feats.p4_tokens, &cells)?;
        let scale = g.param(&self.params, self.layout.scale_foveal);
        let tokens = g.add_row(tokens, scale)?;
        let spatial = g.constant(Tensor::new(vec![k, c], spatial)?);
        let tokens = g.add(tokens, spatial)?;
        let temporal_table = g.param(&self.params, self.layout.temporal);
        let temporal = g.gather_rows(temporal_table, &order)?;
        let foveal = g.add(tokens, temporal)?;
        g.concat_rows(&[feats.peripheral, foveal])
    }

    /// Pre-norm transformer encoder over the memory. Returns the encoded
    /// memory and each layer's self-attention `[heads×λ×λ]`.
    pub fn encode_memory(&self, g: &mut Graph<T>, memory: Var) -> Result<(Var, Vec<Var>)> {
        let p = &self.params;
        let mut x = memory;
        let mut maps = Vec::with_capacity(self.layout.encoder.len());
        for layer in &self.layout.encoder {
            let n = layer.norm_attn.forward(g, p, x)?;
            let (a, w) = layer.attn.forward(g, p, n, n, n)?;
            x = g.add(x, a)?;
            let n = layer.norm_ffn.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, n)?;
            x = g.add(x, f)?;
            maps.push(w);
        }
        Ok((self.layout.encoder_norm.forward(g, p, x)?, maps))
    }

    /// Decoder over the task queries: per layer cross-attention to memory,
    /// then self-attention among queries, then feed-forward (all pre-norm).
    pub fn aggregate(&self, g: &mut Graph<T>, memory: Var) -> Result<AggregateOut> {
        let p = &self.params;
        let mut q = g.param(p, self.layout.queries);
        let mut attention = Vec::with_capacity(2 * self.layout.decoder.len());
        let mut cross_attention = None;
        for layer in &self.layout.decoder {
            let n = layer.norm_cross.forward(g, p, q)?;
            let (a, w) = layer.cross.forward(g, p, n, memory, memory)?;
            q = g.add(q, a)?;
            attention.push(w);
            cross_attention = Some(w);
            let n = layer.norm_self.forward(g, p, q)?;
            let (a, w) = layer.self_attn.forward(g, p, n, n, n)?;
            q = g.add(q, a)?;
            attention.push(w);
            let n = layer.norm_ffn.forward(g, p, q)?;
            let f = layer.ffn.forward(g, p, n)?;
            q = g.add(q, f)?;
        }
        Ok(AggregateOut {
            queries: self.layout.decoder_norm.forward(g, p, q)?,
            cross_attention: cross_attention.expect("at least one decoder layer"),
            attention,
        })
    }

    /// Task embeddings `E = MLP(q)`, heatmaps `sigmoid(E · P4)` at stride 4
    /// as `[N × h4·w4]`, and terminations `sigmoid(q·W + b)` as `[N×1]`.
    pub fn predict(&self, g: &mut Graph<T>, queries: Var, p4_flat: Var) -> Result<(Var, Var)> {
        let p = &self.params;
        let [m0, m1, m2] = &self.layout.task_mlp;
        let h = m0.forward(g, p, queries)?;
        let h = g.relu(h);
        let h = m1.forward(g, p, h)?;
        let h = g.relu(h);
        let emb = m2.forward(g, p, h)?;
        let logits = g.matmul(emb, p4_flat)?;
        let heat = g.sigmoid(logits);
        let t = self.layout.termination.forward(g, p, queries)?;
        let tau = g.sigmoid(t);
        Ok((heat, tau))
    }

    /// Memory construction through prediction for one fixation history.
    pub fn step(&self, g: &mut Graph<T>, feats: &ImageFeatures, fixations: &[Fixation]) -> Result<StepVars> {
        let memory = self.working_memory(g, feats, fixations)?;
        let (encoded, encoder_attention) = self.encode_memory(g, memory)?;
        let aggregate = self.aggregate(g, encoded)?;
        let (heat_low, tau) = self.predict(g, aggregate.queries, feats.p4_flat)?;
        Ok(StepVars {
            encoder_attention,
            aggregate,
            heat_low,
            tau,
        })
    }

    /// Task `t`'s stride-4 heatmap bilinearly upsampled to `[1×H×W]`.
    pub fn task_heatmap(&self, g: &mut Graph<T>, heat_low: Var, task: usize) -> Result<Var> {
        let (h4, w4) = self.config.grid(FOVEAL_STRIDE);
        let row = g.slice_rows(heat_low, task, 1)?;
        let map = g.reshape(row, &[1, h4, w4])?;
        g.upsample(map, FOVEAL_STRIDE)
    }

    /// Task `t`'s termination probability as a `[1×1]` node.
    pub fn task_tau(&self, g: &mut Graph<T>, tau: Var, task: usize) -> Result<Var> {
        g.slice_rows(tau, task, 1)
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.config.n_tasks {
            return Err(Error::Argument(format!(
                "task id {task} is out of range for {} tasks",
                self.config.n_tasks
            )));
        }
        Ok(())
    }

    /// Values reused across generation steps on one image.
    pub fn image_context(&self, image: &ImageRaster) -> Result<ImageContext<T>> {
        let pyramid = self.extract_pyramid(image)?;
        self.context_from_pyramid(&pyramid)
    }

    pub fn context_from_pyramid(&self, pyramid: &FeaturePyramid<T>) -> Result<ImageContext<T>> {
        let mut g = Graph::inference();
        let p1 = g.constant(pyramid.p1.clone());
        let p4 = g.constant(pyramid.p4.clone());
        let f = self.image_features(&mut g, p1, p4)?;
        Ok(ImageContext {
            peripheral: g.value(f.peripheral).clone(),
            p4_flat: g.value(f.p4_flat).clone(),
            p4_tokens: g.value(f.p4_tokens).clone(),
        })
    }

    /// All-task outputs for a history, reusing a precomputed image context.
    pub fn predict_all_with(&self, ctx: &ImageContext<T>, fixations: &[Fixation]) -> Result<PredictionSet<T>> {
        let mut g = Graph::inference();
        let feats = ImageFeatures {
            peripheral: g.constant(ctx.peripheral.clone()),
            p4_flat: g.constant(ctx.p4_flat.clone()),
            p4_tokens: g.constant(ctx.p4_tokens.clone()),
        };
        self.collect(&mut g, &feats, fixations)
    }

    /// All-task outputs for a history, computing everything from the image.
    pub fn predict_all(&self, image: &ImageRaster, fixations: &[Fixation]) -> Result<PredictionSet<T>> {
        let mut g = Graph::inference();
        let x = g.constant(self.image_tensor(image)?);
        let pv = self.pyramid_graph(&mut g, x)?;
        let feats = self.image_features(&mut g, pv.p1, pv.p4)?;
        self.collect(&mut g, &feats, fixations)
    }

    fn collect(&self, g: &mut Graph<T>, feats: &ImageFeatures, fixations: &[Fixation]) -> Result<PredictionSet<T>> {
        let out = self.step(g, feats, fixations)?;
        let (h4, w4) = self.config.grid(FOVEAL_STRIDE);
        let n = self.config.n_tasks;
        let maps = g.reshape(out.heat_low, &[n, h4, w4])?;
        let up = g.upsample(maps, FOVEAL_STRIDE)?;
        Ok(PredictionSet {
            heatmaps: g.value(up).clone(),
            tau: g.value(out.tau).data().to_vec(),
            cross_attention: g.value(out.aggregate.cross_attention).clone(),
        })
    }

    /// Single-task outputs, recomputing the whole pipeline.
    pub fn forward(&self, image: &ImageRaster, fixations: &[Fixation], task: usize) -> Result<Prediction<T>> {
        self.check_task(task)?;
        let set = self.predict_all(image, fixations)?;
        Ok(select_task(set, task, self.config.canvas))
    }

    /// Single-task outputs from a precomputed image context.
    pub fn forward_with(&self, ctx: &ImageContext<T>, fixations: &[Fixation], task: usize) -> Result<Prediction<T>> {
        self.check_task(task)?;
        let set = self.predict_all_with(ctx, fixations)?;
        Ok(select_task(set, task, self.config.canvas))
    }
}

fn select_task<T: Scalar>(set: PredictionSet<T>, task: usize, canvas: (usize, usize)) -> Prediction<T> {
    let plane = canvas.0 * canvas.1;
    let heatmap = Tensor::new(
        vec![canvas.0, canvas.1],
        set.heatmaps.data()[task * plane..(task + 1) * plane].to_vec(),
    )
    .expect("task slice");
    Prediction {
        heatmap,
        tau: set.tau[task],
        cross_attention: set.cross_attention,
    }
}
