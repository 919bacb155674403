//! Dual-stream regressor: a ConvNeXt-style stream over the raw image and a
//! Swin-style stream over the representation stack, fused stage by stage,
//! pooled, concatenated and mapped to a score on the 1–5 scale.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ConvNextStream, SwinGeometry, SwinStream, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Checkpoint, Conv2d, GlobalAvgPool, Init, Layer, Linear, MaxPool, Mode, Module, Param, Real, Relu,
    Sequential, Tensor,
};
use crate::patchnet::Preset;
use crate::representations::{RepresentationStack, STACK_CHANNELS, STACK_SIZE};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;
/// Initial bias of the final linear layer, the middle of the score range.
const HEAD_BIAS_INIT: f64 = 3.0;

/// Which stack channels reach the attention stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSubset {
    pub fft: bool,
    pub pattern: bool,
    pub gradient: bool,
}

impl ChannelSubset {
    pub const ALL: ChannelSubset = ChannelSubset { fft: true, pattern: true, gradient: true };

    pub fn mask(&self) -> [bool; 3] {
        [self.fft, self.pattern, self.gradient]
    }
}

/// Architectural variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    Full,
    ConvnextOnly,
    SwinOnly,
    NoFusionBlocks,
    NoPostprocessing,
    ChannelsSubset(ChannelSubset),
}

/// The six variants run by default in an ablation sweep.
pub const ABLATION_VARIANTS: [&str; 6] =
    ["full", "convnext_only", "swin_only", "no_fusion_blocks", "no_postprocessing", "only_fft"];

/// Single-representation variants beyond the default sweep.
pub const EXTRA_SUBSET_VARIANTS: [&str; 2] = ["only_pattern", "only_gradient"];

const CHANNEL_NAMES: [&str; 3] = ["fft", "pattern", "gradient"];

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Full => f.write_str("full"),
            Ablation::ConvnextOnly => f.write_str("convnext_only"),
            Ablation::SwinOnly => f.write_str("swin_only"),
            Ablation::NoFusionBlocks => f.write_str("no_fusion_blocks"),
            Ablation::NoPostprocessing => f.write_str("no_postprocessing"),
            Ablation::ChannelsSubset(s) => {
                let on: Vec<&str> =
                    CHANNEL_NAMES.iter().zip(s.mask()).filter(|(_, m)| *m).map(|(n, _)| *n).collect();
                if on.len() == 1 {
                    write!(f, "only_{}", on[0])
                } else {
                    write!(f, "channels:{}", on.join("+"))
                }
            }
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || {
            Error::Config(format!(
                "unknown ablation variant {s:?}; valid names: {}, {}, or channels:<fft|pattern|gradient>[+...]",
                ABLATION_VARIANTS.join(", "),
                EXTRA_SUBSET_VARIANTS.join(", ")
            ))
        };
        let subset = |names: &[&str]| -> Result<Ablation> {
            let mut sub = ChannelSubset { fft: false, pattern: false, gradient: false };
            for n in names {
                match *n {
                    "fft" => sub.fft = true,
                    "pattern" => sub.pattern = true,
                    "gradient" => sub.gradient = true,
                    _ => return Err(unknown()),
                }
            }
            Ok(if sub == ChannelSubset::ALL { Ablation::Full } else { Ablation::ChannelsSubset(sub) })
        };
        match s {
            "full" => Ok(Ablation::Full),
            "convnext_only" => Ok(Ablation::ConvnextOnly),
            "swin_only" => Ok(Ablation::SwinOnly),
            "no_fusion_blocks" => Ok(Ablation::NoFusionBlocks),
            "no_postprocessing" => Ok(Ablation::NoPostprocessing),
            _ => {
                if let Some(one) = s.strip_prefix("only_") {
                    subset(&[one])
                } else if let Some(list) = s.strip_prefix("channels:") {
                    subset(&list.split('+').collect::<Vec<_>>())
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

impl Ablation {
    pub fn uses_convnext(&self) -> bool {
        !matches!(self, Ablation::SwinOnly)
    }

    pub fn uses_swin(&self) -> bool {
        !matches!(self, Ablation::ConvnextOnly)
    }

    pub fn fused_stages(&self) -> std::ops::Range<usize> {
        match self {
            Ablation::NoFusionBlocks => NUM_STAGES - 1..NUM_STAGES,
            _ => 0..NUM_STAGES,
        }
    }

    pub fn postprocess(&self) -> bool {
        !matches!(self, Ablation::NoPostprocessing)
    }

    pub fn channel_mask(&self) -> [bool; 3] {
        match self {
            Ablation::ChannelsSubset(s) => s.mask(),
            _ => [true; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DSarcNetConfig {
    pub preset: Preset,
    /// Stage widths shared by both streams.
    pub channels: [usize; NUM_STAGES],
    pub convnext_depths: [usize; NUM_STAGES],
    pub swin_depths: [usize; NUM_STAGES],
    pub window: usize,
    pub heads: [usize; NUM_STAGES],
    /// Hidden widths of the head; a final width-1 layer is appended.
    pub head_widths: Vec<usize>,
    pub layer_scale: f64,
    pub input_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl DSarcNetConfig {
    pub fn preset(preset: Preset) -> Self {
        let (channels, da, db, heads) = match preset {
            Preset::Toy => ([24, 48, 96, 192], [1, 1, 2, 1], [1, 1, 2, 1], [2, 2, 4, 4]),
            Preset::Small => ([48, 96, 192, 384], [2, 2, 6, 2], [2, 2, 6, 2], [3, 6, 12, 24]),
            Preset::Standard => ([96, 192, 384, 768], [3, 3, 9, 3], [2, 2, 6, 2], [3, 6, 12, 24]),
        };
        DSarcNetConfig {
            preset,
            channels,
            convnext_depths: da,
            swin_depths: db,
            window: 7,
            heads,
            head_widths: vec![512, 64],
            layer_scale: 1e-6,
            input_size: STACK_SIZE,
            seed: 1,
            ablation: Ablation::Full,
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    fn swin_geometry(&self) -> SwinGeometry {
        SwinGeometry { input_size: self.input_size, window: self.window, heads: self.heads }
    }

    /// Stage output shapes `(height, width, channels)` of a stream whose
    /// first stage downsamples by 4 and each later stage by 2.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); NUM_STAGES] {
        std::array::from_fn(|s| {
            let r = self.input_size / (4 << s);
            (r, r, self.channels[s])
        })
    }

    pub fn validate(&self) -> Result<()> {
        let depths_ok = |d: &[usize; NUM_STAGES]| d.iter().all(|&v| v >= 1);
        if !depths_ok(&self.convnext_depths) || !depths_ok(&self.swin_depths) {
            return Err(Error::Config("stage depths must be ≥ 1".into()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage channels must be positive and increasing, got {:?}", self.channels)));
        }
        if self.head_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if !(self.layer_scale > 0.0 && self.layer_scale.is_finite()) {
            return Err(Error::Config("layer scale must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input size must be a positive multiple of 32, got {}", self.input_size)));
        }
        if self.ablation.uses_swin() {
            self.swin_geometry().validate(&self.channels).map_err(Error::Config)?;
        }
        Ok(())
    }
}

impl Default for DSarcNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Returns `config` rewritten for the named ablation variant.
pub fn configure_ablation(config: &DSarcNetConfig, variant: &str) -> Result<DSarcNetConfig> {
    let ablation: Ablation = variant.parse()?;
    Ok(DSarcNetConfig { ablation, ..config.clone() })
}

/// A predicted score before and after clamping to the 1–5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub raw: f64,
    pub clamped: f64,
}

impl ScorePrediction {
    pub fn from_raw(raw: f64) -> Self {
        ScorePrediction { raw, clamped: raw.clamp(SCORE_MIN, SCORE_MAX) }
    }
}

/// Per-stage fusion: `maxpool(relu(bn(conv1x1(conv3x3(a + b)))))`, or
/// `maxpool(a + b)` without post-processing. Pooling brings every stage to
/// the last stage's spatial size.
pub struct FusionBlock<T> {
    pub(crate) post: Option<Sequential<T>>,
    pool: MaxPool<T>,
    inputs: usize,
}

impl<T: Real> FusionBlock<T> {
    pub fn new(name: &str, channels: usize, pool: usize, postprocess: bool, init: &mut Init) -> Self {
        let post = postprocess.then(|| {
            Sequential::new()
                .with(Conv2d::new(&format!("{name}.conv3x3"), channels, channels, 3, 1, 1, init))
                .with(Conv2d::new(&format!("{name}.conv1x1"), channels, channels, 1, 1, 0, init))
                .with(BatchNorm::new(&format!("{name}.bn"), channels))
                .with(Relu::new())
        });
        FusionBlock { post, pool: MaxPool::new(pool), inputs: 0 }
    }

    pub fn forward(&mut self, a: Option<Tensor<T>>, b: Option<Tensor<T>>, mode: Mode) -> Result<Tensor<T>> {
        let sum = match (a, b) {
            (Some(mut a), Some(b)) => {
                if a.shape() != b.shape() {
                    return Err(Error::Shape(format!("fusion operands differ: {:?} vs {:?}", a.shape(), b.shape())));
                }
                a.add_assign(&b);
                self.inputs = 2;
                a
            }
            (Some(x), None) | (None, Some(x)) => {
                self.inputs = 1;
                x
            }
            (None, None) => return Err(Error::Input("fusion block received no operands".into())),
        };
        let h = match &mut self.post {
            Some(p) => p.forward(sum, mode),
            None => sum,
        };
        Ok(self.pool.forward(h, mode))
    }

    /// Gradient with respect to the sum `a + b`, which is also the gradient
    /// for each operand.
    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let g = self.pool.backward(dy);
        match &mut self.post {
            Some(p) => p.backward(g),
            None => g,
        }
    }
}

impl<T: Real> Module<T> for FusionBlock<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(p) = &mut self.post {
            p.visit(f);
        }
    }
}

pub struct DSarcNet<T: Real = f32> {
    config: DSarcNetConfig,
    stream_a: Option<ConvNextStream<T>>,
    stream_b: Option<SwinStream<T>>,
    /// One block per fused stage, in stage order.
    fusion: Vec<(usize, FusionBlock<T>)>,
    pools: Vec<GlobalAvgPool>,
    head: Sequential<T>,
}

impl<T: Real> Module<T> for DSarcNet<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(a) = &mut self.stream_a {
            a.visit(f);
        }
        if let Some(b) = &mut self.stream_b {
            b.visit(f);
        }
        for (_, fb) in &mut self.fusion {
            fb.visit(f);
        }
        self.head.visit(f);
    }
}

pub fn build_convnext_stream<T: Real>(config: &DSarcNetConfig, init: &mut Init) -> ConvNextStream<T> {
    ConvNextStream::new("convnext", 3, config.channels, config.convnext_depths, config.layer_scale, init)
}

pub fn build_swin_stream<T: Real>(config: &DSarcNetConfig, init: &mut Init) -> Result<SwinStream<T>> {
    let geometry = config.swin_geometry();
    geometry.validate(&config.channels).map_err(Error::Config)?;
    Ok(SwinStream::new("swin", 3, config.channels, config.swin_depths, geometry, init))
}

pub fn build_dsarcnet<T: Real>(config: &DSarcNetConfig) -> Result<DSarcNet<T>> {
    config.validate()?;
    let mut init = Init::new(config.seed);
    let ab = config.ablation;
    let stream_a = ab.uses_convnext().then(|| build_convnext_stream(config, &mut init));
    let stream_b = if ab.uses_swin() { Some(build_swin_stream(config, &mut init)?) } else { None };
    // both streams share the stride schedule, so equal widths give equal shapes
    if let (Some(a), Some(b)) = (&stream_a, &stream_b) {
        if a.stage_channels() != b.stage_channels() {
            return Err(Error::Config("stream stage widths differ".into()));
        }
    }
    let shapes = config.stage_shapes();
    let final_res = shapes[NUM_STAGES - 1].0;
    let fusion: Vec<_> = ab
        .fused_stages()
        .map(|s| {
            let pool = shapes[s].0 / final_res;
            (s, FusionBlock::new(&format!("fusion{s}"), config.channels[s], pool, ab.postprocess(), &mut init))
        })
        .collect();
    let pools = fusion.iter().map(|_| GlobalAvgPool::new()).collect();
    let concat: usize = fusion.iter().map(|(s, _)| config.channels[*s]).sum();

    let mut head = Sequential::new();
    let mut width = concat;
    for (i, &w) in config.head_widths.iter().enumerate() {
        head.push(Linear::new(&format!("head.fc{i}"), width, w, true, &mut init));
        head.push(BatchNorm::new(&format!("head.bn{i}"), w));
        head.push(Relu::new());
        width = w;
    }
    let mut out = Linear::new("head.out", width, 1, true, &mut init);
    if let Some(b) = &mut out.bias {
        b.value = vec![T::cast(HEAD_BIAS_INIT)];
    }
    head.push(out);
    Ok(DSarcNet { config: config.clone(), stream_a, stream_b, fusion, pools, head })
}

/// Packs single-channel images `(224, 224)` into `(N, 224, 224, 3)` by replication.
pub fn raw_batch<T: Real>(images: &[&Array2<f32>]) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |a| a.dim());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        for &v in img.iter() {
            let v = T::cast(v as f64);
            data.extend_from_slice(&[v, v, v]);
        }
    }
    Tensor::from_vec(&[images.len(), h, w, 3], data)
}

/// Packs `(3, H, W)` stacks into `(N, H, W, 3)`.
pub fn stack_batch<T: Real>(stacks: &[&Array3<f32>]) -> Tensor<T> {
    let (c, h, w) = stacks.first().map_or((3, 0, 0), |a| a.dim());
    let mut data = Vec::with_capacity(stacks.len() * h * w * c);
    for s in stacks {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(T::cast(s[(ch, y, x)] as f64));
                }
            }
        }
    }
    Tensor::from_vec(&[stacks.len(), h, w, c], data)
}

impl<T: Real> DSarcNet<T> {
    pub fn config(&self) -> &DSarcNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>, what: &str) -> Result<()> {
        let s = self.config.input_size;
        match x.shape() {
            [_, h, w, 3] if *h == s && *w == s => {}
            other => return Err(Error::Shape(format!("{what} batch must be (N, {s}, {s}, 3), got {other:?}"))),
        }
        if !x.is_finite() {
            return Err(Error::Input(format!("{what} input contains NaN or infinite values")));
        }
        Ok(())
    }

    /// Stage outputs of each present stream.
    #[allow(clippy::type_complexity)]
    pub fn stage_features(
        &mut self,
        raw: Tensor<T>,
        stack: Tensor<T>,
        mode: Mode,
    ) -> Result<(Option<Vec<Tensor<T>>>, Option<Vec<Tensor<T>>>)> {
        self.check_input(&raw, "raw image")?;
        self.check_input(&stack, "representation stack")?;
        if raw.shape()[0] != stack.shape()[0] {
            return Err(Error::Shape("raw and stack batches differ in size".into()));
        }
        let fa = self.stream_a.as_mut().map(|a| a.forward_stages(raw, mode));
        let fb = match &mut self.stream_b {
            Some(b) => {
                let mut stack = stack;
                let mask = self.config.ablation.channel_mask();
                if mask.contains(&false) {
                    for px in stack.data_mut().chunks_exact_mut(3) {
                        for (v, keep) in px.iter_mut().zip(mask) {
                            if !keep {
                                *v = T::zero();
                            }
                        }
                    }
                }
                Some(b.forward_stages(stack, mode))
            }
            None => None,
        };
        Ok((fa, fb))
    }

    /// Raw (unclamped) scores, `(N, 1)`.
    pub fn forward(&mut self, raw: Tensor<T>, stack: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let n = raw.shape().first().copied().unwrap_or(0);
        let (fa, fb) = self.stage_features(raw, stack, mode)?;
        let mut fa = fa.map(|v| v.into_iter().map(Some).collect::<Vec<_>>());
        let mut fb = fb.map(|v| v.into_iter().map(Some).collect::<Vec<_>>());
        let mut pooled = Vec::with_capacity(self.fusion.len());
        for ((s, block), gap) in self.fusion.iter_mut().zip(&mut self.pools) {
            let a = fa.as_mut().and_then(|v| v[*s].take());
            let b = fb.as_mut().and_then(|v| v[*s].take());
            let fused = block.forward(a, b, mode)?;
            pooled.push(gap.forward(fused, mode));
        }
        let width: usize = pooled.iter().map(|p| p.last_dim()).sum();
        let mut concat = Vec::with_capacity(n * width);
        for i in 0..n {
            for p in &pooled {
                let c = p.last_dim();
                concat.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
            }
        }
        let y = self.head.forward(Tensor::from_vec(&[n, width], concat), mode);
        if !y.is_finite() {
            return Err(Error::Diverged("model produced a non-finite score".into()));
        }
        Ok(y)
    }

    /// Backpropagates `d loss / d raw score` (`(N, 1)`) through the whole model.
    pub fn backward(&mut self, dy: Tensor<T>) {
        let g = self.head.backward(dy);
        let (n, width) = g.dims2();
        let mut grads_a: Vec<Option<Tensor<T>>> = vec![None; NUM_STAGES];
        let mut grads_b: Vec<Option<Tensor<T>>> = vec![None; NUM_STAGES];
        let mut offset = 0;
        for ((s, block), gap) in self.fusion.iter_mut().zip(&mut self.pools) {
            let c = self.config.channels[*s];
            let mut part = Vec::with_capacity(n * c);
            for i in 0..n {
                part.extend_from_slice(&g.data()[i * width + offset..i * width + offset + c]);
            }
            offset += c;
            let dfused = gap.backward(Tensor::from_vec(&[n, c], part));
            let dsum = block.backward(dfused);
            match (self.stream_a.is_some(), self.stream_b.is_some()) {
                (true, true) => {
                    grads_a[*s] = Some(dsum.clone());
                    grads_b[*s] = Some(dsum);
                }
                (true, false) => grads_a[*s] = Some(dsum),
                (false, _) => grads_b[*s] = Some(dsum),
            }
        }
        if let Some(a) = &mut self.stream_a {
            a.backward_stages(grads_a);
        }
        if let Some(b) = &mut self.stream_b {
            b.backward_stages(grads_b);
        }
    }

    /// Clamped predictions in evaluation mode.
    pub fn predict(&mut self, raw: Tensor<T>, stack: Tensor<T>) -> Result<Vec<ScorePrediction>> {
        let y = self.forward(raw, stack, Mode::Eval)?;
        Ok(y.data().iter().map(|v| ScorePrediction::from_raw(Real::to_f64(*v))).collect())
    }
}

/// Model input for one cell.
#[derive(Debug, Clone)]
pub struct CellInput {
    pub id: String,
    /// `(224, 224)` min-max normalized raw image.
    pub raw: Array2<f32>,
    /// `(3, 224, 224)` representation stack.
    pub stack: Array3<f32>,
}

impl CellInput {
    pub fn new(id: impl Into<String>, raw: Array2<f32>, stack: &RepresentationStack) -> Self {
        CellInput { id: id.into(), raw, stack: stack.channels.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let s = STACK_SIZE;
        if self.raw.dim() != (s, s) || self.stack.dim() != (STACK_CHANNELS.len(), s, s) {
            return Err(Error::Shape(format!(
                "cell {}: expected raw ({s}, {s}) and stack (3, {s}, {s}), got {:?} and {:?}",
                self.id,
                self.raw.dim(),
                self.stack.dim()
            )));
        }
        Ok(())
    }
}

/// Packs cells into `(raw, stack)` batches.
pub fn batch_inputs<T: Real>(cells: &[&CellInput]) -> (Tensor<T>, Tensor<T>) {
    let raws: Vec<_> = cells.iter().map(|c| &c.raw).collect();
    let stacks: Vec<_> = cells.iter().map(|c| &c.stack).collect();
    (raw_batch(&raws), stack_batch(&stacks))
}

impl DSarcNet<f32> {
    pub fn predict_cells(&mut self, cells: &[CellInput]) -> Result<Vec<ScorePrediction>> {
        let mut out = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(16) {
            let refs: Vec<_> = chunk.iter().collect();
            let (raw, stack) = batch_inputs(&refs);
            out.extend(self.predict(raw, stack)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&mut self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "dsarcnet",
            "config": self.config,
            "ablation": self.config.ablation.to_string(),
            "seed": self.config.seed,
            "extra": extra,
        });
        Checkpoint::capture(meta, self)
    }

    pub fn save(&mut self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "dsarcnet" {
            return Err(Error::Checkpoint("not a scoring-model checkpoint".into()));
        }
        let config: DSarcNetConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = build_dsarcnet(&config)?;
        ck.restore(&mut model)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
