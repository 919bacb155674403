//! Four-stage hierarchical backbones shared by the patch classifier and the
//! dual-stream regressor. Both emit feature maps at strides 4, 8, 16 and 32.

use crate::nn::{
    Conv2d, DepthwiseConv2d, Gelu, Init, Layer, LayerNorm, LayerScale, Linear, Mode, Module, Param, PatchGather,
    Real, Residual, Sequential, Tensor, WindowAttention,
};

pub const NUM_STAGES: usize = 4;
const LN_EPS: f64 = 1e-6;
const SWIN_LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

/// A backbone returning one feature map per stage.
pub trait Backbone<T: Real>: Module<T> + Send {
    fn forward_stages(&mut self, x: Tensor<T>, mode: Mode) -> Vec<Tensor<T>>;

    /// Takes the loss gradient with respect to each stage output (`None`
    /// when a stage output was not consumed) and returns the input gradient.
    fn backward_stages(&mut self, grads: Vec<Option<Tensor<T>>>) -> Tensor<T>;

    fn stage_channels(&self) -> [usize; NUM_STAGES];
}

fn chain_stages<T: Real>(x: Tensor<T>, mode: Mode, stages: &mut [Sequential<T>]) -> Vec<Tensor<T>> {
    let mut outs = Vec::with_capacity(stages.len());
    let mut h = x;
    for s in stages.iter_mut() {
        h = s.forward(h, mode);
        outs.push(h.clone());
    }
    outs
}

fn unchain_stages<T: Real>(grads: Vec<Option<Tensor<T>>>, stages: &mut [Sequential<T>]) -> Tensor<T> {
    assert_eq!(grads.len(), stages.len(), "one gradient slot per stage");
    let mut carry: Option<Tensor<T>> = None;
    for (s, g) in stages.iter_mut().zip(grads).rev() {
        let total = match (carry.take(), g) {
            (Some(mut c), Some(g)) => {
                c.add_assign(&g);
                c
            }
            (Some(c), None) => c,
            (None, Some(g)) => g,
            (None, None) => continue,
        };
        carry = Some(s.backward(total));
    }
    carry.expect("at least one stage gradient")
}

fn visit_stages<T: Real>(stages: &mut [Sequential<T>], f: &mut dyn FnMut(&mut Param<T>)) {
    for s in stages {
        s.visit(f);
    }
}

/// Depthwise 7×7, LayerNorm, inverted-bottleneck MLP and LayerScale inside a residual.
pub fn convnext_block<T: Real>(name: &str, dim: usize, layer_scale: f64, init: &mut Init) -> Residual<T> {
    Residual::new(
        Sequential::new()
            .with(DepthwiseConv2d::new(&format!("{name}.dwconv"), dim, 7, init))
            .with(LayerNorm::new(&format!("{name}.norm"), dim, LN_EPS))
            .with(Linear::new(&format!("{name}.pwconv1"), dim, MLP_RATIO * dim, true, init))
            .with(Gelu::new())
            .with(Linear::new(&format!("{name}.pwconv2"), MLP_RATIO * dim, dim, true, init))
            .with(LayerScale::new(&format!("{name}.gamma"), dim, layer_scale)),
    )
}

/// ConvNeXt-style stream: 4×4/4 stem, then per stage a 2×2/2 downsample
/// (except the first) followed by `depths[i]` blocks.
pub struct ConvNextStream<T> {
    stages: Vec<Sequential<T>>,
    channels: [usize; NUM_STAGES],
}

impl<T: Real> ConvNextStream<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        channels: [usize; NUM_STAGES],
        depths: [usize; NUM_STAGES],
        layer_scale: f64,
        init: &mut Init,
    ) -> Self {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let mut s = Sequential::new();
            if i == 0 {
                s.push(Conv2d::new(&format!("{name}.stem.conv"), in_channels, channels[0], 4, 4, 0, init));
                s.push(LayerNorm::new(&format!("{name}.stem.norm"), channels[0], LN_EPS));
            } else {
                s.push(LayerNorm::new(&format!("{name}.down{i}.norm"), channels[i - 1], LN_EPS));
                s.push(Conv2d::new(&format!("{name}.down{i}.conv"), channels[i - 1], channels[i], 2, 2, 0, init));
            }
            for b in 0..depths[i] {
                s.push(convnext_block(&format!("{name}.stage{i}.block{b}"), channels[i], layer_scale, init));
            }
            stages.push(s);
        }
        ConvNextStream { stages, channels }
    }
}

impl<T: Real> Module<T> for ConvNextStream<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        visit_stages(&mut self.stages, f);
    }
}

impl<T: Real> Backbone<T> for ConvNextStream<T> {
    fn forward_stages(&mut self, x: Tensor<T>, mode: Mode) -> Vec<Tensor<T>> {
        chain_stages(x, mode, &mut self.stages)
    }

    fn backward_stages(&mut self, grads: Vec<Option<Tensor<T>>>) -> Tensor<T> {
        unchain_stages(grads, &mut self.stages)
    }

    fn stage_channels(&self) -> [usize; NUM_STAGES] {
        self.channels
    }
}

/// Geometry of a windowed-attention stream.
#[derive(Debug, Clone, Copy)]
pub struct SwinGeometry {
    pub input_size: usize,
    pub window: usize,
    pub heads: [usize; NUM_STAGES],
}

impl SwinGeometry {
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_size / (4 << stage)
    }

    /// Checks that every stage map is tiled by its attention windows and
    /// every stage width splits evenly into heads.
    pub fn validate(&self, channels: &[usize; NUM_STAGES]) -> Result<(), String> {
        if self.input_size % 32 != 0 {
            return Err(format!("input size {} is not divisible by 32", self.input_size));
        }
        if self.window == 0 {
            return Err("window size must be positive".into());
        }
        for s in 0..NUM_STAGES {
            let r = self.stage_resolution(s);
            if r > self.window && r % self.window != 0 {
                return Err(format!("stage {} resolution {r} is not divisible by window {}", s + 1, self.window));
            }
            if self.heads[s] == 0 || channels[s] % self.heads[s] != 0 {
                return Err(format!("stage {} width {} is not divisible by {} heads", s + 1, channels[s], self.heads[s]));
            }
        }
        Ok(())
    }
}

/// Swin-style block: pre-norm windowed attention and pre-norm MLP, each residual.
pub fn swin_block<T: Real>(
    name: &str,
    dim: usize,
    heads: usize,
    window: usize,
    shifted: bool,
    resolution: usize,
    init: &mut Init,
) -> Sequential<T> {
    let attn = Sequential::new().with(LayerNorm::new(&format!("{name}.norm1"), dim, SWIN_LN_EPS)).with(
        WindowAttention::new(&format!("{name}.attn"), dim, heads, window, shifted, resolution, resolution, init),
    );
    let mlp = Sequential::new()
        .with(LayerNorm::new(&format!("{name}.norm2"), dim, SWIN_LN_EPS))
        .with(Linear::new(&format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim, true, init))
        .with(Gelu::new())
        .with(Linear::new(&format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim, true, init));
    Sequential::new().with(Residual::new(attn)).with(Residual::new(mlp))
}

/// Swin-style stream: 4×4 patch embedding, then per stage a 2×2 patch
/// merge (except the first) followed by blocks alternating regular and
/// shifted windows.
pub struct SwinStream<T> {
    stages: Vec<Sequential<T>>,
    channels: [usize; NUM_STAGES],
}

impl<T: Real> SwinStream<T> {
    /// Panics on invalid geometry; call [`SwinGeometry::validate`] first.
    pub fn new(
        name: &str,
        in_channels: usize,
        channels: [usize; NUM_STAGES],
        depths: [usize; NUM_STAGES],
        geometry: SwinGeometry,
        init: &mut Init,
    ) -> Self {
        if let Err(e) = geometry.validate(&channels) {
            panic!("invalid swin geometry: {e}");
        }
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let mut s = Sequential::new();
            if i == 0 {
                s.push(Conv2d::new(&format!("{name}.patch_embed.proj"), in_channels, channels[0], 4, 4, 0, init));
                s.push(LayerNorm::new(&format!("{name}.patch_embed.norm"), channels[0], SWIN_LN_EPS));
            } else {
                let c = channels[i - 1];
                s.push(PatchGather::new());
                s.push(LayerNorm::new(&format!("{name}.merge{i}.norm"), 4 * c, SWIN_LN_EPS));
                s.push(Linear::new(&format!("{name}.merge{i}.reduction"), 4 * c, channels[i], false, init));
            }
            let res = geometry.stage_resolution(i);
            for b in 0..depths[i] {
                s.push(swin_block(
                    &format!("{name}.stage{i}.block{b}"),
                    channels[i],
                    geometry.heads[i],
                    geometry.window,
                    b % 2 == 1,
                    res,
                    init,
                ));
            }
            stages.push(s);
        }
        SwinStream { stages, channels }
    }
}

impl<T: Real> Module<T> for SwinStream<T> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        visit_stages(&mut self.stages, f);
    }
}

impl<T: Real> Backbone<T> for SwinStream<T> {
    fn forward_stages(&mut self, x: Tensor<T>, mode: Mode) -> Vec<Tensor<T>> {
        chain_stages(x, mode, &mut self.stages)
    }

    fn backward_stages(&mut self, grads: Vec<Option<Tensor<T>>>) -> Tensor<T> {
        unchain_stages(grads, &mut self.stages)
    }

    fn stage_channels(&self) -> [usize; NUM_STAGES] {
        self.channels
    }
}
