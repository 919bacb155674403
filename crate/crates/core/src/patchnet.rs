//! Local-pattern model: a ConvNeXt-style five-class patch classifier and the
//! sliding-window inference that turns a cell image into a [`MaturityMap`].

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ConvNextStream, NUM_STAGES};
use crate::dataset::CellImage;
use crate::error::{Error, Result};
use crate::metrics::{classification_report, ClassificationReport};
use crate::nn::{
    Adam, Checkpoint, Conv2d, Gelu, GlobalAvgPool, Init, Layer, LayerNorm, Linear, Mode, Module, Param, Sequential,
    Tensor,
};
use crate::representations::{reflect_pad_to, resize_bilinear, tile_windows, DEFAULT_STEP, DEFAULT_WINDOW};

pub const PATCH_SIZE: usize = 96;
pub const NUM_CLASSES: usize = 5;

/// Fraction of a window the cell mask must cover for it to count as foreground.
pub const MASK_COVERAGE: f64 = 0.5;
/// Without a mask, windows whose mean is below this fraction of the image
/// maximum are background.
pub const INTENSITY_FRACTION: f64 = 0.05;

/// Per-window pattern classes on the stride-8 grid. `0` marks background,
/// `1..=5` the predicted pattern class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaturityMap {
    pub id: String,
    pub values: Array2<u8>,
}

impl MaturityMap {
    pub const MAX_CLASS: u8 = 5;
}

/// A 96×96 patch with its pattern class:
/// 1 diffuse/messy, 2 fibers, 3 disorganized puncta, 4 organized puncta, 5 organized z-discs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExample {
    pub patch: Array2<f32>,
    pub class_id: u8,
}

impl PatchExample {
    pub fn new(patch: Array2<f32>, class_id: u8) -> Result<Self> {
        check_patch(patch.view())?;
        if !(1..=MaturityMap::MAX_CLASS).contains(&class_id) {
            return Err(Error::Validation(format!("patch class {class_id} outside 1..=5")));
        }
        Ok(PatchExample { patch, class_id })
    }
}

fn check_patch(patch: ArrayView2<f32>) -> Result<()> {
    if patch.dim() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Shape(format!(
            "patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {}x{}",
            patch.nrows(),
            patch.ncols()
        )));
    }
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("patch contains non-finite values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Small,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchNetConfig {
    pub preset: Preset,
    pub depths: [usize; NUM_STAGES],
    pub channels: [usize; NUM_STAGES],
    pub layer_scale: f64,
    /// Side length patches are interpolated to before the network.
    pub input_size: usize,
    pub seed: u64,
}

impl PatchNetConfig {
    pub fn preset(preset: Preset) -> Self {
        let (depths, channels) = match preset {
            Preset::Toy => ([1, 1, 2, 1], [24, 48, 96, 192]),
            Preset::Small => ([2, 2, 6, 2], [48, 96, 192, 384]),
            Preset::Standard => ([3, 3, 9, 3], [96, 192, 384, 768]),
        };
        PatchNetConfig { preset, depths, channels, layer_scale: 1e-6, input_size: 224, seed: 1 }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("stage depths must be ≥ 1, got {:?}", self.depths)));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage channels must be positive and increasing, got {:?}", self.channels)));
        }
        if !(self.layer_scale > 0.0 && self.layer_scale.is_finite()) {
            return Err(Error::Config(format!("layer scale must be a small positive value, got {}", self.layer_scale)));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input size must be a positive multiple of 32, got {}", self.input_size)));
        }
        Ok(())
    }
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Class prediction for one patch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchPrediction {
    pub class_id: u8,
    pub probabilities: [f64; NUM_CLASSES],
}

pub struct PatchNet {
    config: PatchNetConfig,
    backbone: ConvNextStream<f32>,
    head: Sequential<f32>,
}

impl Module<f32> for PatchNet {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.backbone.visit(f);
        self.head.visit(f);
    }
}

pub fn build_patchnet(config: &PatchNetConfig) -> Result<PatchNet> {
    config.validate()?;
    let mut init = Init::new(config.seed);
    let backbone = ConvNextStream::new("backbone", 1, config.channels, config.depths, config.layer_scale, &mut init);
    let c = config.channels[NUM_STAGES - 1];
    let head = Sequential::new()
        .with(Conv2d::new("head.conv3x3", c, c, 3, 1, 1, &mut init))
        .with(Gelu::new())
        .with(Conv2d::new("head.conv1x1", c, c, 1, 1, 0, &mut init))
        .with(Gelu::new())
        .with(GlobalAvgPool::new())
        .with(LayerNorm::new("head.norm", c, 1e-6))
        .with(Linear::new("head.fc", c, NUM_CLASSES, true, &mut init));
    Ok(PatchNet { config: config.clone(), backbone, head })
}

fn softmax(logits: &[f32]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut p = [0.0; NUM_CLASSES];
    for (pi, &l) in p.iter_mut().zip(logits) {
        *pi = (l as f64 - max).exp();
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn argmax_class(p: &[f64; NUM_CLASSES]) -> u8 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u8 + 1
}

impl PatchNet {
    pub fn config(&self) -> &PatchNetConfig {
        &self.config
    }

    /// Interpolates patches to the network input size and packs them as `(N, S, S, 1)`.
    pub fn batch_tensor(&self, patches: &[ArrayView2<f32>]) -> Tensor<f32> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(patches.len() * s * s);
        for p in patches {
            let resized = resize_bilinear(&p.mapv(f64::from), s, s);
            data.extend(resized.iter().map(|&v| v as f32));
        }
        Tensor::from_vec(&[patches.len(), s, s, 1], data)
    }

    /// Raw class logits, `(N, 5)`.
    pub fn forward(&mut self, x: Tensor<f32>, mode: Mode) -> Tensor<f32> {
        let stages = self.backbone.forward_stages(x, mode);
        let last = stages.into_iter().last().expect("four stages");
        self.head.forward(last, mode)
    }

    fn backward(&mut self, dlogits: Tensor<f32>) {
        let g = self.head.backward(dlogits);
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; NUM_STAGES];
        grads[NUM_STAGES - 1] = Some(g);
        self.backbone.backward_stages(grads);
    }

    pub fn predict_batch(&mut self, patches: &[ArrayView2<f32>]) -> Result<Vec<PatchPrediction>> {
        for p in patches {
            check_patch(*p)?;
        }
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.forward(self.batch_tensor(patches), Mode::Eval);
        Ok(logits
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(|l| {
                let probabilities = softmax(l);
                PatchPrediction { class_id: argmax_class(&probabilities), probabilities }
            })
            .collect())
    }

    pub fn save(&mut self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "kind": "patchnet", "config": self.config, "extra": extra });
        Checkpoint::capture(meta, self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta["kind"] != "patchnet" {
            return Err(Error::Checkpoint(format!("{} is not a patch classifier checkpoint", path.display())));
        }
        let config: PatchNetConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = build_patchnet(&config)?;
        ck.restore(&mut model)?;
        Ok(model)
    }
}

pub fn classify_patch(model: &mut PatchNet, patch: ArrayView2<f32>) -> Result<PatchPrediction> {
    Ok(model.predict_batch(&[patch])?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        PatchTrainConfig { epochs: 20, batch_size: 16, lr: 3e-4, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchHistory {
    pub epochs: Vec<PatchEpoch>,
    /// Epoch whose weights were kept (best validation accuracy, else the last).
    pub selected_epoch: Option<usize>,
}

/// Trains with softmax cross-entropy and Adam. When `val` is non-empty the
/// weights from the epoch with the best validation accuracy are kept.
pub fn train_patchnet(
    model: &mut PatchNet,
    train: &[PatchExample],
    val: &[PatchExample],
    hyper: &PatchTrainConfig,
) -> Result<PatchHistory> {
    if train.is_empty() {
        return Err(Error::Empty("patch training set is empty".into()));
    }
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) {
        return Err(Error::Config("batch size must be ≥ 1 and learning rate > 0".into()));
    }
    let mut classes: Vec<u8> = train.iter().map(|e| e.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        log::warn!("patch training data contains a single class ({:?})", classes);
    }

    let mut history = PatchHistory::default();
    let mut opt = Adam::new(hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let views: Vec<_> = chunk.iter().map(|&i| train[i].patch.view()).collect();
            let x = model.batch_tensor(&views);
            model.zero_grad();
            let logits = model.forward(x, Mode::Train);
            let b = chunk.len();
            let mut dlogits = vec![0f32; b * NUM_CLASSES];
            for (k, (&i, l)) in chunk.iter().zip(logits.data().chunks_exact(NUM_CLASSES)).enumerate() {
                let p = softmax(l);
                let target = (train[i].class_id - 1) as usize;
                loss_sum -= p[target].max(1e-300).ln();
                if argmax_class(&p) == train[i].class_id {
                    correct += 1;
                }
                for c in 0..NUM_CLASSES {
                    let onehot = if c == target { 1.0 } else { 0.0 };
                    dlogits[k * NUM_CLASSES + c] = ((p[c] - onehot) / b as f64) as f32;
                }
            }
            if !loss_sum.is_finite() {
                return Err(Error::Diverged(format!("non-finite cross-entropy in epoch {}", epoch + 1)));
            }
            model.backward(Tensor::from_vec(&[b, NUM_CLASSES], dlogits));
            opt.step(model);
        }
        let val_accuracy = if val.is_empty() { None } else { Some(eval_patchnet(model, val)?.accuracy) };
        let record = PatchEpoch {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "patchnet epoch {}: loss {:.4} train acc {:.3} val acc {:?}",
            record.epoch,
            record.train_loss,
            record.train_accuracy,
            record.val_accuracy
        );
        history.epochs.push(record);
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, Checkpoint::capture(serde_json::Value::Null, model)));
                history.selected_epoch = Some(epoch + 1);
            }
        }
    }
    match best {
        Some((_, ck)) => ck.restore(model)?,
        None if hyper.epochs > 0 => history.selected_epoch = Some(hyper.epochs),
        None => {}
    }
    Ok(history)
}

/// Accuracy with weighted and macro precision/recall/F1 over the five classes.
pub fn eval_patchnet(model: &mut PatchNet, examples: &[PatchExample]) -> Result<ClassificationReport> {
    if examples.is_empty() {
        return Err(Error::Empty("no patches to evaluate".into()));
    }
    let mut predicted = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let views: Vec<_> = chunk.iter().map(|e| e.patch.view()).collect();
        predicted.extend(model.predict_batch(&views)?.into_iter().map(|p| p.class_id as usize - 1));
    }
    let truth: Vec<usize> = examples.iter().map(|e| e.class_id as usize - 1).collect();
    classification_report(&predicted, &truth, NUM_CLASSES)
}

/// True where a window at `(row, col)` is background under the mask or
/// intensity rule.
fn background_windows(
    image: &CellImage,
    mask: Option<&Array2<bool>>,
    rows: usize,
    cols: usize,
    window: &dyn Fn(usize, usize) -> f64,
) -> Result<Array2<bool>> {
    match mask {
        Some(m) => {
            if m.dim() != image.pixels().dim() {
                return Err(Error::Shape(format!(
                    "mask is {:?} but image is {:?}",
                    m.dim(),
                    image.pixels().dim()
                )));
            }
            let padded = reflect_pad_to(&m.mapv(|v| if v { 1.0 } else { 0.0 }), DEFAULT_WINDOW);
            let n = DEFAULT_WINDOW;
            Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
                let (y, x) = (r * DEFAULT_STEP, c * DEFAULT_STEP);
                let cover = padded.slice(ndarray::s![y..y + n, x..x + n]).mean().unwrap_or(0.0);
                cover < MASK_COVERAGE
            }))
        }
        None => {
            let threshold = INTENSITY_FRACTION * image.max_intensity();
            Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
                let mean = window(r, c);
                mean <= 0.0 || mean < threshold
            }))
        }
    }
}

/// Classifies every 96×96 window at stride 8; background windows are 0.
pub fn infer_maturity_map(model: &mut PatchNet, image: &CellImage, mask: Option<&Array2<bool>>) -> Result<MaturityMap> {
    let grid = tile_windows(image, DEFAULT_WINDOW, DEFAULT_STEP)?;
    let mean = |r: usize, c: usize| grid.window(r, c).mean().unwrap_or(0.0);
    let background = background_windows(image, mask, grid.rows, grid.cols, &mean)?;
    let mut values = Array2::<u8>::zeros((grid.rows, grid.cols));
    let fg: Vec<(usize, usize)> = grid.positions().filter(|&p| !background[p]).collect();
    for chunk in fg.chunks(32) {
        let windows: Vec<Array2<f32>> = chunk.iter().map(|&(r, c)| grid.window(r, c).mapv(|v| v as f32)).collect();
        let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
        for (&pos, pred) in chunk.iter().zip(model.predict_batch(&views)?) {
            values[pos] = pred.class_id;
        }
    }
    Ok(MaturityMap { id: image.id.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PatchNetConfig {
        PatchNetConfig { depths: [1, 1, 1, 1], channels: [4, 8, 12, 16], input_size: 32, ..PatchNetConfig::toy() }
    }

    fn patch(seed: u64) -> Array2<f32> {
        let v: Vec<f32> = Init::new(seed).trunc_normal(PATCH_SIZE * PATCH_SIZE, 0.3);
        Array2::from_shape_vec((PATCH_SIZE, PATCH_SIZE), v.into_iter().map(|x| x + 0.5).collect()).unwrap()
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Toy, Preset::Small, Preset::Standard] {
            PatchNetConfig::preset(p).validate().unwrap();
        }
        let bad = PatchNetConfig { channels: [24, 24, 96, 192], ..PatchNetConfig::toy() };
        assert!(matches!(build_patchnet(&bad), Err(Error::Config(_))));
        let bad = PatchNetConfig { depths: [1, 0, 1, 1], ..PatchNetConfig::toy() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toy_logits_shape_and_layer_scale() {
        let mut m = build_patchnet(&PatchNetConfig::toy()).unwrap();
        let x = Tensor::from_vec(&[2, 224, 224, 1], Init::new(3).trunc_normal(2 * 224 * 224, 1.0));
        let y = m.forward(x, Mode::Eval);
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.is_finite());
        m.visit(&mut |p| {
            if p.name.ends_with(".gamma") {
                assert!(p.value.iter().all(|&v| v == 1e-6));
            }
        });
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = build_patchnet(&tiny_config()).unwrap();
        let mut b = build_patchnet(&tiny_config()).unwrap();
        let (mut va, mut vb) = (Vec::new(), Vec::new());
        a.visit(&mut |p| va.extend_from_slice(&p.value));
        b.visit(&mut |p| vb.extend_from_slice(&p.value));
        assert_eq!(va, vb);
    }

    #[test]
    fn probabilities_normalized_and_batch_independent() {
        let mut m = build_patchnet(&tiny_config()).unwrap();
        let (p0, p1) = (patch(1), patch(2));
        let preds = m.predict_batch(&[p0.view(), p1.view(), p0.view()]).unwrap();
        for p in &preds {
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((1..=5).contains(&p.class_id));
        }
        assert_eq!(preds[0], preds[2]);
        assert_eq!(classify_patch(&mut m, p0.view()).unwrap(), preds[0]);
        let wrong = Array2::<f32>::zeros((95, 96));
        assert!(matches!(classify_patch(&mut m, wrong.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn one_step_touches_every_parameter() {
        let mut m = build_patchnet(&tiny_config()).unwrap();
        let examples: Vec<_> = (0..4).map(|i| PatchExample::new(patch(i), (i % 5 + 1) as u8).unwrap()).collect();
        let hyper = PatchTrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        // capture gradients by running the pieces of one step by hand
        let views: Vec<_> = examples.iter().map(|e| e.patch.view()).collect();
        let x = m.batch_tensor(&views);
        m.zero_grad();
        let y = m.forward(x, Mode::Train);
        m.backward(Tensor::from_vec(y.shape(), vec![0.1; y.numel()]));
        m.visit(&mut |p| assert!(!p.trainable || p.touched, "{} has no gradient", p.name));
        train_patchnet(&mut m, &examples, &[], &hyper).unwrap();
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = build_patchnet(&tiny_config()).unwrap();
        let mut before = Vec::new();
        m.visit(&mut |p| before.extend_from_slice(&p.value));
        let ex = vec![PatchExample::new(patch(0), 1).unwrap()];
        let h = train_patchnet(&mut m, &ex, &[], &PatchTrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(h.epochs.is_empty());
        let mut after = Vec::new();
        m.visit(&mut |p| after.extend_from_slice(&p.value));
        assert_eq!(before, after);
        assert!(matches!(
            train_patchnet(&mut m, &[], &[], &PatchTrainConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn maturity_map_geometry_and_background() {
        let mut m = build_patchnet(&tiny_config()).unwrap();
        let zero = CellImage::new("z", Array2::zeros((104, 104))).unwrap();
        let map = infer_maturity_map(&mut m, &zero, None).unwrap();
        assert_eq!(map.values.dim(), (2, 2));
        assert!(map.values.iter().all(|&v| v == 0));

        let bright = CellImage::new("b", Array2::from_elem((100, 120), 0.5)).unwrap();
        let map = infer_maturity_map(&mut m, &bright, None).unwrap();
        assert_eq!(map.values.dim(), (1, 4));
        assert!(map.values.iter().all(|&v| (1..=5).contains(&v)));

        let mut mask = Array2::from_elem((100, 120), false);
        mask.slice_mut(ndarray::s![.., ..60]).fill(true);
        let masked = infer_maturity_map(&mut m, &bright, Some(&mask)).unwrap();
        // windows start at x = 0, 8, 16, 24; coverage 60/96, 52/96, 44/96, 36/96
        assert!(masked.values[(0, 0)] > 0 && masked.values[(0, 1)] > 0);
        assert_eq!(masked.values[(0, 2)], 0);
        assert_eq!(masked.values[(0, 3)], 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut m = build_patchnet(&tiny_config()).unwrap();
        m.save(&path, serde_json::Value::Null).unwrap();
        let mut back = PatchNet::load(&path).unwrap();
        let p = patch(5);
        assert_eq!(classify_patch(&mut m, p.view()).unwrap(), classify_patch(&mut back, p.view()).unwrap());
    }
}
