//! On-disk representation stacks: a 3-channel 32-bit float TIFF per image
//! (channel order fft_power, maturity_map, gradient_magnitude) plus a JSON
//! sidecar with the normalization constants and the inputs that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Rgb};
use ndarray::Array3;
use sarcscore::representations::{ChannelNorm, DEFAULT_STEP, DEFAULT_WINDOW, STACK_CHANNELS, STACK_SIZE};
use sarcscore::{Error, PrepareOptions, RepresentationStack};
use serde::{Deserialize, Serialize};

use crate::run::sha256_file;

pub const STACK_SUFFIX: &str = ".stack.tiff";
pub const SIDECAR_SUFFIX: &str = ".stack.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    pub fft_power: String,
    pub maturity_map: String,
    pub gradient_magnitude: String,
}

impl Default for Interpolation {
    fn default() -> Self {
        Interpolation {
            fft_power: "bilinear".into(),
            maturity_map: "nearest".into(),
            gradient_magnitude: "bilinear".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackSidecar {
    pub id: String,
    pub source: PathBuf,
    pub source_sha256: String,
    /// Digest of the patch classifier checkpoint; `None` means an all-zero maturity channel.
    pub patchnet_sha256: Option<String>,
    pub options: PrepareOptions,
    pub window: usize,
    pub step: usize,
    pub size: usize,
    pub channels: Vec<String>,
    pub norms: Vec<ChannelNorm>,
    pub interpolation: Interpolation,
    pub stack_sha256: String,
}

impl StackSidecar {
    /// True when this sidecar was produced from the same inputs.
    pub fn matches(&self, source_sha256: &str, patchnet_sha256: Option<&str>, options: &PrepareOptions) -> bool {
        self.source_sha256 == source_sha256 && self.patchnet_sha256.as_deref() == patchnet_sha256 && &self.options == options
    }
}

pub fn stack_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{STACK_SUFFIX}"))
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{SIDECAR_SUFFIX}"))
}

pub fn write_stack(channels: &Array3<f32>, path: &Path) -> sarcscore::Result<()> {
    let (c, h, w) = channels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("stack must have 3 channels, got {c}")));
    }
    let buf = ImageBuffer::<Rgb<f32>, Vec<f32>>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([channels[(0, y, x)], channels[(1, y, x)], channels[(2, y, x)]])
    });
    buf.save_with_format(path, ImageFormat::Tiff)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_stack(path: &Path) -> sarcscore::Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let buf = img.into_rgb32f();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    if (h, w) != (STACK_SIZE, STACK_SIZE) {
        return Err(Error::Shape(format!("{}: stack is {h}x{w}, expected {STACK_SIZE}x{STACK_SIZE}", path.display())));
    }
    let raw = buf.into_raw();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c]))
}

/// Writes the stack and its sidecar; returns both paths.
pub fn save_prepared(
    dir: &Path,
    stack: &RepresentationStack,
    source: &Path,
    source_sha256: String,
    patchnet_sha256: Option<String>,
    options: PrepareOptions,
) -> anyhow::Result<(PathBuf, PathBuf)> {
    let tiff = stack_path(dir, &stack.id);
    write_stack(&stack.channels, &tiff)?;
    let sidecar = StackSidecar {
        id: stack.id.clone(),
        source: source.to_path_buf(),
        source_sha256,
        patchnet_sha256,
        options,
        window: DEFAULT_WINDOW,
        step: DEFAULT_STEP,
        size: STACK_SIZE,
        channels: STACK_CHANNELS.iter().map(|s| s.to_string()).collect(),
        norms: stack.norms.to_vec(),
        interpolation: Interpolation::default(),
        stack_sha256: sha256_file(&tiff)?,
    };
    let json = sidecar_path(dir, &stack.id);
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok((tiff, json))
}

/// Sidecar of a stored stack, if both files exist and the stack file is intact.
pub fn load_sidecar(dir: &Path, id: &str) -> Option<StackSidecar> {
    let text = fs::read_to_string(sidecar_path(dir, id)).ok()?;
    let sidecar: StackSidecar = serde_json::from_str(&text).ok()?;
    let digest = sha256_file(&stack_path(dir, id)).ok()?;
    (digest == sidecar.stack_sha256).then_some(sidecar)
}
