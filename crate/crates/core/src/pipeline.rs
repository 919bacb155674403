//! Turns a cell image into model inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::CellImage;
use crate::dsarcnet::CellInput;
use crate::error::Result;
use crate::patchnet::{infer_maturity_map, MaturityMap, PatchNet};
use crate::representations::{
    assemble_stack, fft_power_map, grid_len, raw_input, sobel_gradient_magnitude,
    RepresentationStack, DEFAULT_STEP, DEFAULT_WINDOW,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    /// Drop the DC term from the FFT power sum.
    pub exclude_dc: bool,
}

/// All-zero maturity map on the stride-8 grid of `image`, used when no
/// patch classifier is available.
pub fn empty_maturity_map(image: &CellImage) -> MaturityMap {
    let (h, w) = image.pixels().dim();
    let (h, w) = (h.max(DEFAULT_WINDOW), w.max(DEFAULT_WINDOW));
    MaturityMap {
        id: image.id.clone(),
        values: Array2::zeros((grid_len(h, DEFAULT_WINDOW, DEFAULT_STEP), grid_len(w, DEFAULT_WINDOW, DEFAULT_STEP))),
    }
}

/// Representation stack of one image. With `patchnet = None` the maturity
/// channel is all zeros.
pub fn representation_stack(
    image: &CellImage,
    patchnet: Option<&mut PatchNet>,
    mask: Option<&Array2<bool>>,
    options: &PrepareOptions,
) -> Result<RepresentationStack> {
    let fft = fft_power_map(image, DEFAULT_WINDOW, DEFAULT_STEP, options.exclude_dc)?;
    let maturity = match patchnet {
        Some(model) => infer_maturity_map(model, image, mask)?,
        None => empty_maturity_map(image),
    };
    let grad = sobel_gradient_magnitude(image)?;
    assemble_stack(&fft, &maturity, &grad)
}

/// Raw input and representation stack for one image.
pub fn prepare_cell(
    image: &CellImage,
    patchnet: Option<&mut PatchNet>,
    mask: Option<&Array2<bool>>,
    options: &PrepareOptions,
) -> Result<CellInput> {
    let stack = representation_stack(image, patchnet, mask, options)?;
    Ok(CellInput::new(image.id.clone(), raw_input(image), &stack))
}
