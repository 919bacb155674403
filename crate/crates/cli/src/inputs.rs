use std::path::{Path, PathBuf};

use anyhow::Context;
use sarcscore::dataset::{label_records, load_image};
use sarcscore::pipeline::representation_stack;
use sarcscore::representations::raw_input;
use sarcscore::{load_manifest, CellImage, CellInput, Error, PatchNet, PrepareOptions, TrainSample};

use crate::run::{optional_digest, sha256_file};
use crate::stacks;
use crate::MaturityArgs;

/// Resolves `--patchnet` / `--no-maturity` into an optional checkpoint path.
pub fn patchnet_path(args: &MaturityArgs) -> anyhow::Result<Option<PathBuf>> {
    match (&args.patchnet, args.no_maturity) {
        (Some(p), _) if !p.is_file() => Err(Error::Config(format!(
            "patch classifier checkpoint {} not found; train one with `sarcscore train-patchnet` or pass --no-maturity",
            p.display()
        ))
        .into()),
        (Some(p), _) => Ok(Some(p.clone())),
        (None, true) => Ok(None),
        (None, false) => Err(Error::Config(
            "the maturity-map channel needs a patch classifier: pass --patchnet <CKPT> (see `sarcscore train-patchnet`) or --no-maturity"
                .into(),
        )
        .into()),
    }
}

/// Loaded patch classifier plus its checkpoint digest.
pub struct Maturity {
    pub model: Option<PatchNet>,
    pub digest: Option<String>,
}

impl Maturity {
    pub fn load(args: &MaturityArgs) -> anyhow::Result<Self> {
        let path = patchnet_path(args)?;
        let digest = optional_digest(path.as_deref())?;
        let model = path.as_deref().map(PatchNet::load).transpose()?;
        Ok(Maturity { model, digest })
    }
}

/// Model input for one image, reusing a prepared stack from `stacks_dir`
/// when its sidecar matches the image, classifier and options.
pub fn cell_input(
    image_path: &Path,
    image: &CellImage,
    stacks_dir: Option<&Path>,
    maturity: &mut Maturity,
    options: &PrepareOptions,
) -> anyhow::Result<CellInput> {
    if let Some(dir) = stacks_dir {
        if let Some(sidecar) = stacks::load_sidecar(dir, &image.id) {
            let digest = sha256_file(image_path)?;
            if sidecar.matches(&digest, maturity.digest.as_deref(), options) {
                let channels = stacks::read_stack(&stacks::stack_path(dir, &image.id))?;
                return Ok(CellInput { id: image.id.clone(), raw: raw_input(image), stack: channels });
            }
            log::info!("{}: stored stack is stale, recomputing", image.id);
        }
    }
    let stack = representation_stack(image, maturity.model.as_mut(), None, options)?;
    Ok(CellInput::new(image.id.clone(), raw_input(image), &stack))
}

/// Labeled samples of a manifest after the expert-agreement filter.
pub fn labeled_samples(
    manifest_path: &Path,
    stacks_dir: Option<&Path>,
    maturity: &mut Maturity,
    options: &PrepareOptions,
) -> anyhow::Result<Vec<TrainSample>> {
    let manifest = load_manifest(manifest_path)?;
    let labeled = label_records(&manifest);
    if labeled.excluded > 0 {
        log::info!("excluded {} of {} records for expert disagreement", labeled.excluded, manifest.records.len());
    }
    let mut samples = Vec::with_capacity(labeled.records.len());
    for (i, (record, label)) in labeled.records.iter().enumerate() {
        let path = manifest.resolve(record);
        let image = load_image(&path)?;
        let input = cell_input(&path, &image, stacks_dir, maturity, options)
            .with_context(|| format!("preparing {}", path.display()))?;
        samples.push(TrainSample { input, label: *label });
        if (i + 1) % 100 == 0 {
            log::info!("prepared {} / {} cells", i + 1, labeled.records.len());
        }
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} has no labeled cells", manifest_path.display())).into());
    }
    Ok(samples)
}
