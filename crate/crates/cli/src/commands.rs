use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sarcscore::dataset::{label_records, load_image, save_image_png16, SplitRecord};
use sarcscore::dsarcnet::{build_dsarcnet, configure_ablation, ABLATION_VARIANTS};
use sarcscore::metrics::SamplePrediction;
use sarcscore::patchnet::{build_patchnet, eval_patchnet, infer_maturity_map, train_patchnet};
use sarcscore::pipeline::representation_stack;
use sarcscore::synthgen::{generate_dataset, generate_patches};
use sarcscore::trainer::{evaluate, fmt_opt, run_ablation, train, write_ablation_table, AblationRow, TrainHistory};
use sarcscore::{
    load_manifest, split_dataset, DSarcNet, DSarcNetConfig, Error, EvalReport, PatchExample, PatchNet, Preset,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::inputs::{self, Maturity};
use crate::plot;
use crate::run::{optional_digest, sha256_file, RunDir};
use crate::stacks;
use crate::{Cli, Command, MaturityArgs, TrainOverrides};

/// Error raised by the command layer itself, with its reporting category.
#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub category: &'static str,
    pub msg: String,
}

impl CliError {
    fn new(category: &'static str, msg: impl Into<String>) -> Self {
        CliError { category, msg: msg.into() }
    }
}

pub fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "toy" => Ok(Preset::Toy),
        "small" => Ok(Preset::Small),
        "standard" => Ok(Preset::Standard),
        _ => Err(format!("unknown preset {s:?}; valid: toy, small, standard")),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let name = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut run = RunDir::create(out, name)?;
    let outcome = match cli.command {
        Command::Prepare { manifest, maturity, exclude_dc } => {
            config.prepare.exclude_dc |= exclude_dc;
            run.write_config(&config)?;
            prepare(&mut run, &config, &manifest, &maturity)
        }
        Command::TrainPatchnet { patches, synthetic_per_class, val_fraction, epochs, lr } => {
            if let Some(e) = epochs {
                config.patch_train.epochs = e;
            }
            if let Some(lr) = lr {
                config.patch_train.lr = lr;
            }
            run.write_config(&config)?;
            cmd_train_patchnet(&mut run, &config, patches.as_deref(), synthetic_per_class, val_fraction)
        }
        Command::InferPatchnet { checkpoint, images, manifest } => {
            run.write_config(&config)?;
            infer_patchnet(&mut run, &checkpoint, images, manifest.as_deref())
        }
        Command::Train { manifest, stacks, maturity, variant, overrides } => {
            apply_overrides(&mut config, &overrides);
            if let Some(v) = variant {
                config.model = configure_ablation(&config.model, &v)?;
            }
            run.write_config(&config)?;
            cmd_train(&mut run, &config, &manifest, stacks.as_deref(), &maturity)
        }
        Command::Predict { checkpoint, images, stack, stacks, maturity } => {
            run.write_config(&config)?;
            predict(&mut run, &config, &checkpoint, &images, stack.as_deref(), stacks.as_deref(), &maturity)
        }
        Command::Evaluate { checkpoint, manifest, split_file, partition, stacks, maturity, predictions, plots } => {
            run.write_config(&config)?;
            let report = match (predictions, checkpoint, manifest) {
                (Some(csv), _, _) => report_from_csv(&csv)?,
                (None, Some(ck), Some(m)) => {
                    let split = split_file.as_deref().map(|p| partition_ids(p, &partition)).transpose()?;
                    report_from_model(&config, &ck, &m, split, stacks.as_deref(), &maturity)?
                }
                _ => {
                    return Err(CliError::new("usage", "evaluate needs --predictions <CSV> or --checkpoint with --manifest").into())
                }
            };
            write_report(&mut run, &report, plots)
        }
        Command::Ablate { manifest, stacks, maturity, variants, overrides } => {
            apply_overrides(&mut config, &overrides);
            run.write_config(&config)?;
            ablate(&mut run, &config, &manifest, stacks.as_deref(), &maturity, &variants)
        }
        Command::Synth { n, size, expert_noise, patches_per_class } => {
            if let Some(n) = n {
                config.synth.n = n;
            }
            if let Some(s) = size {
                config.synth.size = s;
            }
            if let Some(p) = expert_noise {
                config.synth.expert_noise = p;
            }
            run.write_config(&config)?;
            synth(&mut run, &config, patches_per_class)
        }
        Command::Plot { history, report, ablation } => {
            run.write_config(&config)?;
            cmd_plot(&mut run, history.as_deref(), report.as_deref(), ablation.as_deref())
        }
    };
    // The manifest is written even for failed runs so partial outputs stay traceable.
    let manifest = run.finish()?;
    outcome?;
    log::info!("run manifest: {}", manifest.display());
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, o: &TrainOverrides) {
    if let Some(preset) = o.preset {
        config.model = DSarcNetConfig {
            seed: config.model.seed,
            ablation: config.model.ablation,
            ..DSarcNetConfig::preset(preset)
        };
    }
    if let Some(e) = o.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = o.lr {
        config.train.lr = lr;
    }
    if let Some(b) = o.batch_size {
        config.train.batch_size = b;
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())).into())
}

#[derive(Serialize)]
struct PrepareSummary {
    written: usize,
    skipped: usize,
    failed: Vec<String>,
}

enum Prepared {
    Written(PathBuf, PathBuf),
    Skipped,
}

fn prepare(run: &mut RunDir, config: &RunConfig, manifest_path: &Path, args: &MaturityArgs) -> anyhow::Result<()> {
    let patchnet = inputs::patchnet_path(args)?;
    let patchnet_digest = optional_digest(patchnet.as_deref())?;
    if let Some(p) = &patchnet {
        PatchNet::load(p)?;
    }
    let manifest = load_manifest(manifest_path)?;
    let dir = run.subdir("stacks")?;
    let options = config.prepare;
    let paths: Vec<PathBuf> = manifest.records.iter().map(|r| manifest.resolve(r)).collect();

    let results: Vec<(PathBuf, anyhow::Result<Prepared>)> = paths
        .par_iter()
        .map_init(
            || patchnet.as_deref().map(PatchNet::load),
            |model, path| {
                let result = (|| -> anyhow::Result<Prepared> {
                    let model = match model {
                        Some(Ok(m)) => Some(m),
                        Some(Err(e)) => return Err(Error::Checkpoint(e.to_string()).into()),
                        None => None,
                    };
                    let digest = sha256_file(path)?;
                    let id = sarcscore::dataset::image_id(path);
                    if let Some(sidecar) = stacks::load_sidecar(&dir, &id) {
                        if sidecar.matches(&digest, patchnet_digest.as_deref(), &options) {
                            return Ok(Prepared::Skipped);
                        }
                    }
                    let image = load_image(path)?;
                    let stack = representation_stack(&image, model, None, &options)?;
                    let (tiff, json) =
                        stacks::save_prepared(&dir, &stack, path, digest, patchnet_digest.clone(), options)?;
                    Ok(Prepared::Written(tiff, json))
                })();
                (path.clone(), result)
            },
        )
        .collect();

    let mut summary = PrepareSummary { written: 0, skipped: 0, failed: Vec::new() };
    let mut first_error = None;
    for (path, result) in results {
        match result {
            Ok(Prepared::Written(tiff, json)) => {
                summary.written += 1;
                run.record(tiff);
                run.record(json);
            }
            Ok(Prepared::Skipped) => summary.skipped += 1,
            Err(e) => {
                log::error!("{}: {e:#}", path.display());
                summary.failed.push(path.display().to_string());
                first_error.get_or_insert(e.context(format!("preparing {}", path.display())));
            }
        }
    }
    log::info!("prepare: {} written, {} up to date, {} failed", summary.written, summary.skipped, summary.failed.len());
    run.write_json("prepare_summary.json", &summary)?;
    match first_error {
        None => Ok(()),
        Some(e) if summary.failed.len() == 1 => Err(e),
        Some(e) => Err(e.context(format!("{} images failed", summary.failed.len()))),
    }
}

#[derive(Deserialize)]
struct PatchRow {
    path: PathBuf,
    class_id: u8,
}

fn load_patch_csv(csv_path: &Path) -> anyhow::Result<Vec<PatchExample>> {
    let root = csv_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<PatchRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { row: i + 2, msg: e.to_string() })?;
        let image = load_image(&root.join(&row.path))?;
        out.push(PatchExample::new(image.pixels().mapv(|v| v as f32), row.class_id)?);
    }
    Ok(out)
}

fn cmd_train_patchnet(
    run: &mut RunDir,
    config: &RunConfig,
    patches: Option<&Path>,
    per_class: usize,
    val_fraction: f64,
) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("--val-fraction must be in [0, 1), got {val_fraction}")).into());
    }
    let mut examples = match patches {
        Some(csv) => load_patch_csv(csv)?,
        None => generate_patches(per_class, config.synth.seed),
    };
    if examples.is_empty() {
        return Err(Error::Empty("no training patches".into()).into());
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(config.patch_train.seed));
    let n_val = (examples.len() as f64 * val_fraction).round() as usize;
    let val = examples.split_off(examples.len() - n_val);
    log::info!("training patch classifier on {} patches, validating on {}", examples.len(), val.len());

    let mut model = build_patchnet(&config.patchnet)?;
    let history = train_patchnet(&mut model, &examples, &val, &config.patch_train)?;
    run.write_json("history.json", &history)?;
    if !val.is_empty() {
        let report = eval_patchnet(&mut model, &val)?;
        log::info!("validation accuracy {:.3}", report.accuracy);
        run.write_json("val_report.json", &report)?;
    }
    let ckpt = run.path("patchnet.ckpt");
    model.save(&ckpt, serde_json::json!({ "train": config.patch_train }))?;
    run.record(ckpt);
    Ok(())
}

#[derive(Serialize)]
struct MaturitySidecar<'a> {
    id: &'a str,
    source: &'a Path,
    checkpoint_sha256: &'a str,
    rows: usize,
    cols: usize,
    window: usize,
    step: usize,
    class_counts: [usize; 6],
}

fn infer_patchnet(run: &mut RunDir, checkpoint: &Path, mut images: Vec<PathBuf>, manifest: Option<&Path>) -> anyhow::Result<()> {
    if let Some(m) = manifest {
        let manifest = load_manifest(m)?;
        images.extend(manifest.records.iter().map(|r| manifest.resolve(r)));
    }
    if images.is_empty() {
        return Err(CliError::new("usage", "no images given; pass image paths or --manifest").into());
    }
    let digest = sha256_file(checkpoint)?;
    let mut model = PatchNet::load(checkpoint)?;
    let dir = run.subdir("maturity")?;
    for path in &images {
        let image = load_image(path)?;
        let map = infer_maturity_map(&mut model, &image, None)?;
        let (rows, cols) = map.values.dim();
        let png = dir.join(format!("{}.maturity.png", image.id));
        let buf = image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| image::Luma([map.values[(y as usize, x as usize)]]));
        buf.save(&png).map_err(|source| Error::Image { path: png.clone(), source })?;
        let mut class_counts = [0usize; 6];
        map.values.iter().for_each(|&v| class_counts[v as usize] += 1);
        let sidecar = MaturitySidecar {
            id: &image.id,
            source: path,
            checkpoint_sha256: &digest,
            rows,
            cols,
            window: sarcscore::representations::DEFAULT_WINDOW,
            step: sarcscore::representations::DEFAULT_STEP,
            class_counts,
        };
        let json = dir.join(format!("{}.maturity.json", image.id));
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
        run.record(png);
        run.record(json);
    }
    log::info!("wrote {} maturity maps", images.len());
    Ok(())
}

fn cmd_train(
    run: &mut RunDir,
    config: &RunConfig,
    manifest: &Path,
    stacks_dir: Option<&Path>,
    args: &MaturityArgs,
) -> anyhow::Result<()> {
    config.model.validate()?;
    config.train.validate()?;
    let mut maturity = Maturity::load(args)?;
    let samples = inputs::labeled_samples(manifest, stacks_dir, &mut maturity, &config.prepare)?;
    let split = split_dataset(samples, &config.split)?;
    run.write_json("split.json", &SplitRecord::new(&split, &config.split))?;
    log::info!("split: {} train, {} val, {} test", split.train.len(), split.val.len(), split.test.len());

    let mut model = build_dsarcnet::<f32>(&config.model)?;
    let outcome = train(&mut model, &split.train, &split.val, &config.train)?;
    run.write_json("history.json", &outcome.history)?;
    let ckpt = run.path("model.ckpt");
    model.save(
        &ckpt,
        serde_json::json!({ "train": config.train, "prepare": config.prepare, "patchnet_sha256": maturity.digest }),
    )?;
    run.record(ckpt);
    if !split.test.is_empty() {
        let report = evaluate(&mut model, &split.test)?;
        log::info!(
            "test: spearman {} mae {:.3} mse {:.3} r2 {:.3}",
            fmt_opt(report.spearman),
            report.mae,
            report.mse,
            report.r2
        );
        run.write_json("test_report.json", &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRecord {
    id: String,
    raw_score: f64,
    clamped_score: f64,
}

fn predict(
    run: &mut RunDir,
    config: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    stack: Option<&Path>,
    stacks_dir: Option<&Path>,
    args: &MaturityArgs,
) -> anyhow::Result<()> {
    if images.is_empty() {
        return Err(CliError::new("usage", "no images given").into());
    }
    if stack.is_some() && images.len() != 1 {
        return Err(CliError::new("usage", "--stack applies to exactly one image; use --stacks <DIR> for several").into());
    }
    let mut model = DSarcNet::load(checkpoint)?;
    let mut maturity = match stack {
        Some(_) => Maturity { model: None, digest: None },
        None => Maturity::load(args)?,
    };
    let mut cells = Vec::with_capacity(images.len());
    for path in images {
        let image = load_image(path)?;
        let cell = match stack {
            Some(s) => sarcscore::CellInput {
                id: image.id.clone(),
                raw: sarcscore::representations::raw_input(&image),
                stack: stacks::read_stack(s)?,
            },
            None => inputs::cell_input(path, &image, stacks_dir, &mut maturity, &config.prepare)?,
        };
        cells.push(cell);
    }
    let scores = model.predict_cells(&cells)?;
    let records: Vec<PredictionRecord> = cells
        .iter()
        .zip(scores)
        .map(|(c, s)| PredictionRecord { id: c.id.clone(), raw_score: s.raw, clamped_score: s.clamped })
        .collect();
    let text = if records.len() == 1 {
        serde_json::to_string_pretty(&records[0])?
    } else {
        serde_json::to_string_pretty(&records)?
    };
    println!("{text}");
    run.write_json("predictions.json", &records)?;
    Ok(())
}

fn report_from_csv(path: &Path) -> anyhow::Result<EvalReport> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, row) in reader.deserialize::<SamplePrediction>().enumerate() {
        let mut s = row.map_err(|e| Error::Parse { row: i + 2, msg: e.to_string() })?;
        s.prediction = s.prediction.clamp(sarcscore::dsarcnet::SCORE_MIN, sarcscore::dsarcnet::SCORE_MAX);
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} has no predictions", path.display())).into());
    }
    Ok(EvalReport::from_predictions(samples)?)
}

fn partition_ids(split_file: &Path, partition: &str) -> anyhow::Result<HashSet<String>> {
    let record: SplitRecord = read_json(split_file)?;
    let ids = match partition {
        "train" => record.train,
        "val" => record.val,
        "test" => record.test,
        other => {
            return Err(CliError::new("usage", format!("unknown partition {other:?}; valid: train, val, test")).into())
        }
    };
    Ok(ids.into_iter().collect())
}

fn report_from_model(
    config: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    keep: Option<HashSet<String>>,
    stacks_dir: Option<&Path>,
    args: &MaturityArgs,
) -> anyhow::Result<EvalReport> {
    let mut model = DSarcNet::load(checkpoint)?;
    let mut maturity = Maturity::load(args)?;
    let manifest = load_manifest(manifest_path)?;
    let mut samples = Vec::new();
    for (record, label) in label_records(&manifest).records {
        if keep.as_ref().is_some_and(|k| !k.contains(&record.id())) {
            continue;
        }
        let path = manifest.resolve(&record);
        let image = load_image(&path)?;
        let input = inputs::cell_input(&path, &image, stacks_dir, &mut maturity, &config.prepare)?;
        samples.push(sarcscore::TrainSample { input, label });
    }
    if samples.is_empty() {
        return Err(Error::Empty("no labeled cells to evaluate".into()).into());
    }
    Ok(evaluate(&mut model, &samples)?)
}

fn write_report(run: &mut RunDir, report: &EvalReport, plots: bool) -> anyhow::Result<()> {
    println!(
        "{}",
        serde_json::json!({ "spearman": report.spearman, "mae": report.mae, "mse": report.mse, "r2": report.r2, "n": report.n })
    );
    run.write_json("eval_report.json", report)?;
    if plots {
        let scatter = run.path("scatter.svg");
        plot::scatter(&report.samples, &scatter)?;
        run.record(scatter);
        let hist = run.path("label_histogram.svg");
        plot::label_histogram(&report.samples, &hist)?;
        run.record(hist);
    }
    Ok(())
}

fn ablate(
    run: &mut RunDir,
    config: &RunConfig,
    manifest: &Path,
    stacks_dir: Option<&Path>,
    args: &MaturityArgs,
    variants: &[String],
) -> anyhow::Result<()> {
    let variants: Vec<&str> = if variants.is_empty() {
        ABLATION_VARIANTS.to_vec()
    } else {
        variants.iter().map(String::as_str).collect()
    };
    for v in &variants {
        configure_ablation(&config.model, v)?;
    }
    let mut maturity = Maturity::load(args)?;
    let samples = inputs::labeled_samples(manifest, stacks_dir, &mut maturity, &config.prepare)?;
    let split = split_dataset(samples, &config.split)?;
    run.write_json("split.json", &SplitRecord::new(&split, &config.split))?;
    let start = Instant::now();
    let rows = run_ablation(&config.model, &variants, &split.train, &split.val, &split.test, &config.train)?;
    log::info!("ablation finished in {:.0}s", start.elapsed().as_secs_f64());
    let (csv, json) = (run.path("ablation.csv"), run.path("ablation.json"));
    write_ablation_table(&rows, &csv, &json)?;
    run.record(csv);
    run.record(json);
    for r in &rows {
        println!("{:<20} spearman {} mae {:.3} mse {:.3} r2 {:.3}", r.variant, fmt_opt(r.spearman), r.mae, r.mse, r.r2);
    }
    Ok(())
}

#[derive(Serialize)]
struct PatchCsvRow {
    path: String,
    class_id: u8,
}

fn synth(run: &mut RunDir, config: &RunConfig, patches_per_class: Option<usize>) -> anyhow::Result<()> {
    let dir = run.subdir("dataset")?;
    let dataset = generate_dataset(&config.synth, &dir)?;
    for r in &dataset.records {
        run.record(dir.join(&r.image_path));
    }
    run.record(dataset.manifest_path.clone());
    run.record(dir.join(sarcscore::synthgen::SPEC_FILE));
    log::info!("wrote {} cells to {}", dataset.records.len(), dir.display());

    if let Some(per_class) = patches_per_class {
        let pdir = run.subdir("patches")?;
        let csv_path = pdir.join("patches.csv");
        let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
        for (i, p) in generate_patches(per_class, config.synth.seed).iter().enumerate() {
            let name = format!("patch_{i:05}_c{}.png", p.class_id);
            let path = pdir.join(&name);
            save_image_png16(&p.patch.mapv(f64::from), &path)?;
            writer
                .serialize(PatchCsvRow { path: name, class_id: p.class_id })
                .map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
            run.record(path);
        }
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        run.record(csv_path);
    }
    Ok(())
}

fn cmd_plot(run: &mut RunDir, history: Option<&Path>, report: Option<&Path>, ablation: Option<&Path>) -> anyhow::Result<()> {
    if history.is_none() && report.is_none() && ablation.is_none() {
        return Err(CliError::new("usage", "nothing to plot; pass --history, --report or --ablation").into());
    }
    if let Some(h) = history {
        let history: TrainHistory = read_json(h)?;
        let path = run.path("training_curves.svg");
        plot::training_curves(&history, &path)?;
        run.record(path);
    }
    if let Some(r) = report {
        let report: EvalReport = read_json(r)?;
        let scatter = run.path("scatter.svg");
        plot::scatter(&report.samples, &scatter)?;
        run.record(scatter);
        let hist = run.path("label_histogram.svg");
        plot::label_histogram(&report.samples, &hist)?;
        run.record(hist);
    }
    if let Some(a) = ablation {
        let rows: Vec<AblationRow> = read_json(a)?;
        let path = run.path("ablation.svg");
        plot::ablation_bars(&rows, &path)?;
        run.record(path);
    }
    Ok(())
}
