use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use sha2::{Digest, Sha256};

use thermdiff::degrade::{degrade, NoiseModel};
use thermdiff::denoiser::{
    sample_training_patches, train_step, AdamState, Checkpoint, Denoiser, DenoiserConfig,
};
use thermdiff::guidance::{restore_observed, StepReport};
use thermdiff::image::{normalize, stretch, ValueDomain};
use thermdiff::io::{read_image, sidecar_path, write_image_with, ImageMetadata};
use thermdiff::metrics::{evaluate_pair, MetricReport};
use thermdiff::patch::{seam_energy, GridParams, PatchGrid};
use thermdiff::rng::derive_seed;
use thermdiff::scene::{generate_scene, SyntheticSceneSpec};
use thermdiff::{SeededRng, ThermalImage};

use crate::config::{ExperimentConfig, Normalization};
use crate::error::{CliError, Context};
use crate::records::{to_lines, Record};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub force: bool,
    pub verbose: bool,
    pub resume: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

/// Sorted `.pgm` files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no .pgm images", dir.display())));
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Creates `dir`, refusing to touch a non-empty one unless forced. Forcing
/// clears the images, sidecars and manifest a previous run left there.
fn prepare_output_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let entries: Vec<PathBuf> = fs::read_dir(dir).at(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        if !entries.is_empty() {
            if !force {
                return Err(CliError::data(format!(
                    "{} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            for p in entries {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                if name.ends_with(".pgm") || name.ends_with(".pgm.meta") || name == MANIFEST {
                    fs::remove_file(&p).at(&p)?;
                }
            }
        }
    }
    fs::create_dir_all(dir).at(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").at(path)
}

/// Reads an image and brings it into [-1, 1] (or keeps an unbounded
/// measurement as stored).
pub fn load_working_image(path: &Path, mode: Normalization) -> Result<ThermalImage, CliError> {
    let (img, _) = read_image(path).at(path)?;
    let has_sidecar = sidecar_path(path).exists();
    let out = match img.domain() {
        ValueDomain::Normalized | ValueDomain::Unbounded => img,
        ValueDomain::Raw16 if !has_sidecar && mode == Normalization::Stretch => {
            stretch(&img, ValueDomain::Normalized).at(path)?.0
        }
        _ => normalize(&img, ValueDomain::Normalized).at(path)?,
    };
    Ok(out)
}

fn to_unit(img: &ThermalImage) -> thermdiff::Result<ThermalImage> {
    normalize(&img.clamp_to(ValueDomain::Normalized), ValueDomain::Unit)
}

pub fn gen_data(cfg: &ExperimentConfig, opts: Options) -> Result<PathBuf, CliError> {
    let dir = &cfg.dataset_dir;
    prepare_output_dir(dir, opts.force)?;
    let data_seed = cfg.seeds.get("data");
    let (w, h) = cfg.dataset_extent;
    let mut entries = Vec::with_capacity(cfg.dataset_count);
    for i in 0..cfg.dataset_count {
        let seed = derive_seed(data_seed, &format!("scene-{i}"));
        let mut spec = SyntheticSceneSpec::desk(w, h, seed);
        if let Some(n) = cfg.dataset_blob_count {
            spec.blob_count = n;
        }
        let img = generate_scene(&spec);
        let name = format!("scene_{i:04}.pgm");
        let path = dir.join(&name);
        write_image_with(&path, &img, &ImageMetadata::for_image(&img, Some(seed))).at(&path)?;
        entries.push(json!({
            "file": name,
            "seed": seed,
            "sha256": file_sha256(&path)?,
            "meta_sha256": file_sha256(&sidecar_path(&path))?,
        }));
    }
    write_json(
        &dir.join(MANIFEST),
        &json!({
            "kind": "synthetic_scenes",
            "width": w,
            "height": h,
            "data_seed": data_seed,
            "rng": SeededRng::new(0).algorithm_id(),
            "entries": entries,
        }),
    )?;
    println!("wrote {} scenes to {}", cfg.dataset_count, dir.display());
    Ok(dir.clone())
}

pub fn degrade_cmd(cfg: &ExperimentConfig, opts: Options) -> Result<PathBuf, CliError> {
    let inputs = list_images(&cfg.dataset_dir)?;
    let dir = &cfg.degraded_dir;
    prepare_output_dir(dir, opts.force)?;
    let noise = NoiseModel {
        fpn_seed: cfg.seeds.get("fpn"),
        ..cfg.noise.clone()
    };
    let noise_seed = cfg.seeds.get("noise");
    let mut entries = Vec::new();
    for path in &inputs {
        let clean = load_working_image(path, cfg.normalization)?;
        let (_, src_meta) = read_image(path).at(path)?;
        let op = cfg.operator.build(clean.extent()).at(path)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let seed = derive_seed(noise_seed, &name);
        let y = degrade(&clean, &op, &noise, &mut SeededRng::new(seed)).at(path)?;
        let y = match y.clone().with_domain(ValueDomain::Normalized) {
            Ok(inside) => inside,
            Err(_) => y,
        };
        let out = dir.join(&name);
        write_image_with(&out, &y, &ImageMetadata::for_image(&y, src_meta.seed)).at(&out)?;
        entries.push(json!({
            "file": name,
            "source": path.to_string_lossy(),
            "noise_seed": seed,
            "in_extent": [clean.width(), clean.height()],
            "out_extent": [y.width(), y.height()],
            "sha256": file_sha256(&out)?,
        }));
    }
    write_json(
        &dir.join(MANIFEST),
        &json!({
            "kind": "degraded",
            "task": cfg.operator.task_name(),
            "operator": cfg.operator.describe(),
            "noise": {
                "gaussian_sigma": noise.gaussian_sigma,
                "fpn_column_sigma": noise.fpn_column_sigma,
                "fpn_row_sigma": noise.fpn_row_sigma,
                "fpn_seed": noise.fpn_seed,
            },
            "entries": entries,
        }),
    )?;
    println!("degraded {} images into {}", inputs.len(), dir.display());
    Ok(dir.clone())
}

fn load_checkpoint(path: &Path, expected: Option<&DenoiserConfig>) -> Result<(Denoiser, Option<AdamState>), CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("checkpoint not found: {}", path.display())));
    }
    let ck = Checkpoint::load(path).at(path)?;
    ck.restore(expected).at(path)
}

fn save_checkpoint(path: &Path, net: &Denoiser, adam: &AdamState) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    Checkpoint::from_model(net, Some(adam)).save(&tmp).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Trains (or resumes training of) the configured denoiser. Returns the
/// final step count.
pub fn train(cfg: &ExperimentConfig, opts: Options) -> Result<u64, CliError> {
    let images: Vec<ThermalImage> = list_images(&cfg.dataset_dir)?
        .iter()
        .map(|p| load_working_image(p, cfg.normalization))
        .collect::<Result<_, _>>()?;
    let sched = cfg.schedule()?;
    let train_seed = cfg.seeds.get("train");
    let (mut net, mut adam) = if opts.resume && cfg.checkpoint.exists() {
        let (net, adam) = load_checkpoint(&cfg.checkpoint, Some(&cfg.denoiser))?;
        let adam = adam.ok_or_else(|| CliError::data("checkpoint has no optimizer state to resume from"))?;
        (net, adam)
    } else {
        let net = Denoiser::new(cfg.denoiser.clone(), &mut SeededRng::new(derive_seed(train_seed, "init")))?;
        let adam = AdamState::new(&net);
        (net, adam)
    };
    let total = cfg.total_train_steps(images.len()) as u64;
    if let Some(parent) = cfg.loss_log.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(opts.resume)
        .truncate(!opts.resume)
        .open(&cfg.loss_log)
        .at(&cfg.loss_log)?;
    let ps = cfg.denoiser.patch_size;
    let started = Instant::now();
    let start_step = adam.step;
    while adam.step < total {
        let step = adam.step;
        // One stream per step, so a resumed run repeats an uninterrupted one.
        let mut rng = SeededRng::new(derive_seed(train_seed, &format!("step-{step}")));
        let batch = sample_training_patches(&images, ps, cfg.train.variance_threshold, cfg.train.batch_size, &mut rng)?;
        let loss = train_step(&mut net, &mut adam, &batch, &mut rng, &sched, &cfg.train)?;
        writeln!(log, "{} {loss:.8}", adam.step).at(&cfg.loss_log)?;
        if opts.verbose && adam.step % 100 == 0 {
            println!("step {} loss {loss:.5} ({:.1}s)", adam.step, started.elapsed().as_secs_f64());
        }
        if cfg.checkpoint_every > 0 && adam.step % cfg.checkpoint_every as u64 == 0 {
            save_checkpoint(&cfg.checkpoint, &net, &adam)?;
        }
    }
    save_checkpoint(&cfg.checkpoint, &net, &adam)?;
    println!(
        "trained steps {}..{} in {:.1}s; checkpoint {}",
        start_step,
        adam.step,
        started.elapsed().as_secs_f64(),
        cfg.checkpoint.display()
    );
    Ok(adam.step)
}

fn write_output_image(path: &Path, img: &ThermalImage) -> Result<(), CliError> {
    write_image_with(path, img, &ImageMetadata::for_image(img, None)).at(path)
}

/// Restores one measurement with the given net and tiling.
fn restore_one(
    cfg: &ExperimentConfig,
    net: &Denoiser,
    y: &ThermalImage,
    id: &str,
    grid: GridParams,
    snapshot_dir: Option<&Path>,
) -> Result<ThermalImage, CliError> {
    let sched = cfg.schedule()?;
    let op = cfg.operator.for_measurement(y.extent())?;
    let mut rng = SeededRng::new(derive_seed(cfg.seeds.get("sample"), id));
    let mut log = String::new();
    let mut observer = |r: &StepReport| -> thermdiff::Result<()> {
        if let Some(dir) = snapshot_dir {
            let frame = r.corrected.clamp_to(ValueDomain::Normalized);
            let p = dir.join(format!("step_{:04}.pgm", r.index));
            write_image_with(&p, &frame, &ImageMetadata::for_image(&frame, None))?;
            log.push_str(&format!("step {} t {} guidance_norm {:.6e}\n", r.index, r.timestep, r.guidance_norm));
        }
        Ok(())
    };
    if let Some(dir) = snapshot_dir {
        fs::create_dir_all(dir).at(dir)?;
    }
    let out = restore_observed(y, &op, net, &sched, grid, &cfg.guidance, &mut rng, &mut observer)?;
    if let Some(dir) = snapshot_dir {
        let p = dir.join("guidance.log");
        fs::write(&p, log).at(&p)?;
    }
    Ok(out)
}

pub fn restore_cmd(cfg: &ExperimentConfig, opts: Options) -> Result<Vec<PathBuf>, CliError> {
    let (net, _) = load_checkpoint(&cfg.checkpoint, Some(&cfg.denoiser))?;
    let inputs = list_images(&cfg.restore_input)?;
    fs::create_dir_all(&cfg.restore_output).at(&cfg.restore_output)?;
    let mut written = Vec::new();
    for path in &inputs {
        let y = load_working_image(path, cfg.normalization)?;
        let id = stem(path);
        let snapshots = cfg.snapshots.then(|| cfg.restore_output.join("snapshots").join(&id));
        let t0 = Instant::now();
        let out = restore_one(cfg, &net, &y, &id, cfg.grid, snapshots.as_deref()).at(path)?;
        let seconds = t0.elapsed().as_secs_f64();
        let out_path = cfg.restore_output.join(format!("{id}.pgm"));
        write_output_image(&out_path, &out)?;
        let g = &cfg.guidance;
        write_json(
            &cfg.restore_output.join(format!("{id}.run.json")),
            &json!({
                "input": path.to_string_lossy(),
                "checkpoint": cfg.checkpoint.to_string_lossy(),
                "seconds": seconds,
                "operator": cfg.operator.describe(),
                "grid": {"patch_size": cfg.grid.patch_size, "stride": cfg.grid.stride, "window": cfg.grid.window.name(), "shift": g.shift_grid},
                "guidance": {
                    "eta_reg": g.eta_reg, "scale_ls": g.scale_ls, "gamma": g.gamma, "eta_ddim": g.eta_ddim,
                    "zeta": g.zeta, "steps": g.steps, "order": g.order.name(), "clip_denoised": g.clip_denoised,
                    "mu_schedule": g.mu_schedule, "delta_schedule": g.delta_schedule,
                },
                "sample_seed": derive_seed(cfg.seeds.get("sample"), &id),
            }),
        )?;
        if opts.verbose {
            println!("{id}: {seconds:.2}s -> {}", out_path.display());
        }
        written.push(out_path);
    }
    println!("restored {} images into {}", written.len(), cfg.restore_output.display());
    Ok(written)
}

fn print_table(rows: &[Record]) {
    println!("{:<24} {:<18} {:>10} {:>8}", "id", "task", "PSNR(dB)", "SSIM");
    for r in rows {
        if let Record::Evaluation { id, task, psnr_db, ssim } = r {
            println!("{id:<24} {task:<18} {psnr_db:>10.3} {ssim:>8.4}");
        }
    }
}

pub fn evaluate(cfg: &ExperimentConfig, _opts: Options) -> Result<MetricReport, CliError> {
    let restored = list_images(&cfg.evaluate_restored)?;
    let mut per_image = Vec::new();
    let mut records = Vec::new();
    for path in &restored {
        let name = path.file_name().unwrap_or_default();
        let ref_path = cfg.evaluate_reference.join(name);
        let reference = load_working_image(&ref_path, cfg.normalization)?;
        let out = load_working_image(path, cfg.normalization)?;
        let m = evaluate_pair(&stem(path), &to_unit(&reference)?, &to_unit(&out)?).at(path)?;
        records.push(Record::Evaluation {
            id: m.id.clone(),
            task: cfg.operator.task_name().to_string(),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
        });
        per_image.push(m);
    }
    let report = MetricReport::from_images(per_image);
    print_table(&records);
    println!("{:<24} {:<18} {:>10.3} {:>8.4}", "mean", cfg.operator.task_name(), report.psnr_db, report.ssim);
    if let Some(parent) = cfg.evaluate_records.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(&cfg.evaluate_records, to_lines(&records)?).at(&cfg.evaluate_records)?;
    Ok(report)
}

pub fn ablate(cfg: &ExperimentConfig, opts: Options) -> Result<Vec<Record>, CliError> {
    let inputs: Vec<PathBuf> = list_images(&cfg.restore_input)?.into_iter().take(cfg.ablate_images.max(1)).collect();
    let mut records = Vec::new();
    for &ps in &cfg.ablate_patch_sizes {
        let preset = DenoiserConfig::for_patch_size(ps).map_err(|e| CliError::Usage(e.to_string()))?;
        let (net, trained) = match cfg.ablate_checkpoints.get(&ps) {
            Some(p) => (load_checkpoint(p, Some(&preset))?.0, true),
            None => {
                let seed = derive_seed(cfg.seeds.get("train"), &format!("ablate-init-{ps}"));
                (Denoiser::new(preset, &mut SeededRng::new(seed))?, false)
            }
        };
        for overlap in [true, false] {
            let grid = if overlap { GridParams::overlapping(ps) } else { GridParams::non_overlapping(ps) };
            for path in &inputs {
                let id = stem(path);
                let y = load_working_image(path, cfg.normalization)?;
                let t0 = Instant::now();
                let out = restore_one(cfg, &net, &y, &id, grid, None).at(path)?;
                let seconds = t0.elapsed().as_secs_f64();
                let seam_grid = PatchGrid::new(out.extent(), GridParams::non_overlapping(ps), true)?;
                let seams = seam_energy(&out, &seam_grid)?;
                let ref_path = cfg.evaluate_reference.join(path.file_name().unwrap_or_default());
                let (psnr_db, ssim) = if ref_path.exists() {
                    let reference = load_working_image(&ref_path, cfg.normalization)?;
                    let m = evaluate_pair(&id, &to_unit(&reference)?, &to_unit(&out)?).at(&ref_path)?;
                    (m.psnr_db, m.ssim)
                } else {
                    (f64::NAN, f64::NAN)
                };
                let rec = Record::Ablation {
                    id,
                    task: cfg.operator.task_name().to_string(),
                    patch_size: ps,
                    stride: grid.stride,
                    overlap,
                    window: grid.window.name().to_string(),
                    trained,
                    steps: cfg.guidance.steps,
                    psnr_db,
                    ssim,
                    seam_energy: seams,
                    seconds,
                };
                if opts.verbose {
                    println!("{rec:?}");
                }
                records.push(rec);
            }
        }
    }
    println!(
        "{:>5} {:>8} {:>10} {:>8} {:>12} {:>9}",
        "ps", "overlap", "PSNR(dB)", "SSIM", "seam", "seconds"
    );
    for r in &records {
        if let Record::Ablation { patch_size, overlap, psnr_db, ssim, seam_energy, seconds, .. } = r {
            println!("{patch_size:>5} {overlap:>8} {psnr_db:>10.3} {ssim:>8.4} {seam_energy:>12.6} {seconds:>9.3}");
        }
    }
    if let Some(parent) = cfg.ablate_report.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(&cfg.ablate_report, to_lines(&records)?).at(&cfg.ablate_report)?;
    Ok(records)
}
