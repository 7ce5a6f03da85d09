//! Experiment configuration: one `key = value` pair per line, keys grouped by
//! dotted prefixes (`train.learning_rate`). `#` starts a comment. Every key
//! is optional; unknown and repeated keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thermdiff::degrade::{gaussian_taps, LinearOperator, NoiseModel};
use thermdiff::denoiser::{DenoiserConfig, TrainConfig};
use thermdiff::diffusion::{DiffusionSchedule, PAPER_BETA_END, PAPER_BETA_START, PAPER_STEPS};
use thermdiff::guidance::{GuidanceConfig, GuidanceOrder};
use thermdiff::patch::{GridParams, WindowKind};
use thermdiff::rng::derive_seed;

use crate::error::CliError;

/// How raw 16-bit images without a sidecar are brought into [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Per-image min-max stretch.
    Stretch,
    /// Fixed linear map of the full 16-bit range.
    Range,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorSpec {
    Identity,
    Box { factor: usize },
    Blur { sigma: f64, taps: usize },
    BlurBox { sigma: f64, taps: usize, factor: usize },
}

impl OperatorSpec {
    pub fn task_name(&self) -> &'static str {
        match self {
            OperatorSpec::Identity => "denoise",
            OperatorSpec::Box { .. } => "super_resolution",
            OperatorSpec::Blur { .. } => "deblur",
            OperatorSpec::BlurBox { .. } => "deblur_super_resolution",
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            OperatorSpec::Box { factor } | OperatorSpec::BlurBox { factor, .. } => *factor,
            _ => 1,
        }
    }

    /// The operator acting on a clean image of `extent`.
    pub fn build(&self, extent: (usize, usize)) -> thermdiff::Result<LinearOperator> {
        Ok(match self {
            OperatorSpec::Identity => LinearOperator::identity(extent),
            OperatorSpec::Box { factor } => LinearOperator::box_downsample(extent, *factor)?,
            OperatorSpec::Blur { sigma, taps } => LinearOperator::gaussian_blur(extent, gaussian_taps(*sigma, *taps)?)?,
            OperatorSpec::BlurBox { sigma, taps, factor } => LinearOperator::composite(vec![
                LinearOperator::gaussian_blur(extent, gaussian_taps(*sigma, *taps)?)?,
                LinearOperator::box_downsample(extent, *factor)?,
            ])?,
        })
    }

    /// Operator whose output has the extent of a measurement.
    pub fn for_measurement(&self, measured: (usize, usize)) -> thermdiff::Result<LinearOperator> {
        let f = self.factor();
        self.build((measured.0 * f, measured.1 * f))
    }

    pub fn describe(&self) -> serde_json::Value {
        match self {
            OperatorSpec::Identity => serde_json::json!({"kind": "identity"}),
            OperatorSpec::Box { factor } => serde_json::json!({"kind": "box", "factor": factor}),
            OperatorSpec::Blur { sigma, taps } => serde_json::json!({"kind": "blur", "sigma": sigma, "taps": taps}),
            OperatorSpec::BlurBox { sigma, taps, factor } => {
                serde_json::json!({"kind": "blur_box", "sigma": sigma, "taps": taps, "factor": factor})
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seeds {
    pub master: u64,
    explicit: BTreeMap<String, u64>,
}

impl Seeds {
    pub const NAMES: [&'static str; 5] = ["data", "noise", "fpn", "train", "sample"];

    /// The named stream's seed: explicit if configured, else derived from the master.
    pub fn get(&self, name: &str) -> u64 {
        self.explicit
            .get(name)
            .copied()
            .unwrap_or_else(|| derive_seed(self.master, name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub base_dir: PathBuf,
    pub seeds: Seeds,

    pub dataset_dir: PathBuf,
    pub dataset_count: usize,
    pub dataset_extent: (usize, usize),
    pub dataset_blob_count: Option<usize>,
    pub normalization: Normalization,

    pub degraded_dir: PathBuf,
    pub operator: OperatorSpec,
    pub noise: NoiseModel,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub train_steps: Option<usize>,
    pub checkpoint: PathBuf,
    pub checkpoint_every: usize,
    pub loss_log: PathBuf,

    pub grid: GridParams,
    pub guidance: GuidanceConfig,

    pub restore_input: PathBuf,
    pub restore_output: PathBuf,
    pub snapshots: bool,

    pub evaluate_reference: PathBuf,
    pub evaluate_restored: PathBuf,
    pub evaluate_records: PathBuf,

    pub ablate_patch_sizes: Vec<usize>,
    pub ablate_images: usize,
    pub ablate_checkpoints: BTreeMap<usize, PathBuf>,
    pub ablate_report: PathBuf,

    /// Absolute paths found in the file; callers may warn about them.
    pub absolute_paths: Vec<String>,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

fn usage(msg: String) -> CliError {
    CliError::Usage(msg)
}

impl Entries {
    fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {line_no}: expected 'key = value'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(usage(format!("config line {line_no}: bad key '{k}'")));
            }
            if map.insert(k.to_string(), (v.to_string(), line_no)).is_some() {
                return Err(usage(format!("config line {line_no}: key '{k}' given twice")));
            }
        }
        Ok(Self { map })
    }

    fn take_str(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| usage(format!("config line {line}: {key} = '{v}': {e}"))),
        }
    }

    fn take_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config line {line}: {key} = '{v}': {e}"))),
        }
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| usage(format!("config line {line}: {key}: '{s}': {e}"))))
                .collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut e = Entries::parse(text)?;
        let mut absolute_paths = Vec::new();
        let mut path = |e: &mut Entries, key: &str, default: &str| -> PathBuf {
            let v = e.take_str(key).map(|(v, _)| v).unwrap_or_else(|| default.to_string());
            let p = PathBuf::from(&v);
            if p.is_absolute() {
                absolute_paths.push(format!("{key} = {v}"));
                p
            } else {
                base_dir.join(p)
            }
        };

        let master = e.take("seeds.master", 0u64)?;
        let mut explicit = BTreeMap::new();
        for name in Seeds::NAMES {
            if let Some(s) = e.take_opt::<u64>(&format!("seeds.{name}"))? {
                explicit.insert(name.to_string(), s);
            }
        }

        let dataset_dir = path(&mut e, "dataset.dir", "data/clean");
        let dataset_count = e.take("dataset.count", 32usize)?;
        let dataset_extent = (e.take("dataset.width", 64usize)?, e.take("dataset.height", 64usize)?);
        let dataset_blob_count = e.take_opt("dataset.blob_count")?;
        let normalization = match e.take("dataset.normalization", "stretch".to_string())?.as_str() {
            "stretch" => Normalization::Stretch,
            "range" => Normalization::Range,
            other => return Err(usage(format!("dataset.normalization: unknown mode '{other}'"))),
        };

        let degraded_dir = path(&mut e, "degrade.dir", "data/degraded");
        let kind = e.take("operator.kind", "identity".to_string())?;
        let factor = e.take("operator.factor", 2usize)?;
        let sigma = e.take("operator.blur_sigma", 1.0f64)?;
        let taps = e.take("operator.blur_taps", 5usize)?;
        let operator = match kind.as_str() {
            "identity" => OperatorSpec::Identity,
            "box" => OperatorSpec::Box { factor },
            "blur" => OperatorSpec::Blur { sigma, taps },
            "blur_box" => OperatorSpec::BlurBox { sigma, taps, factor },
            other => return Err(usage(format!("operator.kind: unknown operator '{other}'"))),
        };
        let noise = NoiseModel {
            gaussian_sigma: e.take("noise.gaussian_sigma", 0.1)?,
            fpn_column_sigma: e.take("noise.fpn_column_sigma", 0.0)?,
            fpn_row_sigma: e.take("noise.fpn_row_sigma", 0.0)?,
            fpn_seed: 0,
        };

        let schedule_steps = e.take("schedule.steps", PAPER_STEPS)?;
        let beta_start = e.take("schedule.beta_start", PAPER_BETA_START)?;
        let beta_end = e.take("schedule.beta_end", PAPER_BETA_END)?;

        let preset = e.take("denoiser.preset", "desk".to_string())?;
        let denoiser = match preset.as_str() {
            "desk" | "desk16" => DenoiserConfig::desk(),
            "desk32" => DenoiserConfig::desk32(),
            "paper64" => DenoiserConfig::paper64(),
            "paper128" => DenoiserConfig::paper128(),
            other => return Err(usage(format!("denoiser.preset: unknown preset '{other}'"))),
        };

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: e.take("train.learning_rate", defaults.learning_rate)?,
            batch_size: e.take("train.batch_size", defaults.batch_size)?,
            epochs: e.take("train.epochs", defaults.epochs)?,
            variance_threshold: e.take("train.variance_threshold", defaults.variance_threshold)?,
            ..defaults
        };
        let train_steps = e.take_opt("train.steps")?;
        let checkpoint = path(&mut e, "train.checkpoint", "out/denoiser.ckpt");
        let checkpoint_every = e.take("train.checkpoint_every", 500usize)?;
        let loss_log = path(&mut e, "train.loss_log", "out/loss.log");

        let ps = e.take("grid.patch_size", denoiser.patch_size)?;
        let window: WindowKind = e
            .take("grid.window", "raised_cosine".to_string())?
            .parse()
            .map_err(|err| usage(format!("grid.window: {err}")))?;
        let grid = GridParams {
            patch_size: ps,
            stride: e.take("grid.stride", (ps / 2).max(1))?,
            window,
        };

        let gd = GuidanceConfig::default();
        let steps = e.take("guidance.steps", gd.steps)?;
        let mu_schedule = e.take_list::<f64>("guidance.mu_schedule", vec![])?;
        let delta_schedule = e.take_list::<f64>("guidance.delta_schedule", vec![])?;
        let order: GuidanceOrder = e
            .take("guidance.order", gd.order.name().to_string())?
            .parse()
            .map_err(|err| usage(format!("guidance.order: {err}")))?;
        let guidance = GuidanceConfig {
            eta_reg: e.take("guidance.eta_reg", gd.eta_reg)?,
            scale_ls: e.take("guidance.scale_ls", gd.scale_ls)?,
            gamma: e.take("guidance.gamma", gd.gamma)?,
            eta_ddim: e.take("guidance.eta_ddim", gd.eta_ddim)?,
            zeta: e.take("guidance.zeta", gd.zeta)?,
            steps,
            mu_schedule: (!mu_schedule.is_empty()).then_some(mu_schedule),
            delta_schedule: (!delta_schedule.is_empty()).then_some(delta_schedule),
            order,
            shift_grid: e.take("grid.shift", false)?,
            clip_denoised: e.take("guidance.clip_denoised", gd.clip_denoised)?,
        };

        let restore_input = path(&mut e, "restore.input_dir", "data/degraded");
        let restore_output = path(&mut e, "restore.output_dir", "out/restored");
        let snapshots = e.take("restore.snapshots", false)?;

        let evaluate_reference = path(&mut e, "evaluate.reference_dir", "data/clean");
        let evaluate_restored = path(&mut e, "evaluate.restored_dir", "out/restored");
        let evaluate_records = path(&mut e, "evaluate.records", "out/evaluation.jsonl");

        let ablate_patch_sizes = e.take_list("ablate.patch_sizes", vec![16usize, 32, 64])?;
        let ablate_images = e.take("ablate.images", 1usize)?;
        let mut ablate_checkpoints = BTreeMap::new();
        if let Some((v, line)) = e.take_str("ablate.checkpoints") {
            for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (ps, p) = item
                    .split_once(':')
                    .ok_or_else(|| usage(format!("config line {line}: ablate.checkpoints entries are 'size:path'")))?;
                let ps: usize = ps
                    .trim()
                    .parse()
                    .map_err(|err| usage(format!("config line {line}: patch size '{ps}': {err}")))?;
                let p = PathBuf::from(p.trim());
                ablate_checkpoints.insert(ps, if p.is_absolute() { p } else { base_dir.join(p) });
            }
        }
        let ablate_report = path(&mut e, "ablate.report", "out/ablation.jsonl");

        if let Some((key, (_, line))) = e.map.iter().next() {
            return Err(usage(format!("config line {line}: unknown key '{key}'")));
        }

        let cfg = Self {
            base_dir: base_dir.to_path_buf(),
            seeds: Seeds { master, explicit },
            dataset_dir,
            dataset_count,
            dataset_extent,
            dataset_blob_count,
            normalization,
            degraded_dir,
            operator,
            noise,
            schedule_steps,
            beta_start,
            beta_end,
            denoiser,
            train,
            train_steps,
            checkpoint,
            checkpoint_every,
            loss_log,
            grid,
            guidance,
            restore_input,
            restore_output,
            snapshots,
            evaluate_reference,
            evaluate_restored,
            evaluate_records,
            ablate_patch_sizes,
            ablate_images,
            ablate_checkpoints,
            ablate_report,
            absolute_paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let check = |r: thermdiff::Result<()>| r.map_err(|e| usage(e.to_string()));
        check(self.train.validate())?;
        check(self.noise.validate())?;
        check(self.denoiser.validate())?;
        check(self.guidance.validate(&self.schedule().map_err(|e| usage(e.to_string()))?))?;
        if self.grid.patch_size != self.denoiser.patch_size {
            return Err(usage(format!(
                "grid.patch_size {} does not match the denoiser preset's {}",
                self.grid.patch_size, self.denoiser.patch_size
            )));
        }
        if self.dataset_count == 0 {
            return Err(usage("dataset.count must be at least 1".into()));
        }
        Ok(())
    }

    /// Overrides the master seed, as `--seed` does.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seeds.master = seed;
        self
    }

    pub fn schedule(&self) -> thermdiff::Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    /// Total optimizer steps: `train.steps` if set, else one batch per
    /// dataset image per epoch.
    pub fn total_train_steps(&self, dataset_images: usize) -> usize {
        self.train_steps.unwrap_or(self.train.epochs * dataset_images)
    }
}
