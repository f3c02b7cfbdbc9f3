//! Batch subcommands over files. Every command returns a [`CliError`] whose
//! [`CliError::exit_code`] is the process exit status.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use subseg_core::checkpoint::{self, CheckpointError, LoadOptions};
use subseg_core::io::{self, IoError};
use subseg_core::metrics::{aggregate_reports, evaluate_segmentation, CaseReport, MetricsError};
use subseg_core::patch::{segment_volume, PatchError};
use subseg_core::training::phantom::{make_phantom, Phantom};
use subseg_core::training::trainer::{train, TrainConfig, TrainError, TrainState, TrainingCase};
use subseg_core::volume::{conform, conform_labels, prepare, rescale_intensity, Volume, VolumeError};
use subseg_core::{Grid, LabelError, LabelTable, ModelConfig, ModelError, Network, PatchGrid, PATCH_SIZE, PATCH_STRIDE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;

/// Environment variable holding the default `--device`.
pub const DEVICE_ENV: &str = "SUBSEG_DEVICE";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Degenerate(_) => EXIT_DEGENERATE,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            CliError::Config(_) => EXIT_CONFIG,
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::IncompatibleDims { .. } => CliError::Config(format!("{e}; choose a smaller stride")),
            _ => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Checkpoint(e.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Io(_) => CliError::Io(e.to_string()),
            LabelError::UnknownClassIndex(_) | LabelError::UnknownFreeSurferId(_) => CliError::Degenerate(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Checkpoint(e.to_string()),
        }
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::Volume(v) => v.into(),
            PatchError::Label(l) => l.into(),
            PatchError::IncompatibleDims { .. } | PatchError::InvalidGrid { .. } => CliError::Config(e.to_string()),
            PatchError::ShapeMismatch { .. } => CliError::Checkpoint(e.to_string()),
            _ => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::EmptyInput => CliError::Io(e.to_string()),
            _ => CliError::Degenerate(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyDataset => CliError::Config(e.to_string()),
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Patch(p) => p.into(),
            TrainError::Volume(v) => v.into(),
            TrainError::Label(l) => l.into(),
            TrainError::NonFiniteLoss { .. } | TrainError::Case { .. } | TrainError::Dice(_) => CliError::Degenerate(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Debug, Parser)]
#[command(name = "subseg", version, about = "Subcortical segmentation of T1-weighted MRI")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Label table (TSV: class_index, freesurfer_id, name); defaults to the built-in table.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    #[arg(long, global = true, value_enum, env = DEVICE_ENV, default_value = "cpu")]
    pub device: Device,
    /// -v debug, -vv trace; the default level is info.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resample to the 256³ 1 mm RAS grid and rescale to [0, 1].
    Conform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Resample report (JSON); defaults to `<output stem>.conform.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment a scan with a trained checkpoint.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = PATCH_STRIDE)]
        stride: usize,
        /// Load the checkpoint even if its label table differs.
        #[arg(long)]
        force: bool,
    },
    /// Train from a JSON job file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the job's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every segmentation in `--pred` against the same-named file in `--reference`.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Directory for per-case JSON reports.
        #[arg(long)]
        output: PathBuf,
        /// Dataset tag stored in each report for grouping.
        #[arg(long)]
        group: Option<String>,
    },
    /// Aggregate case reports into a dataset table.
    Report {
        #[arg(long)]
        reports: PathBuf,
        /// Text table; printed to stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write synthetic labelled volumes for testing.
    Phantom {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn validate_stride(stride: usize) -> Result<PatchGrid> {
    if !(1..=PATCH_SIZE).contains(&stride) {
        return Err(CliError::Config(format!("stride {stride} outside 1..={PATCH_SIZE}")));
    }
    PatchGrid::with_stride(stride).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_table(path: Option<&Path>) -> Result<LabelTable> {
    match path {
        Some(p) => Ok(LabelTable::load(p)?),
        None => Ok(LabelTable::subcortical()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.global.device == Device::Accelerator {
        return Err(CliError::Config("no accelerator backend in this build; use --device cpu".into()));
    }
    let table = || load_table(cli.global.labels.as_deref());
    match &cli.command {
        Command::Conform { input, output, report } => cmd_conform(input, output, report.as_deref()).map(|_| ()),
        Command::Segment { input, checkpoint, output, stride, force } => {
            let grid = validate_stride(*stride)?;
            cmd_segment(input, checkpoint, output, grid, &table()?, *force).map(|_| ())
        }
        Command::Train { config, seed } => cmd_train(config, *seed, &table()?).map(|_| ()),
        Command::Evaluate { pred, reference, output, group } => {
            cmd_evaluate(pred, reference, output, group.as_deref(), &table()?).map(|_| ())
        }
        Command::Report { reports, output, csv } => {
            let text = cmd_report(reports, output.as_deref(), csv.as_deref())?;
            if output.is_none() {
                print!("{text}");
            }
            Ok(())
        }
        Command::Phantom { output, count, seed } => cmd_phantom(output, *count, *seed).map(|_| ()),
    }
}

/// Strips `.nii` / `.nii.gz` and other extensions from a file name.
pub fn case_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".json"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Writes the conformed, rescaled volume and its resample report.
pub fn cmd_conform(input: &Path, output: &Path, report: Option<&Path>) -> Result<PathBuf> {
    let v = io::read_intensity(input)?;
    let (conformed, rep) = conform(&v)?;
    let data = rescale_intensity(&conformed.data)?;
    io::write_intensity(output, &Volume { data, geometry: conformed.geometry })?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| output.with_file_name(format!("{}.conform.json", case_stem(output))));
    write_json(&report_path, &rep)?;
    log::info!("conformed {} -> {} (identity: {})", input.display(), output.display(), rep.identity);
    Ok(report_path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub patch_count: usize,
    pub wall_time_s: f64,
    pub crop_dims: [usize; 3],
}

/// Segments `input` (auto-conformed when needed) and writes FreeSurfer IDs on the conformed grid.
pub fn cmd_segment(
    input: &Path,
    checkpoint_path: &Path,
    output: &Path,
    grid: PatchGrid,
    table: &LabelTable,
    force: bool,
) -> Result<SegmentSummary> {
    let start = Instant::now();
    let fingerprint = table.fingerprint();
    let opts = LoadOptions { expected_config: None, expected_fingerprint: Some(&fingerprint), force };
    let ckpt = checkpoint::load(checkpoint_path, &opts)?;
    if ckpt.network.config().patch_size != grid.size {
        return Err(CliError::Checkpoint(format!(
            "checkpoint patch size {} differs from {}",
            ckpt.network.config().patch_size,
            grid.size
        )));
    }
    let raw = io::read_intensity(input)?;
    let (conformed, report) = prepare(&raw)?;
    if report.is_some() {
        log::info!("{} was conformed before segmentation", input.display());
    }
    let seg = segment_volume(&conformed, &ckpt.network, table, grid)?;
    io::write_labels(output, &Volume { data: seg.labels, geometry: conformed.volume().geometry })?;
    let summary = SegmentSummary {
        patch_count: seg.patch_count,
        wall_time_s: start.elapsed().as_secs_f64(),
        crop_dims: seg.frame.dims,
    };
    log::info!("patches={} wall_time={:.2}s", summary.patch_count, summary.wall_time_s);
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasePaths {
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomData {
    pub seed: u64,
    pub train_cases: usize,
    pub val_cases: usize,
    /// Train on the centred patch only instead of the whole content crop.
    pub centre_patch: bool,
}

impl Default for PhantomData {
    fn default() -> Self {
        Self { seed: 0, train_cases: 1, val_cases: 0, centre_patch: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum DataSource {
    #[serde(rename = "files")]
    Files { train: Vec<CasePaths>, #[serde(default)] val: Vec<CasePaths> },
    #[serde(rename = "phantom")]
    Phantom(PhantomData),
}

/// A training job file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub data: DataSource,
    /// Stride of the patch grid training patches are drawn from.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Checkpoint to continue from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

fn default_stride() -> usize {
    PATCH_STRIDE
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_case(paths: &CasePaths, base: &Path, table: &LabelTable, grid: PatchGrid) -> Result<TrainingCase> {
    let image = resolve(base, &paths.image);
    let raw = io::read_intensity(&image)?;
    let labels = io::read_labels(&resolve(base, &paths.labels))?;
    if labels.dims() != raw.dims() {
        return Err(CliError::Degenerate(format!("{}: labels {:?} vs image {:?}", image.display(), labels.dims(), raw.dims())));
    }
    let (conformed, report) = prepare(&raw)?;
    let ids = match report {
        Some(r) => conform_labels(&labels, &r)?.data,
        None => labels.data,
    };
    Ok(TrainingCase::new(case_stem(&image), &conformed, &ids, table, grid)?)
}

fn phantom_case(ph: &Phantom, id: String, table: &LabelTable, grid: PatchGrid, centre: bool) -> Result<TrainingCase> {
    if centre {
        let o = Phantom::centre_offset(grid.size);
        let size = grid.patch_dims();
        let img = ph.intensity.grid().window(o, size);
        let lab = ph.class_labels(table).window(o, size);
        Ok(TrainingCase::from_crop(id, img, lab, grid)?)
    } else {
        Ok(TrainingCase::new(id, &ph.intensity, &ph.labels.data, table, grid)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub best_val_dsc: Option<f64>,
    pub output_dir: PathBuf,
}

pub fn load_job(path: &Path) -> Result<TrainJob> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_train(job_path: &Path, seed: Option<u64>, table: &LabelTable) -> Result<TrainOutcome> {
    let mut job = load_job(job_path)?;
    if let Some(s) = seed {
        job.train.seed = s;
    }
    job.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    job.train.validate()?;
    if job.model.num_classes != table.len() {
        return Err(CliError::Config(format!("model has {} classes, label table {}", job.model.num_classes, table.len())));
    }
    let grid = PatchGrid::new(job.model.patch_size, job.stride).map_err(|e| CliError::Config(e.to_string()))?;
    let base = job_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (train_cases, val_cases) = match &job.data {
        DataSource::Files { train, val } => {
            let load = |list: &[CasePaths]| list.iter().map(|c| load_case(c, &base, table, grid)).collect::<Result<Vec<_>>>();
            (load(train)?, load(val)?)
        }
        DataSource::Phantom(p) => {
            let phantoms = make_phantom(&mut ChaCha8Rng::seed_from_u64(p.seed), p.train_cases + p.val_cases);
            let mut cases = phantoms
                .iter()
                .enumerate()
                .map(|(i, ph)| phantom_case(ph, format!("phantom{i:03}"), table, grid, p.centre_patch))
                .collect::<Result<Vec<_>>>()?;
            let val = cases.split_off(p.train_cases);
            (cases, val)
        }
    };

    let out_dir = resolve(&base, &job.output_dir);
    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("job.json"), &job)?;
    let mut state = match &job.resume {
        Some(p) => {
            let fp = table.fingerprint();
            let opts = LoadOptions { expected_config: Some(&job.model), expected_fingerprint: Some(&fp), force: false };
            TrainState::from_checkpoint(checkpoint::load(&resolve(&base, p), &opts)?, &job.train)
        }
        None => TrainState::new(Network::new(job.model.clone(), job.train.seed)?, &job.train),
    };
    let summary = train(&mut state, &train_cases, &val_cases, &job.train, &table.fingerprint(), Some(&out_dir))?;
    Ok(TrainOutcome {
        steps_run: summary.records.len(),
        final_step: state.step,
        final_loss: summary.records.last().map(|r| r.loss),
        best_val_dsc: state.best_val_dsc,
        output_dir: out_dir,
    })
}

fn nifti_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.to_string_lossy();
            n.ends_with(".nii") || n.ends_with(".nii.gz")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// One JSON report per reference case, written to `out_dir/<case>.json`.
pub fn cmd_evaluate(pred_dir: &Path, ref_dir: &Path, out_dir: &Path, group: Option<&str>, table: &LabelTable) -> Result<Vec<CaseReport>> {
    let refs = nifti_files(ref_dir)?;
    if refs.is_empty() {
        return Err(CliError::Io(format!("{}: no NIfTI files", ref_dir.display())));
    }
    let preds = nifti_files(pred_dir)?;
    ensure_dir(out_dir)?;
    let mut reports = Vec::new();
    for r in refs {
        let id = case_stem(&r);
        let p = preds
            .iter()
            .find(|p| case_stem(p) == id)
            .ok_or_else(|| CliError::Io(format!("{}: no prediction for case {id}", pred_dir.display())))?;
        let reference = io::read_labels(&r)?;
        let pred = io::read_labels(p)?;
        if pred.dims() != reference.dims() {
            return Err(CliError::Degenerate(format!("case {id}: prediction {:?} vs reference {:?}", pred.dims(), reference.dims())));
        }
        let mut report = evaluate_segmentation(&id, &pred.data, &reference.data, table, reference.geometry.spacing)?;
        report.group = group.map(str::to_string);
        write_json(&out_dir.join(format!("{id}.json")), &report)?;
        log::info!("{id}: mean dsc {:?}, mean assd {:?}", report.mean_dsc, report.mean_assd);
        reports.push(report);
    }
    Ok(reports)
}

/// Groups case reports by their tag (untagged: "all") and renders the text table.
pub fn cmd_report(reports_dir: &Path, output: Option<&Path>, csv: Option<&Path>) -> Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(reports_dir)
        .map_err(|e| io_error(reports_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let reports = files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| io_error(f, e))?;
            serde_json::from_str::<CaseReport>(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = aggregate_reports(&reports, |r| r.group.clone().unwrap_or_else(|| "all".into()))?;
    let text = table.to_text();
    if let Some(p) = output {
        fs::write(p, &text).map_err(|e| io_error(p, e))?;
    }
    if let Some(p) = csv {
        fs::write(p, table.to_csv()).map_err(|e| io_error(p, e))?;
    }
    Ok(text)
}

/// Writes `images/phantomNNN.nii.gz` and `labels/phantomNNN.nii.gz` under `out_dir`.
pub fn cmd_phantom(out_dir: &Path, count: usize, seed: u64) -> Result<Vec<(PathBuf, PathBuf)>> {
    if count == 0 {
        return Err(CliError::Config("count must be positive".into()));
    }
    let (images, labels) = (out_dir.join("images"), out_dir.join("labels"));
    ensure_dir(&images)?;
    ensure_dir(&labels)?;
    let mut written = Vec::new();
    for (i, ph) in make_phantom(&mut ChaCha8Rng::seed_from_u64(seed), count).into_iter().enumerate() {
        let name = format!("phantom{i:03}.nii.gz");
        let (ip, lp) = (images.join(&name), labels.join(&name));
        io::write_intensity(&ip, ph.intensity.volume())?;
        io::write_labels(&lp, &ph.labels)?;
        written.push((ip, lp));
    }
    Ok(written)
}

/// Reads a label volume's grid; convenience for callers comparing outputs.
pub fn read_label_grid(path: &Path) -> Result<Grid<u16>> {
    Ok(io::read_labels(path)?.data)
}
