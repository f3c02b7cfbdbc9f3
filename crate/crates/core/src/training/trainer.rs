use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::grid::Grid;
use crate::labels::{LabelError, LabelTable};
use crate::model::{ModelError, Network};
use crate::nn::Module;
use crate::patch::{plan_patches, PatchError, PatchGrid, PatchPlan};
use crate::tensor::FeatureMap;
use crate::training::augment::{augment, AugmentConfig};
use crate::training::dice::{dice_loss_labels, DiceError};
use crate::training::optim::{AdamW, AdamWConfig};
use crate::training::sampling::{draw_offset, foreground_offsets, FOREGROUND_PROB};
use crate::volume::{crop_to_content, ConformedVolume, VolumeError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub augment_prob: f64,
    pub augment: AugmentConfig,
    pub foreground_prob: f64,
    pub include_background: bool,
    pub seed: u64,
    pub max_steps: u64,
    pub val_every: u64,
    /// Stop once the batch loss falls below this value.
    pub stop_below_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            learning_rate: opt.learning_rate,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            batch_size: 2,
            augment_prob: 0.2,
            augment: AugmentConfig::default(),
            foreground_prob: FOREGROUND_PROB,
            include_background: true,
            seed: 0,
            max_steps: 1000,
            val_every: 100,
            stop_below_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.val_every == 0 {
            return bad("val_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return bad(format!("learning_rate {} / weight_decay {}", self.learning_rate, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("beta1 and beta2 must lie in [0, 1) and eps must be positive".into());
        }
        for (name, p) in [("augment_prob", self.augment_prob), ("foreground_prob", self.foreground_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        self.augment.validate().map_err(TrainError::Config)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("case {id}: {reason}")]
    Case { id: String, reason: String },
    #[error("I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// One subject prepared for patch sampling: crop-frame intensity, class indices and plan.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub id: String,
    pub intensity: Grid<f32>,
    pub labels: Grid<u8>,
    pub plan: PatchPlan,
    foreground: Vec<[usize; 3]>,
}

impl TrainingCase {
    /// Crops both volumes to the intensity content window. Labels are FreeSurfer IDs on
    /// the same conformed grid; any outside the window are dropped with the background.
    pub fn new(
        id: impl Into<String>,
        intensity: &ConformedVolume,
        label_ids: &Grid<u16>,
        table: &LabelTable,
        grid: PatchGrid,
    ) -> Result<Self, TrainError> {
        let id = id.into();
        if label_ids.dims() != intensity.grid().dims() {
            return Err(TrainError::Case {
                id,
                reason: format!("labels {:?} vs intensity {:?}", label_ids.dims(), intensity.grid().dims()),
            });
        }
        let (crop, frame) = crop_to_content(intensity.grid(), grid)?;
        let classes = table.map_to_class_indices(&label_ids.window(frame.offset, frame.dims))?;
        Self::from_crop(id, crop, classes, grid)
    }

    /// From grids that are already cropped to a tileable window.
    pub fn from_crop(id: impl Into<String>, intensity: Grid<f32>, labels: Grid<u8>, grid: PatchGrid) -> Result<Self, TrainError> {
        let id = id.into();
        if labels.dims() != intensity.dims() {
            return Err(TrainError::Case { id, reason: format!("labels {:?} vs intensity {:?}", labels.dims(), intensity.dims()) });
        }
        let plan = plan_patches(intensity.dims(), grid)?;
        let foreground = foreground_offsets(&labels, &plan);
        Ok(Self { id, intensity, labels, plan, foreground })
    }

    /// The plan offset closest to the crop centre.
    pub fn centre_offset(&self) -> [usize; 3] {
        let s = self.plan.grid;
        [0, 1, 2].map(|a| {
            let steps = (self.plan.crop_dims[a] - s.size) / s.stride;
            steps / 2 * s.stride
        })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub network: Network,
    pub optimizer: AdamW,
    pub step: u64,
    pub best_val_dsc: Option<f64>,
}

impl TrainState {
    pub fn new(network: Network, cfg: &TrainConfig) -> Self {
        let optimizer = AdamW::new(cfg.optimizer(), &network);
        Self { network, optimizer, step: 0, best_val_dsc: None }
    }

    /// Resumes from a checkpoint; a checkpoint without optimizer state starts fresh moments.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &TrainConfig) -> Self {
        let mut optimizer = ckpt.optimizer.unwrap_or_else(|| AdamW::new(cfg.optimizer(), &ckpt.network));
        optimizer.config = cfg.optimizer();
        Self { network: ckpt.network, optimizer, step: ckpt.step, best_val_dsc: ckpt.best_val_dsc }
    }

    pub fn checkpoint(&self, label_fingerprint: &str) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            optimizer: Some(self.optimizer.clone()),
            label_fingerprint: label_fingerprint.to_string(),
            step: self.step,
            best_val_dsc: self.best_val_dsc,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub val_dsc: Option<f64>,
    /// Seconds since this `train` call started.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub stopped_early: bool,
}

/// Per-step generator: the draw for step `s` does not depend on how many steps ran before,
/// so a resumed run sees the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

/// Mean DSC over foreground classes present in prediction or reference.
pub fn mean_foreground_dsc(pred: &Grid<u8>, reference: &Grid<u8>, classes: usize) -> f64 {
    let mut inter = vec![0u64; classes];
    let mut np = vec![0u64; classes];
    let mut nr = vec![0u64; classes];
    for (&p, &r) in pred.as_slice().iter().zip(reference.as_slice()) {
        np[p as usize] += 1;
        nr[r as usize] += 1;
        if p == r {
            inter[p as usize] += 1;
        }
    }
    let scores: Vec<f64> = (1..classes)
        .filter(|&c| np[c] + nr[c] > 0)
        .map(|c| 2.0 * inter[c] as f64 / (np[c] + nr[c]) as f64)
        .collect();
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

pub fn argmax_channels(probs: &FeatureMap) -> Grid<u8> {
    let n = probs.spatial_len();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..probs.channels() {
                if probs.channel(c)[v] > probs.channel(best)[v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Grid::from_vec(probs.dims(), data).expect("sized from the feature map")
}

/// Mean foreground DSC of the network on each case's centre patch.
pub fn validate(network: &Network, cases: &[TrainingCase]) -> Result<f64, TrainError> {
    let classes = network.config().num_classes;
    let mut total = 0.0;
    for case in cases {
        let o = case.centre_offset();
        let size = case.plan.grid.patch_dims();
        let probs = network.forward(&case.intensity.window(o, size))?;
        total += mean_foreground_dsc(&argmax_channels(&probs), &case.labels.window(o, size), classes);
    }
    Ok(total / cases.len() as f64)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Runs steps `state.step + 1 ..= cfg.max_steps`. With an output directory it writes
/// `init.ckpt` (fresh runs only), `last.ckpt`, `best.ckpt` and appends to `metrics.jsonl`.
pub fn train(
    state: &mut TrainState,
    train_cases: &[TrainingCase],
    val_cases: &[TrainingCase],
    cfg: &TrainConfig,
    label_fingerprint: &str,
    out_dir: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let patch = state.network.config().patch_size;
    for c in train_cases.iter().chain(val_cases) {
        if c.plan.grid.size != patch {
            return Err(TrainError::Case { id: c.id.clone(), reason: format!("patch size {} vs model {patch}", c.plan.grid.size) });
        }
    }
    state.optimizer.config = cfg.optimizer();

    let mut log = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        if state.step == 0 {
            checkpoint::save(&dir.join("init.ckpt"), &state.checkpoint(label_fingerprint))?;
        }
        let path = dir.join("metrics.jsonl");
        let file = if state.step == 0 {
            File::create(&path)
        } else {
            OpenOptions::new().create(true).append(true).open(&path)
        };
        log = Some((file.map_err(io_err(&path))?, path));
    }

    let start = Instant::now();
    let mut records = Vec::new();
    let mut stopped_early = false;
    while state.step < cfg.max_steps {
        let step = state.step + 1;
        let mut rng = step_rng(cfg.seed, step);
        let loss = train_step(&mut state.network, train_cases, cfg, &mut rng)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        state.optimizer.step(&mut state.network);
        state.step = step;

        let stop = cfg.stop_below_loss.is_some_and(|t| loss < t);
        let checkpoint_now = step.is_multiple_of(cfg.val_every) || step == cfg.max_steps || stop;
        let mut val_dsc = None;
        if checkpoint_now && !val_cases.is_empty() {
            let dsc = validate(&state.network, val_cases)?;
            val_dsc = Some(dsc);
            if state.best_val_dsc.is_none_or(|b| dsc > b) {
                state.best_val_dsc = Some(dsc);
                if let Some(dir) = out_dir {
                    checkpoint::save(&dir.join("best.ckpt"), &state.checkpoint(label_fingerprint))?;
                }
            }
        }
        let record = StepRecord { step, loss, val_dsc, wall_time: start.elapsed().as_secs_f64() };
        match val_dsc {
            Some(d) => log::info!("step {step} loss {loss:.5} val_dsc {d:.4}"),
            None => log::debug!("step {step} loss {loss:.5}"),
        }
        if let Some((file, path)) = &mut log {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        records.push(record);
        if checkpoint_now {
            if let Some(dir) = out_dir {
                checkpoint::save(&dir.join("last.ckpt"), &state.checkpoint(label_fingerprint))?;
            }
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainSummary { records, stopped_early })
}

/// Forward and backward over one batch; gradients are left on the network scaled by 1/B.
fn train_step(network: &mut Network, cases: &[TrainingCase], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    network.zero_grad();
    let scale = 1.0 / cfg.batch_size as f32;
    let mut total = 0.0;
    for _ in 0..cfg.batch_size {
        let case = &cases[rng.gen_range(0..cases.len())];
        let o = draw_offset(&case.plan, &case.foreground, cfg.foreground_prob, rng);
        let size = case.plan.grid.patch_dims();
        let (img, lab) = augment(&case.intensity.window(o, size), &case.labels.window(o, size), cfg.augment_prob, &cfg.augment, rng);
        let tape = network.forward_train(&img)?;
        let (loss, mut grad) = dice_loss_labels(&tape.probs, &lab, cfg.include_background)?;
        grad.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        network.backward(&tape, &grad);
        total += loss;
    }
    Ok(total / cfg.batch_size as f64)
}

/// Where `train` writes its files under `dir`.
pub fn output_paths(dir: &Path) -> [PathBuf; 4] {
    ["init.ckpt", "last.ckpt", "best.ckpt", "metrics.jsonl"].map(|f| dir.join(f))
}
