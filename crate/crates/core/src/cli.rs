//! The `fbnet` command-line front end.
//!
//! Every subcommand resolves its settings as defaults, then the `--config`
//! JSON file, then flags, and echoes the result; the echo is itself a valid
//! `--config` file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    holdout_split, load_dataset, stitch_maps, synth_generate, synth_scene, tile_scene, write_dataset, write_map,
    Dataset, SynthConfig,
};
use crate::detection::{detection_map, DetectionConfig, MapMethod, COMPARED_METHODS};
use crate::error::{Error, Result};
use crate::evaluation::{
    common_tp_set, metrics_csv, roc_auc, roc_csv, sweep_csv, threshold_sweep, ClassificationMetrics, RocPooling,
};
use crate::maps::GradTarget;
use crate::models::probe::LossProbe;
use crate::models::{infer, load_checkpoint, save_checkpoint, CheckpointMeta, ModelParams, ModelVariant};
use crate::nn::gradcheck::{GradCheckConfig, GradCheckReport};
use crate::training::{positive_scores, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "fbnet", version, about = "Solar power plant patch classification and pixel detection")]
pub struct Cli {
    /// Worker threads; defaults to every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON settings for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic patch dataset.
    Synth(SynthArgs),
    /// Generate a synthetic multi-tile scene.
    SynthScene(SceneArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Patch classification metrics for one or more checkpoints.
    EvalClassify(EvalClassifyArgs),
    /// Pixel detection ROC/AUC on the common true-positive set.
    EvalDetect(EvalDetectArgs),
    /// Scene-level activation map.
    Detect(DetectArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

fn base<T: DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    match config {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(p, format!("bad config: {e}")))
        }
    }
}

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::invalid(format!("{flag} is required")));
    }
    Ok(())
}

fn echo<T: Serialize>(command: &str, run: &T, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(run).expect("config serializes");
    eprintln!("{command} config: {}", serde_json::to_string(run).expect("config serializes"));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        fs::write(&p, format!("{json}\n")).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Positive patches.
    #[arg(long)]
    pub pos: Option<usize>,
    /// Negative patches.
    #[arg(long)]
    pub neg: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// White-noise standard deviation per band.
    #[arg(long)]
    pub noise: Option<f32>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    pub out: PathBuf,
    #[serde(flatten)]
    pub synth: SynthConfig,
}

impl SynthArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<SynthRun> {
        let mut r: SynthRun = base(config)?;
        set!(r.synth.n_pos, self.pos);
        set!(r.synth.n_neg, self.neg);
        set!(r.synth.seed, self.seed);
        set!(r.synth.noise, self.noise);
        set!(r.out, self.out);
        require(&r.out, "--out")?;
        Ok(r)
    }
}

pub fn cmd_synth(run: &SynthRun) -> Result<()> {
    echo("synth", run, None)?;
    let ds = synth_generate(&run.synth);
    write_dataset(&ds, &run.out)?;
    let m = ds.manifest();
    println!("wrote {} records ({} positive, {} negative) to {}", m.records, m.positives, m.negatives, run.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SceneArgs {
    /// Tile rows.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Tile columns.
    #[arg(long)]
    pub cols: Option<usize>,
    /// Tile holding panels, as `row,col`; repeatable.
    #[arg(long = "panel", value_parser = parse_cell)]
    pub panels: Vec<(usize, usize)>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// White-noise standard deviation per band.
    #[arg(long)]
    pub noise: Option<f32>,
    /// Output scene directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_cell(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    Ok((
        r.trim().parse().map_err(|_| format!("bad row in {s:?}"))?,
        c.trim().parse().map_err(|_| format!("bad column in {s:?}"))?,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRun {
    pub out: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub panels: Vec<(usize, usize)>,
    pub seed: u64,
    pub noise: f32,
}

impl Default for SceneRun {
    fn default() -> Self {
        SceneRun {
            out: PathBuf::new(),
            rows: 4,
            cols: 4,
            panels: Vec::new(),
            seed: 0,
            noise: SynthConfig::default().noise,
        }
    }
}

impl SceneArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<SceneRun> {
        let mut r: SceneRun = base(config)?;
        set!(r.rows, self.rows);
        set!(r.cols, self.cols);
        if !self.panels.is_empty() {
            r.panels = self.panels;
        }
        set!(r.seed, self.seed);
        set!(r.noise, self.noise);
        set!(r.out, self.out);
        require(&r.out, "--out")?;
        Ok(r)
    }
}

pub fn cmd_synth_scene(run: &SceneRun) -> Result<()> {
    echo("synth-scene", run, None)?;
    let ds = synth_scene(run.rows, run.cols, &run.panels, run.seed, run.noise)?;
    write_dataset(&ds, &run.out)?;
    println!("wrote {}x{} tile scene to {}", run.rows, run.cols, run.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// inet, inet_gap, fbnet or fbnet_nogap.
    #[arg(long, value_parser = parse_variant)]
    pub model: Option<ModelVariant>,
    /// SGD iterations.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Minibatch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Positives drawn into each minibatch.
    #[arg(long)]
    pub pos_per_batch: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f32>,
    /// SGD momentum.
    #[arg(long)]
    pub momentum: Option<f32>,
    /// Dropout rate before the decision layer.
    #[arg(long)]
    pub dropout: Option<f32>,
    /// Seeds initialization, batches, dropout and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random dihedral transforms of positives.
    #[arg(long)]
    pub augment: Option<bool>,
    /// Validation interval in iterations.
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Share of each class held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Seed of the holdout split; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

fn parse_variant(s: &str) -> Result<ModelVariant> {
    s.parse()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: ModelVariant,
    pub val_fraction: f64,
    pub split_seed: Option<u64>,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: PathBuf::new(),
            out: PathBuf::new(),
            model: ModelVariant::Fbnet,
            val_fraction: 0.1,
            split_seed: None,
            train: TrainConfig::default(),
        }
    }
}

impl TrainArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<TrainRun> {
        let mut r: TrainRun = base(config)?;
        set!(r.data, self.data);
        set!(r.out, self.out);
        set!(r.model, self.model);
        let t = &mut r.train;
        set!(t.iterations, self.iters);
        set!(t.batch_size, self.batch);
        set!(t.positives_per_batch, self.pos_per_batch);
        set!(t.learning_rate, self.lr);
        set!(t.momentum, self.momentum);
        set!(t.dropout_rate, self.dropout);
        set!(t.seed, self.seed);
        set!(t.augment, self.augment);
        set!(t.eval_every, self.eval_every);
        set!(r.val_fraction, self.val_fraction);
        if self.split_seed.is_some() {
            r.split_seed = self.split_seed;
        }
        r.split_seed.get_or_insert(r.train.seed);
        require(&r.data, "--data")?;
        require(&r.out, "--out")?;
        r.train.validate()?;
        Ok(r)
    }
}

pub fn cmd_train(run: &TrainRun) -> Result<()> {
    echo("train", run, Some(&run.out))?;
    let ds = load_dataset(&run.data)?;
    let split_seed = run.split_seed.unwrap_or(run.train.seed);
    let (tr, va) = holdout_split(ds.labels(), run.val_fraction, split_seed)?;
    let train_set = ds.subset(&tr);
    let val_set = (!va.is_empty()).then(|| ds.subset(&va));
    eprintln!(
        "training {} on {} records, validating on {}",
        run.model,
        train_set.len(),
        va.len()
    );
    let init = ModelParams::init(run.model, run.train.seed);
    let outcome = train(init, &train_set, val_set.as_ref(), &run.train, |e| {
        eprintln!(
            "step {:>6}  loss {:.5}  val IoU {:.4} @ {:.4}",
            e.step, e.train_loss, e.val_iou, e.val_threshold
        )
    })?;
    let meta = CheckpointMeta {
        iterations: outcome.log.best_step,
        seed: run.train.seed,
        loss_digest: outcome.log.loss_digest(),
    };
    save_checkpoint(&outcome.params, &meta, run.out.join("model.ckpt"))?;
    let log_path = run.out.join("train_log.jsonl");
    let mut buf = Vec::new();
    outcome.log.write_jsonl(&mut buf).map_err(|e| Error::io(&log_path, e))?;
    fs::write(&log_path, buf).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "best step {} of {}; {:.1}s; checkpoint {}",
        outcome.log.best_step,
        run.train.iterations,
        outcome.log.wall_clock_secs,
        run.out.join("model.ckpt").display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Val,
}

/// Dataset selection shared by the evaluation commands.
#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Which part of the holdout split to evaluate on.
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Share of each class held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Seed of the holdout split.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSelection {
    pub data: PathBuf,
    pub split: Split,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSelection {
    fn default() -> Self {
        DataSelection {
            data: PathBuf::new(),
            split: Split::All,
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

impl DataSelection {
    fn apply(&mut self, a: SplitArgs) -> Result<()> {
        set!(self.data, a.data);
        set!(self.split, a.split);
        set!(self.val_fraction, a.val_fraction);
        set!(self.split_seed, a.split_seed);
        require(&self.data, "--data")
    }

    /// The selected records and their indices in the full dataset.
    pub fn load(&self) -> Result<(Dataset, Vec<usize>)> {
        let ds = load_dataset(&self.data)?;
        let idx: Vec<usize> = match self.split {
            Split::All => (0..ds.len()).collect(),
            Split::Train => holdout_split(ds.labels(), self.val_fraction, self.split_seed)?.0,
            Split::Val => holdout_split(ds.labels(), self.val_fraction, self.split_seed)?.1,
        };
        if idx.is_empty() {
            return Err(Error::invalid("selected split is empty"));
        }
        Ok((ds.subset(&idx), idx))
    }
}

/// Distinct row labels for checkpoints: the variant name, suffixed on repeats.
fn model_labels(models: &[ModelParams]) -> Vec<String> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let name = m.variant.to_string();
            let dup = models.iter().filter(|o| o.variant == m.variant).count() > 1;
            if dup {
                format!("{name}#{i}")
            } else {
                name
            }
        })
        .collect()
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<ModelParams>> {
    if paths.is_empty() {
        return Err(Error::invalid("at least one --checkpoint is required"));
    }
    paths.iter().map(|p| Ok(load_checkpoint(p, None)?.0)).collect()
}

#[derive(Args, Debug)]
pub struct EvalClassifyArgs {
    #[command(flatten)]
    pub select: SplitArgs,
    /// Repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Positive iff P(positive) ≥ threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report at the IoU-maximizing threshold and write the sweep table.
    #[arg(long)]
    pub sweep: Option<bool>,
    /// Directory for metrics.csv and sweep tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalClassifyRun {
    pub select: DataSelection,
    pub checkpoints: Vec<PathBuf>,
    pub threshold: f64,
    pub sweep: bool,
    pub out: Option<PathBuf>,
}

impl Default for EvalClassifyRun {
    fn default() -> Self {
        EvalClassifyRun {
            select: DataSelection::default(),
            checkpoints: Vec::new(),
            threshold: 0.5,
            sweep: false,
            out: None,
        }
    }
}

impl EvalClassifyArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<EvalClassifyRun> {
        let mut r: EvalClassifyRun = base(config)?;
        r.select.apply(self.select)?;
        if !self.checkpoints.is_empty() {
            r.checkpoints = self.checkpoints;
        }
        set!(r.threshold, self.threshold);
        set!(r.sweep, self.sweep);
        if self.out.is_some() {
            r.out = self.out;
        }
        Ok(r)
    }
}

pub fn cmd_eval_classify(run: &EvalClassifyRun) -> Result<Vec<(String, ClassificationMetrics)>> {
    echo("eval-classify", run, run.out.as_deref())?;
    let (ds, _) = run.select.load()?;
    let models = load_models(&run.checkpoints)?;
    let labels = model_labels(&models);
    let mut rows = Vec::new();
    for (m, label) in models.iter().zip(&labels) {
        let scores = positive_scores(m, &ds)?;
        let threshold = if run.sweep {
            let s = threshold_sweep(&scores, ds.labels())?;
            if let Some(out) = &run.out {
                write_text(&out.join(format!("sweep_{label}.csv")), &sweep_csv(&s))?;
            }
            s.threshold
        } else {
            run.threshold
        };
        rows.push((label.clone(), ClassificationMetrics::at_threshold(&scores, ds.labels(), threshold)?));
    }
    let table = metrics_csv(&rows);
    print!("{table}");
    if let Some(out) = &run.out {
        write_text(&out.join("metrics.csv"), &table)?;
    }
    Ok(rows)
}

#[derive(Args, Debug)]
pub struct EvalDetectArgs {
    #[command(flatten)]
    pub select: SplitArgs,
    /// Repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Methods applied to every checkpoint (comma-separated or repeated);
    /// defaults to all four.
    #[arg(long = "method", value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<MapMethod>,
    /// Run the eight published (model, method) pairs instead, matching
    /// checkpoints by variant.
    #[arg(long)]
    pub compared: Option<bool>,
    /// Classification threshold defining true positives.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Side of the square grid maps are compared on.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Quantity Grad-CAM differentiates.
    #[arg(long, value_enum)]
    pub grad_target: Option<GradTargetArg>,
    /// Side of the m-PCNN linking kernel.
    #[arg(long)]
    pub linking_size: Option<usize>,
    /// m-PCNN iteration cap.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Pool all pixels into one ROC, or average per-sample curves.
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Number of common true positives whose maps are written out.
    #[arg(long)]
    pub dump_maps: Option<usize>,
    /// Directory for ROC tables, the AUC summary and map dumps.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<MapMethod> {
    s.parse()
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GradTargetArg {
    Logit,
    Probability,
}

impl From<GradTargetArg> for GradTarget {
    fn from(a: GradTargetArg) -> Self {
        match a {
            GradTargetArg::Logit => GradTarget::Logit,
            GradTargetArg::Probability => GradTarget::Probability,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    Pooled,
    PerSample,
}

impl From<PoolingArg> for RocPooling {
    fn from(a: PoolingArg) -> Self {
        match a {
            PoolingArg::Pooled => RocPooling::Pooled,
            PoolingArg::PerSample => RocPooling::PerSample,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalDetectRun {
    pub select: DataSelection,
    pub checkpoints: Vec<PathBuf>,
    pub methods: Vec<MapMethod>,
    pub compared: bool,
    pub threshold: f64,
    pub detection: DetectionConfig,
    pub pooling: RocPooling,
    pub dump_maps: usize,
    pub out: Option<PathBuf>,
}

impl Default for EvalDetectRun {
    fn default() -> Self {
        EvalDetectRun {
            select: DataSelection::default(),
            checkpoints: Vec::new(),
            methods: Vec::new(),
            compared: false,
            threshold: 0.5,
            detection: DetectionConfig::default(),
            pooling: RocPooling::Pooled,
            dump_maps: 0,
            out: None,
        }
    }
}

impl EvalDetectArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<EvalDetectRun> {
        let mut r: EvalDetectRun = base(config)?;
        r.select.apply(self.select)?;
        if !self.checkpoints.is_empty() {
            r.checkpoints = self.checkpoints;
        }
        if !self.methods.is_empty() {
            r.methods = self.methods;
        }
        set!(r.compared, self.compared);
        set!(r.threshold, self.threshold);
        set!(r.detection.resolution, self.resolution);
        set!(r.detection.grad_target, self.grad_target.map(Into::into));
        set!(r.detection.mpcnn.linking_size, self.linking_size);
        set!(r.detection.mpcnn.max_iters, self.max_iters);
        set!(r.pooling, self.pooling.map(Into::into));
        set!(r.dump_maps, self.dump_maps);
        if self.out.is_some() {
            r.out = self.out;
        }
        if r.methods.is_empty() {
            r.methods = MapMethod::ALL.to_vec();
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucRow {
    pub model: String,
    pub method: MapMethod,
    pub auc: f64,
    pub samples: usize,
    /// Maps that normalized to a constant.
    pub constant: usize,
    /// Grad-CAM maps with an all-zero gradient.
    pub degenerate: usize,
    /// m-PCNN fusions that hit `max_iters` with unfired pixels.
    pub incomplete: usize,
}

pub fn auc_summary_csv(rows: &[AucRow]) -> String {
    let mut s = String::from("model,method,auc,samples,constant,degenerate,incomplete\n");
    for r in rows {
        s += &format!(
            "{},{},{:.6},{},{},{},{}\n",
            r.model, r.method, r.auc, r.samples, r.constant, r.degenerate, r.incomplete
        );
    }
    s
}

pub fn cmd_eval_detect(run: &EvalDetectRun) -> Result<Vec<AucRow>> {
    echo("eval-detect", run, run.out.as_deref())?;
    let (ds, global_idx) = run.select.load()?;
    if !ds.has_masks() {
        return Err(Error::invalid(format!("{} has no pixel masks", run.select.data.display())));
    }
    let models = load_models(&run.checkpoints)?;
    let labels = model_labels(&models);

    let predictions: Vec<Vec<bool>> = models
        .iter()
        .map(|m| Ok(positive_scores(m, &ds)?.into_iter().map(|p| p >= run.threshold).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&[bool]> = predictions.iter().map(|p| p.as_slice()).collect();
    let common = common_tp_set(&refs, ds.labels())?;
    eprintln!("{} common true positives of {} positives", common.len(), ds.positives().len());
    if common.is_empty() {
        return Err(Error::CheckFailed("no sample is a true positive for every model".into()));
    }
    if let Some(out) = &run.out {
        let list: String = common.iter().map(|&i| format!("{}\n", global_idx[i])).collect();
        write_text(&out.join("common_tp.txt"), &list)?;
    }

    let pairs: Vec<(usize, MapMethod)> = if run.compared {
        let mut v = Vec::new();
        for (variant, method) in COMPARED_METHODS {
            match models.iter().position(|m| m.variant == variant) {
                Some(i) => v.push((i, method)),
                None => eprintln!("skipping {variant} {method}: no such checkpoint"),
            }
        }
        v
    } else {
        (0..models.len()).flat_map(|i| run.methods.iter().map(move |&m| (i, m))).collect()
    };

    let r = run.detection.resolution;
    let truths: Vec<_> = common
        .iter()
        .map(|&i| ds.mask(i).expect("masks checked").resize_nearest(r, r))
        .collect::<Result<_>>()?;
    let patches: Vec<_> = common.iter().map(|&i| ds.patch(i)).collect();
    let mut rows = Vec::new();
    let mut inferences = Vec::with_capacity(models.len());
    for m in &models {
        inferences.push(infer(m, &patches)?);
    }
    for (mi, method) in pairs {
        let started = Instant::now();
        let model = &models[mi];
        let maps: Vec<_> = inferences[mi]
            .par_iter()
            .map(|inf| detection_map(model, inf, method, &run.detection))
            .collect::<Result<_>>()?;
        let plain: Vec<_> = maps.iter().map(|d| d.map.clone()).collect();
        let curve = roc_auc(&plain, &truths, run.pooling)?;
        let row = AucRow {
            model: labels[mi].clone(),
            method,
            auc: curve.auc,
            samples: maps.len(),
            constant: maps.iter().filter(|d| d.constant).count(),
            degenerate: maps.iter().filter(|d| d.degenerate).count(),
            incomplete: maps.iter().filter(|d| d.incomplete).count(),
        };
        eprintln!("{} {}: AUC {:.4} ({:.1}s)", row.model, method, row.auc, started.elapsed().as_secs_f64());
        if let Some(out) = &run.out {
            write_text(&out.join(format!("roc_{}_{}.csv", row.model, method)), &roc_csv(&curve))?;
            for (k, d) in maps.iter().take(run.dump_maps).enumerate() {
                let stem = out.join("maps").join(format!("{}_{}_{}", row.model, method, global_idx[common[k]]));
                fs::create_dir_all(stem.parent().expect("has parent")).map_err(|e| Error::io(out, e))?;
                write_map(&d.map, stem)?;
            }
        }
        rows.push(row);
    }
    let table = auc_summary_csv(&rows);
    print!("{table}");
    if let Some(out) = &run.out {
        write_text(&out.join("auc_summary.csv"), &table)?;
    }
    Ok(rows)
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Scene directory (dataset format, one scene-sized record).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// avg, cam, gradcam or mpcnn-cam.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<MapMethod>,
    /// Tiles with P(positive) below this stay zero.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Per-tile map side before stitching.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Output path without extension; `.pgm`, `.f32` and `.tiles.csv` are
    /// written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectRun {
    pub scene: PathBuf,
    pub checkpoint: PathBuf,
    pub method: MapMethod,
    pub threshold: f64,
    pub detection: DetectionConfig,
    pub out: PathBuf,
}

impl Default for DetectRun {
    fn default() -> Self {
        DetectRun {
            scene: PathBuf::new(),
            checkpoint: PathBuf::new(),
            method: MapMethod::MpcnnCam,
            threshold: 0.5,
            detection: DetectionConfig::default(),
            out: PathBuf::new(),
        }
    }
}

impl DetectArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<DetectRun> {
        let mut r: DetectRun = base(config)?;
        set!(r.scene, self.scene);
        set!(r.checkpoint, self.checkpoint);
        set!(r.method, self.method);
        set!(r.threshold, self.threshold);
        set!(r.detection.resolution, self.resolution);
        set!(r.out, self.out);
        require(&r.scene, "--scene")?;
        require(&r.checkpoint, "--checkpoint")?;
        require(&r.out, "--out")?;
        Ok(r)
    }
}

pub fn cmd_detect(run: &DetectRun) -> Result<()> {
    echo("detect", run, None)?;
    let scene = load_dataset(&run.scene)?;
    if scene.len() != 1 {
        return Err(Error::invalid(format!("scene directory holds {} records, expected 1", scene.len())));
    }
    let (model, _) = load_checkpoint(&run.checkpoint, None)?;
    let tiles = tile_scene(&scene.patch(0))?;
    let (_, h, w) = scene.dims();
    let (rows, cols) = (h / crate::models::PATCH, w / crate::models::PATCH);
    let patches: Vec<_> = tiles.iter().map(|t| t.patch.clone()).collect();
    let inferences = infer(&model, &patches)?;
    let results: Vec<(f64, Option<_>)> = inferences
        .par_iter()
        .map(|inf| {
            let p = inf.positive_probability();
            if p >= run.threshold {
                Ok((p, Some(detection_map(&model, inf, run.method, &run.detection)?.map)))
            } else {
                Ok((p, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut placed = Vec::new();
    let mut table = String::from("row,col,probability,positive\n");
    for (t, (p, map)) in tiles.iter().zip(results) {
        table += &format!("{},{},{p:.6},{}\n", t.row, t.col, map.is_some() as u8);
        if let Some(m) = map {
            placed.push((m, t.row, t.col));
        }
    }
    let stitched = stitch_maps(&placed, rows, cols)?;
    write_map(&stitched, &run.out)?;
    let mut csv = run.out.clone().into_os_string();
    csv.push(".tiles.csv");
    write_text(Path::new(&csv), &table)?;
    println!(
        "{} of {} tiles positive; wrote {}",
        placed.len(),
        tiles.len(),
        run.out.with_extension("pgm").display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Variants to check (comma-separated); defaults to all four.
    #[arg(long = "variant", value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<ModelVariant>,
    /// Model seeds (comma-separated); defaults to 0,1,2.
    #[arg(long = "seeds", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Storage type of the model under test.
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Coordinates sampled per parameter tensor; 0 checks all.
    #[arg(long)]
    pub coords: Option<usize>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, hide = true)]
    pub inject_wrong_sign: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckRun {
    pub variants: Vec<ModelVariant>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub coords_per_group: usize,
    pub tolerance: f64,
    pub inject_wrong_sign: Option<String>,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        GradcheckRun {
            variants: ModelVariant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            precision: Precision::F64,
            coords_per_group: GradCheckConfig::default().coords_per_group,
            tolerance: 1e-3,
            inject_wrong_sign: None,
        }
    }
}

impl GradcheckArgs {
    pub fn resolve(self, config: Option<&Path>) -> Result<GradcheckRun> {
        let mut r: GradcheckRun = base(config)?;
        if !self.variants.is_empty() {
            r.variants = self.variants;
        }
        if !self.seeds.is_empty() {
            r.seeds = self.seeds;
        }
        set!(r.precision, self.precision);
        set!(r.coords_per_group, self.coords);
        set!(r.tolerance, self.tolerance);
        if self.inject_wrong_sign.is_some() {
            r.inject_wrong_sign = self.inject_wrong_sign;
        }
        Ok(r)
    }
}

/// Checks one fresh model of `variant` from `seed`.
pub fn gradcheck_model(
    variant: ModelVariant,
    seed: u64,
    precision: Precision,
    coords_per_group: usize,
    corrupt: Option<&str>,
) -> GradCheckReport {
    let config = GradCheckConfig {
        coords_per_group,
        seed,
        ..GradCheckConfig::default()
    };
    match precision {
        Precision::F64 => {
            let mut p = LossProbe::<f64>::random(variant, seed);
            p.corrupt_group = corrupt.map(String::from);
            p.check(&config)
        }
        Precision::F32 => {
            let mut p = LossProbe::<f32>::random(variant, seed);
            p.corrupt_group = corrupt.map(String::from);
            p.check(&config)
        }
    }
}

pub fn cmd_gradcheck(run: &GradcheckRun) -> Result<()> {
    echo("gradcheck", run, None)?;
    let started = Instant::now();
    let mut failures = Vec::new();
    for &variant in &run.variants {
        for &seed in &run.seeds {
            let report = gradcheck_model(
                variant,
                seed,
                run.precision,
                run.coords_per_group,
                run.inject_wrong_sign.as_deref(),
            );
            let ok = report.passed(run.tolerance);
            println!(
                "{variant} seed {seed}: max relative error {:.3e} over {} coordinates: {}",
                report.max_rel_error,
                report.checked(),
                if ok { "PASS" } else { "FAIL" }
            );
            println!("  {:<18} {:>7} {:>6} {:>11} {:>13} {:>13}", "tensor", "checked", "kinks", "rel error", "analytic", "numeric");
            for g in &report.groups {
                match &g.worst {
                    Some(w) => println!(
                        "  {:<18} {:>7} {:>6} {:>11.3e} {:>13.6e} {:>13.6e}  [{}]",
                        g.name, g.checked, g.skipped_kinks, w.rel_error, w.analytic, w.numeric, w.index
                    ),
                    None => println!("  {:<18} {:>7} {:>6} {:>11}", g.name, g.checked, g.skipped_kinks, "-"),
                }
            }
            for c in &report.non_finite {
                println!("  non-finite at {}[{}]", c.group, c.index);
            }
            if !ok {
                failures.push(format!("{variant} seed {seed}"));
            }
        }
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "gradient error above {} for {}",
            run.tolerance,
            failures.join(", ")
        )))
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // A second call in one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => cmd_synth(&a.resolve(config)?),
        Command::SynthScene(a) => cmd_synth_scene(&a.resolve(config)?),
        Command::Train(a) => cmd_train(&a.resolve(config)?),
        Command::EvalClassify(a) => cmd_eval_classify(&a.resolve(config)?).map(drop),
        Command::EvalDetect(a) => cmd_eval_detect(&a.resolve(config)?).map(drop),
        Command::Detect(a) => cmd_detect(&a.resolve(config)?),
        Command::Gradcheck(a) => cmd_gradcheck(&a.resolve(config)?),
    }
}
