//! Source-only (DG) and source+target (DA) training loops, the step
//! learning-rate schedule, per-epoch metrics and run bundles.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensorgrad::checkpoint::{read_checkpoint, write_checkpoint};
use tensorgrad::{Sgd, Tape};

use crate::datasets::{compose_batch, compose_rotation_batch, split, Batch, Dataset};
use crate::error::{invalid, Error, Result};
use crate::evalkit::{accuracy, jigsaw_accuracy, rotation_accuracy};
use crate::model::{build_model, da_loss, format_conv_stack, jigen_loss, parse_conv_stack, AuxTask, ConvSpec, Model, ModelSpec};
use crate::patchwork::{AugConfig, GridSpec};
use crate::permgen::{generate_permutation_set, PermutationSet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_at: f64,
    pub momentum: f64,
    pub seed: u64,
    pub aux_task: AuxTask,
    pub grid: usize,
    pub perms: usize,
    /// Seed of the permutation set, kept apart from `seed` so that repeated
    /// runs share one set.
    pub perm_seed: u64,
    pub holdout_fraction: f64,
    pub aug: AugConfig,
    pub convs: Vec<ConvSpec>,
    pub gap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.6,
            eta: 0.1,
            alpha_s: 0.7,
            alpha_t: 0.7,
            epochs: 30,
            batch_size: 128,
            lr: 0.001,
            lr_drop_factor: 0.1,
            lr_drop_at: 0.8,
            momentum: 0.9,
            seed: 0,
            aux_task: AuxTask::Jigsaw,
            grid: 3,
            perms: 30,
            perm_seed: 0,
            holdout_fraction: 0.1,
            aug: AugConfig::default(),
            convs: ModelSpec::default_for(2, AuxTask::Jigsaw, 2).convs,
            gap: true,
        }
    }
}

const CONFIG_KEYS: [&str; 23] = [
    "alpha", "beta", "eta", "alpha_s", "alpha_t", "epochs", "batch_size", "lr", "lr_drop_factor", "lr_drop_at",
    "momentum", "seed", "aux_task", "grid", "perms", "perm_seed", "holdout_fraction", "aug_crop_min",
    "aug_crop_max", "aug_hflip", "aug_tile_gray", "conv", "gap",
];

impl TrainConfig {
    /// The baseline that trains only the object head on ordered images.
    pub fn deep_all(&self) -> Self {
        Self { alpha: 0.0, beta: 1.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [("alpha", self.alpha), ("eta", self.eta), ("alpha_s", self.alpha_s), ("alpha_t", self.alpha_t)];
        if let Some((k, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return invalid(format!("{} = {} must be a finite non-negative number", k, v));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return invalid(format!("beta = {} outside [0, 1]", self.beta));
        }
        if !(self.lr_drop_at > 0.0 && self.lr_drop_at <= 1.0) {
            return invalid(format!("lr_drop_at = {} outside (0, 1]", self.lr_drop_at));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_drop_factor >= 0.0) {
            return invalid("lr must be positive and lr_drop_factor non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("epochs and batch_size must be at least 1");
        }
        if self.grid < 2 {
            return invalid(format!("grid = {} must be at least 2", self.grid));
        }
        if self.perms == 0 {
            return invalid("perms must be at least 1");
        }
        if self.aux_task == AuxTask::Jigsaw && self.perms < 2 && self.beta < 1.0 {
            return invalid("shuffled images need at least two permutations");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return invalid(format!("holdout_fraction = {} outside (0, 1)", self.holdout_fraction));
        }
        self.aug.validate()
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{}={}", k, v).expect("string write");
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("eta", self.eta.to_string());
        kv("alpha_s", self.alpha_s.to_string());
        kv("alpha_t", self.alpha_t.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_drop_factor", self.lr_drop_factor.to_string());
        kv("lr_drop_at", self.lr_drop_at.to_string());
        kv("momentum", self.momentum.to_string());
        kv("seed", self.seed.to_string());
        kv("aux_task", self.aux_task.to_string());
        kv("grid", self.grid.to_string());
        kv("perms", self.perms.to_string());
        kv("perm_seed", self.perm_seed.to_string());
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("aug_crop_min", self.aug.crop_retain_min.to_string());
        kv("aug_crop_max", self.aug.crop_retain_max.to_string());
        kv("aug_hflip", self.aug.hflip_prob.to_string());
        kv("aug_tile_gray", self.aug.tile_gray_prob.to_string());
        kv("conv", format_conv_stack(&self.convs));
        kv("gap", self.gap.to_string());
        s
    }

    /// Parse `key=value` lines over the defaults. `#` starts a comment;
    /// unknown keys are errors.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Format { path: origin.to_string(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {:?}", line)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| Error::InvalidArgument(format!("{}={}: {}", key, v, e)))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "alpha_s" => self.alpha_s = num(key, value)?,
            "alpha_t" => self.alpha_t = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = num(key, value)?,
            "lr_drop_at" => self.lr_drop_at = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "aux_task" => self.aux_task = value.parse()?,
            "grid" => self.grid = num(key, value)?,
            "perms" => self.perms = num(key, value)?,
            "perm_seed" => self.perm_seed = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "aug_crop_min" => self.aug.crop_retain_min = num(key, value)?,
            "aug_crop_max" => self.aug.crop_retain_max = num(key, value)?,
            "aug_hflip" => self.aug.hflip_prob = num(key, value)?,
            "aug_tile_gray" => self.aug.tile_gray_prob = num(key, value)?,
            "conv" => self.convs = parse_conv_stack(value)?,
            "gap" => self.gap = num(key, value)?,
            other => return invalid(format!("unknown config key {:?} (known: {})", other, CONFIG_KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn aux_classes(&self) -> usize {
        match self.aux_task {
            AuxTask::Jigsaw => self.perms,
            AuxTask::Rotation => 4,
        }
    }

    /// Model spec for `classes` classes on `channels×h×w` images.
    pub fn model_spec(&self, classes: usize, channels: usize, h: usize, w: usize) -> Result<ModelSpec> {
        let grid = GridSpec::for_image(self.grid, h, w)?;
        Ok(ModelSpec {
            in_channels: channels,
            input_hw: grid.cropped_dims(),
            convs: self.convs.clone(),
            gap: self.gap,
            classes,
            aux_classes: self.aux_classes().max(2),
            aux_task: self.aux_task,
        })
    }
}

/// `lr` before epoch `⌈lr_drop_at·epochs⌉`, `lr·lr_drop_factor` from then on.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    // The small slack keeps 0.8·30 from landing just above 24 in floating point.
    let drop = (cfg.lr_drop_at * cfg.epochs as f64 - 1e-9).ceil() as usize;
    if epoch < drop {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_drop_factor
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    /// Epoch means of the training losses.
    pub l_c: f64,
    pub l_p: f64,
    /// Mean target entropy (DA only; NaN otherwise).
    pub l_e: f64,
    pub val_acc: f64,
    /// Auxiliary-head accuracy on the transformed holdout (NaN without a head).
    pub jigsaw_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

pub const METRICS_HEADER: &str = "epoch,l_c,l_p,l_e,val_acc,jigsaw_acc,lr";

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{:.6}", v)
    }
}

impl MetricLog {
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        let expected = self.records.last().map_or(0, |l| l.epoch + 1);
        if r.epoch != expected {
            return invalid(format!("metric record for epoch {} after epoch {}", r.epoch, expected as i64 - 1));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", METRICS_HEADER);
        for r in &self.records {
            let cells = [r.l_c, r.l_p, r.l_e, r.val_acc, r.jigsaw_acc, r.lr].map(fmt_metric).join(",");
            writeln!(s, "{},{}", r.epoch, cells).expect("string write");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::Load(format!("metrics header is not {:?}", METRICS_HEADER)));
        }
        let mut log = MetricLog::default();
        for (i, line) in lines.enumerate() {
            let bad = |m: &str| Error::Load(format!("metrics line {}: {}", i + 2, m));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(bad("expected 7 columns"));
            }
            let f = |j: usize| cells[j].parse::<f64>().map_err(|_| bad("bad number"));
            log.push(MetricRecord {
                epoch: cells[0].parse().map_err(|_| bad("bad epoch"))?,
                l_c: f(1)?,
                l_p: f(2)?,
                l_e: f(3)?,
                val_acc: f(4)?,
                jigsaw_acc: f(5)?,
                lr: f(6)?,
            })
            .map_err(|e| bad(&e.to_string()))?;
        }
        Ok(log)
    }
}

/// Passed to the step hook after gradients are accumulated and before the
/// optimizer consumes them.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub model: &'a Model,
    pub batch: &'a Batch,
    pub total_loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: MetricLog,
    /// `None` for rotation runs.
    pub perms: Option<PermutationSet>,
    /// Union of the per-source holdout splits.
    pub holdout: Dataset,
}

const SOURCE_STREAM_SALT: u64 = 0x6a09_e667_f3bc_c908;
const TARGET_STREAM_SALT: u64 = 0xbb67_ae85_84ca_a73b;
const SPLIT_SALT: u64 = 0x3c6e_f372_fe94_f82b;
const EVAL_SALT: u64 = 0xa54f_f53a_5f1d_36f1;

/// Batch `i` of a run is always composed from stream `i` of the run's generator.
fn stream_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

/// Shared image shape of all datasets, and their common class count.
fn common_shape(sets: &[&Dataset]) -> Result<(usize, usize, usize, usize)> {
    let first = sets.iter().find_map(|d| d.images().first()).ok_or_else(|| Error::InvalidArgument("no images to train on".into()))?;
    let shape = (first.channels(), first.height(), first.width());
    let classes = sets[0].classes();
    for d in sets {
        if d.classes() != classes {
            return invalid(format!("dataset {} has {} classes, expected {}", d.name, d.classes(), classes));
        }
        if let Some(img) = d.images().iter().find(|i| (i.channels(), i.height(), i.width()) != shape) {
            return invalid(format!(
                "dataset {} mixes image shapes: {}x{}x{} vs {:?}",
                d.name,
                img.channels(),
                img.height(),
                img.width(),
                shape
            ));
        }
    }
    Ok((classes, shape.0, shape.1, shape.2))
}

fn concat(name: &str, parts: &[Dataset]) -> Result<Dataset> {
    let classes = parts.first().map_or(0, |d| d.classes());
    let images = parts.iter().flat_map(|d| d.images().iter().cloned()).collect();
    let labels = parts.iter().flat_map(|d| d.labels().iter().copied()).collect();
    Dataset::new(name, 0, images, labels, classes)
}

/// Train on `sources` only.
pub fn train_dg(cfg: &TrainConfig, sources: &[Dataset]) -> Result<TrainOutcome> {
    let model = initial_model(cfg, sources, None)?;
    train_with(cfg, sources, None, model, &mut |_| {})
}

/// Train on labeled `sources` plus unlabeled `target` (its labels are never read).
pub fn train_da(cfg: &TrainConfig, sources: &[Dataset], target: &Dataset) -> Result<TrainOutcome> {
    let model = initial_model(cfg, sources, Some(target))?;
    train_with(cfg, sources, Some(target), model, &mut |_| {})
}

/// The freshly initialized model `train_dg`/`train_da` would start from.
pub fn initial_model(cfg: &TrainConfig, sources: &[Dataset], target: Option<&Dataset>) -> Result<Model> {
    cfg.validate()?;
    let mut all: Vec<&Dataset> = sources.iter().collect();
    all.extend(target);
    let (classes, c, h, w) = common_shape(&all)?;
    build_model(&cfg.model_spec(classes, c, h, w)?, cfg.seed)
}

/// The general loop: starts from `model` and calls `hook` once per step.
pub fn train_with(
    cfg: &TrainConfig,
    sources: &[Dataset],
    target: Option<&Dataset>,
    mut model: Model,
    hook: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
        return invalid("training needs at least one non-empty source");
    }
    if target.is_some_and(|t| t.is_empty()) {
        return invalid("the target dataset is empty");
    }
    let mut all: Vec<&Dataset> = sources.iter().collect();
    all.extend(target);
    let (classes, c, h, w) = common_shape(&all)?;
    let spec = cfg.model_spec(classes, c, h, w)?;
    if model.spec != spec {
        return invalid("the initial model does not match the configuration and data");
    }
    let grid = GridSpec::for_image(cfg.grid, h, w)?;
    let perms = match cfg.aux_task {
        AuxTask::Jigsaw => Some(generate_permutation_set(grid.tiles(), cfg.perms, cfg.perm_seed)?),
        AuxTask::Rotation => None,
    };

    let mut trains = Vec::with_capacity(sources.len());
    let mut holds = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        let (tr, ho) = split(s, cfg.holdout_fraction, cfg.seed ^ SPLIT_SALT ^ i as u64)?;
        if tr.is_empty() {
            return invalid(format!("source {} has no training images after the holdout split", s.name));
        }
        trains.push(tr);
        holds.push(ho);
    }
    let holdout = concat("holdout", &holds)?;
    let targets: Vec<Dataset> = target.into_iter().cloned().collect();

    let n_train: usize = trains.iter().map(Dataset::len).sum();
    let steps = n_train.div_ceil(cfg.batch_size);
    let compose = |srcs: &[Dataset], rng: &mut ChaCha8Rng| -> Result<Batch> {
        match &perms {
            Some(set) => compose_batch(srcs, cfg.batch_size, cfg.beta, set, &grid, &cfg.aug, rng),
            None => compose_rotation_batch(srcs, cfg.batch_size, cfg.beta, &grid, &cfg.aug, rng),
        }
    };
    let (alpha_src, da) = match target {
        Some(_) => (cfg.alpha_s, true),
        None => (cfg.alpha, false),
    };

    let mut opt = Sgd::new(cfg.momentum);
    let mut log = MetricLog::default();
    model.params.zero_grad();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let (mut sum_c, mut sum_p, mut sum_e, mut n_e) = (0.0, 0.0, 0.0, 0usize);
        for step in 0..steps {
            let global_step = epoch * steps + step;
            let batch = compose(&trains, &mut stream_rng(cfg.seed, SOURCE_STREAM_SALT, global_step as u64))?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.to_tensor()?);
            let out = model.forward(&mut tape, x)?;
            let loss = jigen_loss(&mut tape, &out, &batch, alpha_src)?;
            tape.backward(loss.total, &mut model.params)?;
            let mut total = tape.value(loss.total).item()?.into();
            sum_c += f64::from(tape.value(loss.l_c).item()?);
            sum_p += loss.l_p.map_or(Ok(0.0), |v| tape.value(v).item().map(f64::from))?;
            drop(tape);

            if da {
                let tb = compose(&targets, &mut stream_rng(cfg.seed, TARGET_STREAM_SALT, global_step as u64))?;
                let mut tape = Tape::new();
                let x = tape.constant(tb.to_tensor()?);
                let out = model.forward(&mut tape, x)?;
                let tl = da_loss(&mut tape, &out, &tb, cfg.alpha_t, cfg.eta)?;
                if let Some(t) = tl.total {
                    tape.backward(t, &mut model.params)?;
                    total += f64::from(tape.value(t).item()?);
                }
                if let Some(e) = tl.entropy {
                    sum_e += f64::from(tape.value(e).item()?);
                    n_e += 1;
                }
            }

            hook(&StepEvent { epoch, step, global_step, lr, model: &model, batch: &batch, total_loss: total });
            opt.step(&mut model.params, lr);
        }

        let eval_seed = cfg.seed ^ EVAL_SALT;
        let aux_acc = match (&perms, model.has_aux_head()) {
            (_, false) => f64::NAN,
            (Some(set), true) if set.len() >= 2 => jigsaw_accuracy(&model, &holdout, set, &grid, eval_seed)?,
            (Some(_), true) => f64::NAN,
            (None, true) => rotation_accuracy(&model, &holdout, eval_seed)?,
        };
        log.push(MetricRecord {
            epoch,
            l_c: sum_c / steps as f64,
            l_p: if model.has_aux_head() { sum_p / steps as f64 } else { f64::NAN },
            l_e: if n_e > 0 { sum_e / n_e as f64 } else { f64::NAN },
            val_acc: if holdout.is_empty() { f64::NAN } else { accuracy(&model, &holdout)? },
            jigsaw_acc: if holdout.is_empty() { f64::NAN } else { aux_acc },
            lr,
        })?;
    }
    Ok(TrainOutcome { model, log, perms, holdout })
}

/// Everything persisted for one run.
pub struct RunBundle {
    pub config: TrainConfig,
    pub model: Model,
    pub log: MetricLog,
    pub perms: Option<PermutationSet>,
}

const CONFIG_FILE: &str = "config.txt";
const MODEL_FILE: &str = "model.txt";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const METRICS_FILE: &str = "metrics.csv";
const PERMS_FILE: &str = "perms.txt";

fn spec_to_text(s: &ModelSpec) -> String {
    format!(
        "in_channels={}\ninput_h={}\ninput_w={}\nconv={}\ngap={}\nclasses={}\naux_classes={}\naux_task={}\n",
        s.in_channels,
        s.input_hw.0,
        s.input_hw.1,
        format_conv_stack(&s.convs),
        s.gap,
        s.classes,
        s.aux_classes,
        s.aux_task
    )
}

fn spec_from_text(text: &str) -> Result<ModelSpec> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Load(format!("model line {:?} is not key=value", line)))?;
        map.insert(k.trim(), v.trim());
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Load(format!("model spec lacks {:?}", k)));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Load(format!("model spec {:?} is not a number", k))) };
    Ok(ModelSpec {
        in_channels: num("in_channels")?,
        input_hw: (num("input_h")?, num("input_w")?),
        convs: parse_conv_stack(get("conv")?)?,
        gap: get("gap")?.parse().map_err(|_| Error::Load("model spec gap is not a bool".into()))?,
        classes: num("classes")?,
        aux_classes: num("aux_classes")?,
        aux_task: get("aux_task")?.parse()?,
    })
}

/// Write `config.txt`, `model.txt`, `checkpoint.bin`, `metrics.csv` and
/// (for jigsaw runs) `perms.txt` into `dir`, creating it if needed.
pub fn save_run(dir: impl AsRef<Path>, bundle: &RunBundle) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), bundle.config.to_text())?;
    std::fs::write(dir.join(MODEL_FILE), spec_to_text(&bundle.model.spec))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&mut f, &bundle.model.params)?;
    std::io::Write::flush(&mut f)?;
    std::fs::write(dir.join(METRICS_FILE), bundle.log.to_csv())?;
    if let Some(p) = &bundle.perms {
        p.save(dir.join(PERMS_FILE))?;
    }
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<RunBundle> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        std::fs::read_to_string(dir.join(name)).map_err(|e| Error::Load(format!("{}: {}", dir.join(name).display(), e)))
    };
    let config = TrainConfig::from_text(&read(CONFIG_FILE)?, CONFIG_FILE)?;
    let spec = spec_from_text(&read(MODEL_FILE)?)?;
    let ckpt = std::fs::File::open(dir.join(CHECKPOINT_FILE))
        .map_err(|e| Error::Load(format!("{}: {}", dir.join(CHECKPOINT_FILE).display(), e)))?;
    let params = read_checkpoint(std::io::BufReader::new(ckpt)).map_err(|e| Error::Load(format!("checkpoint: {}", e)))?;
    let model = Model::from_params(spec, params)?;
    let log = MetricLog::from_csv(&read(METRICS_FILE)?)?;
    let perms = if dir.join(PERMS_FILE).exists() {
        Some(PermutationSet::load(dir.join(PERMS_FILE))?)
    } else {
        None
    };
    Ok(RunBundle { config, model, log, perms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchwork::ImageTensor;
    use rand::Rng;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert_eq!(lr_schedule(23, &cfg), 0.001);
        assert!((lr_schedule(24, &cfg) - 0.0001).abs() < 1e-18);
        assert!((lr_schedule(29, &cfg) - 0.0001).abs() < 1e-18);
        let ten = TrainConfig { epochs: 10, ..cfg };
        assert_eq!(lr_schedule(7, &ten), 0.001);
        assert!((lr_schedule(8, &ten) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig { alpha: 0.123456789012345, seed: 77, aux_task: AuxTask::Rotation, ..Default::default() };
        cfg.aug.tile_gray_prob = 0.3;
        cfg.convs = parse_conv_stack("c8m2,c16").unwrap();
        let back = TrainConfig::from_text(&cfg.to_text(), "t").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(cfg.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(TrainConfig::from_text("beta=1.5", "c"), Err(Error::InvalidArgument(_))));
        assert!(matches!(TrainConfig::from_text("\nfoo=1", "c"), Err(Error::Format { line: 2, .. })));
        assert!(matches!(TrainConfig::from_text("alpha", "c"), Err(Error::Format { line: 1, .. })));
        assert!(TrainConfig::from_text("lr_drop_at=0", "c").is_err());
        assert!(TrainConfig::from_text("alpha=-1", "c").is_err());
        assert!(TrainConfig::from_text("perms=1", "c").is_err());
        assert!(TrainConfig::from_text("perms=1\nbeta=1 # only ordered", "c").is_ok());
    }

    #[test]
    fn metric_csv_round_trip() {
        let mut log = MetricLog::default();
        log.push(MetricRecord { epoch: 0, l_c: 2.3, l_p: 3.4, l_e: f64::NAN, val_acc: 0.5, jigsaw_acc: 0.25, lr: 0.001 }).unwrap();
        assert!(log.push(MetricRecord { epoch: 2, ..log.records[0].clone() }).is_err());
        let csv = log.to_csv();
        assert_eq!(csv, "epoch,l_c,l_p,l_e,val_acc,jigsaw_acc,lr\n0,2.300000,3.400000,nan,0.500000,0.250000,0.001000\n");
        assert_eq!(MetricLog::from_csv(&csv).unwrap().to_csv(), csv);
        assert!(MetricLog::from_csv("epoch,x\n").is_err());
    }

    fn toy_source(domain_id: usize, n: usize, seed: u64) -> Dataset {
        // Class k lights channel k (class 3 lights all three) in a random square.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = rng.gen_range(0..4);
            let mut data: Vec<f32> = (0..3 * 12 * 12).map(|_| 0.2 * rng.gen::<f32>()).collect();
            let (oy, ox) = (rng.gen_range(0..6), rng.gen_range(0..6));
            for c in (0..3).filter(|&c| y == 3 || c == y) {
                for r in oy..oy + 6 {
                    for col in ox..ox + 6 {
                        data[(c * 12 + r) * 12 + col] = 0.8 + 0.2 * rng.gen::<f32>();
                    }
                }
            }
            images.push(ImageTensor::new(3, 12, 12, data).unwrap());
            labels.push(y);
        }
        Dataset::new(format!("toy{}", domain_id), domain_id, images, labels, 4).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 0.05,
            perms: 6,
            convs: parse_conv_stack("c4m2,c8").unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let sources = [toy_source(0, 60, 1), toy_source(1, 40, 2)];
        let a = train_dg(&tiny_cfg(), &sources).unwrap();
        let b = train_dg(&tiny_cfg(), &sources).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(p.value, q.value);
        }
        assert_eq!(a.log.records.len(), 3);
        assert_eq!(a.holdout.len(), 6 + 4);
        assert!(a.log.records.iter().all(|r| r.l_e.is_nan() && r.l_c.is_finite()));
        let untrained = initial_model(&tiny_cfg(), &sources, None).unwrap();
        let held = &a.holdout;
        assert!(accuracy(&a.model, held).unwrap() > accuracy(&untrained, held).unwrap());
    }

    #[test]
    fn deep_all_leaves_aux_head_untouched() {
        let sources = [toy_source(0, 50, 3)];
        let cfg = tiny_cfg().deep_all();
        let start = initial_model(&cfg, &sources, None).unwrap();
        let aux_before: Vec<_> = start.aux_ids().iter().map(|&id| start.params.get(id).value.clone()).collect();
        let mut grads_zero = true;
        let out = train_with(&cfg, &sources, None, start.clone(), &mut |ev| {
            for id in ev.model.aux_ids() {
                grads_zero &= ev.model.params.get(id).grad.data().iter().all(|&g| g == 0.0);
            }
        })
        .unwrap();
        assert!(grads_zero);
        for (id, before) in out.model.aux_ids().into_iter().zip(aux_before) {
            assert_eq!(out.model.params.get(id).value, before);
        }
    }

    #[test]
    fn da_with_zero_weights_matches_dg() {
        let sources = [toy_source(0, 40, 4)];
        let target = toy_source(5, 30, 5);
        let cfg = TrainConfig { eta: 0.0, alpha_t: 0.0, alpha_s: 0.7, ..tiny_cfg() };
        let dg = train_dg(&cfg, &sources).unwrap();
        let da = train_da(&cfg, &sources, &target).unwrap();
        for (p, q) in dg.model.params.iter().zip(da.model.params.iter()) {
            assert_eq!(p.value, q.value);
        }
        assert!(da.log.records.iter().all(|r| r.l_e.is_finite()));
        let full = train_da(&tiny_cfg(), &sources, &target).unwrap();
        assert!(full.log.records.iter().all(|r| r.l_e.is_finite() && r.l_e >= 0.0));
    }

    #[test]
    fn rotation_runs() {
        let sources = [toy_source(0, 40, 6)];
        let cfg = TrainConfig { aux_task: AuxTask::Rotation, ..tiny_cfg() };
        let out = train_dg(&cfg, &sources).unwrap();
        assert!(out.perms.is_none());
        assert_eq!(out.model.spec.aux_classes, 4);
        assert!(out.log.records.iter().all(|r| (0.0..=1.0).contains(&r.jigsaw_acc)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train_dg(&tiny_cfg(), &[]).is_err());
        let mismatched = [toy_source(0, 10, 0), Dataset::new("x", 1, vec![ImageTensor::filled(3, 10, 10, 0.0)], vec![0], 4).unwrap()];
        assert!(train_dg(&tiny_cfg(), &mismatched).is_err());
        let bad = TrainConfig { beta: 2.0, ..tiny_cfg() };
        assert!(train_dg(&bad, &[toy_source(0, 10, 0)]).is_err());
    }

    #[test]
    fn run_bundle_round_trip() {
        let sources = [toy_source(0, 30, 7)];
        let out = train_dg(&tiny_cfg(), &sources).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bundle = RunBundle { config: tiny_cfg(), model: out.model.clone(), log: out.log.clone(), perms: out.perms.clone() };
        save_run(dir.path(), &bundle).unwrap();
        let back = load_run(dir.path()).unwrap();
        assert_eq!(back.config, tiny_cfg());
        assert_eq!(back.log.to_csv(), out.log.to_csv());
        assert_eq!(back.perms, out.perms);
        let probe = crate::datasets::images_to_tensor(
            &sources[0].images()[..4].iter().map(|i| i.center_crop(12, 12).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let (a, b) = (out.model.infer(probe.clone()).unwrap(), back.model.infer(probe).unwrap());
        assert_eq!(a.class_logits, b.class_logits);
        assert_eq!(a.aux_logits, b.aux_logits);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_run(empty.path()), Err(Error::Load(_))));
        std::fs::write(dir.path().join(CHECKPOINT_FILE), b"JUNK").unwrap();
        assert!(matches!(load_run(dir.path()), Err(Error::Load(_))));
    }
}
