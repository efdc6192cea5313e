use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use jigen::datasets::{idx, load_manifest, synth_digits, to_idx, Dataset, ManifestEntry};
use jigen::evalkit::{
    ablation_sweep, accuracy, cam, confusion_matrix, jigsaw_accuracy, predict, rotation_accuracy, SweepAxis,
};
use jigen::model::AuxTask;
use jigen::patchwork::GridSpec;
use jigen::permgen::{audit_set, generate_permutation_set};
use jigen::trainer::{initial_model, load_run, save_run, train_with, RunBundle, TrainConfig};
use jigen::Error;

#[derive(Parser)]
#[command(name = "jigen", version, about = "Jigsaw-regularized training for domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Dg,
    Da,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a maximal-Hamming permutation set.
    GenPerms {
        #[arg(long)]
        tiles: usize,
        #[arg(long)]
        perms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifest entry used as the target (default: the last entry in DA mode).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a saved run on every manifest entry.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Entry used for the optional artifacts (default: the first entry).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        confusion: bool,
        #[arg(long)]
        jigsaw: bool,
        #[arg(long)]
        cam: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ablation sweep over one hyperparameter.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target entry (default: the last entry).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Render synthetic digits as IDX files plus a sample manifest.
    GenDigits {
        #[arg(long, default_value_t = 10000)]
        count: usize,
        #[arg(long, default_value_t = 2000)]
        target_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Usage errors exit with 2, runtime failures with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Format { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

/// Inputs the user named must exist; a missing one is a usage error.
fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{} {} does not exist", what, path.display()))
    }
}

fn prepare_output_dir(dir: &Path, force: bool) -> CmdResult {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() && !force {
        return usage(format!("{} exists and is not empty; pass --force to overwrite", dir.display()));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn refuse_existing_file(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return usage(format!("{} exists; pass --force to overwrite", path.display()));
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    require_file(path, "config")?;
    let mut cfg = TrainConfig::load(path).map_err(|e| match e {
        Error::Io(e) => Failure::Usage(format!("{}: {}", path.display(), e)),
        other => Failure::from(other),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_entries(path: &Path) -> Result<Vec<ManifestEntry>, Failure> {
    require_file(path, "manifest")?;
    let entries = load_manifest(path)?;
    if entries.is_empty() {
        return usage(format!("manifest {} lists no datasets", path.display()));
    }
    Ok(entries)
}

fn load_all(entries: &[ManifestEntry]) -> Result<Vec<Dataset>, Failure> {
    entries.iter().map(|e| e.load().map_err(|e| Failure::Runtime(format!("loading data: {}", e)))).collect()
}

/// Split datasets into sources and an optional target picked by name.
fn pick_target(
    mut data: Vec<Dataset>,
    target: Option<&str>,
    default_last: bool,
) -> Result<(Vec<Dataset>, Option<Dataset>), Failure> {
    let idx = match target {
        Some(name) => match data.iter().position(|d| d.name == name) {
            Some(i) => Some(i),
            None => return usage(format!("no manifest entry named {:?}", name)),
        },
        None if default_last => Some(data.len() - 1),
        None => None,
    };
    let target = idx.map(|i| data.remove(i));
    if data.is_empty() {
        return usage("no source datasets remain after choosing the target");
    }
    Ok((data, target))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn gen_perms(tiles: usize, perms: usize, seed: u64, out: &Path, force: bool) -> CmdResult {
    refuse_existing_file(out, force)?;
    let set = generate_permutation_set(tiles, perms, seed)?;
    let audit = audit_set(&set);
    if !audit.ok() {
        return Err(Failure::Runtime(format!("generated set failed its audit: {:?}", audit)));
    }
    set.save(out)?;
    let min = set.min_pairwise().map_or("none".to_string(), |m| m.to_string());
    println!("min pairwise distance: {}", min);
    println!("RESULT tiles={} perms={} seed={} min_pairwise={} out={}", tiles, perms, seed, min, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    mode: Mode,
    config: &Path,
    data: &Path,
    out: &Path,
    target: Option<&str>,
    seed: Option<u64>,
    force: bool,
) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let entries = load_entries(data)?;
    prepare_output_dir(out, force)?;
    let (sources, target) = pick_target(load_all(&entries)?, target, mode == Mode::Da)?;
    let da_target = if mode == Mode::Da { target.as_ref() } else { None };
    let mut run_log = format!("{} start mode={} seed={}\n", now(), if da_target.is_some() { "da" } else { "dg" }, cfg.seed);
    let model = initial_model(&cfg, &sources, da_target)?;
    let mut last_epoch = None;
    let outcome = train_with(&cfg, &sources, da_target, model, &mut |ev| {
        if last_epoch != Some(ev.epoch) {
            last_epoch = Some(ev.epoch);
            eprintln!("epoch {} lr {}", ev.epoch, ev.lr);
            run_log.push_str(&format!("{} epoch={} lr={}\n", now(), ev.epoch, ev.lr));
        }
    })?;
    for r in &outcome.log.records {
        eprintln!(
            "epoch {} l_c {:.4} l_p {:.4} val_acc {:.4} aux_acc {:.4}",
            r.epoch, r.l_c, r.l_p, r.val_acc, r.jigsaw_acc
        );
    }
    let bundle = RunBundle { config: cfg, model: outcome.model, log: outcome.log, perms: outcome.perms };
    save_run(out, &bundle)?;
    run_log.push_str(&format!("{} done\n", now()));
    std::fs::write(out.join("run.log"), run_log)?;
    let val = bundle.log.records.last().map_or(f64::NAN, |r| r.val_acc);
    println!("holdout accuracy: {:.6}", val);
    let mut result = format!("RESULT mode={} val_acc={:.6}", if mode == Mode::Da { "da" } else { "dg" }, val);
    if let Some(t) = &target {
        let acc = accuracy(&bundle.model, t)?;
        println!("target {} accuracy: {:.6}", t.name, acc);
        result.push_str(&format!(" target={} target_acc={:.6}", t.name, acc));
    }
    println!("{} out={}", result, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    run: &Path,
    data: &Path,
    target: Option<&str>,
    want_confusion: bool,
    want_jigsaw: bool,
    cam_index: Option<usize>,
    seed: u64,
) -> CmdResult {
    if !run.is_dir() {
        return usage(format!("run directory {} does not exist", run.display()));
    }
    let entries = load_entries(data)?;
    let bundle = load_run(run)?;
    let datasets = load_all(&entries)?;
    let chosen = match target {
        Some(name) => datasets.iter().find(|d| d.name == name).ok_or_else(|| Failure::Usage(format!("no manifest entry named {:?}", name)))?,
        None => &datasets[0],
    };
    let mut result = String::from("RESULT");
    for d in &datasets {
        let acc = accuracy(&bundle.model, d)?;
        println!("{} accuracy: {:.6}", d.name, acc);
        result.push_str(&format!(" acc_{}={:.6}", d.name, acc));
    }
    if want_confusion {
        let cm = confusion_matrix(&bundle.model, chosen)?;
        let path = run.join(format!("confusion_{}.csv", chosen.name));
        std::fs::write(&path, cm.to_csv())?;
        println!("confusion matrix written to {}", path.display());
        result.push_str(&format!(" confusion={}", path.display()));
    }
    if want_jigsaw {
        let img = chosen.images().first().ok_or_else(|| Failure::Usage("empty dataset".into()))?;
        let (acc, chance) = match (bundle.model.spec.aux_task, &bundle.perms) {
            (AuxTask::Jigsaw, Some(set)) => {
                let grid = GridSpec::for_image(bundle.config.grid, img.height(), img.width())?;
                (jigsaw_accuracy(&bundle.model, chosen, set, &grid, seed)?, 1.0 / set.len() as f64)
            }
            (AuxTask::Jigsaw, None) => return Err(Failure::Runtime("run has no permutation set".into())),
            (AuxTask::Rotation, _) => (rotation_accuracy(&bundle.model, chosen, seed)?, 1.0 / 4.0),
        };
        println!("{} accuracy: {:.6} (chance {:.6})", bundle.model.spec.aux_task, acc, chance);
        result.push_str(&format!(" aux_acc={:.6} chance={:.6}", acc, chance));
    }
    if let Some(i) = cam_index {
        if i >= chosen.len() {
            return usage(format!("image index {} outside 0..{}", i, chosen.len()));
        }
        let pred = predict(&bundle.model, &chosen.select(&[i]))?[0];
        let map = cam(&bundle.model, &chosen.images()[i], pred)?;
        let pgm = run.join(format!("cam_{}.pgm", i));
        map.write_pgm(&pgm)?;
        std::fs::write(run.join(format!("cam_{}.csv", i)), map.to_csv())?;
        println!("CAM for image {} (predicted class {}) written to {}", i, pred, pgm.display());
        result.push_str(&format!(" cam_class={} cam={}", pred, pgm.display()));
    }
    println!("{}", result);
    Ok(())
}

fn parse_values(list: &str) -> Result<Vec<f64>, Failure> {
    let values: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Failure::Usage(format!("sweep value {:?} is not a number", s))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return usage("--values must list at least one value");
    }
    Ok(values)
}

fn sweep_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("JIGEN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(cores.max(n)),
        _ => cores,
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    axis: &str,
    values: &str,
    reps: usize,
    config: &Path,
    data: &Path,
    out: &Path,
    target: Option<&str>,
    force: bool,
) -> CmdResult {
    let axis: SweepAxis = axis.parse()?;
    let values = parse_values(values)?;
    if reps == 0 {
        return usage("--reps must be at least 1");
    }
    let cfg = load_config(config, None)?;
    let entries = load_entries(data)?;
    prepare_output_dir(out, force)?;
    let (sources, target) = pick_target(load_all(&entries)?, target, true)?;
    let target = target.expect("a target was chosen");
    let report = ablation_sweep(&cfg, axis, &values, reps, &sources, std::slice::from_ref(&target), sweep_threads())?;
    std::fs::write(out.join("sweep.csv"), report.to_csv())?;
    std::fs::write(out.join("sweep.json"), report.to_json()?)?;
    for r in &report.rows {
        let label = r.value.map_or("deep-all".to_string(), |v| format!("{}={}", axis, v));
        let failures: Vec<&str> = r.cells.iter().filter_map(|c| c.error.as_deref()).collect();
        println!(
            "{:<14} mean {} std {} wins {}/{}{}",
            label,
            r.mean.map_or("-".into(), |m| format!("{:.4}", m)),
            r.std.map_or("-".into(), |s| format!("{:.4}", s)),
            r.wins(),
            r.cells.len(),
            if failures.is_empty() { String::new() } else { format!(" failed: {}", failures.join("; ")) }
        );
    }
    let ok = report.succeeded();
    println!("RESULT axis={} rows={} succeeded={} out={}", axis, report.rows.len(), ok, out.display());
    if ok == 0 {
        return Err(Failure::Runtime("every sweep cell failed".into()));
    }
    Ok(())
}

fn gen_digits(count: usize, target_count: usize, seed: u64, out: &Path, force: bool) -> CmdResult {
    if count == 0 {
        return usage("--count must be at least 1");
    }
    prepare_output_dir(out, force)?;
    let mut lines = String::from("# name, domain_id, images, labels, transform\n");
    let write_pair = |stem: &str, d: &Dataset| -> CmdResult {
        let (imgs, labels) = to_idx(d)?;
        std::fs::write(out.join(format!("{}-images.idx", stem)), idx::encode_images(&imgs))?;
        std::fs::write(out.join(format!("{}-labels.idx", stem)), idx::encode_labels(&labels))?;
        Ok(())
    };
    write_pair("digits", &synth_digits(count, seed)?)?;
    let files = "digits-images.idx, digits-labels.idx";
    lines.push_str(&format!("identity, 0, {}, kind=identity\n", files));
    lines.push_str(&format!("invert, 1, {}, kind=invert\n", files));
    lines.push_str(&format!("colour, 2, {}, kind=channel-permute perm=2/0/1\n", files));
    if target_count > 0 {
        write_pair("target", &synth_digits(target_count, seed.wrapping_add(1))?)?;
        lines.push_str(&format!(
            "noisy, 3, target-images.idx, target-labels.idx, kind=noise-background seed={}\n",
            seed
        ));
    }
    std::fs::write(out.join("manifest.txt"), lines)?;
    println!("RESULT count={} target_count={} seed={} out={}", count, target_count, seed, out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenPerms { tiles, perms, seed, out, force } => gen_perms(tiles, perms, seed, &out, force),
        Command::Train { mode, config, data, out, target, seed, force } => {
            train(mode, &config, &data, &out, target.as_deref(), seed, force)
        }
        Command::Eval { run, data, target, confusion, jigsaw, cam, seed } => {
            eval(&run, &data, target.as_deref(), confusion, jigsaw, cam, seed)
        }
        Command::Sweep { axis, values, reps, config, data, out, target, force } => {
            sweep(&axis, &values, reps, &config, &data, &out, target.as_deref(), force)
        }
        Command::GenDigits { count, target_count, seed, out, force } => gen_digits(count, target_count, seed, &out, force),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(1)
        }
    }
}
