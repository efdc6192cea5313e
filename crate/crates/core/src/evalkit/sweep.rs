//! Ablation sweeps over one hyperparameter, with a Deep All reference row.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::accuracy;
use crate::datasets::Dataset;
use crate::error::{invalid, Error, Result};
use crate::trainer::{train_dg, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Alpha,
    Beta,
    Perms,
    Grid,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::Perms => "P",
            SweepAxis::Grid => "grid",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" | "α" => Ok(SweepAxis::Alpha),
            "beta" | "β" => Ok(SweepAxis::Beta),
            "P" | "p" | "perms" => Ok(SweepAxis::Perms),
            "grid" => Ok(SweepAxis::Grid),
            other => invalid(format!("unknown sweep axis {:?} (alpha, beta, P, grid)", other)),
        }
    }
}

impl SweepAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let int = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                invalid(format!("{} needs an integer value, got {}", self, v))
            }
        };
        let mut cfg = base.clone();
        match self {
            SweepAxis::Alpha => {
                cfg.alpha = value;
                cfg.alpha_s = value;
            }
            SweepAxis::Beta => cfg.beta = value,
            SweepAxis::Perms => cfg.perms = int(value)?,
            SweepAxis::Grid => cfg.grid = int(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub seed: u64,
    /// Mean accuracy over the targets; `None` if the run failed.
    pub accuracy: Option<f64>,
    pub target_accuracies: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Axis value, or `None` for the reference row.
    pub value: Option<f64>,
    pub reference: bool,
    /// Configurations known to starve the object classifier (β = 0).
    pub degenerate: bool,
    pub cells: Vec<SweepCell>,
    pub mean: Option<f64>,
    /// Sample standard deviation; present only with two or more completed runs.
    pub std: Option<f64>,
    /// Per repetition: did this row beat the reference row at the same seed?
    pub above_reference: Vec<Option<bool>>,
    /// Mean accuracy on each target separately, over completed runs.
    pub target_means: Vec<Option<f64>>,
    /// `[target][repetition]`: the same comparison made on one target only.
    pub above_reference_by_target: Vec<Vec<Option<bool>>>,
}

impl SweepRow {
    pub fn completed(&self) -> usize {
        self.cells.iter().filter(|c| c.accuracy.is_some()).count()
    }

    pub fn wins(&self) -> usize {
        self.above_reference.iter().filter(|w| **w == Some(true)).count()
    }

    /// Wins counted on target `t` alone.
    pub fn wins_on(&self, t: usize) -> usize {
        self.above_reference_by_target.get(t).map_or(0, |w| w.iter().filter(|w| **w == Some(true)).count())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub targets: Vec<String>,
    /// Row 0 is the Deep All reference.
    pub rows: Vec<SweepRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{:.6}", x))
}

impl SweepReport {
    pub fn reference(&self) -> &SweepRow {
        &self.rows[0]
    }

    pub fn succeeded(&self) -> usize {
        self.rows.iter().map(SweepRow::completed).sum()
    }

    /// One line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,reference,degenerate,completed,mean,std,wins,accuracies,target_means\n");
        for r in &self.rows {
            let accs: Vec<String> = r.cells.iter().map(|c| fmt_opt(c.accuracy)).collect();
            let per_target: Vec<String> = r.target_means.iter().map(|m| fmt_opt(*m)).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.axis,
                r.value.map_or("deep-all".to_string(), |v| v.to_string()),
                r.reference,
                r.degenerate,
                r.completed(),
                fmt_opt(r.mean),
                fmt_opt(r.std),
                r.wins(),
                accs.join(";"),
                per_target.join(";")
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(format!("report serialization: {}", e)))
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn run_cell(cfg: &TrainConfig, sources: &[Dataset], targets: &[Dataset]) -> SweepCell {
    let result = train_dg(cfg, sources).and_then(|out| targets.iter().map(|t| accuracy(&out.model, t)).collect::<Result<Vec<_>>>());
    match result {
        Ok(accs) => SweepCell {
            seed: cfg.seed,
            accuracy: Some(accs.iter().sum::<f64>() / accs.len() as f64),
            target_accuracies: accs,
            error: None,
        },
        Err(e) => SweepCell { seed: cfg.seed, accuracy: None, target_accuracies: Vec::new(), error: Some(e.to_string()) },
    }
}

/// Train one DG run per (value, repetition) with seeds `base.seed + rep`,
/// plus the Deep All reference `{α=0, β=1}` at the same seeds, and score
/// each on `targets`. Failed cells are recorded and the sweep continues.
/// Cells run on up to `threads` worker threads; results do not depend on it.
pub fn ablation_sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    repetitions: usize,
    sources: &[Dataset],
    targets: &[Dataset],
    threads: usize,
) -> Result<SweepReport> {
    if values.is_empty() {
        return invalid("sweep needs at least one value");
    }
    if repetitions == 0 {
        return invalid("sweep needs at least one repetition");
    }
    if targets.is_empty() {
        return invalid("sweep needs at least one target dataset");
    }
    base.validate()?;
    // Row-major (row, rep) cells; invalid axis values become failed cells.
    let mut row_cfgs: Vec<Result<TrainConfig>> = vec![Ok(base.deep_all())];
    row_cfgs.extend(values.iter().map(|&v| axis.apply(base, v)));
    let jobs: Vec<(usize, std::result::Result<TrainConfig, String>)> = row_cfgs
        .iter()
        .enumerate()
        .flat_map(|(row, cfg)| {
            (0..repetitions).map(move |rep| {
                let cfg = match cfg {
                    Ok(c) => Ok(TrainConfig { seed: base.seed + rep as u64, ..c.clone() }),
                    Err(e) => Err(e.to_string()),
                };
                (row, cfg)
            })
        })
        .collect();
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((_, cfg)) = jobs.get(i) else { break };
        let cell = match cfg {
            Ok(cfg) => run_cell(cfg, sources, targets),
            Err(e) => SweepCell {
                seed: base.seed + (i % repetitions) as u64,
                accuracy: None,
                target_accuracies: Vec::new(),
                error: Some(e.clone()),
            },
        };
        results.lock().expect("sweep results lock")[i] = Some(cell);
    };
    let threads = threads.clamp(1, jobs.len());
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    let cells: Vec<SweepCell> = results.into_inner().expect("sweep results lock").into_iter().map(|c| c.expect("every cell ran")).collect();

    let mut rows: Vec<SweepRow> = cells
        .chunks(repetitions)
        .enumerate()
        .map(|(r, chunk)| {
            let accs: Vec<f64> = chunk.iter().filter_map(|c| c.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let value = (r > 0).then(|| values[r - 1]);
            SweepRow {
                value,
                reference: r == 0,
                degenerate: axis == SweepAxis::Beta && value == Some(0.0),
                cells: chunk.to_vec(),
                mean,
                std,
                above_reference: Vec::new(),
                target_means: (0..targets.len())
                    .map(|t| mean_std(&chunk.iter().filter_map(|c| c.target_accuracies.get(t).copied()).collect::<Vec<_>>()).0)
                    .collect(),
                above_reference_by_target: Vec::new(),
            }
        })
        .collect();
    let reference: Vec<Option<f64>> = rows[0].cells.iter().map(|c| c.accuracy).collect();
    let reference_cells = rows[0].cells.clone();
    for row in &mut rows {
        row.above_reference_by_target = (0..targets.len())
            .map(|t| {
                row.cells
                    .iter()
                    .zip(&reference_cells)
                    .map(|(c, r)| match (c.target_accuracies.get(t), r.target_accuracies.get(t)) {
                        (Some(a), Some(b)) => Some(a > b),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        row.above_reference = row
            .cells
            .iter()
            .zip(&reference)
            .map(|(c, r)| match (c.accuracy, r) {
                (Some(a), Some(b)) => Some(a > *b),
                _ => None,
            })
            .collect();
    }
    Ok(SweepReport { axis, targets: targets.iter().map(|t| t.name.clone()).collect(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_conv_stack;
    use crate::patchwork::ImageTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64, domain: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = rng.gen_range(0..2);
            let v = if y == 0 { 0.2 } else { 0.8 };
            images.push(ImageTensor::new(3, 8, 8, (0..192).map(|_| v + 0.1 * rng.gen::<f32>()).collect()).unwrap());
            labels.push(y);
        }
        Dataset::new("toy", domain, images, labels, 2).unwrap()
    }

    fn base() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.05,
            grid: 2,
            perms: 5,
            convs: parse_conv_stack("c3m2,c4").unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn axis_parsing_and_application() {
        assert_eq!("α".parse::<SweepAxis>().unwrap(), SweepAxis::Alpha);
        assert_eq!("P".parse::<SweepAxis>().unwrap(), SweepAxis::Perms);
        assert!("gamma".parse::<SweepAxis>().is_err());
        assert_eq!(SweepAxis::Perms.apply(&base(), 7.0).unwrap().perms, 7);
        assert!(SweepAxis::Grid.apply(&base(), 2.5).is_err());
        assert!(SweepAxis::Beta.apply(&base(), 1.5).is_err());
    }

    #[test]
    fn bookkeeping_rows_and_reference() {
        let sources = [toy(40, 1, 0)];
        let targets = [toy(20, 2, 1)];
        let alpha = ablation_sweep(&TrainConfig { beta: 1.0, ..base() }, SweepAxis::Alpha, &[0.0, 0.5], 2, &sources, &targets, 1).unwrap();
        assert_eq!(alpha.rows.len(), 3);
        assert!(alpha.rows[0].reference && !alpha.rows[1].reference);
        // α=0 with β=1 is exactly the reference configuration.
        assert_eq!(alpha.rows[1].cells, alpha.rows[0].cells);
        assert_eq!(alpha.rows[1].wins(), 0);
        assert!(alpha.rows.iter().all(|r| r.std.is_some() && r.completed() == 2));

        let p = ablation_sweep(&base(), SweepAxis::Perms, &[3.0, 4.0, 5.0], 2, &sources, &targets, 2).unwrap();
        assert_eq!(p.rows.len(), 4);
        assert_eq!(p.rows[1].cells.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(p.to_csv().lines().count(), 5);
        let json: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 4);
        // Thread count must not change results.
        let serial = ablation_sweep(&base(), SweepAxis::Perms, &[3.0, 4.0, 5.0], 2, &sources, &targets, 1).unwrap();
        assert_eq!(serial, p);
    }

    #[test]
    fn degenerate_flag_failures_and_single_rep() {
        let sources = [toy(30, 3, 0)];
        let targets = [toy(10, 4, 1)];
        let r = ablation_sweep(&base(), SweepAxis::Beta, &[0.0, 7.0], 1, &sources, &targets, 1).unwrap();
        assert!(r.rows[1].degenerate && !r.rows[0].degenerate);
        assert!(r.rows[1].std.is_none());
        assert!(r.rows[2].cells[0].error.is_some() && r.rows[2].mean.is_none());
        assert!(r.succeeded() >= 2);
        assert!(ablation_sweep(&base(), SweepAxis::Beta, &[], 1, &sources, &targets, 1).is_err());
        assert!(ablation_sweep(&base(), SweepAxis::Beta, &[0.5], 0, &sources, &targets, 1).is_err());
    }

    #[test]
    fn per_target_statistics() {
        let sources = [toy(40, 5, 0)];
        let targets = [toy(20, 6, 1), toy(16, 7, 2).with_name("other", 2)];
        let r = ablation_sweep(&base(), SweepAxis::Beta, &[0.5], 2, &sources, &targets, 1).unwrap();
        assert_eq!(r.targets, ["toy", "other"]);
        for row in &r.rows {
            assert_eq!(row.target_means.len(), 2);
            assert_eq!(row.above_reference_by_target.len(), 2);
            for t in 0..2 {
                let accs: Vec<f64> = row.cells.iter().map(|c| c.target_accuracies[t]).collect();
                let m = row.target_means[t].unwrap();
                assert!((m - accs.iter().sum::<f64>() / 2.0).abs() < 1e-12);
                let wins = row.cells.iter().zip(&r.rows[0].cells).filter(|(c, d)| c.target_accuracies[t] > d.target_accuracies[t]).count();
                assert_eq!(row.wins_on(t), wins);
            }
            // The overall mean is the mean of the per-target means when every run completed.
            let overall = (row.target_means[0].unwrap() + row.target_means[1].unwrap()) / 2.0;
            assert!((row.mean.unwrap() - overall).abs() < 1e-12);
        }
        assert_eq!(r.rows[0].wins_on(0), 0);
        assert_eq!(r.rows[1].wins_on(5), 0);
    }
}
