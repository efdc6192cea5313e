//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::ParamSet;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum relative error per coordinate.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding compare in absolute terms.
    pub denominator_floor: f64,
    /// Check at most this many coordinates per parameter (seeded sample).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            denominator_floor: 1e-2,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a ReLU or max-pool kink.
    pub skipped: Vec<(String, usize)>,
    pub failures: Vec<CoordCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compare backward-pass gradients of `build` against central differences.
///
/// `build` must record a deterministic scalar loss on the tape it is given.
pub fn grad_check<B>(build: B, params: &ParamSet<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let base_signature = tape.branch_signature();
    drop(tape);

    let eval = |ps: &ParamSet<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let l = build(&mut t, ps)?;
        Ok((t.value(l).item()?, t.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        let n = work.get(id).value.numel();
        let mut coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        for idx in coords {
            let analytic = work.get(id).grad.data()[idx];
            let orig = work.get(id).value.data()[idx];
            work.get_mut(id).value.data_mut()[idx] = orig + cfg.step;
            let (plus, sig_plus) = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = orig - cfg.step;
            let (minus, sig_minus) = eval(&work)?;
            work.get_mut(id).value.data_mut()[idx] = orig;
            let name = work.get(id).name.clone();
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped.push((name, idx));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.denominator_floor);
            let rel_error = (analytic - numeric).abs() / denom;
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            if rel_error > cfg.tolerance {
                report.failures.push(CoordCheck {
                    param: name,
                    index: idx,
                    analytic,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}
