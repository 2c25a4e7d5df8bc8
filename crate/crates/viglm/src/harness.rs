//! Monte-Carlo benchmark harness: runs the Poisson experiment grid cell by
//! cell, solving both estimators on the same data per replication, and emits
//! diff-stable CSV.

use std::io::{self, Write};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::families::Family;
use crate::links::Link;
use crate::solvers::{mle_gd_solve, vi_solve, SolverTrace, StepSchedule};
use crate::synth::{generate, BetaStar, ExperimentConfig};

/// Schedule recipe instantiated per (N, d) cell.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleTemplate {
    /// η^k = η₀·√(N/d)·rate^k.
    ExperimentDecay { eta0: f64, decay_rate: f64 },
    /// η^k = η for every cell.
    Constant { eta: f64 },
}

impl ScheduleTemplate {
    pub fn for_cell(&self, n: usize, d: usize) -> Result<StepSchedule> {
        match self {
            ScheduleTemplate::ExperimentDecay { eta0, decay_rate } => {
                StepSchedule::experiment_decay(*eta0, (n as f64 / d as f64).sqrt(), *decay_rate)
            }
            ScheduleTemplate::Constant { eta } => StepSchedule::constant(*eta),
        }
    }
}

/// A full benchmark grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub links: Vec<Link>,
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub iter_budgets: Vec<usize>,
    pub reps: usize,
    pub beta_star: BetaStar,
    pub schedule: ScheduleTemplate,
    pub base_seed: u64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty()
            || self.dims.is_empty()
            || self.sample_sizes.is_empty()
            || self.iter_budgets.is_empty()
        {
            return Err(Error::Parameter("grid lists must be nonempty".into()));
        }
        if self.reps < 1 {
            return Err(Error::Parameter("reps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Squared-error statistics of one grid cell, per method, over the
/// replications that did not diverge.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub mean_sq_error_vi: f64,
    pub sd_vi: f64,
    pub mean_sq_error_mle: f64,
    pub sd_mle: f64,
    pub diverged_vi: usize,
    pub diverged_mle: usize,
}

/// One grid cell with its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub link: Link,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub reps: usize,
    pub result: CellResult,
}

/// Deterministic per-replication seed derived from the cell coordinates (not
/// the visit order), so any grid traversal reproduces identical cells.
pub fn cell_seed(base_seed: u64, link: &Link, d: usize, n: usize, k: usize, rep: usize) -> u64 {
    let mut s = splitmix64(base_seed ^ fnv1a(&link.to_string()));
    for v in [d as u64, n as u64, k as u64, rep as u64] {
        s = splitmix64(s ^ v);
    }
    s
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Runs one cell: per replication, generate Poisson data, run both methods
/// from β⁰ = 0 for exactly k iterations with the same schedule, and record
/// ‖β^k − β*‖². Diverged replications are excluded from the mean and
/// counted; divergence is data, not failure.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    link: &Link,
    d: usize,
    n: usize,
    k: usize,
    reps: usize,
    schedule: &StepSchedule,
    beta_star: &BetaStar,
    base_seed: u64,
) -> Result<CellResult> {
    if reps < 1 {
        return Err(Error::Parameter("reps must be at least 1".into()));
    }
    let outcomes: Vec<(Option<f64>, Option<f64>)> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<(Option<f64>, Option<f64>)> {
            let cfg = ExperimentConfig {
                dim: d,
                n,
                link: link.clone(),
                family: Family::Poisson,
                beta_star: beta_star.clone(),
                intercept: false,
                seed: cell_seed(base_seed, link, d, n, k, rep),
            };
            let data = generate(&cfg)?;
            let target = cfg.beta_star_vector()?;
            let beta0 = DVector::zeros(target.len());
            let vi = budgeted_error(
                vi_solve(link, &data, &beta0, schedule, k, 0.0),
                &target,
            )?;
            let mle = budgeted_error(
                mle_gd_solve(Family::Poisson, link, &data, &beta0, schedule, k, 0.0),
                &target,
            )?;
            Ok((vi, mle))
        })
        .collect::<Result<Vec<_>>>()?;

    let vi: Vec<f64> = outcomes.iter().filter_map(|o| o.0).collect();
    let mle: Vec<f64> = outcomes.iter().filter_map(|o| o.1).collect();
    let (mean_vi, sd_vi) = mean_sd(&vi);
    let (mean_mle, sd_mle) = mean_sd(&mle);
    Ok(CellResult {
        mean_sq_error_vi: mean_vi,
        sd_vi,
        mean_sq_error_mle: mean_mle,
        sd_mle,
        diverged_vi: reps - vi.len(),
        diverged_mle: reps - mle.len(),
    })
}

fn budgeted_error(
    solve: Result<SolverTrace>,
    target: &DVector<f64>,
) -> Result<Option<f64>> {
    match solve {
        Ok(trace) => Ok(Some((trace.final_iterate() - target).norm_squared())),
        Err(Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

/// Maps [`run_cell`] over the grid. Per-cell seeds come from the cell
/// coordinates, so the traversal order is immaterial.
pub fn run_grid(spec: &GridSpec) -> Result<Vec<CellRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for link in &spec.links {
        for &d in &spec.dims {
            for &n in &spec.sample_sizes {
                let schedule = spec.schedule.for_cell(n, d)?;
                for &k in &spec.iter_budgets {
                    let result = run_cell(
                        link,
                        d,
                        n,
                        k,
                        spec.reps,
                        &schedule,
                        &spec.beta_star,
                        spec.base_seed,
                    )?;
                    log::info!(
                        "cell link={link} d={d} N={n} k={k}: vi={:.4} mle={:.4}",
                        result.mean_sq_error_vi,
                        result.mean_sq_error_mle
                    );
                    records.push(CellRecord {
                        link: link.clone(),
                        d,
                        n,
                        k,
                        reps: spec.reps,
                        result,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// One dataset, both methods from β⁰ = 0, full traces with squared errors to
/// the dense β*. A diverged method returns its partial trace; the missing
/// tail shows up as empty CSV fields.
pub fn trajectory_run(
    link: &Link,
    d: usize,
    n: usize,
    schedule: &StepSchedule,
    seed: u64,
    iters: usize,
) -> Result<(SolverTrace, SolverTrace)> {
    let cfg = ExperimentConfig {
        dim: d,
        n,
        link: link.clone(),
        family: Family::Poisson,
        beta_star: BetaStar::Dense,
        intercept: false,
        seed,
    };
    let data = generate(&cfg)?;
    let target = cfg.beta_star_vector()?;
    let beta0 = DVector::zeros(target.len());
    let mut vi = partial_on_divergence(vi_solve(link, &data, &beta0, schedule, iters, 0.0))?;
    let mut mle = partial_on_divergence(mle_gd_solve(
        Family::Poisson,
        link,
        &data,
        &beta0,
        schedule,
        iters,
        0.0,
    ))?;
    vi.set_target(&target);
    mle.set_target(&target);
    Ok((vi, mle))
}

fn partial_on_divergence(solve: Result<SolverTrace>) -> Result<SolverTrace> {
    match solve {
        Ok(trace) => Ok(trace),
        Err(Error::Diverged { trace, .. }) => Ok(*trace),
        Err(e) => Err(e),
    }
}

/// Writes grid results as `link,d,N,k,method,mean,sd,reps,diverged`, one row
/// per (cell, method), sorted by the key so equal runs produce identical
/// bytes.
pub fn write_grid_csv<W: Write>(records: &[CellRecord], out: &mut W) -> io::Result<()> {
    let mut sorted: Vec<&CellRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.link.to_string(), a.d, a.n, a.k).cmp(&(b.link.to_string(), b.d, b.n, b.k))
    });
    writeln!(out, "link,d,N,k,method,mean,sd,reps,diverged")?;
    for rec in sorted {
        let link = csv_field(&rec.link.to_string());
        // Alphabetical method order within a cell.
        writeln!(
            out,
            "{link},{},{},{},mle,{},{},{},{}",
            rec.d,
            rec.n,
            rec.k,
            rec.result.mean_sq_error_mle,
            rec.result.sd_mle,
            rec.reps,
            rec.result.diverged_mle
        )?;
        writeln!(
            out,
            "{link},{},{},{},vi,{},{},{},{}",
            rec.d,
            rec.n,
            rec.k,
            rec.result.mean_sq_error_vi,
            rec.result.sd_vi,
            rec.reps,
            rec.result.diverged_vi
        )?;
    }
    Ok(())
}

/// Writes aligned trajectory data as `k,err_vi,err_mle`; iterations past a
/// diverged trace's end are left empty.
pub fn write_trajectory_csv<W: Write>(
    vi: &SolverTrace,
    mle: &SolverTrace,
    out: &mut W,
) -> io::Result<()> {
    let empty = Vec::new();
    let evi = vi.errors_to_target.as_ref().unwrap_or(&empty);
    let emle = mle.errors_to_target.as_ref().unwrap_or(&empty);
    writeln!(out, "k,err_vi,err_mle")?;
    for k in 0..evi.len().max(emle.len()) {
        let a = evi.get(k).map(|v| v.to_string()).unwrap_or_default();
        let b = emle.get(k).map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{k},{a},{b}")?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_grid(links: Vec<Link>) -> GridSpec {
        GridSpec {
            links,
            dims: vec![2, 3],
            sample_sizes: vec![40],
            iter_budgets: vec![10],
            reps: 5,
            beta_star: BetaStar::Dense,
            schedule: ScheduleTemplate::ExperimentDecay {
                eta0: 0.01,
                decay_rate: 0.975,
            },
            base_seed: 99,
        }
    }

    #[test]
    fn singleton_grid_equals_run_cell() {
        let mut spec = tiny_grid(vec![Link::Softplus]);
        spec.dims = vec![2];
        let records = run_grid(&spec).unwrap();
        assert_eq!(records.len(), 1);
        let schedule = spec.schedule.for_cell(40, 2).unwrap();
        let direct = run_cell(
            &Link::Softplus,
            2,
            40,
            10,
            5,
            &schedule,
            &BetaStar::Dense,
            99,
        )
        .unwrap();
        assert_eq!(records[0].result, direct);
    }

    #[test]
    fn traversal_order_does_not_change_cells() {
        let a = run_grid(&tiny_grid(vec![Link::Softplus, Link::Exp])).unwrap();
        let mut spec = tiny_grid(vec![Link::Exp, Link::Softplus]);
        spec.dims = vec![3, 2];
        let b = run_grid(&spec).unwrap();
        for rec in &a {
            let twin = b
                .iter()
                .find(|r| r.link == rec.link && r.d == rec.d && r.n == rec.n && r.k == rec.k)
                .unwrap();
            assert_eq!(rec.result, twin.result);
        }
    }

    #[test]
    fn grid_csv_bytes_are_deterministic() {
        let spec = tiny_grid(vec![Link::Softplus]);
        let records = run_grid(&spec).unwrap();
        let mut a = Vec::new();
        write_grid_csv(&records, &mut a).unwrap();
        let records2 = run_grid(&spec).unwrap();
        let mut b = Vec::new();
        write_grid_csv(&records2, &mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("link,d,N,k,method,mean,sd,reps,diverged\n"));
    }

    #[test]
    fn log_link_cells_match_between_methods() {
        let schedule = ScheduleTemplate::ExperimentDecay {
            eta0: 0.01,
            decay_rate: 0.975,
        }
        .for_cell(60, 2)
        .unwrap();
        let cell = run_cell(&Link::Exp, 2, 60, 15, 10, &schedule, &BetaStar::Dense, 7).unwrap();
        assert!((cell.mean_sq_error_vi - cell.mean_sq_error_mle).abs() <= 1e-10);
        assert_eq!(cell.diverged_vi, cell.diverged_mle);
    }

    #[test]
    fn trajectory_log_link_columns_coincide() {
        let schedule = StepSchedule::experiment_default(60, 2);
        let (vi, mle) = trajectory_run(&Link::Exp, 2, 60, &schedule, 5, 30).unwrap();
        let evi = vi.errors_to_target.as_ref().unwrap();
        let emle = mle.errors_to_target.as_ref().unwrap();
        let max_dev = evi
            .iter()
            .zip(emle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 1e-10, "max deviation {max_dev}");
        let mut csv = Vec::new();
        write_trajectory_csv(&vi, &mle, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("k,err_vi,err_mle\n"));
        assert_eq!(text.lines().count(), 32);
    }

    #[test]
    fn clipped_trajectory_coincides_until_truncation_bites() {
        let link = Link::clipped_exp(0.0, 2.0).unwrap();
        let schedule = StepSchedule::experiment_default(400, 20);
        let (vi, mle) = trajectory_run(&link, 20, 400, &schedule, 11, 200).unwrap();
        let evi = vi.errors_to_target.as_ref().unwrap();
        let emle = mle.errors_to_target.as_ref().unwrap();
        // Both methods start from zero, where no sample has crossed log 2,
        // so the first steps agree; once iterates push linear predictors past
        // the cap the paths separate.
        assert_eq!(evi[0], emle[0]);
        assert_eq!(evi[1], emle[1]);
        let trailing_gap = (evi[199] - emle[199]).abs();
        assert!(
            trailing_gap > 1e-6,
            "truncation never separated the methods (gap {trailing_gap:.2e})"
        );
    }

    #[test]
    fn quoted_link_names_stay_one_field() {
        let link = Link::clipped_exp(0.0, 2.0).unwrap();
        assert_eq!(csv_field(&link.to_string()), "\"clipped_exp:c=0,C=2\"");
        assert_eq!(csv_field("softplus"), "softplus");
    }

    #[test]
    fn gmm_mle_may_diverge_while_vi_stays_finite() {
        // The non-convex mixture-CDF likelihood is the instability showcase;
        // the harness must tabulate it rather than crash.
        let link = Link::gmm_cdf(vec![1.65, 1.35], vec![-0.5, 1.2], vec![0.7, 0.5]).unwrap();
        let schedule = ScheduleTemplate::ExperimentDecay {
            eta0: 0.01,
            decay_rate: 0.975,
        }
        .for_cell(400, 20)
        .unwrap();
        let cell = run_cell(&link, 20, 400, 50, 5, &schedule, &BetaStar::Dense, 3).unwrap();
        assert_eq!(cell.diverged_vi, 0, "VI must stay finite on the mixture link");
        assert!(cell.mean_sq_error_vi.is_finite());
    }
}
