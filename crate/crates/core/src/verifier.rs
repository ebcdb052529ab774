//! Balance-identity checks over simulation output.
//!
//! Two grades of check exist and are never mixed: pathwise checks are exact
//! algebraic identities (tolerance 1e-9, deterministic), stationary checks
//! are statistical (k-sigma, default k = 4). Statistical errors combine the
//! two sides of an identity by jackknifing over pooled batch blocks, since
//! both sides are usually computed from the same path and share noise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::analytic::{
    polling_time_average_formula, PollingFormulaInputs, TransformContext,
};
use crate::error::{Error, Result};
use crate::estimators::{BlockedHist, PowTables, TagKind};
use crate::kernel::RunOutput;
use crate::testfns::TestFunction;

/// Default width of the statistical acceptance band, in combined sigmas.
pub const DEFAULT_K_SIGMA: f64 = 4.0;
/// Absolute slack added to every band so identically-zero residuals with
/// zero estimated sigma (e.g. at z = 1) grade cleanly.
pub const ATOL_FLOOR: f64 = 1e-12;
/// Tolerance of the exact pathwise checks.
pub const EXACT_ATOL: f64 = 1e-9;

/// Grading rule of a check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tolerance {
    Exact { atol: f64 },
    Statistical { k: f64 },
}

/// One evaluation point of an identity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckPoint {
    pub label: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Jackknife sigma of the residual; zero for exact checks.
    pub sigma: f64,
    pub pass: bool,
}

/// An identity graded over its evaluation points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub tolerance: Tolerance,
    pub points: Vec<CheckPoint>,
    pub skipped: usize,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl IdentityCheck {
    fn assemble(
        name: &str,
        tolerance: Tolerance,
        points: Vec<CheckPoint>,
        skipped: usize,
        note: Option<String>,
    ) -> Self {
        let pass = !points.is_empty() && points.iter().all(|p| p.pass);
        Self {
            name: name.to_string(),
            tolerance,
            points,
            skipped,
            pass,
            note,
        }
    }

    /// Largest |residual| / band ratio, for summaries.
    pub fn worst_ratio(&self) -> f64 {
        self.points
            .iter()
            .map(|p| {
                let band = match self.tolerance {
                    Tolerance::Exact { atol } => atol.max(f64::MIN_POSITIVE),
                    Tolerance::Statistical { k } => k * p.sigma + ATOL_FLOOR,
                };
                p.residual.abs() / band
            })
            .fold(0.0, f64::max)
    }
}

fn exact_point(label: String, lhs: f64, rhs: f64, atol: f64) -> CheckPoint {
    let residual = lhs - rhs;
    CheckPoint {
        label,
        lhs,
        rhs,
        residual,
        sigma: 0.0,
        pass: residual.abs() <= atol,
    }
}

/// Everything the checks read: per-replication outputs plus the analytic
/// context and grid.
pub struct RunData {
    pub m: usize,
    pub grid: Vec<Vec<f64>>,
    pub test_functions: Vec<TestFunction>,
    pub ctx: TransformContext,
    pub reps: Vec<RunOutput>,
}

impl RunData {
    fn blocks_per_rep(&self) -> usize {
        self.reps[0]
            .samples
            .as_ref()
            .map_or(0, |s| s.plan.count)
    }

    fn total_blocks(&self) -> usize {
        self.blocks_per_rep() * self.reps.len()
    }

    fn block_width(&self) -> f64 {
        let s = self.reps[0].samples.as_ref().expect("blocked run");
        s.plan.width()
    }

    fn require_samples(&self) -> Result<()> {
        if self.reps.iter().any(|r| r.samples.is_none()) {
            return Err(Error::MissingEstimate(
                "run used an infinite horizon; stationary estimates unavailable".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-z, per-block sums of a selected statistic over one sample category,
/// pooled across replications (rep-major block order).
struct Matrix {
    /// `z_sums[z][block]`
    z_sums: Vec<Vec<f64>>,
    counts: Vec<f64>,
    total_z: Vec<f64>,
    total_n: f64,
}

impl Matrix {
    fn sum_excl(&self, zi: usize, skip: Option<usize>) -> f64 {
        match skip {
            None => self.total_z[zi],
            Some(b) => self.total_z[zi] - self.z_sums[zi][b],
        }
    }

    fn n_excl(&self, skip: Option<usize>) -> f64 {
        match skip {
            None => self.total_n,
            Some(b) => self.total_n - self.counts[b],
        }
    }

    /// Mean of the statistic, or `None` when no samples remain.
    fn mean_excl(&self, zi: usize, skip: Option<usize>) -> Option<f64> {
        let n = self.n_excl(skip);
        if n <= 0.0 {
            None
        } else {
            Some(self.sum_excl(zi, skip) / n)
        }
    }
}

/// Which histogram a matrix is built from.
#[derive(Clone, Copy)]
enum HistSel {
    Arrivals,
    Departures,
    Tag(TagKind, usize),
}

/// Which exponent vector `z^(..)` uses, per queue, from the packed key.
#[derive(Clone, Copy)]
enum Exponent {
    /// The state part.
    X,
    /// State plus the mark's second part (departed batch at departures,
    /// arriving batch at arrivals).
    XPlusY,
    /// State plus the mark's third part (transfers).
    XPlusZ,
    /// The second part alone.
    YOnly,
}

fn hist_of(run: &RunData, rep: usize, sel: HistSel) -> Result<&BlockedHist> {
    let samples = run.reps[rep]
        .samples
        .as_ref()
        .ok_or_else(|| Error::MissingEstimate("no embedded samples".to_string()))?;
    match sel {
        HistSel::Arrivals => Ok(&samples.arrivals),
        HistSel::Departures => Ok(&samples.departures),
        HistSel::Tag(kind, queue) => samples.tag_hist(kind, queue),
    }
}

fn exponent_bound(hist: &BlockedHist, m: usize) -> Vec<u32> {
    let mut bound = vec![0u32; m];
    for (key, _) in &hist.total.cells {
        for q in 0..m {
            let total: u32 = key.iter().skip(q).step_by(m).sum();
            bound[q] = bound[q].max(total);
        }
    }
    bound
}

/// Build the `[z][block]` sums of `z^(exponent)` over samples passing
/// `filter`. The filter sees the whole packed key.
fn build_matrix(
    run: &RunData,
    sel: HistSel,
    points: &[Vec<f64>],
    exponent: Exponent,
    filter: &dyn Fn(&[u32], usize) -> bool,
) -> Result<Matrix> {
    let m = run.m;
    let total_blocks = run.total_blocks();
    let bpr = run.blocks_per_rep();
    let mut z_sums = vec![vec![0.0; total_blocks]; points.len()];
    let mut counts = vec![0.0; total_blocks];
    let mut exps = vec![0u32; m];
    for rep in 0..run.reps.len() {
        let hist = hist_of(run, rep, sel)?;
        let tables = PowTables::with_max_counts(points, m, &exponent_bound(hist, m));
        for (b, block) in hist.blocks.iter().enumerate() {
            let gb = rep * bpr + b;
            for (key, count) in &block.cells {
                if !filter(key, m) {
                    continue;
                }
                let c = *count as f64;
                counts[gb] += c;
                for q in 0..m {
                    exps[q] = match exponent {
                        Exponent::X => key[q],
                        Exponent::XPlusY => key[q] + key.get(m + q).copied().unwrap_or(0),
                        Exponent::XPlusZ => key[q] + key.get(2 * m + q).copied().unwrap_or(0),
                        Exponent::YOnly => key.get(m + q).copied().unwrap_or(0),
                    };
                }
                for (zi, sums) in z_sums.iter_mut().enumerate() {
                    sums[gb] += c * tables.eval(zi, &exps);
                }
            }
        }
    }
    let total_z: Vec<f64> = z_sums.iter().map(|s| s.iter().sum()).collect();
    let total_n = counts.iter().sum();
    Ok(Matrix {
        z_sums,
        counts,
        total_z,
        total_n,
    })
}

/// Block sums of a scalar function of the packed key.
fn build_scalar(
    run: &RunData,
    sel: HistSel,
    g: &dyn Fn(&[u32], usize) -> f64,
) -> Result<Matrix> {
    let m = run.m;
    let total_blocks = run.total_blocks();
    let bpr = run.blocks_per_rep();
    let mut sums = vec![0.0; total_blocks];
    let mut counts = vec![0.0; total_blocks];
    for rep in 0..run.reps.len() {
        let hist = hist_of(run, rep, sel)?;
        for (b, block) in hist.blocks.iter().enumerate() {
            let gb = rep * bpr + b;
            for (key, count) in &block.cells {
                let c = *count as f64;
                counts[gb] += c;
                sums[gb] += c * g(key, m);
            }
        }
    }
    let total: f64 = sums.iter().sum();
    let total_n = counts.iter().sum();
    Ok(Matrix {
        z_sums: vec![sums],
        counts,
        total_z: vec![total],
        total_n,
    })
}

/// Time-average matrix: per-z integrals with block durations as counts.
fn tavg_matrix(run: &RunData, points: &[Vec<f64>]) -> Result<Matrix> {
    let total_blocks = run.total_blocks();
    let bpr = run.blocks_per_rep();
    let mut z_sums = vec![vec![0.0; total_blocks]; points.len()];
    let mut counts = vec![0.0; total_blocks];
    // Map requested points onto the run grid where possible; points must
    // all be present (the runner augments the grid up front).
    let index: HashMap<Vec<u64>, usize> = run
        .grid
        .iter()
        .enumerate()
        .map(|(i, z)| (z.iter().map(|v| v.to_bits()).collect(), i))
        .collect();
    let mut point_to_grid = Vec::with_capacity(points.len());
    for z in points {
        let key: Vec<u64> = z.iter().map(|v| v.to_bits()).collect();
        let gi = index
            .get(&key)
            .copied()
            .ok_or_else(|| Error::MissingEstimate(format!("grid point {z:?} not accumulated")))?;
        point_to_grid.push(gi);
    }
    let g = run.grid.len();
    for (rep, out) in run.reps.iter().enumerate() {
        let ta = out
            .tavg
            .as_ref()
            .ok_or_else(|| Error::MissingEstimate("no time averages".to_string()))?;
        for b in 0..bpr {
            let gb = rep * bpr + b;
            counts[gb] = ta.block_time[b];
            for (pi, &gi) in point_to_grid.iter().enumerate() {
                z_sums[pi][gb] = ta.block_grid[b * g + gi];
            }
        }
    }
    let total_z: Vec<f64> = z_sums.iter().map(|s| s.iter().sum()).collect();
    let total_n = counts.iter().sum();
    Ok(Matrix {
        z_sums,
        counts,
        total_z,
        total_n,
    })
}

/// Jackknife over blocks: returns (full-sample value, sigma). `None` from
/// the estimator marks the point as unevaluable.
fn jackknife(blocks: usize, f: &dyn Fn(Option<usize>) -> Option<f64>) -> Option<(f64, f64)> {
    let full = f(None)?;
    let mut loo = Vec::with_capacity(blocks);
    for b in 0..blocks {
        loo.push(f(Some(b))?);
    }
    let mean = loo.iter().sum::<f64>() / blocks as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (blocks - 1) as f64
        / blocks as f64;
    Some((full, var.sqrt()))
}

fn stat_point(
    label: String,
    blocks: usize,
    k: f64,
    lhs: &dyn Fn(Option<usize>) -> Option<f64>,
    rhs: &dyn Fn(Option<usize>) -> Option<f64>,
) -> Option<CheckPoint> {
    let resid = |skip: Option<usize>| -> Option<f64> { Some(lhs(skip)? - rhs(skip)?) };
    let (residual, sigma) = jackknife(blocks, &resid)?;
    let l = lhs(None)?;
    let r = rhs(None)?;
    Some(CheckPoint {
        label,
        lhs: l,
        rhs: r,
        residual,
        sigma,
        pass: residual.abs() <= k * sigma + ATOL_FLOOR,
    })
}

fn fmt_z(z: &[f64]) -> String {
    let parts: Vec<String> = z.iter().map(|v| format!("{v}")).collect();
    format!("z=({})", parts.join(","))
}

/// Window length backing pooled rates, excluding one block if asked.
fn window_excl(run: &RunData, skip: Option<usize>) -> f64 {
    let w = run.block_width();
    match skip {
        None => w * run.total_blocks() as f64,
        Some(_) => w * (run.total_blocks() - 1) as f64,
    }
}

// ---------------------------------------------------------------------
// Exact pathwise checks
// ---------------------------------------------------------------------

/// The pathwise identity: per test function and replication, the epoch sums
/// must telescope to the boundary term exactly.
pub fn check_pathwise_telescoping(run: &RunData) -> IdentityCheck {
    let mut points = Vec::new();
    for (rep, out) in run.reps.iter().enumerate() {
        for acc in &out.transients {
            let lhs = ((acc.sum_arr_plus.value() - acc.sum_arr.value())
                + (acc.sum_dep_plus.value() - acc.sum_dep_minus.value()))
                / out.end_time;
            let rhs = (acc.f.eval(&out.x_final) - acc.f.eval(&out.x0)) / out.end_time;
            points.push(exact_point(
                format!("f={},rep={rep}", acc.f.name()),
                lhs,
                rhs,
                EXACT_ATOL,
            ));
        }
    }
    IdentityCheck::assemble(
        "pathwise_telescoping",
        Tolerance::Exact { atol: EXACT_ATOL },
        points,
        0,
        None,
    )
}

/// Integer conservation: final state equals initial state plus net counts,
/// and the departure-subset counters partition the departure epochs.
pub fn check_conservation(run: &RunData) -> IdentityCheck {
    let mut points = Vec::new();
    for (rep, out) in run.reps.iter().enumerate() {
        let ledger = &out.ledger;
        let mut worst = 0.0f64;
        for q in 0..run.m {
            let expect = i64::from(out.x0[q]) + ledger.cum_arrivals[q] as i64
                - ledger.cum_departures[q] as i64
                + ledger.cum_transfers[q] as i64;
            worst = worst.max((i64::from(out.x_final[q]) - expect).abs() as f64);
        }
        points.push(exact_point(format!("counts,rep={rep}"), worst, 0.0, 0.5));
        let partition: u64 = ledger.departure_subset_epochs.values().sum();
        points.push(exact_point(
            format!("subset_partition,rep={rep}"),
            partition as f64,
            ledger.total_departure_epochs as f64,
            0.5,
        ));
    }
    IdentityCheck::assemble(
        "conservation",
        Tolerance::Exact { atol: 0.5 },
        points,
        0,
        None,
    )
}

/// Rebuild the transient functionals from the stored jump log and demand
/// bitwise equality with the live accumulators.
pub fn check_replay_consistency(run: &RunData) -> Result<IdentityCheck> {
    let mut points = Vec::new();
    for (rep, out) in run.reps.iter().enumerate() {
        let log = out.ledger.jump_log();
        if log.dropped > 0 || (out.marks_emitted > 0 && log.is_empty()) {
            return Err(Error::MissingEstimate(
                "replay consistency needs a full jump log".to_string(),
            ));
        }
        let replayed = crate::estimators::replay_transients(log, &out.x0, &run.test_functions)?;
        let mut worst = 0.0f64;
        for (live, re) in out.transients.iter().zip(&replayed) {
            if !live.bit_identical(re) {
                let d = (live.sum_arr_plus.value() - re.sum_arr_plus.value())
                    .abs()
                    .max((live.sum_dep_plus.value() - re.sum_dep_plus.value()).abs())
                    .max((live.sum_dep_minus.value() - re.sum_dep_minus.value()).abs())
                    .max((live.sum_arr.value() - re.sum_arr.value()).abs())
                    .max((live.sum_dep.value() - re.sum_dep.value()).abs());
                worst = worst.max(d.max(f64::MIN_POSITIVE));
            }
        }
        let end = crate::estimators::replay_final_state(log, &out.x0)?;
        if end != out.x_final {
            worst = worst.max(1.0);
        }
        points.push(exact_point(format!("rep={rep}"), worst, 0.0, 0.0));
    }
    Ok(IdentityCheck::assemble(
        "replay_consistency",
        Tolerance::Exact { atol: 0.0 },
        points,
        0,
        None,
    ))
}

// ---------------------------------------------------------------------
// Stationary relations over test functions
// ---------------------------------------------------------------------

/// The embedded-epoch balance: arrival gains plus transfer gains equal
/// departure drains, in rate units.
pub fn check_stationary_relation(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    let mut points = Vec::new();
    let mut skipped = 0;
    for f in &run.test_functions {
        let fa = f.clone();
        let arr = build_scalar(run, HistSel::Arrivals, &move |key, m| {
            fa.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fa.eval(&key[..m])
        })?;
        let fr = f.clone();
        let route = build_scalar(run, HistSel::Departures, &move |key, m| {
            fr.eval_sum(&key[..m], Some(&key[2 * m..3 * m]), None) - fr.eval(&key[..m])
        })?;
        let fd = f.clone();
        let drain = build_scalar(run, HistSel::Departures, &move |key, m| {
            fd.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fd.eval(&key[..m])
        })?;
        let lhs = |skip: Option<usize>| -> Option<f64> {
            let w = window_excl(run, skip);
            Some((arr.sum_excl(0, skip) + route.sum_excl(0, skip)) / w)
        };
        let rhs = |skip: Option<usize>| -> Option<f64> {
            Some(drain.sum_excl(0, skip) / window_excl(run, skip))
        };
        match stat_point(format!("f={}", f.name()), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
            Some(p) => points.push(p),
            None => skipped += 1,
        }
    }
    Ok(IdentityCheck::assemble(
        "stationary_relation",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

/// Same balance with the departure side decomposed by simultaneous-subset,
/// exercising the per-subset Palm machinery.
pub fn check_subset_relation(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    // Subsets observed anywhere in the pooled runs, in mask order.
    let mut masks: Vec<u32> = run
        .reps
        .iter()
        .flat_map(|r| r.ledger.departure_subset_epochs.keys().copied())
        .collect();
    masks.sort_unstable();
    masks.dedup();
    let mut points = Vec::new();
    let mut skipped = 0;
    for f in &run.test_functions {
        let fa = f.clone();
        let arr = build_scalar(run, HistSel::Arrivals, &move |key, m| {
            fa.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fa.eval(&key[..m])
        })?;
        let mut route_by_subset = Vec::new();
        let mut drain_by_subset = Vec::new();
        for &mask in &masks {
            let fr = f.clone();
            route_by_subset.push(build_scalar(run, HistSel::Departures, &move |key, m| {
                if crate::estimators::departure_support(key, m) != mask {
                    return 0.0;
                }
                fr.eval_sum(&key[..m], Some(&key[2 * m..3 * m]), None) - fr.eval(&key[..m])
            })?);
            let fd = f.clone();
            drain_by_subset.push(build_scalar(run, HistSel::Departures, &move |key, m| {
                if crate::estimators::departure_support(key, m) != mask {
                    return 0.0;
                }
                fd.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fd.eval(&key[..m])
            })?);
        }
        let lhs = |skip: Option<usize>| -> Option<f64> {
            let w = window_excl(run, skip);
            let route: f64 = route_by_subset.iter().map(|mx| mx.sum_excl(0, skip)).sum();
            Some((arr.sum_excl(0, skip) + route) / w)
        };
        let rhs = |skip: Option<usize>| -> Option<f64> {
            let drain: f64 = drain_by_subset.iter().map(|mx| mx.sum_excl(0, skip)).sum();
            Some(drain / window_excl(run, skip))
        };
        match stat_point(format!("f={}", f.name()), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
            Some(p) => points.push(p),
            None => skipped += 1,
        }
    }
    let note = format!("subsets observed: {}", masks.len());
    Ok(IdentityCheck::assemble(
        "subset_relation",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        Some(note),
    ))
}

/// When every observed departure subset is a singleton, the subset
/// decomposition collapses to the per-queue one; both groupings of the same
/// samples must agree to rounding.
pub fn check_subset_singleton_reduction(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let masks: Vec<u32> = run
        .reps
        .iter()
        .flat_map(|r| r.ledger.departure_subset_epochs.keys().copied())
        .collect();
    if masks.iter().any(|m| m.count_ones() != 1) {
        return Err(Error::InapplicableAssumption(
            "simultaneous multi-queue departures observed; singleton reduction does not apply"
                .to_string(),
        ));
    }
    let mut points = Vec::new();
    for f in &run.test_functions {
        let fd = f.clone();
        let by_subset = build_scalar(run, HistSel::Departures, &move |key, m| {
            let mask = crate::estimators::departure_support(key, m);
            debug_assert_eq!(mask.count_ones(), 1);
            fd.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fd.eval(&key[..m])
        })?;
        let mut per_queue_total = 0.0;
        for q in 0..run.m {
            let fq = f.clone();
            let mx = build_scalar(run, HistSel::Departures, &move |key, m| {
                if key[m + q] == 0 {
                    return 0.0;
                }
                fq.eval_sum(&key[..m], Some(&key[m..2 * m]), None) - fq.eval(&key[..m])
            })?;
            per_queue_total += mx.total_z[0];
        }
        points.push(exact_point(
            format!("f={}", f.name()),
            by_subset.total_z[0],
            per_queue_total,
            1e-9,
        ));
    }
    Ok(IdentityCheck::assemble(
        "subset_singleton_reduction",
        Tolerance::Exact { atol: 1e-9 },
        points,
        0,
        None,
    ))
}

// ---------------------------------------------------------------------
// PGF comparisons on the grid
// ---------------------------------------------------------------------

/// Poisson arrivals see time averages: the arrival-epoch PGF equals the
/// time-average PGF per grid point.
pub fn check_pasta(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    let arr = build_matrix(run, HistSel::Arrivals, &run.grid, Exponent::X, &|_, _| true)?;
    let ta = tavg_matrix(run, &run.grid)?;
    let mut points = Vec::new();
    let mut skipped = 0;
    for (zi, z) in run.grid.iter().enumerate() {
        let lhs = |skip: Option<usize>| arr.mean_excl(zi, skip);
        let rhs = |skip: Option<usize>| ta.mean_excl(zi, skip);
        match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
            Some(p) => points.push(p),
            None => skipped += 1,
        }
    }
    Ok(IdentityCheck::assemble(
        "pasta",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

/// Classical single-queue balance: the PGF just before arrivals equals the
/// PGF just after departures.
pub fn check_burke(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    let arr = build_matrix(run, HistSel::Arrivals, &run.grid, Exponent::X, &|_, _| true)?;
    let dep = build_matrix(run, HistSel::Departures, &run.grid, Exponent::X, &|_, _| {
        true
    })?;
    let mut points = Vec::new();
    let mut skipped = 0;
    for (zi, z) in run.grid.iter().enumerate() {
        let lhs = |skip: Option<usize>| arr.mean_excl(zi, skip);
        let rhs = |skip: Option<usize>| dep.mean_excl(zi, skip);
        match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
            Some(p) => points.push(p),
            None => skipped += 1,
        }
    }
    Ok(IdentityCheck::assemble(
        "burke_arrival_departure",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

/// The grid-level PGF identities. Which closed forms enter depends on the
/// relation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgfRelationKind {
    /// `sum lambda_i (1 - z_i) L = sum lambda_i (1 - z_i) Sc_i`
    FlowBalance,
    /// Batch Poisson input: `(1 - G(z)) L = sum (1-z_i) E[G_i] Sc_i`
    BatchArrival,
    /// Fixed batch services: `(1 - G(z)) L = sum (1-z_i^K)/K E[G_i] Sc_i`
    BatchService,
    /// Roving server network: `sum lambda_i (1-z_i) L = sum flow_i (P_i(z) - z_i) Sc_i`
    RovingNetwork,
    /// Fully empirical joint relation (arrival product form).
    JointEmpirical,
    /// Per-class arrival split, empirical routing splits.
    SplitArrivals,
    /// Per-class arrivals with analytic Markovian routing.
    MarkovRouting,
}

impl PgfRelationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FlowBalance => "pgf_flow_balance",
            Self::BatchArrival => "pgf_batch_arrival",
            Self::BatchService => "pgf_batch_service",
            Self::RovingNetwork => "pgf_roving_network",
            Self::JointEmpirical => "pgf_relation_joint",
            Self::SplitArrivals => "pgf_relation_split_arrivals",
            Self::MarkovRouting => "pgf_relation_markov_routing",
        }
    }
}

/// Batch-service sizes are needed for `BatchService`; pass ones otherwise.
pub fn check_pgf_relation(
    run: &RunData,
    kind: PgfRelationKind,
    batch_k: &[u32],
) -> Result<IdentityCheck> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    let m = run.m;
    let ctx = &run.ctx;
    let grid = &run.grid;

    // Departure-split PGFs (normalized per departing queue).
    let mut dep_q: Vec<Matrix> = Vec::with_capacity(m);
    for q in 0..m {
        dep_q.push(build_matrix(
            run,
            HistSel::Departures,
            grid,
            Exponent::X,
            &move |key, m| key[m + q] > 0,
        )?);
    }
    let ta = tavg_matrix(run, grid)?;

    let mut points = Vec::new();
    let mut skipped = 0;

    match kind {
        PgfRelationKind::FlowBalance
        | PgfRelationKind::BatchArrival
        | PgfRelationKind::BatchService
        | PgfRelationKind::RovingNetwork => {
            let flows = ctx.traffic()?;
            for (zi, z) in grid.iter().enumerate() {
                // Left side: arrival drain times the time-average PGF.
                let arr_coef = match (kind, ctx.batch.as_ref()) {
                    (PgfRelationKind::BatchArrival, None) => {
                        return Err(Error::MissingEstimate("batch law".to_string()))
                    }
                    (
                        PgfRelationKind::BatchArrival | PgfRelationKind::BatchService,
                        Some((rate, law)),
                    ) => rate * (1.0 - law.pgf(z)),
                    // Unit batches: the epoch-rate form reduces to sigma.
                    _ => ctx.sigma(z),
                };
                let mut rhs_coef = Vec::with_capacity(m);
                for q in 0..m {
                    let c = match kind {
                        PgfRelationKind::FlowBalance => ctx.lambdas[q] * (1.0 - z[q]),
                        PgfRelationKind::BatchArrival => {
                            let (rate, law) = ctx.batch.as_ref().unwrap();
                            rate * law.marginal_mean(q) * (1.0 - z[q])
                        }
                        PgfRelationKind::BatchService => {
                            let k = f64::from(batch_k[q]);
                            let per_class = match ctx.batch.as_ref() {
                                Some((rate, law)) => rate * law.marginal_mean(q),
                                None => ctx.lambdas[q],
                            };
                            per_class * (1.0 - z[q].powi(batch_k[q] as i32)) / k
                        }
                        PgfRelationKind::RovingNetwork => {
                            flows[q] * (ctx.routing_pgf(q, z)? - z[q])
                        }
                        _ => unreachable!(),
                    };
                    rhs_coef.push(c);
                }
                let lhs = |skip: Option<usize>| -> Option<f64> {
                    Some(arr_coef * ta.mean_excl(zi, skip)?)
                };
                let dep_q = &dep_q;
                let rhs_coef = &rhs_coef;
                let rhs = move |skip: Option<usize>| -> Option<f64> {
                    let mut total = 0.0;
                    for q in 0..m {
                        total += rhs_coef[q] * dep_q[q].mean_excl(zi, skip)?;
                    }
                    Some(total)
                };
                match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
        PgfRelationKind::JointEmpirical
        | PgfRelationKind::SplitArrivals
        | PgfRelationKind::MarkovRouting => {
            // Fully empirical sides, in epoch-rate units (sums over the
            // observation window).
            let arr_x = build_matrix(run, HistSel::Arrivals, grid, Exponent::X, &|_, _| true)?;
            let arr_y = build_matrix(run, HistSel::Arrivals, grid, Exponent::YOnly, &|_, _| {
                true
            })?;
            let dep_x = build_matrix(run, HistSel::Departures, grid, Exponent::X, &|_, _| true)?;
            let dep_xy =
                build_matrix(run, HistSel::Departures, grid, Exponent::XPlusY, &|_, _| true)?;
            let dep_xz =
                build_matrix(run, HistSel::Departures, grid, Exponent::XPlusZ, &|_, _| true)?;
            // Per-class arrival splits for the split/Markov variants.
            let mut arr_xk: Vec<Matrix> = Vec::new();
            let mut arr_yk: Vec<Matrix> = Vec::new();
            if kind != PgfRelationKind::JointEmpirical {
                for k in 0..m {
                    let single = move |key: &[u32], m: usize| {
                        key[m + k] > 0
                            && (0..m).all(|j| j == k || key[m + j] == 0)
                    };
                    arr_xk.push(build_matrix(
                        run,
                        HistSel::Arrivals,
                        grid,
                        Exponent::X,
                        &single,
                    )?);
                    arr_yk.push(build_matrix(
                        run,
                        HistSel::Arrivals,
                        grid,
                        Exponent::YOnly,
                        &single,
                    )?);
                }
            }
            // Analytic routing PGFs per grid point, for the Markov variant.
            let mut one_minus_p: Vec<Vec<f64>> = Vec::new();
            if kind == PgfRelationKind::MarkovRouting {
                for z in grid {
                    let mut row = Vec::with_capacity(m);
                    for q in 0..m {
                        row.push(1.0 - ctx.routing_pgf(q, z)?);
                    }
                    one_minus_p.push(row);
                }
            }
            for (zi, z) in grid.iter().enumerate() {
                let arr_xk = &arr_xk;
                let arr_yk = &arr_yk;
                let arr_x = &arr_x;
                let arr_y = &arr_y;
                let dep_x = &dep_x;
                let dep_xz = &dep_xz;
                let dep_q = &dep_q;
                let one_minus_p = &one_minus_p;
                let lhs = move |skip: Option<usize>| -> Option<f64> {
                    let w = window_excl(run, skip);
                    let arrival_term = match kind {
                        PgfRelationKind::JointEmpirical => {
                            let n = arr_x.n_excl(skip);
                            if n <= 0.0 {
                                return None;
                            }
                            let mean_y = arr_y.sum_excl(zi, skip) / n;
                            (n / w) * (1.0 - mean_y) * (arr_x.sum_excl(zi, skip) / n)
                        }
                        _ => {
                            let mut total = 0.0;
                            for k in 0..m {
                                let nk = arr_xk[k].n_excl(skip);
                                if nk <= 0.0 {
                                    continue;
                                }
                                let gk = arr_yk[k].sum_excl(zi, skip) / nk;
                                let xk = arr_xk[k].sum_excl(zi, skip) / nk;
                                total += (nk / w) * (1.0 - gk) * xk;
                            }
                            total
                        }
                    };
                    let routing_term = match kind {
                        PgfRelationKind::MarkovRouting => {
                            let mut total = 0.0;
                            for q in 0..m {
                                total +=
                                    dep_q[q].sum_excl(zi, skip) / w * one_minus_p[zi][q];
                            }
                            total
                        }
                        _ => (dep_x.sum_excl(zi, skip) - dep_xz.sum_excl(zi, skip)) / w,
                    };
                    Some(arrival_term + routing_term)
                };
                let dep_x2 = &dep_x;
                let dep_xy = &dep_xy;
                let rhs = move |skip: Option<usize>| -> Option<f64> {
                    let w = window_excl(run, skip);
                    Some((dep_x2.sum_excl(zi, skip) - dep_xy.sum_excl(zi, skip)) / w)
                };
                match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
    }

    Ok(IdentityCheck::assemble(
        kind.name(),
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

// ---------------------------------------------------------------------
// Polling chain
// ---------------------------------------------------------------------

/// The linked identities of a cyclic-server system: the visit/service
/// balance, the per-service and per-switchover PGF relations, the mean
/// value decomposition and the assembled time-average formula.
pub fn check_polling_chain(run: &RunData) -> Result<Vec<IdentityCheck>> {
    run.require_samples()?;
    let blocks = run.total_blocks();
    let m = run.m;
    let ctx = &run.ctx;
    let grid = &run.grid;
    let flows = ctx.traffic()?;
    let ec = ctx.mean_cycle()?;
    let gammas: Vec<f64> = (0..m).map(|i| 1.0 / (flows[i] * ec)).collect();
    let switchovers = ctx
        .switchovers
        .as_ref()
        .ok_or_else(|| Error::MissingEstimate("switchover laws".to_string()))?;

    let mut vb = Vec::new();
    let mut vc = Vec::new();
    let mut sb = Vec::new();
    let mut sc = Vec::new();
    for q in 0..m {
        vb.push(build_matrix(
            run,
            HistSel::Tag(TagKind::VisitBegin, q),
            grid,
            Exponent::X,
            &|_, _| true,
        )?);
        vc.push(build_matrix(
            run,
            HistSel::Tag(TagKind::VisitComplete, q),
            grid,
            Exponent::X,
            &|_, _| true,
        )?);
        sb.push(build_matrix(
            run,
            HistSel::Tag(TagKind::ServiceBegin, q),
            grid,
            Exponent::X,
            &|_, _| true,
        )?);
        sc.push(build_matrix(
            run,
            HistSel::Departures,
            grid,
            Exponent::X,
            &move |key, m| key[m + q] > 0,
        )?);
    }
    let ta = tavg_matrix(run, grid)?;

    let mut checks = Vec::new();

    // Visit/service balance per queue.
    {
        let mut points = Vec::new();
        let mut skipped = 0;
        for i in 0..m {
            for (zi, z) in grid.iter().enumerate() {
                let g = gammas[i];
                let (vb_i, vc_i, sb_i, sc_i) = (&vb[i], &vc[i], &sb[i], &sc[i]);
                let lhs = move |skip: Option<usize>| -> Option<f64> {
                    Some(g * vb_i.mean_excl(zi, skip)? + sc_i.mean_excl(zi, skip)?)
                };
                let rhs = move |skip: Option<usize>| -> Option<f64> {
                    Some(sb_i.mean_excl(zi, skip)? + g * vc_i.mean_excl(zi, skip)?)
                };
                match stat_point(
                    format!("i={},{}", i + 1, fmt_z(z)),
                    blocks,
                    DEFAULT_K_SIGMA,
                    &lhs,
                    &rhs,
                ) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
        checks.push(IdentityCheck::assemble(
            "polling_equilibrium",
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ));
    }

    // Queue length across one service: arrivals accumulate, one customer
    // leaves. Stated multiplied through by z_i to stay regular at z_i = 0.
    {
        let mut points = Vec::new();
        let mut skipped = 0;
        for i in 0..m {
            for (zi, z) in grid.iter().enumerate() {
                let b = ctx.beta(i, z);
                let (sb_i, sc_i) = (&sb[i], &sc[i]);
                let z_i = z[i];
                let lhs =
                    move |skip: Option<usize>| Some(z_i * sc_i.mean_excl(zi, skip)?);
                let rhs = move |skip: Option<usize>| Some(b * sb_i.mean_excl(zi, skip)?);
                match stat_point(
                    format!("i={},{}", i + 1, fmt_z(z)),
                    blocks,
                    DEFAULT_K_SIGMA,
                    &lhs,
                    &rhs,
                ) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
        checks.push(IdentityCheck::assemble(
            "polling_service_relation",
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ));
    }

    // Queue length across one switchover: pure accumulation.
    {
        let mut points = Vec::new();
        let mut skipped = 0;
        for i in 0..m {
            for (zi, z) in grid.iter().enumerate() {
                let s_tilde = switchovers[i].lst(ctx.sigma(z));
                let (vb_next, vc_i) = (&vb[(i + 1) % m], &vc[i]);
                let lhs = move |skip: Option<usize>| vb_next.mean_excl(zi, skip);
                let rhs =
                    move |skip: Option<usize>| Some(s_tilde * vc_i.mean_excl(zi, skip)?);
                match stat_point(
                    format!("i={},{}", i + 1, fmt_z(z)),
                    blocks,
                    DEFAULT_K_SIGMA,
                    &lhs,
                    &rhs,
                ) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
        checks.push(IdentityCheck::assemble(
            "polling_switchover_relation",
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ));
    }

    // Stochastic mean value decomposition of the time average.
    {
        let mut points = Vec::new();
        let mut skipped = 0;
        for (zi, z) in grid.iter().enumerate() {
            let sig = ctx.sigma(z);
            let mut service_w = Vec::with_capacity(m);
            let mut switch_w = Vec::with_capacity(m);
            for i in 0..m {
                let b_i = ctx.services[i].mean();
                service_w.push(b_i / gammas[i] * ctx.services[i].lst_past(sig));
                switch_w.push(switchovers[i].mean() * switchovers[i].lst_past(sig));
            }
            let (sb_r, vc_r) = (&sb, &vc);
            let ta_r = &ta;
            let lhs = move |skip: Option<usize>| ta_r.mean_excl(zi, skip);
            let service_w = &service_w;
            let switch_w = &switch_w;
            let rhs = move |skip: Option<usize>| -> Option<f64> {
                let mut total = 0.0;
                for i in 0..m {
                    total += service_w[i] * sb_r[i].mean_excl(zi, skip)?
                        + switch_w[i] * vc_r[i].mean_excl(zi, skip)?;
                }
                Some(total / ec)
            };
            match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
                Some(p) => points.push(p),
                None => skipped += 1,
            }
        }
        checks.push(IdentityCheck::assemble(
            "polling_mean_value",
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ));
    }

    // Assembled formula against the measured time average, skipping grid
    // points within the singularity guard.
    {
        let mut points = Vec::new();
        let mut skipped = 0;
        for (zi, z) in grid.iter().enumerate() {
            let ta_r = &ta;
            let vb_r = &vb;
            let vc_r = &vc;
            let sb_r = &sb;
            let lhs = move |skip: Option<usize>| ta_r.mean_excl(zi, skip);
            let rhs = move |skip: Option<usize>| -> Option<f64> {
                let mut vb_vals = Vec::with_capacity(m);
                let mut vc_vals = Vec::with_capacity(m);
                let mut sb_vals = Vec::with_capacity(m);
                for i in 0..m {
                    vb_vals.push(vb_r[i].mean_excl(zi, skip)?);
                    vc_vals.push(vc_r[i].mean_excl(zi, skip)?);
                    sb_vals.push(sb_r[i].mean_excl(zi, skip)?);
                }
                let inputs = PollingFormulaInputs {
                    visit_begin: &vb_vals,
                    visit_complete: &vc_vals,
                    service_begin: Some(&sb_vals),
                };
                polling_time_average_formula(ctx, &inputs, z).ok()
            };
            match stat_point(fmt_z(z), blocks, DEFAULT_K_SIGMA, &lhs, &rhs) {
                Some(p) => points.push(p),
                None => skipped += 1,
            }
        }
        checks.push(IdentityCheck::assemble(
            "polling_assembled",
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ));
    }

    Ok(checks)
}

// ---------------------------------------------------------------------
// Consecutive-departure decompositions (priority, longer queue)
// ---------------------------------------------------------------------

/// Shared scaffolding: grades `Pi_i(z) = (region mix)(z) * beta_i(z) +
/// P(empty) * (lambda_i / lambda) * beta_i(z)` for each class, where the
/// region mix is an expectation over the post-departure law with one power
/// of `z_i` removed (the customer about to be served).
struct ConsecutiveSpec<'a> {
    /// For class i, coefficient applied to each region matrix.
    region_coef: Vec<Vec<f64>>,
    region_mx: Vec<Matrix>,
    class_mx: Vec<Matrix>,
    all_n_mx: Matrix,
    empty_mx: Matrix,
    run: &'a RunData,
}

impl ConsecutiveSpec<'_> {
    fn grade(&self, name: &str) -> Result<IdentityCheck> {
        let run = self.run;
        let ctx = &run.ctx;
        let blocks = run.total_blocks();
        let m = run.m;
        let lambda_total: f64 = ctx.lambdas.iter().sum();
        let mut points = Vec::new();
        let mut skipped = 0;
        for i in 0..m {
            for (zi, z) in run.grid.iter().enumerate() {
                let beta = ctx.beta(i, z);
                let frac = ctx.lambdas[i] / lambda_total;
                let class_mx = &self.class_mx[i];
                let all_n = &self.all_n_mx;
                let lhs = move |skip: Option<usize>| -> Option<f64> {
                    let n = all_n.n_excl(skip);
                    if n <= 0.0 {
                        return None;
                    }
                    Some(class_mx.sum_excl(zi, skip) / n)
                };
                let coefs = &self.region_coef[i];
                let regions = &self.region_mx;
                let empty = &self.empty_mx;
                let rhs = move |skip: Option<usize>| -> Option<f64> {
                    let n = all_n.n_excl(skip);
                    if n <= 0.0 {
                        return None;
                    }
                    let mut mix = 0.0;
                    for (c, mx) in coefs.iter().zip(regions) {
                        mix += c * mx.sum_excl(zi, skip) / n;
                    }
                    let p_empty = empty.sum_excl(0, skip) / n;
                    Some(beta * (mix + p_empty * frac))
                };
                match stat_point(
                    format!("i={},{}", i + 1, fmt_z(z)),
                    blocks,
                    DEFAULT_K_SIGMA,
                    &lhs,
                    &rhs,
                ) {
                    Some(p) => points.push(p),
                    None => skipped += 1,
                }
            }
        }
        Ok(IdentityCheck::assemble(
            name,
            Tolerance::Statistical { k: DEFAULT_K_SIGMA },
            points,
            skipped,
            None,
        ))
    }
}

fn class_split_matrices(run: &RunData) -> Result<(Vec<Matrix>, Matrix, Matrix)> {
    let m = run.m;
    let mut class_mx = Vec::with_capacity(m);
    for q in 0..m {
        class_mx.push(build_matrix(
            run,
            HistSel::Departures,
            &run.grid,
            Exponent::X,
            &move |key, m| key[m + q] > 0,
        )?);
    }
    let all_n = build_scalar(run, HistSel::Departures, &|_, _| 1.0)?;
    let empty = build_scalar(run, HistSel::Departures, &|key, m| {
        f64::from(key[..m].iter().all(|&c| c == 0))
    })?;
    Ok((class_mx, all_n, empty))
}

/// Two-class non-preemptive priority: between consecutive departures the
/// server picks class 1 if present, else class 2, else the next arrival.
pub fn check_priority_consecutive(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    if run.m != 2 {
        return Err(Error::Config("priority decomposition needs 2 classes".to_string()));
    }
    let (class_mx, all_n_mx, empty_mx) = class_split_matrices(run)?;
    // Regions of the post-departure state: class 1 present; class 1 absent
    // but class 2 present. The division of the region PGF by z_i (one
    // customer about to be served leaves) is evaluated as the same sum with
    // one power of z_i removed, which stays regular at z_i = 0.
    let busy1_shift = build_shifted(run, 0, &|key: &[u32], _m: usize| key[0] > 0)?;
    let only2_shift = build_shifted(run, 1, &|key: &[u32], _m: usize| key[0] == 0 && key[1] > 0)?;
    let spec = ConsecutiveSpec {
        region_coef: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        region_mx: vec![busy1_shift, only2_shift],
        class_mx,
        all_n_mx,
        empty_mx,
        run,
    };
    spec.grade("priority_consecutive")
}

/// Region PGF with one power of `z` removed at `queue` (the customer about
/// to be served there).
fn build_shifted(
    run: &RunData,
    queue: usize,
    filter: &dyn Fn(&[u32], usize) -> bool,
) -> Result<Matrix> {
    let m = run.m;
    let total_blocks = run.total_blocks();
    let bpr = run.blocks_per_rep();
    let points = &run.grid;
    let mut z_sums = vec![vec![0.0; total_blocks]; points.len()];
    let mut counts = vec![0.0; total_blocks];
    let mut exps = vec![0u32; m];
    for rep in 0..run.reps.len() {
        let hist = hist_of(run, rep, HistSel::Departures)?;
        let tables = PowTables::with_max_counts(points, m, &exponent_bound(hist, m));
        for (b, block) in hist.blocks.iter().enumerate() {
            let gb = rep * bpr + b;
            for (key, count) in &block.cells {
                if !filter(key, m) {
                    continue;
                }
                debug_assert!(key[queue] > 0);
                let c = *count as f64;
                counts[gb] += c;
                for q in 0..m {
                    exps[q] = key[q] - u32::from(q == queue);
                }
                for (zi, sums) in z_sums.iter_mut().enumerate() {
                    sums[gb] += c * tables.eval(zi, &exps);
                }
            }
        }
    }
    let total_z: Vec<f64> = z_sums.iter().map(|s| s.iter().sum()).collect();
    let total_n = counts.iter().sum();
    Ok(Matrix {
        z_sums,
        counts,
        total_z,
        total_n,
    })
}

/// Longer-queue discipline: between consecutive departures the server picks
/// the strictly longer queue; ties split by alpha.
pub fn check_longer_queue_decomposition(run: &RunData, alpha1: f64) -> Result<IdentityCheck> {
    run.require_samples()?;
    if run.m != 2 {
        return Err(Error::Config("longer-queue decomposition needs 2 queues".to_string()));
    }
    let (class_mx, all_n_mx, empty_mx) = class_split_matrices(run)?;
    let longer1 = build_shifted(run, 0, &|key: &[u32], _m: usize| key[0] > key[1])?;
    let longer2 = build_shifted(run, 1, &|key: &[u32], _m: usize| key[1] > key[0])?;
    let tie1 = build_shifted(run, 0, &|key: &[u32], _m: usize| {
        key[0] == key[1] && key[0] > 0
    })?;
    let tie2 = build_shifted(run, 1, &|key: &[u32], _m: usize| {
        key[0] == key[1] && key[0] > 0
    })?;
    let spec = ConsecutiveSpec {
        region_coef: vec![
            vec![1.0, 0.0, alpha1, 0.0],
            vec![0.0, 1.0, 0.0, 1.0 - alpha1],
        ],
        region_mx: vec![longer1, longer2, tie1, tie2],
        class_mx,
        all_n_mx,
        empty_mx,
        run,
    };
    spec.grade("longer_queue_decomposition")
}

/// The four post-departure regions partition the state space: their masses
/// sum to one exactly on the pooled samples.
pub fn check_longer_queue_partition(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let masses = [
        build_scalar(run, HistSel::Departures, &|key, _| f64::from(key[0] > key[1]))?,
        build_scalar(run, HistSel::Departures, &|key, _| f64::from(key[1] > key[0]))?,
        build_scalar(run, HistSel::Departures, &|key, _| {
            f64::from(key[0] == key[1] && key[0] > 0)
        })?,
        build_scalar(run, HistSel::Departures, &|key, _| {
            f64::from(key[0] == 0 && key[1] == 0)
        })?,
    ];
    let n = masses[0].total_n;
    let total: f64 = masses.iter().map(|mx| mx.total_z[0]).sum();
    let point = exact_point("region_masses".to_string(), total / n, 1.0, 1e-12);
    Ok(IdentityCheck::assemble(
        "longer_queue_partition",
        Tolerance::Exact { atol: 1e-12 },
        vec![point],
        0,
        None,
    ))
}

/// Coordinate-swap symmetry of the time-average PGF for label-symmetric
/// two-queue scenarios.
pub fn check_swap_symmetry(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    if run.m != 2 {
        return Err(Error::Config("swap symmetry needs 2 queues".to_string()));
    }
    let blocks = run.total_blocks();
    let ta = tavg_matrix(run, &run.grid)?;
    let index: HashMap<(u64, u64), usize> = run
        .grid
        .iter()
        .enumerate()
        .map(|(i, z)| ((z[0].to_bits(), z[1].to_bits()), i))
        .collect();
    let mut points = Vec::new();
    let mut skipped = 0;
    for (zi, z) in run.grid.iter().enumerate() {
        if z[0] >= z[1] {
            continue; // one point per unordered pair
        }
        let Some(&zj) = index.get(&(z[1].to_bits(), z[0].to_bits())) else {
            skipped += 1;
            continue;
        };
        let ta_r = &ta;
        let lhs = move |skip: Option<usize>| ta_r.mean_excl(zi, skip);
        let rhs = move |skip: Option<usize>| ta_r.mean_excl(zj, skip);
        match stat_point(
            format!("{}<->swapped", fmt_z(z)),
            blocks,
            DEFAULT_K_SIGMA,
            &lhs,
            &rhs,
        ) {
            Some(p) => points.push(p),
            None => skipped += 1,
        }
    }
    Ok(IdentityCheck::assemble(
        "swap_symmetry",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

// ---------------------------------------------------------------------
// Convergence and traffic checks
// ---------------------------------------------------------------------

/// Running Palm averages at half and full sample size must agree within
/// batch-means error: the empirical face of the Cesaro limits. Per-path
/// gaps are pooled over replications.
pub fn check_cesaro_convergence(run: &RunData) -> Result<IdentityCheck> {
    run.require_samples()?;
    let bpr = run.blocks_per_rep();
    if bpr < 4 {
        return Err(Error::Config("cesaro check needs at least 4 blocks".to_string()));
    }
    let mut points = Vec::new();
    let mut skipped = 0;
    for f in &run.test_functions {
        for (proc_name, sel) in [("arrival", HistSel::Arrivals), ("departure", HistSel::Departures)]
        {
            let fx = f.clone();
            let mx = build_scalar(run, sel, &move |key, m| fx.eval(&key[..m]))?;
            let mut gaps = Vec::new();
            let mut variances = Vec::new();
            for rep in 0..run.reps.len() {
                let lo = rep * bpr;
                let half = lo + bpr / 2;
                let hi = lo + bpr;
                let seg = |range: std::ops::Range<usize>| -> Option<(f64, f64)> {
                    let mut means = Vec::new();
                    for b in range {
                        if mx.counts[b] > 0.0 {
                            means.push(mx.z_sums[0][b] / mx.counts[b]);
                        }
                    }
                    if means.len() < 2 {
                        return None;
                    }
                    let mean = means.iter().sum::<f64>() / means.len() as f64;
                    let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                        / (means.len() - 1) as f64;
                    Some((mean, var / means.len() as f64))
                };
                let (Some((m1, v1)), Some((m2, v2))) = (seg(lo..half), seg(half..hi)) else {
                    continue;
                };
                // avg(2n) - avg(n) = (second-half mean - first-half mean)/2.
                gaps.push((m2 - m1) / 2.0);
                variances.push(0.25 * (v1 + v2));
            }
            if gaps.is_empty() {
                skipped += 1;
                continue;
            }
            let r = gaps.len() as f64;
            let gap = gaps.iter().sum::<f64>() / r;
            let sigma = (variances.iter().sum::<f64>()).sqrt() / r;
            points.push(CheckPoint {
                label: format!("f={},proc={proc_name}", f.name()),
                lhs: gap,
                rhs: 0.0,
                residual: gap,
                sigma,
                pass: gap.abs() <= DEFAULT_K_SIGMA * sigma + ATOL_FLOOR,
            });
        }
    }
    Ok(IdentityCheck::assemble(
        "cesaro_convergence",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}

/// Residual of the traffic equations at the solved throughputs.
pub fn check_traffic_equations(ctx: &TransformContext) -> Result<IdentityCheck> {
    let rows = ctx
        .routing
        .as_ref()
        .ok_or_else(|| Error::MissingEstimate("routing matrix".to_string()))?;
    let flows = ctx.traffic()?;
    let m = flows.len();
    let mut points = Vec::new();
    for i in 0..m {
        let back: f64 = ctx.lambdas[i] + (0..m).map(|k| flows[k] * rows[k][i]).sum::<f64>();
        points.push(exact_point(format!("queue={}", i + 1), flows[i], back, 1e-10));
    }
    Ok(IdentityCheck::assemble(
        "traffic_equations",
        Tolerance::Exact { atol: 1e-10 },
        points,
        0,
        None,
    ))
}

/// Helper for scenarios that want the analytic single-queue birth-death
/// PGF: `(1 - rho) / (1 - rho z)`.
pub fn birth_death_pgf(rho: f64, z: f64) -> f64 {
    (1.0 - rho) / (1.0 - rho * z)
}

// ---------------------------------------------------------------------
// Report container
// ---------------------------------------------------------------------

/// A named PGF estimate carried in the report for plotting and reference
/// comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedEstimate {
    pub name: String,
    pub estimate: crate::estimators::PgfEstimate,
}

/// Rates and counters describing what the run produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub events_processed: u64,
    pub marks_emitted: u64,
    pub jitter_count: u64,
    /// Full-path epoch rates pooled over replications.
    pub arrival_epoch_rate: f64,
    pub departure_epoch_rate: f64,
    pub per_queue_arrival_rate: Vec<f64>,
    pub per_queue_departure_rate: Vec<f64>,
    pub test_function_library: String,
    /// Station index serving each queue.
    pub station_of: Vec<u32>,
}

/// The complete outcome of one scenario run: reproducible bit-exactly from
/// (scenario, seed). Contains no wall-clock or host information.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BalanceReport {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub horizon: f64,
    pub replications: usize,
    pub warmup_fraction: f64,
    pub blocks_per_replication: usize,
    pub tie_policy: String,
    pub grid: Vec<Vec<f64>>,
    pub metadata: ReportMetadata,
    pub estimates: Vec<NamedEstimate>,
    pub checks: Vec<IdentityCheck>,
    pub pass: bool,
}

pub const REPORT_SCHEMA: &str = "qbalance-report/1";

impl BalanceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad report JSON: {e}")))
    }

    /// One human-readable line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            let extra = if c.skipped > 0 {
                format!(" ({} points skipped)", c.skipped)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{status} {:32} points={:4} worst|r|/band={:.3}{extra}\n",
                c.name,
                c.points.len(),
                c.worst_ratio()
            ));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.pass { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Compare the measured marginal PGFs of a single-queue birth-death
/// scenario against the analytic form, at arrival epochs, after departures
/// and in time average.
pub fn check_birth_death_reference(run: &RunData, rho: f64) -> Result<IdentityCheck> {
    run.require_samples()?;
    if run.m != 1 {
        return Err(Error::Config("birth-death reference needs one queue".to_string()));
    }
    let blocks = run.total_blocks();
    let arr = build_matrix(run, HistSel::Arrivals, &run.grid, Exponent::X, &|_, _| true)?;
    let dep = build_matrix(run, HistSel::Departures, &run.grid, Exponent::X, &|_, _| {
        true
    })?;
    let ta = tavg_matrix(run, &run.grid)?;
    let mut points = Vec::new();
    let mut skipped = 0;
    for (zi, z) in run.grid.iter().enumerate() {
        let reference = birth_death_pgf(rho, z[0]);
        for (which, mx) in [("arrival", &arr), ("departure", &dep), ("time_avg", &ta)] {
            let lhs = move |skip: Option<usize>| mx.mean_excl(zi, skip);
            let rhs = move |_skip: Option<usize>| Some(reference);
            match stat_point(
                format!("{which},{}", fmt_z(z)),
                blocks,
                DEFAULT_K_SIGMA,
                &lhs,
                &rhs,
            ) {
                Some(p) => points.push(p),
                None => skipped += 1,
            }
        }
    }
    Ok(IdentityCheck::assemble(
        "birth_death_reference",
        Tolerance::Statistical { k: DEFAULT_K_SIGMA },
        points,
        skipped,
        None,
    ))
}
