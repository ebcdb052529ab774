//! Scenario execution: replications, check assembly, report and plot-data
//! emission.

use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::error::{Error, Result};
use crate::estimators::empirical_pgf;
use crate::kernel::{run_model, rate_estimates, RunConfig, RunOutput, TiePolicy};
use crate::rng::RngStream;
use crate::scenario::{CheckSelection, JumpLogConfig, ScenarioFile};
use crate::state::JumpLogFile;
use crate::testfns;
use crate::verifier::{
    self, BalanceReport, IdentityCheck, NamedEstimate, ReportMetadata, RunData,
};

/// Command-line overrides applied on top of a scenario file.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub tie_policy: Option<TiePolicy>,
    pub max_events: Option<u64>,
    /// Worker threads for replications (1 = sequential). Results are
    /// independent of this value.
    pub threads: usize,
    /// Keep only checks whose name contains one of these fragments.
    pub check_filter: Option<Vec<String>>,
    /// Write replication 0's jump log here (needs `run.jump_log = full`).
    pub jump_log_out: Option<PathBuf>,
}

impl RunOverrides {
    pub fn threads(mut self, n: usize) -> Self {
        self.threads = n;
        self
    }
}

fn effective_tie_policy(sc: &ScenarioFile, ov: &RunOverrides) -> TiePolicy {
    ov.tie_policy.unwrap_or_else(|| sc.run.tie_policy.into())
}

/// Run every replication of a scenario and grade its selected checks.
pub fn run_scenario(sc: &ScenarioFile, ov: &RunOverrides) -> Result<BalanceReport> {
    sc.validate()?;
    let m = sc.queue_count();
    let horizon = ov.horizon.unwrap_or(sc.run.horizon);
    let seed = ov.seed.unwrap_or(sc.run.seed);
    let replications = ov.replications.unwrap_or(sc.run.replications);
    let grid = sc.build_grid();
    let test_functions = testfns::library(m);

    let cfg = RunConfig {
        horizon,
        max_marks: ov.max_events.or(sc.run.max_events),
        warmup_fraction: sc.run.warmup_fraction,
        blocks: sc.run.blocks,
        tie_policy: effective_tie_policy(sc, ov),
        log_mode: (&sc.run.jump_log).into(),
        grid: grid.clone(),
        test_functions: test_functions.clone(),
    };

    let reps = run_replications(sc, &cfg, seed, replications, ov.threads.max(1))?;

    if let Some(path) = &ov.jump_log_out {
        write_jump_log(sc, &reps[0], path)?;
    }

    let ctx = sc.transform_context()?;
    let run = RunData {
        m,
        grid: grid.clone(),
        test_functions,
        ctx,
        reps,
    };

    let checks = assemble_checks(sc, &run, ov.check_filter.as_deref())?;

    let estimates = assemble_estimates(&run);
    let metadata = assemble_metadata(sc, &run);
    let pass = checks.iter().all(|c| c.pass);

    Ok(BalanceReport {
        schema: verifier::REPORT_SCHEMA.to_string(),
        scenario: sc.id.clone(),
        seed,
        horizon,
        replications,
        warmup_fraction: sc.run.warmup_fraction,
        blocks_per_replication: sc.run.blocks,
        tie_policy: format!("{:?}", cfg.tie_policy).to_lowercase(),
        grid,
        metadata,
        estimates,
        checks,
        pass,
    })
}

/// Replications run on `threads` workers; outputs are collected by index,
/// so the result is identical for every thread count.
fn run_replications(
    sc: &ScenarioFile,
    cfg: &RunConfig,
    seed: u64,
    replications: usize,
    threads: usize,
) -> Result<Vec<RunOutput>> {
    let root = RngStream::root(seed);
    if threads <= 1 || replications == 1 {
        let mut out = Vec::with_capacity(replications);
        for rep in 0..replications {
            out.push(run_one(sc, cfg, &root, rep)?);
        }
        return Ok(out);
    }
    let mut slots: Vec<Option<Result<RunOutput>>> = Vec::new();
    slots.resize_with(replications, || None);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<RunOutput>)>();
        for worker in 0..threads.min(replications) {
            let tx = tx.clone();
            let root = root.clone();
            scope.spawn(move || {
                let mut rep = worker;
                while rep < replications {
                    let result = run_one(sc, cfg, &root, rep);
                    if tx.send((rep, result)).is_err() {
                        return;
                    }
                    rep += threads;
                }
            });
        }
        drop(tx);
        for (rep, result) in rx {
            slots[rep] = Some(result);
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("replication completed"))
        .collect()
}

fn run_one(sc: &ScenarioFile, cfg: &RunConfig, root: &RngStream, rep: usize) -> Result<RunOutput> {
    let mut model = sc.build_model(&root.split(rep as u64))?;
    if rep > 0 {
        if let crate::state::JumpLogMode::Stream(base) = &cfg.log_mode {
            let mut cfg = cfg.clone();
            let path = std::path::PathBuf::from(format!("{}.rep{rep}", base.display()));
            cfg.log_mode = crate::state::JumpLogMode::Stream(path);
            return run_model(&mut model, &cfg);
        }
    }
    run_model(&mut model, cfg)
}

/// Grade the scenario's selected checks. A filter (name fragments) skips
/// non-matching checks before any work happens, so a run whose estimators
/// are unavailable (e.g. event-budget stops) can still grade the pathwise
/// ones.
fn assemble_checks(
    sc: &ScenarioFile,
    run: &RunData,
    filter: Option<&[String]>,
) -> Result<Vec<IdentityCheck>> {
    let wanted = |name: &str| -> bool {
        filter.is_none_or(|f| f.iter().any(|frag| name.contains(frag.as_str())))
    };
    let sel: &CheckSelection = &sc.checks;
    let mut checks = Vec::new();
    if sel.telescoping && wanted("pathwise_telescoping") {
        checks.push(verifier::check_pathwise_telescoping(run));
    }
    if sel.conservation && wanted("conservation") {
        checks.push(verifier::check_conservation(run));
    }
    if sel.replay && wanted("replay_consistency") {
        checks.push(verifier::check_replay_consistency(run)?);
    }
    if sel.stationary_relation && wanted("stationary_relation") {
        checks.push(verifier::check_stationary_relation(run)?);
    }
    if sel.subset_relation && wanted("subset_relation") {
        checks.push(verifier::check_subset_relation(run)?);
    }
    if sel.singleton_reduction && wanted("subset_singleton_reduction") {
        checks.push(verifier::check_subset_singleton_reduction(run)?);
    }
    if sel.pasta && wanted("pasta") {
        checks.push(verifier::check_pasta(run)?);
    }
    if sel.burke && wanted("burke_arrival_departure") {
        checks.push(verifier::check_burke(run)?);
    }
    for kind in &sel.pgf_relations {
        if wanted(kind.name()) {
            checks.push(verifier::check_pgf_relation(run, *kind, &sc.batch_sizes())?);
        }
    }
    if sel.polling_chain && wanted("polling_") {
        let mut chain = verifier::check_polling_chain(run)?;
        if sc.has_k_limited() {
            for c in &mut chain {
                c.note = Some(
                    "k-limited visits tag completion at the epoch the server decides to leave"
                        .to_string(),
                );
            }
        }
        checks.extend(chain);
    }
    if sel.priority_consecutive && wanted("priority_consecutive") {
        checks.push(verifier::check_priority_consecutive(run)?);
    }
    if sel.longer_queue && wanted("longer_queue") {
        let alpha = sc
            .longer_queue_alpha()
            .ok_or_else(|| Error::Config("longer_queue check needs that discipline".to_string()))?;
        checks.push(verifier::check_longer_queue_decomposition(run, alpha)?);
        checks.push(verifier::check_longer_queue_partition(run)?);
    }
    if sel.symmetry && wanted("swap_symmetry") {
        checks.push(verifier::check_swap_symmetry(run)?);
    }
    if sel.cesaro && wanted("cesaro_convergence") {
        checks.push(verifier::check_cesaro_convergence(run)?);
    }
    if sel.traffic && wanted("traffic_equations") {
        checks.push(verifier::check_traffic_equations(&run.ctx)?);
    }
    if let Some(rho) = sel.birth_death_rho {
        if wanted("birth_death_reference") {
            checks.push(verifier::check_birth_death_reference(run, rho)?);
        }
    }
    Ok(checks)
}

/// Pool the per-replication sample histograms into report-level PGF
/// estimates: arrival-epoch, post-departure (total and per queue) and the
/// time-average law.
fn assemble_estimates(run: &RunData) -> Vec<NamedEstimate> {
    let mut out = Vec::new();
    let Some(first) = run.reps.first() else {
        return out;
    };
    if first.samples.is_none() {
        return out;
    }
    // Merge per-rep blocked hists by concatenating block lists.
    let merge = |pick: &dyn Fn(&RunOutput) -> Option<&crate::estimators::BlockedHist>| {
        let mut blocks = Vec::new();
        let mut builder: std::collections::HashMap<Box<[u32]>, u64> = Default::default();
        let mut key_len = 0;
        let mut n = 0;
        for rep in &run.reps {
            if let Some(h) = pick(rep) {
                key_len = h.key_len;
                for b in &h.blocks {
                    blocks.push(b.clone());
                }
                for (k, c) in &h.total.cells {
                    *builder.entry(k.clone()).or_insert(0) += c;
                }
                n += h.total.n;
            }
        }
        let mut cells: Vec<(Box<[u32]>, u64)> = builder.into_iter().collect();
        cells.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        crate::estimators::BlockedHist {
            key_len,
            blocks,
            total: crate::estimators::Hist { cells, n },
        }
    };
    let arrivals = merge(&|r| r.samples.as_ref().map(|s| &s.arrivals));
    if arrivals.total.n > 0 {
        if let Ok(est) = empirical_pgf(&arrivals, run.m, &run.grid) {
            out.push(NamedEstimate {
                name: "arrival_pgf".to_string(),
                estimate: est,
            });
        }
    }
    let departures = merge(&|r| r.samples.as_ref().map(|s| &s.departures));
    if departures.total.n > 0 {
        if let Ok(est) = empirical_pgf(&departures, run.m, &run.grid) {
            out.push(NamedEstimate {
                name: "departure_pgf".to_string(),
                estimate: est,
            });
        }
    }
    // Time-average PGF pooled by total integrals.
    let mut values = vec![0.0; run.grid.len()];
    let mut total_time = 0.0;
    let mut have_tavg = false;
    for rep in &run.reps {
        if let Some(ta) = &rep.tavg {
            have_tavg = true;
            total_time += ta.total_time;
            for (i, v) in ta.total_grid.iter().enumerate() {
                values[i] += v;
            }
        }
    }
    if have_tavg && total_time > 0.0 {
        let est = crate::estimators::PgfEstimate {
            grid: run.grid.clone(),
            values: values.iter().map(|v| v / total_time).collect(),
            stderr: vec![0.0; run.grid.len()],
            n: 0,
        };
        out.push(NamedEstimate {
            name: "time_average_pgf".to_string(),
            estimate: est,
        });
    }
    out
}

fn assemble_metadata(sc: &ScenarioFile, run: &RunData) -> ReportMetadata {
    let mut events = 0;
    let mut marks = 0;
    let mut jitters = 0;
    let mut time = 0.0;
    let mut arr_epochs = 0u64;
    let mut dep_epochs = 0u64;
    let mut per_arr = vec![0u64; run.m];
    let mut per_dep = vec![0u64; run.m];
    for rep in &run.reps {
        events += rep.events_processed;
        marks += rep.marks_emitted;
        jitters += rep.jitter_count;
        time += rep.end_time;
        arr_epochs += rep.ledger.total_arrival_epochs;
        dep_epochs += rep.ledger.total_departure_epochs;
        for q in 0..run.m {
            per_arr[q] += rep.ledger.arrival_epochs[q];
            per_dep[q] += rep.ledger.departure_epochs[q];
        }
        // rate_estimates is the per-replication view of the same numbers;
        // pooling below keeps report determinism independent of rep count.
        let _ = rate_estimates(&rep.ledger, rep.end_time.max(f64::MIN_POSITIVE));
    }
    ReportMetadata {
        events_processed: events,
        marks_emitted: marks,
        jitter_count: jitters,
        arrival_epoch_rate: arr_epochs as f64 / time,
        departure_epoch_rate: dep_epochs as f64 / time,
        per_queue_arrival_rate: per_arr.iter().map(|&c| c as f64 / time).collect(),
        per_queue_departure_rate: per_dep.iter().map(|&c| c as f64 / time).collect(),
        test_function_library: testfns::LIBRARY_VERSION.to_string(),
        station_of: (0..run.m)
            .map(|q| sc.queue_layout().station_of(q))
            .collect(),
    }
}

/// Write the jump log of replication 0 (when retained) next to the report.
pub fn write_jump_log(sc: &ScenarioFile, run0: &RunOutput, path: &Path) -> Result<()> {
    if !matches!(sc.run.jump_log, JumpLogConfig::Full) {
        return Err(Error::Config(
            "jump-log export needs run.jump_log = full".to_string(),
        ));
    }
    let file = JumpLogFile {
        m: run0.x0.len(),
        x0: run0.x0.clone(),
        end_time: run0.end_time,
        log: run0.ledger.jump_log().clone(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_to(&mut w)
}

/// One CSV per identity: label, z coordinates when the point is a grid
/// point, both sides, residual and sigma.
pub fn emit_plotdata(report: &BalanceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let m = report.grid.first().map_or(0, Vec::len);
    let mut written = Vec::new();
    for check in &report.checks {
        let mut text = String::new();
        let z_heads: Vec<String> = (1..=m).map(|i| format!("z{i}")).collect();
        text.push_str(&format!("label,{},lhs,rhs,residual,sigma\n", z_heads.join(",")));
        for p in &check.points {
            let z_cols = parse_z(&p.label, m)
                .map(|z| z.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
                .unwrap_or_else(|| vec![String::new(); m].join(","));
            text.push_str(&format!(
                "\"{}\",{z_cols},{},{},{},{}\n",
                p.label, p.lhs, p.rhs, p.residual, p.sigma
            ));
        }
        let path = dir.join(format!("{}_{}.csv", report.scenario, check.name));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// One CSV per exported estimate: z coordinates, value, stderr, n.
pub fn emit_estimate_tables(report: &BalanceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let m = report.grid.first().map_or(0, Vec::len);
    let mut written = Vec::new();
    for est in &report.estimates {
        let mut text = String::new();
        let z_heads: Vec<String> = (1..=m).map(|i| format!("z{i}")).collect();
        text.push_str(&format!("{},value,stderr,n\n", z_heads.join(",")));
        for (z, (v, se)) in est
            .estimate
            .grid
            .iter()
            .zip(est.estimate.values.iter().zip(&est.estimate.stderr))
        {
            let zs: Vec<String> = z.iter().map(|x| format!("{x}")).collect();
            text.push_str(&format!("{},{v},{se},{}\n", zs.join(","), est.estimate.n));
        }
        let path = dir.join(format!("{}_estimate_{}.csv", report.scenario, est.name));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Extract the z vector from a point label of the form `...z=(a,b,...)`.
fn parse_z(label: &str, m: usize) -> Option<Vec<f64>> {
    let start = label.find("z=(")? + 3;
    let end = label[start..].find(')')? + start;
    let parts: Vec<f64> = label[start..end]
        .split(',')
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    (parts.len() == m).then_some(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::corpus_scenario;

    fn quick(sc_id: &str, horizon: f64) -> BalanceReport {
        let sc = corpus_scenario(sc_id).unwrap();
        let ov = RunOverrides {
            horizon: Some(horizon),
            replications: Some(2),
            threads: 1,
            ..Default::default()
        };
        run_scenario(&sc, &ov).unwrap()
    }

    #[test]
    fn mm1_quick_report_is_deterministic_across_thread_counts() {
        let sc = corpus_scenario("mm1").unwrap();
        let base = RunOverrides {
            horizon: Some(20_000.0),
            replications: Some(3),
            ..Default::default()
        };
        let a = run_scenario(&sc, &base.clone().threads(1)).unwrap();
        let b = run_scenario(&sc, &base.threads(3)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn plotdata_columns_are_consistent() {
        let report = quick("md1", 20_000.0);
        let dir = std::env::temp_dir().join(format!("qbalance-plot-{}", std::process::id()));
        let files = emit_plotdata(&report, &dir).unwrap();
        assert_eq!(files.len(), report.checks.len() + report.estimates.len());
        for f in files
            .iter()
            .filter(|f| !f.to_string_lossy().contains("_estimate_"))
        {
            let text = std::fs::read_to_string(f).unwrap();
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                let n = cols.len();
                let lhs: f64 = cols[n - 4].parse().unwrap();
                let rhs: f64 = cols[n - 3].parse().unwrap();
                let residual: f64 = cols[n - 2].parse().unwrap();
                assert!((residual - (lhs - rhs)).abs() < 1e-12 * (1.0 + residual.abs()));
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_check_list_emits_no_identity_files() {
        let sc_text = r#"
            id = "no-checks"
            [model]
            kind = "facility"
            services = [{ exponential = { rate = 1.0 } }]
            arrivals = { kind = "poisson", rates = [0.5] }
            [run]
            horizon = 2000.0
            seed = 3
        "#;
        let sc = crate::scenario::ScenarioFile::from_toml_str(sc_text).unwrap();
        let report = run_scenario(&sc, &RunOverrides::default()).unwrap();
        assert!(report.pass, "no applicable checks means a passing report");
        let dir = std::env::temp_dir().join(format!("qbalance-empty-{}", std::process::id()));
        let files = emit_plotdata(&report, &dir).unwrap();
        assert!(files.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn check_filter_keeps_named_checks() {
        let sc = corpus_scenario("md1").unwrap();
        let ov = RunOverrides {
            horizon: Some(10_000.0),
            replications: Some(1),
            check_filter: Some(vec!["telescoping".to_string()]),
            threads: 1,
            ..Default::default()
        };
        let report = run_scenario(&sc, &ov).unwrap();
        assert_eq!(report.checks.len(), 1);
        assert_eq!(report.checks[0].name, "pathwise_telescoping");
    }
}
