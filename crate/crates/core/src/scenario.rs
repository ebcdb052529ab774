//! Scenario files: schema, validation and the shipped corpus.
//!
//! A scenario is a TOML document naming a model (with its distributions and
//! discipline), run controls and the checks to grade. Unknown keys are
//! rejected so typos fail loudly before any simulation runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::TransformContext;
use crate::dist::{BatchLaw, ServiceDistribution};
use crate::error::{Error, Result};
use crate::kernel::TiePolicy;
use crate::models::{
    ArrivalProcess, Discipline, FacilityModel, PollingDiscipline, PollingModel, RoutingRule,
    ServiceOrder,
};
use crate::rng::RngStream;
use crate::state::JumpLogMode;
use crate::verifier::PgfRelationKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelConfig,
    pub run: RunControls,
    #[serde(default)]
    pub checks: CheckSelection,
    #[serde(default)]
    pub grid: GridConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Single-node multiclass facility with one server.
    Facility {
        services: Vec<ServiceDistribution>,
        arrivals: ArrivalConfig,
        #[serde(default)]
        discipline: DisciplineConfig,
        /// Batch-service sizes per class (default all ones).
        #[serde(default)]
        batch_service: Option<Vec<u32>>,
    },
    /// Cyclic single server over several queues, optional routing.
    Polling {
        arrival_rates: Vec<f64>,
        services: Vec<ServiceDistribution>,
        switchovers: Vec<ServiceDistribution>,
        disciplines: Vec<PollingDisciplineConfig>,
        #[serde(default)]
        order: ServiceOrderConfig,
        #[serde(default)]
        routing: RoutingConfig,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalConfig {
    /// Independent Poisson streams per class.
    Poisson { rates: Vec<f64> },
    /// Independent renewal streams per class.
    Renewal { interarrival: Vec<ServiceDistribution> },
    /// Poisson batch epochs with a finite batch-size law.
    BatchPoisson { rate: f64, batches: Vec<BatchEntry> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEntry {
    pub counts: Vec<u32>,
    pub prob: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisciplineConfig {
    #[default]
    Fcfs,
    Priority,
    LongerQueue {
        alpha1: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PollingDisciplineConfig {
    Exhaustive,
    Gated,
    KLimited { k: u32 },
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceOrderConfig {
    #[default]
    Fcfs,
    Lcfs,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoutingConfig {
    #[default]
    None,
    /// Rows `p_i1..p_im`; exit probability is the row deficit.
    Markovian { matrix: Vec<Vec<f64>> },
    /// Exit with `exit_prob`, else join the shortest queue.
    JoinShorter { exit_prob: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunControls {
    pub horizon: f64,
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub tie_policy: TiePolicyConfig,
    #[serde(default)]
    pub jump_log: JumpLogConfig,
    #[serde(default)]
    pub max_events: Option<u64>,
}

fn default_replications() -> usize {
    1
}
fn default_warmup() -> f64 {
    0.1
}
fn default_blocks() -> usize {
    crate::estimators::DEFAULT_BLOCKS
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicyConfig {
    #[default]
    Reject,
    Jitter,
}

impl From<TiePolicyConfig> for TiePolicy {
    fn from(c: TiePolicyConfig) -> Self {
        match c {
            TiePolicyConfig::Reject => TiePolicy::Reject,
            TiePolicyConfig::Jitter => TiePolicy::Jitter,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpLogConfig {
    #[default]
    Off,
    Full,
    Ring {
        capacity: usize,
    },
    /// Stream records to this file as the run progresses (replication 0
    /// uses the path as-is, replication r > 0 appends `.rep<r>`).
    Stream {
        path: String,
    },
}

impl From<&JumpLogConfig> for JumpLogMode {
    fn from(c: &JumpLogConfig) -> Self {
        match c {
            JumpLogConfig::Off => JumpLogMode::Off,
            JumpLogConfig::Full => JumpLogMode::Full,
            JumpLogConfig::Ring { capacity } => JumpLogMode::Ring(*capacity),
            JumpLogConfig::Stream { path } => JumpLogMode::Stream(path.into()),
        }
    }
}

/// Which checks a scenario grades. Everything defaults off; scenarios name
/// what applies to them.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSelection {
    pub telescoping: bool,
    pub conservation: bool,
    pub replay: bool,
    pub stationary_relation: bool,
    pub subset_relation: bool,
    pub singleton_reduction: bool,
    pub pasta: bool,
    pub burke: bool,
    pub pgf_relations: Vec<PgfRelationKind>,
    pub polling_chain: bool,
    pub priority_consecutive: bool,
    pub longer_queue: bool,
    pub symmetry: bool,
    pub cesaro: bool,
    pub traffic: bool,
    /// Compare marginal PGFs against `(1-rho)/(1-rho z)`.
    pub birth_death_rho: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_axis")]
    pub axis: Vec<f64>,
    /// Tensor grids larger than this are subsampled with a fixed seed.
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_axis() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 0.9, 1.0]
}
fn default_cap() -> usize {
    500
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            axis: default_axis(),
            cap: default_cap(),
        }
    }
}

impl ScenarioFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let sc: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn queue_count(&self) -> usize {
        match &self.model {
            ModelConfig::Facility { services, .. } => services.len(),
            ModelConfig::Polling { services, .. } => services.len(),
        }
    }

    /// Queue-to-station mapping of the configured model.
    pub fn queue_layout(&self) -> crate::state::QueueLayout {
        match &self.model {
            ModelConfig::Facility { .. } => {
                crate::state::QueueLayout::single_station(self.queue_count())
            }
            ModelConfig::Polling { .. } => {
                crate::state::QueueLayout::one_station_each(self.queue_count())
            }
        }
    }

    /// True when any polling queue runs a k-limited visit discipline.
    pub fn has_k_limited(&self) -> bool {
        matches!(&self.model, ModelConfig::Polling { disciplines, .. }
            if disciplines.iter().any(|d| matches!(d, PollingDisciplineConfig::KLimited { .. })))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.queue_count();
        if m == 0 {
            return Err(Error::Config("model has no queues".to_string()));
        }
        if !(self.run.horizon.is_finite() && self.run.horizon > 0.0) {
            return Err(Error::Config("run.horizon must be positive and finite".to_string()));
        }
        if !(0.0..1.0).contains(&self.run.warmup_fraction) {
            return Err(Error::Config("run.warmup_fraction must be in [0,1)".to_string()));
        }
        if self.run.blocks < 4 {
            return Err(Error::Config("run.blocks must be at least 4".to_string()));
        }
        if self.run.replications == 0 {
            return Err(Error::Config("run.replications must be at least 1".to_string()));
        }
        if self.grid.axis.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Config("grid.axis values must lie in [0,1]".to_string()));
        }
        match &self.model {
            ModelConfig::Facility {
                services,
                arrivals,
                discipline,
                batch_service,
            } => {
                for s in services {
                    s.validate()?;
                    if s.mean() <= 0.0 {
                        return Err(Error::Config("service mean must be positive".to_string()));
                    }
                }
                match arrivals {
                    ArrivalConfig::Poisson { rates } => {
                        if rates.len() != m {
                            return Err(Error::Config("arrivals.rates length mismatch".to_string()));
                        }
                        if rates.iter().any(|&r| r < 0.0 || !r.is_finite()) {
                            return Err(Error::Config("arrival rates must be >= 0".to_string()));
                        }
                    }
                    ArrivalConfig::Renewal { interarrival } => {
                        if interarrival.len() != m {
                            return Err(Error::Config(
                                "arrivals.interarrival length mismatch".to_string(),
                            ));
                        }
                        for d in interarrival {
                            d.validate()?;
                            if d.mean() <= 0.0 {
                                return Err(Error::Config(
                                    "interarrival mean must be positive".to_string(),
                                ));
                            }
                        }
                    }
                    ArrivalConfig::BatchPoisson { rate, batches } => {
                        if *rate <= 0.0 {
                            return Err(Error::Config("batch rate must be positive".to_string()));
                        }
                        self.batch_law_from(batches)?.validate(m)?;
                    }
                }
                if let DisciplineConfig::LongerQueue { alpha1 } = discipline {
                    if m != 2 {
                        return Err(Error::Config(
                            "longer_queue discipline needs exactly 2 queues".to_string(),
                        ));
                    }
                    if !(0.0..=1.0).contains(alpha1) {
                        return Err(Error::Config("alpha1 must be in [0,1]".to_string()));
                    }
                }
                if let Some(ks) = batch_service {
                    if ks.len() != m || ks.contains(&0) {
                        return Err(Error::Config(
                            "batch_service needs one k >= 1 per class".to_string(),
                        ));
                    }
                }
                let rho = self.offered_load()?;
                if rho >= 1.0 {
                    return Err(Error::Config(format!("unstable facility: rho = {rho}")));
                }
            }
            ModelConfig::Polling {
                arrival_rates,
                services,
                switchovers,
                disciplines,
                routing,
                ..
            } => {
                if arrival_rates.len() != m
                    || switchovers.len() != m
                    || disciplines.len() != m
                {
                    return Err(Error::Config("polling vectors must share one length".to_string()));
                }
                for s in services.iter().chain(switchovers) {
                    s.validate()?;
                }
                if services.iter().any(|s| s.mean() <= 0.0) {
                    return Err(Error::Config("service mean must be positive".to_string()));
                }
                if arrival_rates.iter().any(|&r| r < 0.0 || !r.is_finite()) {
                    return Err(Error::Config("arrival rates must be >= 0".to_string()));
                }
                for d in disciplines {
                    if let PollingDisciplineConfig::KLimited { k } = d {
                        if *k == 0 {
                            return Err(Error::Config("k_limited needs k >= 1".to_string()));
                        }
                    }
                }
                match routing {
                    RoutingConfig::Markovian { .. } => {
                        let ctx = self.transform_context()?;
                        ctx.validate_routing()?;
                        let rho = ctx.rho()?;
                        if rho >= 1.0 {
                            return Err(Error::Config(format!("unstable network: rho = {rho}")));
                        }
                    }
                    RoutingConfig::JoinShorter { exit_prob } => {
                        if !(*exit_prob > 0.0 && *exit_prob <= 1.0) {
                            return Err(Error::Config("exit_prob must be in (0,1]".to_string()));
                        }
                        // Every customer needs 1/exit_prob passes on average.
                        let demand: f64 = arrival_rates.iter().sum::<f64>() / exit_prob
                            * services
                                .iter()
                                .map(ServiceDistribution::mean)
                                .fold(0.0, f64::max);
                        if demand >= 1.0 {
                            return Err(Error::Config(format!(
                                "join-shorter load bound {demand} >= 1"
                            )));
                        }
                    }
                    RoutingConfig::None => {
                        let rho = self.offered_load()?;
                        if rho >= 1.0 {
                            return Err(Error::Config(format!("unstable polling: rho = {rho}")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn batch_law_from(&self, batches: &[BatchEntry]) -> Result<BatchLaw> {
        Ok(BatchLaw {
            support: batches
                .iter()
                .map(|b| (b.counts.clone(), b.prob))
                .collect(),
        })
    }

    /// Per-class external customer arrival rates.
    pub fn customer_rates(&self) -> Vec<f64> {
        match &self.model {
            ModelConfig::Facility { arrivals, .. } => match arrivals {
                ArrivalConfig::Poisson { rates } => rates.clone(),
                ArrivalConfig::Renewal { interarrival } => {
                    interarrival.iter().map(|d| 1.0 / d.mean()).collect()
                }
                ArrivalConfig::BatchPoisson { rate, batches } => {
                    let law = BatchLaw {
                        support: batches
                            .iter()
                            .map(|b| (b.counts.clone(), b.prob))
                            .collect(),
                    };
                    (0..self.queue_count())
                        .map(|i| rate * law.marginal_mean(i))
                        .collect()
                }
            },
            ModelConfig::Polling { arrival_rates, .. } => arrival_rates.clone(),
        }
    }

    /// Offered load, accounting for batch services splitting work.
    pub fn offered_load(&self) -> Result<f64> {
        match &self.model {
            ModelConfig::Facility {
                services,
                batch_service,
                ..
            } => {
                let rates = self.customer_rates();
                let ones = vec![1u32; services.len()];
                let ks = batch_service.as_ref().unwrap_or(&ones);
                Ok(rates
                    .iter()
                    .zip(services)
                    .zip(ks)
                    .map(|((r, s), &k)| r * s.mean() / f64::from(k))
                    .sum())
            }
            ModelConfig::Polling { .. } => self.transform_context()?.rho(),
        }
    }

    /// Closed-form context handed to the verifier.
    pub fn transform_context(&self) -> Result<TransformContext> {
        let mut ctx = TransformContext {
            lambdas: self.customer_rates(),
            ..Default::default()
        };
        match &self.model {
            ModelConfig::Facility {
                services, arrivals, ..
            } => {
                ctx.services = services.clone();
                if let ArrivalConfig::BatchPoisson { rate, batches } = arrivals {
                    ctx.batch = Some((*rate, self.batch_law_from(batches)?));
                }
            }
            ModelConfig::Polling {
                services,
                switchovers,
                routing,
                ..
            } => {
                ctx.services = services.clone();
                ctx.switchovers = Some(switchovers.clone());
                if let RoutingConfig::Markovian { matrix } = routing {
                    ctx.routing = Some(matrix.clone());
                }
            }
        }
        Ok(ctx)
    }

    /// Longer-queue tie probability, when that discipline is configured.
    pub fn longer_queue_alpha(&self) -> Option<f64> {
        match &self.model {
            ModelConfig::Facility {
                discipline: DisciplineConfig::LongerQueue { alpha1 },
                ..
            } => Some(*alpha1),
            _ => None,
        }
    }

    /// Batch-service sizes (ones when not configured).
    pub fn batch_sizes(&self) -> Vec<u32> {
        match &self.model {
            ModelConfig::Facility {
                batch_service: Some(ks),
                ..
            } => ks.clone(),
            _ => vec![1; self.queue_count()],
        }
    }

    /// The evaluation grid: tensor power of the axis, subsampled with a
    /// fixed seed when it exceeds the cap.
    pub fn build_grid(&self) -> Vec<Vec<f64>> {
        let m = self.queue_count();
        let axis = &self.grid.axis;
        let total = axis.len().pow(m as u32);
        let expand = |mut idx: usize| -> Vec<f64> {
            let mut z = Vec::with_capacity(m);
            for _ in 0..m {
                z.push(axis[idx % axis.len()]);
                idx /= axis.len();
            }
            z
        };
        if total <= self.grid.cap {
            (0..total).map(expand).collect()
        } else {
            // Fixed-seed reservoir pick, independent of the scenario seed.
            let mut picker = RngStream::root(0x9D1D_5EED);
            let mut chosen: Vec<usize> = (0..self.grid.cap).collect();
            for i in self.grid.cap..total {
                let j = (picker.next_f64() * (i + 1) as f64) as usize;
                if j < self.grid.cap {
                    chosen[j] = i;
                }
            }
            chosen.sort_unstable();
            // Always keep the all-ones point (the last tensor index).
            if *chosen.last().unwrap() != total - 1 {
                *chosen.last_mut().unwrap() = total - 1;
            }
            chosen.into_iter().map(expand).collect()
        }
    }

    /// Instantiate the model for one replication.
    pub fn build_model(&self, rep_root: &RngStream) -> Result<ModelInstance> {
        match &self.model {
            ModelConfig::Facility {
                services,
                arrivals,
                discipline,
                batch_service,
            } => {
                let m = services.len();
                let arrivals = match arrivals {
                    ArrivalConfig::Poisson { rates } => ArrivalProcess::PerClassRenewal(
                        rates
                            .iter()
                            .map(|&rate| ServiceDistribution::Exponential { rate })
                            .collect(),
                    ),
                    ArrivalConfig::Renewal { interarrival } => {
                        ArrivalProcess::PerClassRenewal(interarrival.clone())
                    }
                    ArrivalConfig::BatchPoisson { rate, batches } => ArrivalProcess::BatchPoisson {
                        rate: *rate,
                        law: self.batch_law_from(batches)?,
                    },
                };
                let discipline = match discipline {
                    DisciplineConfig::Fcfs => Discipline::Fcfs,
                    DisciplineConfig::Priority => Discipline::Priority,
                    DisciplineConfig::LongerQueue { alpha1 } => Discipline::LongerQueue {
                        alpha1: *alpha1,
                    },
                };
                let ks = batch_service.clone().unwrap_or_else(|| vec![1; m]);
                Ok(ModelInstance::Facility(FacilityModel::new(
                    services.clone(),
                    arrivals,
                    discipline,
                    ks,
                    rep_root,
                )))
            }
            ModelConfig::Polling {
                arrival_rates,
                services,
                switchovers,
                disciplines,
                order,
                routing,
            } => {
                let interarrival = arrival_rates
                    .iter()
                    .map(|&rate| ServiceDistribution::Exponential { rate })
                    .collect();
                let disciplines = disciplines
                    .iter()
                    .map(|d| match d {
                        PollingDisciplineConfig::Exhaustive => PollingDiscipline::Exhaustive,
                        PollingDisciplineConfig::Gated => PollingDiscipline::Gated,
                        PollingDisciplineConfig::KLimited { k } => PollingDiscipline::KLimited(*k),
                    })
                    .collect();
                let order = match order {
                    ServiceOrderConfig::Fcfs => ServiceOrder::Fcfs,
                    ServiceOrderConfig::Lcfs => ServiceOrder::Lcfs,
                };
                let routing = match routing {
                    RoutingConfig::None => RoutingRule::None,
                    RoutingConfig::Markovian { matrix } => RoutingRule::Markovian(matrix.clone()),
                    RoutingConfig::JoinShorter { exit_prob } => RoutingRule::JoinShorter {
                        exit_prob: *exit_prob,
                    },
                };
                Ok(ModelInstance::Polling(PollingModel::new(
                    interarrival,
                    services.clone(),
                    switchovers.clone(),
                    disciplines,
                    order,
                    routing,
                    rep_root,
                )))
            }
        }
    }
}

/// A constructed model behind one dispatch point.
pub enum ModelInstance {
    Facility(FacilityModel),
    Polling(PollingModel),
}

impl crate::kernel::Model for ModelInstance {
    fn queue_count(&self) -> usize {
        match self {
            Self::Facility(f) => f.queue_count(),
            Self::Polling(p) => p.queue_count(),
        }
    }

    fn queue_layout(&self) -> crate::state::QueueLayout {
        match self {
            Self::Facility(f) => f.queue_layout(),
            Self::Polling(p) => p.queue_layout(),
        }
    }

    fn init(&mut self, ctx: &mut crate::kernel::Ctx) {
        match self {
            Self::Facility(f) => f.init(ctx),
            Self::Polling(p) => p.init(ctx),
        }
    }

    fn handle(&mut self, event: crate::kernel::Event, ctx: &mut crate::kernel::Ctx) {
        match self {
            Self::Facility(f) => f.handle(event, ctx),
            Self::Polling(p) => p.handle(event, ctx),
        }
    }
}

/// The shipped regression corpus, embedded so `list-scenarios` and the
/// acceptance suite work from any directory.
pub const CORPUS: &[(&str, &str)] = &[
    ("mm1", include_str!("../scenarios/mm1.toml")),
    ("md1", include_str!("../scenarios/md1.toml")),
    ("dd1-ties", include_str!("../scenarios/dd1-ties.toml")),
    (
        "polling2-exhaustive",
        include_str!("../scenarios/polling2-exhaustive.toml"),
    ),
    (
        "polling2-gated",
        include_str!("../scenarios/polling2-gated.toml"),
    ),
    (
        "polling2-exhaustive-lcfs",
        include_str!("../scenarios/polling2-exhaustive-lcfs.toml"),
    ),
    (
        "batch-arrival2",
        include_str!("../scenarios/batch-arrival2.toml"),
    ),
    (
        "batch-service-k2",
        include_str!("../scenarios/batch-service-k2.toml"),
    ),
    ("priority2", include_str!("../scenarios/priority2.toml")),
    (
        "longer-queue-sym",
        include_str!("../scenarios/longer-queue-sym.toml"),
    ),
    (
        "longer-queue-asym",
        include_str!("../scenarios/longer-queue-asym.toml"),
    ),
    ("roving3", include_str!("../scenarios/roving3.toml")),
    (
        "shorter-queue-routing",
        include_str!("../scenarios/shorter-queue-routing.toml"),
    ),
];

/// Parse one corpus scenario by id.
pub fn corpus_scenario(id: &str) -> Result<ScenarioFile> {
    for (name, text) in CORPUS {
        if *name == id {
            return ScenarioFile::from_toml_str(text);
        }
    }
    Err(Error::Config(format!("unknown scenario id {id:?}")))
}

/// Resolve a CLI argument: a corpus id or a path to a TOML file.
pub fn resolve_scenario(arg: &str) -> Result<ScenarioFile> {
    if CORPUS.iter().any(|(name, _)| *name == arg) {
        return corpus_scenario(arg);
    }
    let path = Path::new(arg);
    if path.exists() {
        return ScenarioFile::from_path(path);
    }
    Err(Error::Config(format!(
        "{arg:?} is neither a corpus scenario id nor an existing file"
    )))
}
