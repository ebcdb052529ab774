//! Closed-form quantities used by the verifier: transform compositions,
//! traffic solutions and cycle constants.

use crate::dist::{BatchLaw, ServiceDistribution};
use crate::error::{Error, Result};

/// Distance to a removable singularity below which direct evaluation of the
/// assembled polling formula is refused (or replaced by its limit form).
pub const SINGULARITY_GUARD: f64 = 1e-8;

/// Analytic context of a scenario: rates, duration laws, batch law and
/// routing. Derived constants are recomputed on demand, never cached.
#[derive(Clone, Debug, Default)]
pub struct TransformContext {
    /// External customer arrival rate per queue/class.
    pub lambdas: Vec<f64>,
    pub services: Vec<ServiceDistribution>,
    pub switchovers: Option<Vec<ServiceDistribution>>,
    /// Batch-epoch rate and law, for batch Poisson input.
    pub batch: Option<(f64, BatchLaw)>,
    /// Markovian routing rows `p_i1..p_im` (exit is the row deficit).
    pub routing: Option<Vec<Vec<f64>>>,
}

impl TransformContext {
    pub fn queue_count(&self) -> usize {
        self.services.len()
    }

    /// `sigma(z) = sum_j lambda_j (1 - z_j)`, the exponent driving the
    /// number of Poisson arrivals over an interval.
    pub fn sigma(&self, z: &[f64]) -> f64 {
        self.lambdas
            .iter()
            .zip(z)
            .map(|(l, zi)| l * (1.0 - zi))
            .sum()
    }

    /// PGF of the arrivals at all queues during one service at queue `i`.
    pub fn beta(&self, i: usize, z: &[f64]) -> f64 {
        self.services[i].lst(self.sigma(z))
    }

    /// Offered load. Uses solved throughputs when routing feeds customers
    /// back, external rates otherwise.
    pub fn rho(&self) -> Result<f64> {
        let flows = self.traffic()?;
        Ok(flows
            .iter()
            .zip(&self.services)
            .map(|(f, s)| f * s.mean())
            .sum())
    }

    /// Mean cycle time of a cyclic server: total switchover over idle
    /// fraction.
    pub fn mean_cycle(&self) -> Result<f64> {
        let sw = self
            .switchovers
            .as_ref()
            .ok_or_else(|| Error::MissingEstimate("switchover laws".to_string()))?;
        let s: f64 = sw.iter().map(ServiceDistribution::mean).sum();
        let rho = self.rho()?;
        if rho >= 1.0 {
            return Err(Error::Config(format!("unstable: rho = {rho} >= 1")));
        }
        Ok(s / (1.0 - rho))
    }

    /// Reciprocal of the mean number served per visit at queue `i`.
    pub fn gamma(&self, i: usize) -> Result<f64> {
        let flows = self.traffic()?;
        Ok(1.0 / (flows[i] * self.mean_cycle()?))
    }

    /// Routing PGF `P_i(z) = p_i0 + sum_k p_ik z_k`.
    pub fn routing_pgf(&self, i: usize, z: &[f64]) -> Result<f64> {
        let rows = self
            .routing
            .as_ref()
            .ok_or_else(|| Error::MissingEstimate("routing matrix".to_string()))?;
        let row = &rows[i];
        let stay: f64 = row.iter().sum();
        Ok((1.0 - stay) + row.iter().zip(z).map(|(p, zi)| p * zi).sum::<f64>())
    }

    /// Total flow through each queue: the unique solution of the traffic
    /// equations `flow_i = lambda_i + sum_k flow_k p_ki`. Without routing
    /// this is just the external rates.
    pub fn traffic(&self) -> Result<Vec<f64>> {
        let Some(rows) = self.routing.as_ref() else {
            return Ok(self.lambdas.clone());
        };
        let m = self.lambdas.len();
        // Solve (I - P^T) flow = lambda by Gaussian elimination.
        let mut a = vec![vec![0.0; m + 1]; m];
        for i in 0..m {
            for k in 0..m {
                a[i][k] = f64::from(u8::from(i == k)) - rows[k][i];
            }
            a[i][m] = self.lambdas[i];
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::NonConvergent(
                    "traffic matrix is singular (spectral radius >= 1?)".to_string(),
                ));
            }
            a.swap(col, pivot);
            for r in 0..m {
                if r != col {
                    let factor = a[r][col] / a[col][col];
                    for c in col..=m {
                        a[r][c] -= factor * a[col][c];
                    }
                }
            }
        }
        let flows: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
        // Residual check against the original equations.
        for i in 0..m {
            let back: f64 = self.lambdas[i]
                + (0..m).map(|k| flows[k] * rows[k][i]).sum::<f64>();
            if (flows[i] - back).abs() > 1e-10 {
                return Err(Error::NonConvergent(format!(
                    "traffic residual {} at queue {i}",
                    (flows[i] - back).abs()
                )));
            }
            if flows[i] < 0.0 {
                return Err(Error::NonConvergent(format!(
                    "negative flow at queue {i}"
                )));
            }
        }
        Ok(flows)
    }

    /// Validate the routing rows: nonnegative entries, row sums at most 1
    /// within tolerance.
    pub fn validate_routing(&self) -> Result<()> {
        if let Some(rows) = &self.routing {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != self.lambdas.len() {
                    return Err(Error::Config(format!("routing row {i} has wrong length")));
                }
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::Config(format!("routing row {i} out of range")));
                }
                let s: f64 = row.iter().sum();
                if s > 1.0 + 1e-12 {
                    return Err(Error::Config(format!("routing row {i} sums to {s} > 1")));
                }
            }
        }
        Ok(())
    }
}

/// Evaluation of the assembled polling formula at one grid point, from
/// empirical visit-PGF values and closed-form transforms.
///
/// The formula has removable singularities where the aggregate exponent
/// vanishes (all `z_i = 1`) and where `z_i` meets the service transform.
/// The all-ones point returns the exact limit 1. Near the per-queue
/// singularity the offending term is replaced by its equilibrium-identity
/// limit `service_begin_pgf * (1 - transform) / gamma_i`, which needs the
/// empirical service-beginning PGF; without it (or too close to a vanishing
/// exponent) evaluation fails with `SingularPoint`.
pub struct PollingFormulaInputs<'a> {
    pub visit_begin: &'a [f64],
    pub visit_complete: &'a [f64],
    /// Service-beginning PGF values, enabling the limit form near the
    /// per-queue singularity.
    pub service_begin: Option<&'a [f64]>,
}

pub fn polling_time_average_formula(
    ctx: &TransformContext,
    inputs: &PollingFormulaInputs,
    z: &[f64],
) -> Result<f64> {
    let m = ctx.queue_count();
    if z.iter().all(|&zi| zi == 1.0) {
        return Ok(1.0);
    }
    let sig = ctx.sigma(z);
    if sig.abs() < SINGULARITY_GUARD {
        return Err(Error::SingularPoint(format!(
            "sigma(z) = {sig} too close to zero at z = {z:?}"
        )));
    }
    let ec = ctx.mean_cycle()?;
    let mut total = 0.0;
    for i in 0..m {
        let b = ctx.services[i].lst(sig);
        let denom = z[i] - b;
        let service_term = if denom.abs() < SINGULARITY_GUARD {
            match inputs.service_begin {
                Some(sb) => sb[i] * (1.0 - b) / ctx.gamma(i)?,
                None => {
                    return Err(Error::SingularPoint(format!(
                        "z_{} = {} meets the service transform {b}",
                        i + 1,
                        z[i]
                    )))
                }
            }
        } else {
            (inputs.visit_begin[i] - inputs.visit_complete[i]) * z[i] * (1.0 - b) / denom
        };
        let next = (i + 1) % m;
        total += (service_term + inputs.visit_complete[i] - inputs.visit_begin[next]) / sig;
    }
    Ok(total / ec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(rate: f64) -> ServiceDistribution {
        ServiceDistribution::Exponential { rate }
    }

    #[test]
    fn sigma_examples() {
        let ctx = TransformContext {
            lambdas: vec![1.0, 2.0],
            services: vec![exp(1.0), exp(1.0)],
            ..Default::default()
        };
        assert_eq!(ctx.sigma(&[1.0, 1.0]), 0.0);
        assert!((ctx.sigma(&[0.5, 0.5]) - 1.5).abs() < 1e-15);
        let ctx2 = TransformContext {
            lambdas: vec![0.3, 0.4],
            services: vec![exp(1.0), exp(1.0)],
            ..Default::default()
        };
        assert!((ctx2.sigma(&[0.0, 0.0]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn beta_composes_lst_with_sigma() {
        let ctx = TransformContext {
            lambdas: vec![0.3, 0.4],
            services: vec![exp(2.0), ServiceDistribution::Deterministic { value: 0.5 }],
            ..Default::default()
        };
        assert_eq!(ctx.beta(0, &[1.0, 1.0]), 1.0);
        let sig = ctx.sigma(&[0.5, 0.0]);
        assert!((ctx.beta(0, &[0.5, 0.0]) - 2.0 / (2.0 + sig)).abs() < 1e-15);
        assert!((ctx.beta(1, &[0.5, 0.0]) - (-sig * 0.5).exp()).abs() < 1e-15);
    }

    #[test]
    fn traffic_without_feedback_is_lambda() {
        let ctx = TransformContext {
            lambdas: vec![1.0, 2.0],
            services: vec![exp(4.0), exp(4.0)],
            routing: Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            ..Default::default()
        };
        assert_eq!(ctx.traffic().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn traffic_simple_split() {
        // Queue 1 feeds half its output to queue 2.
        let ctx = TransformContext {
            lambdas: vec![1.0, 0.0],
            services: vec![exp(4.0), exp(4.0)],
            routing: Some(vec![vec![0.0, 0.5], vec![0.0, 0.0]]),
            ..Default::default()
        };
        let flows = ctx.traffic().unwrap();
        assert!((flows[0] - 1.0).abs() < 1e-12);
        assert!((flows[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn traffic_tandem_with_feedback() {
        // flow1 = 1 + 0.5 flow2, flow2 = flow1  =>  flow1 = flow2 = 2.
        let ctx = TransformContext {
            lambdas: vec![1.0, 0.0],
            services: vec![exp(8.0), exp(8.0)],
            routing: Some(vec![vec![0.0, 1.0], vec![0.5, 0.0]]),
            ..Default::default()
        };
        let flows = ctx.traffic().unwrap();
        assert!((flows[0] - 2.0).abs() < 1e-12);
        assert!((flows[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn traffic_rejects_conserving_routing() {
        // Every customer loops forever: spectral radius 1.
        let ctx = TransformContext {
            lambdas: vec![1.0, 0.0],
            services: vec![exp(8.0), exp(8.0)],
            routing: Some(vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            ..Default::default()
        };
        assert!(matches!(ctx.traffic(), Err(Error::NonConvergent(_))));
    }

    #[test]
    fn cycle_constants_are_consistent() {
        let ctx = TransformContext {
            lambdas: vec![0.3, 0.4],
            services: vec![exp(1.0), exp(2.0)],
            switchovers: Some(vec![exp(5.0), exp(5.0)]),
            ..Default::default()
        };
        let rho = ctx.rho().unwrap();
        assert!((rho - 0.5).abs() < 1e-12);
        let ec = ctx.mean_cycle().unwrap();
        assert!((ec - 0.4 / 0.5).abs() < 1e-12);
        for i in 0..2 {
            let g = ctx.gamma(i).unwrap();
            assert!((g * ctx.lambdas[i] * ec - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn routing_pgf_normalizes() {
        let ctx = TransformContext {
            lambdas: vec![0.1, 0.1],
            services: vec![exp(1.0), exp(1.0)],
            routing: Some(vec![vec![0.2, 0.3], vec![0.0, 0.0]]),
            ..Default::default()
        };
        assert!((ctx.routing_pgf(0, &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        // p_10 = 0.5, so at z = 0 the PGF equals the exit mass.
        assert!((ctx.routing_pgf(0, &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn polling_formula_limits() {
        let ctx = TransformContext {
            lambdas: vec![0.3, 0.4],
            services: vec![exp(1.0), exp(2.0)],
            switchovers: Some(vec![exp(5.0), exp(5.0)]),
            ..Default::default()
        };
        let inputs = PollingFormulaInputs {
            visit_begin: &[1.0, 1.0],
            visit_complete: &[1.0, 1.0],
            service_begin: None,
        };
        assert_eq!(
            polling_time_average_formula(&ctx, &inputs, &[1.0, 1.0]).unwrap(),
            1.0
        );
        // Just off the all-ones point the exponent is tiny: refuse.
        let near_one = [1.0 - 1e-12, 1.0];
        assert!(matches!(
            polling_time_average_formula(&ctx, &inputs, &near_one),
            Err(Error::SingularPoint(_))
        ));
    }

    #[test]
    fn sigma_linear_and_beta_monotone_on_grid() {
        let ctx = TransformContext {
            lambdas: vec![0.3, 0.4],
            services: vec![exp(1.0), ServiceDistribution::Erlang { shape: 2, rate: 3.0 }],
            ..Default::default()
        };
        let axis = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];
        let mut last_beta = [0.0, 0.0];
        for (step, &a) in axis.iter().enumerate() {
            let z = [a, a];
            // sigma is linear in (1 - z): proportional along the diagonal.
            let expected = 0.7 * (1.0 - a);
            assert!((ctx.sigma(&z) - expected).abs() < 1e-12);
            for i in 0..2 {
                let b = ctx.beta(i, &z);
                if step > 0 {
                    assert!(b >= last_beta[i] - 1e-12, "beta must not decrease in z");
                }
                last_beta[i] = b;
            }
        }
    }
}
