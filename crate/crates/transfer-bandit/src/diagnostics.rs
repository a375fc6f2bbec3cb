//! Theory-side quantities computed over completed runs: regret accounting,
//! layerwise log-det potentials, routed path sums, alignment constants, the
//! waterfilling envelope, the pooled-better regime test, epoch penalties, and
//! the diagonal-specialization oracle.
//!
//! Everything here is a pure function over a [`RegretTrace`], so traces can be
//! evaluated concurrently.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::offline::{beta_off, BiasCertificate, EpochCertificate, OfflineRidge};
use crate::policy::{DeltaSchedule, LayerState, PolicyMode};
use crate::spd;

/// One simulated round as recorded by the runner.
#[derive(Debug, Clone)]
pub struct RoundRow {
    pub t: usize,
    pub arm: usize,
    pub stop_layer: usize,
    pub regret_inc: f64,
    pub cum_regret: f64,
    pub w_on: f64,
    /// Infinite when the policy has no pooled branch.
    pub w_pool: f64,
    pub w_agg: f64,
    /// Routed bias-map value at the played arm (0 without a pooled branch).
    pub psi: f64,
    /// Certificate radius in force this round (0 without a pooled branch).
    pub rho_routed: f64,
    /// `||x_t||^2` in the pooled geometry `(A_{t,l} + G_off)^{-1}` of the
    /// stopping layer, evaluated before the round's update.
    pub pooled_inv_norm_sq: f64,
    /// Whether the pooled UCB was strictly tighter at the played arm.
    pub branch_pool: bool,
}

/// Final state of one layer's played history.
#[derive(Debug, Clone)]
pub struct LayerFinal {
    /// Raw Gram `A_l^fin = sum_{t in Q_l} x_t x_t^T`, row-major.
    pub gram: Vec<f64>,
    pub count: usize,
}

/// Per-run record of everything the diagnostics need.
#[derive(Debug, Clone)]
pub struct RegretTrace {
    pub mode: PolicyMode,
    pub t_horizon: usize,
    pub dim: usize,
    pub k_arms: usize,
    pub sigma: f64,
    pub s_bound: f64,
    pub deltas: DeltaSchedule,
    /// Epoch boundaries (empty unless the run used the epoch policy).
    pub epoch_schedule: Vec<usize>,
    pub rows: Vec<RoundRow>,
    pub layers: Vec<LayerFinal>,
}

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        self.rows.last().map(|r| r.cum_regret).unwrap_or(0.0)
    }

    /// Epoch index (1-based) in force at round `t`.
    pub fn epoch_of_round(&self, t: usize) -> usize {
        let mut k = 0;
        for (i, &tau) in self.epoch_schedule.iter().enumerate() {
            if t >= tau {
                k = i + 1;
            }
        }
        k
    }
}

/// Layerwise pooled log-det increments
/// `Lambda_l = log det(A_l^fin + G_off) - log det(G_off)` and their total.
pub fn lambda_ell(trace: &RegretTrace, ridge: &OfflineRidge) -> Result<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            if layer.count == 0 {
                return Ok(0.0);
            }
            let pooled = ridge.g_off.add_sym(&layer.gram)?;
            Ok(pooled.log_det() - ridge.g_off.log_det())
        })
        .collect()
}

/// `Lambda_total = sum_l Lambda_l`.
pub fn lambda_total(trace: &RegretTrace, ridge: &OfflineRidge) -> Result<f64> {
    Ok(lambda_ell(trace, ridge)?.iter().sum())
}

/// The routed path sum: `sum_t psi_t` for a fixed certificate, or
/// `sum_t rho_hat_{k(t)} psi_hat_t` in epoch mode.
pub fn psi_path_sum(trace: &RegretTrace) -> f64 {
    match trace.mode {
        PolicyMode::EpochCertificate => trace.rows.iter().map(|r| r.rho_routed * r.psi).sum(),
        _ => trace.rows.iter().map(|r| r.psi).sum(),
    }
}

/// Report of the pooled-better regime test, echoing every intermediate scalar
/// for audit.
#[derive(Debug, Clone, Serialize)]
pub struct PooledBetterReport {
    pub lambda_total: f64,
    pub lambda_max: f64,
    pub beta_off: f64,
    pub gamma_pool: f64,
    pub c_align: f64,
    pub rho: f64,
    pub l_t: f64,
    pub c_sl: f64,
    pub delta_min_pool: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub verdict: bool,
}

/// `L_T = log(2 K T log T / delta_on)`. The inner `log T` is floored at
/// `log 2` so the diagnostic stays defined at `T = 1`.
fn l_t_constant(k_arms: usize, t_horizon: usize, delta_on: f64) -> f64 {
    let log_t = (t_horizon as f64).ln().max(2.0_f64.ln());
    (2.0 * k_arms as f64 * t_horizon as f64 * log_t / delta_on).ln()
}

/// Evaluates the explicit pooled-better inequality
/// `Lambda_total (Gamma_pool + rho sqrt(c_align))^2 <= C_SL^2 / 128 * d * L_T^3`.
pub fn pooled_better_test(
    trace: &RegretTrace,
    ridge: &OfflineRidge,
    cert: &BiasCertificate,
    c_sl: f64,
) -> Result<PooledBetterReport> {
    let lambdas = lambda_ell(trace, ridge)?;
    let lambda_total: f64 = lambdas.iter().sum();
    let lambda_max = lambdas.iter().copied().fold(0.0_f64, f64::max);
    let beta = beta_off(ridge, trace.deltas.delta_off, trace.sigma, trace.s_bound)?;
    let delta_min_pool = trace.deltas.pool_tl();
    let gamma_pool = beta + trace.sigma * (lambda_max + 2.0 * (1.0 / delta_min_pool).ln()).sqrt();
    let c_align = spd::gen_eig_max(&ridge.g_off, &cert.m_bias)?;
    let l_t = l_t_constant(trace.k_arms, trace.t_horizon, trace.deltas.delta_on_total);
    let lhs = lambda_total * (gamma_pool + cert.rho * c_align.sqrt()).powi(2);
    let rhs = c_sl * c_sl / 128.0 * trace.dim as f64 * l_t.powi(3);
    Ok(PooledBetterReport {
        lambda_total,
        lambda_max,
        beta_off: beta,
        gamma_pool,
        c_align,
        rho: cert.rho,
        l_t,
        c_sl,
        delta_min_pool,
        lhs,
        rhs,
        verdict: lhs <= rhs,
    })
}

/// Both sides of the spectral envelope
/// `Lambda_total <= L_max * Phi_{G_off}(T / L_max)`.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeReport {
    pub lhs: f64,
    pub rhs: f64,
    pub l_max: usize,
}

/// Asserts the envelope with absolute slack `1e-6`; a violation is an error
/// because it falsifies the deterministic theory chain.
pub fn spectral_envelope_check(
    trace: &RegretTrace,
    ridge: &OfflineRidge,
) -> Result<EnvelopeReport> {
    let l_max = crate::policy::top_layer(trace.t_horizon) + 1;
    let lhs = lambda_total(trace, ridge)?;
    let rhs =
        l_max as f64 * spd::waterfill_phi(&ridge.g_off, trace.t_horizon as f64 / l_max as f64)?;
    if lhs > rhs + 1e-6 {
        return Err(Error::InvariantViolation(format!(
            "spectral envelope failed: {lhs} > {rhs}"
        )));
    }
    Ok(EnvelopeReport { lhs, rhs, l_max })
}

/// Epoch adaptivity penalty report.
#[derive(Debug, Clone, Serialize)]
pub struct EpochPenaltyReport {
    /// `c_hat_k = lambda_max(G_off^{1/2} M_hat_k^{-1} G_off^{1/2})` per epoch.
    pub c_hat: Vec<f64>,
    /// `S_ep = sum_k (tau_{k+1} - tau_k) rho_hat_k^2 c_hat_k`.
    pub s_ep: f64,
    pub psi_sum_ep: f64,
    pub cauchy_schwarz_bound: f64,
}

/// Computes the doubling-epoch penalty and checks the path-sum chain
/// `Psi_ep <= sqrt(2 Lambda_total S_ep)`.
pub fn epoch_penalty(
    trace: &RegretTrace,
    ridge: &OfflineRidge,
    certs: &[EpochCertificate],
) -> Result<EpochPenaltyReport> {
    if trace.epoch_schedule.len() != certs.len() {
        return Err(Error::Input(format!(
            "{} epoch boundaries but {} certificates",
            trace.epoch_schedule.len(),
            certs.len()
        )));
    }
    let mut c_hat = Vec::with_capacity(certs.len());
    let mut s_ep = 0.0;
    for (i, cert) in certs.iter().enumerate() {
        let tau_k = trace.epoch_schedule[i];
        let tau_next = trace
            .epoch_schedule
            .get(i + 1)
            .copied()
            .unwrap_or(trace.t_horizon + 1);
        let ck = spd::gen_eig_max(&ridge.g_off, &cert.m_hat)?;
        s_ep += (tau_next - tau_k) as f64 * cert.rho_hat * cert.rho_hat * ck;
        c_hat.push(ck);
    }
    let psi_sum_ep = psi_path_sum(trace);
    let bound = (2.0 * lambda_total(trace, ridge)? * s_ep).sqrt();
    if psi_sum_ep > bound + 1e-6 {
        return Err(Error::InvariantViolation(format!(
            "epoch path sum {psi_sum_ep} exceeds Cauchy-Schwarz bound {bound}"
        )));
    }
    Ok(EpochPenaltyReport {
        c_hat,
        s_ep,
        psi_sum_ep,
        cauchy_schwarz_bound: bound,
    })
}

/// Arm-wise closed form of the pooled UCB on the diagonal class:
/// `mu_pool(a) + (gamma + beta_off) / sqrt(N_a + n_a) + n_a / (N_a + n_a) v_a`
/// with pseudo-counts `n_a = G_off[a][a]` and budget `v_a = rho / sqrt(M[a][a])`.
///
/// Used only as an oracle against the matrix-path pooled scores; requires the
/// layer Gram, `G_off`, and `M_bias` to be simultaneously diagonal.
pub fn diagonal_oracle(
    layer: &LayerState,
    ridge: &OfflineRidge,
    cert: &BiasCertificate,
    arm: usize,
    gamma_plus_beta: f64,
) -> Result<f64> {
    let d = ridge.g_off.dim();
    if arm >= d {
        return Err(Error::Input("arm index out of range".into()));
    }
    let off_diag_ok = |get: &dyn Fn(usize, usize) -> f64| -> bool {
        for i in 0..d {
            for j in 0..d {
                if i != j && get(i, j).abs() > 1e-12 {
                    return false;
                }
            }
        }
        true
    };
    if !off_diag_ok(&|i, j| layer.gram()[i * d + j])
        || !off_diag_ok(&|i, j| ridge.g_off.entry(i, j))
        || !off_diag_ok(&|i, j| cert.m_bias.entry(i, j))
    {
        return Err(Error::Input(
            "diagonal oracle requires diagonal layer Gram, G_off, and M_bias".into(),
        ));
    }
    let n_a = ridge.g_off.entry(arm, arm);
    let count_a = layer.gram()[arm * d + arm];
    let total = count_a + n_a;
    let mu_pool = (layer.response()[arm] + n_a * ridge.theta_hat_off.as_slice()[arm]) / total;
    let v_a = cert.rho / cert.m_bias.entry(arm, arm).sqrt();
    Ok(mu_pool + gamma_plus_beta / total.sqrt() + n_a / total * v_a)
}

/// The per-run diagnostics object emitted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub lambda_per_layer: Vec<f64>,
    pub lambda_total: f64,
    pub psi_sum: f64,
    pub c_align: Option<f64>,
    pub gamma_pool: f64,
    pub pooled_better_verdict: Option<bool>,
    pub envelope_lhs: f64,
    pub envelope_rhs: f64,
    pub s_ep: Option<f64>,
}

/// Assembles the per-run report. `cert` drives the alignment and
/// pooled-better fields; `epoch_certs` drives the epoch penalty.
pub fn build_report(
    trace: &RegretTrace,
    ridge: &OfflineRidge,
    cert: Option<&BiasCertificate>,
    epoch_certs: &[EpochCertificate],
    c_sl: f64,
) -> Result<DiagnosticsReport> {
    let lambda_per_layer = lambda_ell(trace, ridge)?;
    let lambda_total: f64 = lambda_per_layer.iter().sum();
    let envelope = spectral_envelope_check(trace, ridge)?;
    let beta = beta_off(ridge, trace.deltas.delta_off, trace.sigma, trace.s_bound)?;
    let lambda_max = lambda_per_layer.iter().copied().fold(0.0_f64, f64::max);
    let gamma_pool =
        beta + trace.sigma * (lambda_max + 2.0 * (1.0 / trace.deltas.pool_tl()).ln()).sqrt();
    let (c_align, pooled_better_verdict) = match cert {
        Some(cert) => {
            let report = pooled_better_test(trace, ridge, cert, c_sl)?;
            (Some(report.c_align), Some(report.verdict))
        }
        None => (None, None),
    };
    let s_ep = if trace.mode == PolicyMode::EpochCertificate && !epoch_certs.is_empty() {
        Some(epoch_penalty(trace, ridge, epoch_certs)?.s_ep)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        lambda_per_layer,
        lambda_total,
        psi_sum: psi_path_sum(trace),
        c_align,
        gamma_pool,
        pooled_better_verdict,
        envelope_lhs: envelope.lhs,
        envelope_rhs: envelope.rhs,
        s_ep,
    })
}

/// Trajectory assertions every completed run must satisfy: exact history
/// routing, regret accounting, the width comparison, the layerwise pooled
/// elliptical potential, the spectral envelope, and the alignment bound on
/// the routed bias map.
pub fn verify_trajectory(
    trace: &RegretTrace,
    ridge: &OfflineRidge,
    cert: Option<&BiasCertificate>,
    epoch_certs: &[EpochCertificate],
) -> Result<()> {
    // History routing: every round lands in exactly one layer.
    let total: usize = trace.layers.iter().map(|l| l.count).sum();
    if total != trace.rows.len() || trace.rows.len() != trace.t_horizon {
        return Err(Error::InvariantViolation(format!(
            "layer counts sum to {total}, trace has {} rows, horizon {}",
            trace.rows.len(),
            trace.t_horizon
        )));
    }
    // Regret accounting, re-summed in row order.
    let mut cum = 0.0;
    for row in &trace.rows {
        if row.regret_inc < -1e-9 {
            return Err(Error::InvariantViolation(format!(
                "negative instantaneous regret {} at t={}",
                row.regret_inc, row.t
            )));
        }
        cum += row.regret_inc;
        if (cum - row.cum_regret).abs() > 1e-9 * cum.abs().max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "cumulative regret drifted at t={}",
                row.t
            )));
        }
        // Width comparison at the played arm.
        if row.w_agg > row.w_on.min(row.w_pool) + 1e-12 {
            return Err(Error::InvariantViolation(format!(
                "aggregated width exceeds branch widths at t={}",
                row.t
            )));
        }
    }
    // Layerwise pooled elliptical potential.
    let lambdas = lambda_ell(trace, ridge)?;
    let mut per_layer_sq = vec![0.0; trace.layers.len()];
    for row in &trace.rows {
        per_layer_sq[row.stop_layer] += row.pooled_inv_norm_sq;
    }
    for (ell, (&sum_sq, &lambda)) in per_layer_sq.iter().zip(&lambdas).enumerate() {
        if sum_sq > 2.0 * lambda + 1e-6 {
            return Err(Error::InvariantViolation(format!(
                "pooled potential failed at layer {ell}: {sum_sq} > {}",
                2.0 * lambda
            )));
        }
    }
    spectral_envelope_check(trace, ridge)?;
    // Alignment bound on the routed bias map, with the geometry in force at
    // each round.
    match trace.mode {
        PolicyMode::FixedCertificate => {
            let cert = cert.ok_or_else(|| {
                Error::Input("fixed-certificate trace needs the certificate".into())
            })?;
            let c_align = spd::gen_eig_max(&ridge.g_off, &cert.m_bias)?;
            for row in &trace.rows {
                let bound = c_align.sqrt() * row.pooled_inv_norm_sq.sqrt();
                if row.psi > bound + 1e-9 {
                    return Err(Error::InvariantViolation(format!(
                        "psi {} exceeds alignment bound {} at t={}",
                        row.psi, bound, row.t
                    )));
                }
            }
            // Chained path-sum bound from the alignment constant.
            let psi_sum = psi_path_sum(trace);
            let chain =
                (2.0 * c_align * trace.t_horizon as f64 * lambda_total(trace, ridge)?).sqrt();
            if psi_sum > chain + 1e-6 {
                return Err(Error::InvariantViolation(format!(
                    "routed path sum {psi_sum} exceeds alignment chain {chain}"
                )));
            }
        }
        PolicyMode::EpochCertificate => {
            let mut c_hats = Vec::with_capacity(epoch_certs.len());
            for c in epoch_certs {
                c_hats.push(spd::gen_eig_max(&ridge.g_off, &c.m_hat)?);
            }
            for row in &trace.rows {
                let k = trace.epoch_of_round(row.t);
                if k == 0 || k > c_hats.len() {
                    return Err(Error::InvariantViolation(format!(
                        "round {} outside every epoch",
                        row.t
                    )));
                }
                let bound = c_hats[k - 1].sqrt() * row.pooled_inv_norm_sq.sqrt();
                if row.psi > bound + 1e-9 {
                    return Err(Error::InvariantViolation(format!(
                        "epoch psi {} exceeds alignment bound {} at t={}",
                        row.psi, bound, row.t
                    )));
                }
            }
        }
        _ => {}
    }
    Ok(())
}
