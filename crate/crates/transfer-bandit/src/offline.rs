//! Offline ridge estimation, fixed directional bias certificates, the fused
//! offline-to-online confidence region, and the epoch-wise data-driven
//! certificate construction.

use crate::error::{Error, Result};
use crate::spd::{self, SpdMatrix, Vector};

/// Logged regression pairs `(z_i, y_i)` with `||z_i||_2 <= 1`.
#[derive(Debug, Clone, Default)]
pub struct OfflineDataset {
    pairs: Vec<(Vector, f64)>,
}

impl OfflineDataset {
    pub fn new(pairs: Vec<(Vector, f64)>) -> Result<Self> {
        for (z, y) in &pairs {
            if z.norm2() > 1.0 + 1e-9 {
                return Err(Error::Input(format!(
                    "offline covariate norm {} exceeds 1",
                    z.norm2()
                )));
            }
            if !y.is_finite() {
                return Err(Error::Input("offline response must be finite".into()));
            }
        }
        Ok(OfflineDataset { pairs })
    }

    pub fn pairs(&self) -> &[(Vector, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The offline ridge objects: design `G_off = I + sum z z^T` and the
/// unit-regularized solution `theta_hat_off = G_off^{-1} sum z y`.
#[derive(Debug, Clone)]
pub struct OfflineRidge {
    pub g_off: SpdMatrix,
    pub theta_hat_off: Vector,
    pub n_off: usize,
}

/// A pair `(M_bias, rho)` bounding `||theta_star - theta_dagger||_{M_bias}`.
#[derive(Debug, Clone)]
pub struct BiasCertificate {
    pub m_bias: SpdMatrix,
    pub rho: f64,
}

impl BiasCertificate {
    pub fn new(m_bias: SpdMatrix, rho: f64) -> Result<Self> {
        if !(rho >= 0.0) {
            return Err(Error::Input("certificate radius must be >= 0".into()));
        }
        Ok(BiasCertificate { m_bias, rho })
    }
}

/// The data-driven certificate recomputed at an epoch boundary: the parallel
/// sum of the online and offline designs plus the measured estimator gap.
#[derive(Debug, Clone)]
pub struct EpochCertificate {
    pub k: usize,
    pub m_hat: SpdMatrix,
    pub rho_hat: f64,
    pub g_k_on: SpdMatrix,
    pub theta_hat_k_on: Vector,
}

/// Exact unit-ridge fit. An empty dataset yields `(I, 0)`; the dimension then
/// has to come from the caller, so empty data requires `dim_hint`.
pub fn fit_ridge_with_dim(data: &OfflineDataset, dim_hint: usize) -> Result<OfflineRidge> {
    let d = data.pairs.first().map(|(z, _)| z.dim()).unwrap_or(dim_hint);
    if d == 0 {
        return Err(Error::Input("cannot infer ridge dimension".into()));
    }
    let mut gram = vec![0.0; d * d];
    for i in 0..d {
        gram[i * d + i] = 1.0;
    }
    let mut rhs = vec![0.0; d];
    for (z, y) in &data.pairs {
        let zs = z.as_slice();
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += zs[i] * zs[j];
            }
            rhs[i] += zs[i] * y;
        }
    }
    let g_off = SpdMatrix::from_symmetrized(d, gram)?;
    let theta = Vector::new(g_off.solve(&rhs))
        .map_err(|_| Error::Numerical("ridge solve produced non-finite coefficients".into()))?;
    Ok(OfflineRidge {
        g_off,
        theta_hat_off: theta,
        n_off: data.len(),
    })
}

/// Exact unit-ridge fit for nonempty data.
pub fn fit_ridge(data: &OfflineDataset) -> Result<OfflineRidge> {
    if data.is_empty() {
        return Err(Error::Input(
            "empty dataset: use fit_ridge_with_dim to fix the dimension".into(),
        ));
    }
    fit_ridge_with_dim(data, 0)
}

/// Offline ridge radius
/// `beta_off(delta) = sigma * sqrt(2 (log det(G_off)/2 + log(1/delta))) + S`.
pub fn beta_off(ridge: &OfflineRidge, delta: f64, sigma: f64, s_bound: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta {delta} outside (0, 1)")));
    }
    Ok(sigma * (2.0 * (0.5 * ridge.g_off.log_det() + (1.0 / delta).ln())).sqrt() + s_bound)
}

/// Support function of the fused confidence region along `x`:
/// `x^T theta_hat_off + beta ||x||_{G_off^{-1}} + rho ||x||_{M_bias^{-1}}`.
pub fn support_function(
    ridge: &OfflineRidge,
    cert: &BiasCertificate,
    beta: f64,
    x: &Vector,
) -> Result<f64> {
    Ok(x.dot(&ridge.theta_hat_off)
        + beta * spd::inv_norm(x, &ridge.g_off)?
        + cert.rho * spd::inv_norm(x, &cert.m_bias)?)
}

/// Whether `(M_bias, rho)` certifies the pair `(theta_star, theta_dagger)`.
pub fn certificate_valid(
    cert: &BiasCertificate,
    theta_star: &Vector,
    theta_dagger: &Vector,
) -> Result<bool> {
    let gap = theta_star.sub(theta_dagger);
    Ok(spd::elliptic_norm(&gap, &cert.m_bias)? <= cert.rho + 1e-12)
}

/// Builds the epoch certificate from the offline ridge and the online ridge
/// state strictly before the epoch boundary:
/// `M_hat = parallel_sum(G_on, G_off)` and
/// `rho_hat = ||theta_on - theta_off||_{M_hat} + beta_k_on + beta_off_val`.
pub fn epoch_certificate(
    ridge: &OfflineRidge,
    k: usize,
    online_gram: &SpdMatrix,
    online_theta: &Vector,
    beta_k_on: f64,
    beta_off_val: f64,
) -> Result<EpochCertificate> {
    let m_hat = spd::parallel_sum(online_gram, &ridge.g_off)?;
    let gap = online_theta.sub(&ridge.theta_hat_off);
    let rho_hat = spd::elliptic_norm(&gap, &m_hat)? + beta_k_on + beta_off_val;
    Ok(EpochCertificate {
        k,
        m_hat,
        rho_hat,
        g_k_on: online_gram.clone(),
        theta_hat_k_on: online_theta.clone(),
    })
}

/// Closed-form online ridge radius under the doubling schedule:
/// `sigma * sqrt(d log(1 + tau_k) + 2 log(2 K_ep / delta_bias)) + S`.
pub fn doubling_beta_k_on(
    tau_k: usize,
    d: usize,
    k_ep: usize,
    delta_bias: f64,
    sigma: f64,
    s_bound: f64,
) -> f64 {
    let tau = tau_k.max(1) as f64;
    sigma * ((d as f64) * (1.0 + tau).ln() + 2.0 * (2.0 * k_ep as f64 / delta_bias).ln()).sqrt()
        + s_bound
}

/// The doubling epoch schedule `tau_k = 2^{k-1}` for `k = 1..=floor(log2 T)+1`.
pub fn doubling_schedule(t_horizon: usize) -> Vec<usize> {
    let mut taus = Vec::new();
    let mut tau = 1usize;
    while tau <= t_horizon {
        taus.push(tau);
        tau = tau.saturating_mul(2);
    }
    taus
}
