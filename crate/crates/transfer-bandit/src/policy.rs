//! Decision algorithms: the SupLinUCB layer shell, two-branch optimistic
//! scoring with min/max aggregation, the epoch-wise data-driven variant, and
//! the baselines used in the experiment protocols.
//!
//! A policy instance is single-threaded mutable state for one simulation run.
//! The read-only ridge and certificate inputs may be shared across runs.

use crate::env::RoundContexts;
use crate::error::{Error, Result};
use crate::offline::{
    beta_off, doubling_beta_k_on, epoch_certificate, BiasCertificate, EpochCertificate,
    OfflineRidge,
};
use crate::spd::{SpdMatrix, Vector};

/// `ceil(log2 T)`: the top layer index. Layers are indexed `0..=L`.
pub fn top_layer(t_horizon: usize) -> usize {
    t_horizon.next_power_of_two().trailing_zeros() as usize
}

/// Which decision rule a policy runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// SupLinUCB: the layer shell with the pooled branch disabled.
    OnlineOnly,
    /// Two-branch scoring with a fixed `(M_bias, rho)` certificate.
    FixedCertificate,
    /// Two-branch scoring with the certificate re-learned at epoch boundaries.
    EpochCertificate,
    /// SupLinUCB whose layer-0 state is seeded with the offline design.
    WarmStart,
    /// Non-adaptive: plays `argmax x^T theta_hat_off` every round.
    OfflineGreedy,
}

impl PolicyMode {
    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::OnlineOnly => "suplinucb",
            PolicyMode::FixedCertificate => "minucb",
            PolicyMode::EpochCertificate => "epoch_minucb",
            PolicyMode::WarmStart => "warmstart",
            PolicyMode::OfflineGreedy => "offline_greedy",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "suplinucb" => Some(PolicyMode::OnlineOnly),
            "minucb" => Some(PolicyMode::FixedCertificate),
            "epoch_minucb" => Some(PolicyMode::EpochCertificate),
            "warmstart" => Some(PolicyMode::WarmStart),
            "offline_greedy" => Some(PolicyMode::OfflineGreedy),
            _ => None,
        }
    }

    fn uses_pooled_branch(self) -> bool {
        matches!(
            self,
            PolicyMode::FixedCertificate | PolicyMode::EpochCertificate
        )
    }
}

/// Confidence budgets. The defaults satisfy
/// `delta_off + delta_on + sum delta_pool <= T^{-2}` with a single knob:
/// `T^{-2}/4` to the offline event, `T^{-2}/4` to the online grid, and
/// `T^{-2}/2` to the pooled grid, each grid split uniformly over the
/// `T * (L+1)` round-layer pairs.
#[derive(Debug, Clone, Copy)]
pub struct DeltaSchedule {
    pub delta_off: f64,
    pub delta_on_total: f64,
    pub delta_pool_total: f64,
    /// Number of round-layer cells the grid budgets are split over.
    pub grid_cells: usize,
}

impl DeltaSchedule {
    pub fn default_budget(t_horizon: usize) -> Self {
        let budget = (t_horizon as f64).powi(-2);
        let cells = t_horizon * (top_layer(t_horizon) + 1);
        DeltaSchedule {
            delta_off: budget / 4.0,
            delta_on_total: budget / 4.0,
            delta_pool_total: budget / 2.0,
            grid_cells: cells.max(1),
        }
    }

    /// Per-cell online budget (uniform split).
    pub fn on_tl(&self) -> f64 {
        self.delta_on_total / self.grid_cells as f64
    }

    /// Per-cell pooled budget (uniform split); also the minimum over the grid.
    pub fn pool_tl(&self) -> f64 {
        self.delta_pool_total / self.grid_cells as f64
    }
}

/// Static configuration for one policy run.
#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub t_horizon: usize,
    pub sigma: f64,
    pub s_bound: f64,
    pub mode: PolicyMode,
    pub deltas: DeltaSchedule,
    /// Epoch boundaries `tau_1 = 1 < tau_2 < ... <= T` (epoch mode only).
    pub epoch_schedule: Vec<usize>,
    /// Certificate confidence for the epoch construction.
    pub delta_bias: f64,
}

impl PolicyConfig {
    pub fn new(t_horizon: usize, sigma: f64, s_bound: f64, mode: PolicyMode) -> Self {
        PolicyConfig {
            t_horizon,
            sigma,
            s_bound,
            mode,
            deltas: DeltaSchedule::default_budget(t_horizon),
            epoch_schedule: crate::offline::doubling_schedule(t_horizon),
            delta_bias: 0.05,
        }
    }
}

/// Per-layer online history: the raw Gram `A = sum x x^T` (plus any warm-start
/// seed), the response vector `b`, and cached factorizations of `V = I + A`
/// and, when a pooled branch is active, `A + G_off`.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub level: usize,
    dim: usize,
    gram: Vec<f64>,
    b: Vec<f64>,
    pub count: usize,
    v: SpdMatrix,
    pooled: Option<SpdMatrix>,
}

impl LayerState {
    pub fn new(dim: usize, level: usize, g_off: Option<&SpdMatrix>) -> Result<Self> {
        let gram = vec![0.0; dim * dim];
        let v = SpdMatrix::identity(dim);
        let pooled = match g_off {
            Some(g) => Some(g.add_sym(&gram)?),
            None => None,
        };
        Ok(LayerState {
            level,
            dim,
            gram,
            b: vec![0.0; dim],
            count: 0,
            v,
            pooled,
        })
    }

    /// Appends `(x, r)` to this layer's history and refreshes the caches.
    pub fn update(&mut self, x: &Vector, r: f64, g_off: Option<&SpdMatrix>) -> Result<()> {
        let d = self.dim;
        let xs = x.as_slice();
        for i in 0..d {
            for j in 0..d {
                self.gram[i * d + j] += xs[i] * xs[j];
            }
            self.b[i] += xs[i] * r;
        }
        self.count += 1;
        self.refresh(g_off)
    }

    /// Seeds this layer with the offline design scaled by `scale`:
    /// `A += scale (G_off - I)` and `b += scale (G_off - I) theta_hat_off`,
    /// so the layer ridge center starts at the offline estimate with
    /// `scale`-weighted offline confidence.
    pub fn warm_seed(&mut self, ridge: &OfflineRidge, scale: f64) -> Result<()> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                self.gram[i * d + j] += scale * (ridge.g_off.entry(i, j) - eye);
            }
        }
        let g_theta = ridge.g_off.mul_vec(ridge.theta_hat_off.as_slice());
        for i in 0..d {
            self.b[i] += scale * (g_theta[i] - ridge.theta_hat_off.as_slice()[i]);
        }
        self.refresh(None)
    }

    fn refresh(&mut self, g_off: Option<&SpdMatrix>) -> Result<()> {
        let mut v_entries = self.gram.clone();
        for i in 0..self.dim {
            v_entries[i * self.dim + i] += 1.0;
        }
        self.v = SpdMatrix::from_symmetrized(self.dim, v_entries)?;
        if let Some(g) = g_off {
            self.pooled = Some(g.add_sym(&self.gram)?);
        } else if self.pooled.is_some() {
            return Err(Error::InternalInvariant(
                "pooled cache present but no offline design supplied on update".into(),
            ));
        }
        Ok(())
    }

    /// The regularized online design `V = I + A`.
    pub fn v(&self) -> &SpdMatrix {
        &self.v
    }

    /// The pooled design `A + G_off`, when a pooled branch is active.
    pub fn pooled(&self) -> Result<&SpdMatrix> {
        self.pooled
            .as_ref()
            .ok_or_else(|| Error::Input("layer has no pooled geometry".into()))
    }

    pub fn response(&self) -> &[f64] {
        &self.b
    }

    pub fn gram(&self) -> &[f64] {
        &self.gram
    }

    /// The layer ridge estimator `V^{-1} b`.
    pub fn online_theta(&self) -> Vector {
        Vector::new(self.v.solve(&self.b)).expect("finite layer solve")
    }
}

/// Warm-start seed weight. The seeded mass along any direction is capped so
/// that a fresh unit-norm arm's layer-0 width stays above the layer-0
/// trigger threshold: the prior may bias the ranking, but it cannot tighten
/// layer 0 enough to eliminate arms before real plays have been routed there
/// and had a chance to wash the bias out. With fresh radius
/// `beta_0 = sigma sqrt(2 log(1/delta)) + S`, the width along a seeded
/// eigen-direction with mass `m` is `2 beta_0 / sqrt(1 + m)`; keeping it at or
/// above twice the threshold caps `1 + m` at `beta_0^2`.
fn warm_seed_scale(cfg: &PolicyConfig, ridge: &OfflineRidge) -> Result<f64> {
    let d = ridge.g_off.dim();
    let mut seed = ridge.g_off.entries().to_vec();
    for i in 0..d {
        seed[i * d + i] -= 1.0;
    }
    let lambda_max = crate::spd::sym_eigenvalues(d, &seed)?
        .last()
        .copied()
        .unwrap_or(0.0);
    if lambda_max <= 0.0 {
        return Ok(1.0);
    }
    let beta_0 = cfg.sigma * (2.0 * (1.0 / cfg.deltas.on_tl()).ln()).sqrt() + cfg.s_bound;
    let cap = (beta_0 * beta_0 - 1.0).max(0.0);
    Ok((cap / lambda_max).min(1.0))
}

/// Layerwise online radius `beta_on * ||x||_{V^{-1}}` with
/// `beta_on = sigma sqrt(2 (log det(V)/2 + log(1/delta))) + S`.
pub fn online_radius(
    layer: &LayerState,
    x: &Vector,
    delta_on_tl: f64,
    sigma: f64,
    s_bound: f64,
) -> Result<f64> {
    if !(delta_on_tl > 0.0 && delta_on_tl < 1.0) {
        return Err(Error::Input("delta outside (0, 1)".into()));
    }
    let beta = online_beta(layer, delta_on_tl, sigma, s_bound);
    Ok(beta * layer.v().inv_norm(x)?)
}

fn online_beta(layer: &LayerState, delta_on_tl: f64, sigma: f64, s_bound: f64) -> f64 {
    sigma * (2.0 * (0.5 * layer.v().log_det() + (1.0 / delta_on_tl).ln())).sqrt() + s_bound
}

/// The offline-informed estimator: solves `(A + G_off) theta = b + G_off theta_hat_off`.
pub fn pooled_estimator(layer: &LayerState, ridge: &OfflineRidge) -> Result<Vector> {
    let pooled = layer.pooled()?;
    let mut rhs = ridge.g_off.mul_vec(ridge.theta_hat_off.as_slice());
    for (r, b) in rhs.iter_mut().zip(layer.response()) {
        *r += b;
    }
    Vector::new(pooled.solve(&rhs))
        .map_err(|_| Error::Numerical("pooled solve produced non-finite coefficients".into()))
}

/// The bias routing map `psi(x) = ||M_bias^{-1/2} G_off (A + G_off)^{-1} x||_2`,
/// evaluated as the `M_bias`-inverse norm of `w = G_off (A + G_off)^{-1} x`.
pub fn psi(
    layer: &LayerState,
    ridge: &OfflineRidge,
    m_bias: &SpdMatrix,
    x: &Vector,
) -> Result<f64> {
    let pooled = layer.pooled()?;
    let w = ridge.g_off.mul_vec(&pooled.solve(x.as_slice()));
    m_bias.inv_norm(
        &Vector::new(w)
            .map_err(|_| Error::Numerical("bias routing produced non-finite direction".into()))?,
    )
}

/// The pooled martingale radius
/// `gamma = sigma sqrt(2 ((log det(A+G_off) - log det(G_off))/2 + log(1/delta)))`.
/// It carries only the online martingale noise measured in the pooled
/// geometry, so no `+S` slack enters here; the offline uncertainty rides on
/// the separate `beta_off` term.
pub fn pooled_gamma(
    layer: &LayerState,
    ridge: &OfflineRidge,
    delta_pool_tl: f64,
    sigma: f64,
) -> Result<f64> {
    let pooled = layer.pooled()?;
    let det_ratio = pooled.log_det() - ridge.g_off.log_det();
    Ok(sigma * (2.0 * (0.5 * det_ratio + (1.0 / delta_pool_tl).ln())).sqrt())
}

/// Full pooled radius
/// `(gamma + beta_off) ||x||_{(A+G_off)^{-1}} + rho psi(x)`.
pub fn pooled_radius(
    layer: &LayerState,
    ridge: &OfflineRidge,
    cert: &BiasCertificate,
    delta_pool_tl: f64,
    beta_off_val: f64,
    sigma: f64,
    x: &Vector,
) -> Result<f64> {
    let gamma = pooled_gamma(layer, ridge, delta_pool_tl, sigma)?;
    let stat = (gamma + beta_off_val) * layer.pooled()?.inv_norm(x)?;
    Ok(stat + cert.rho * psi(layer, ridge, &cert.m_bias, x)?)
}

/// Per-arm two-branch scores and their min/max aggregation.
#[derive(Debug, Clone, Copy)]
pub struct BranchScores {
    pub u_on: f64,
    pub l_on: f64,
    pub u_pool: f64,
    pub l_pool: f64,
    pub u_min: f64,
    pub l_max: f64,
    pub width: f64,
    /// Routed bias map value at this arm (0 when the pooled branch is off).
    pub psi: f64,
    /// `||x||_{(A+G_off)^{-1}}` at this arm (0 when the pooled branch is off).
    pub pooled_inv_norm: f64,
}

impl BranchScores {
    fn online_only(center: f64, radius: f64) -> Result<Self> {
        Self::aggregate(
            center - radius,
            center + radius,
            f64::NEG_INFINITY,
            f64::INFINITY,
            0.0,
            0.0,
        )
    }

    fn aggregate(
        l_on: f64,
        u_on: f64,
        l_pool: f64,
        u_pool: f64,
        psi: f64,
        pooled_inv_norm: f64,
    ) -> Result<Self> {
        let u_min = u_on.min(u_pool);
        let l_max = l_on.max(l_pool);
        let width = u_min - l_max;
        if width.is_nan() {
            return Err(Error::InternalInvariant("width evaluated to NaN".into()));
        }
        let w_on = u_on - l_on;
        let w_pool = u_pool - l_pool;
        if width > w_on.min(w_pool) + 1e-12 {
            return Err(Error::InternalInvariant(format!(
                "aggregated width {width} exceeds min branch width {}",
                w_on.min(w_pool)
            )));
        }
        Ok(BranchScores {
            u_on,
            l_on,
            u_pool,
            l_pool,
            u_min,
            l_max,
            width,
            psi,
            pooled_inv_norm,
        })
    }

    /// Whether the pooled UCB was strictly tighter at this arm.
    pub fn pooled_branch_used(&self) -> bool {
        self.u_pool < self.u_on
    }

    pub fn w_on(&self) -> f64 {
        self.u_on - self.l_on
    }

    pub fn w_pool(&self) -> f64 {
        self.u_pool - self.l_pool
    }
}

/// One scored (layer, arm) pair; kept for coverage accounting.
#[derive(Debug, Clone, Copy)]
pub struct ScoredArm {
    pub layer: usize,
    pub arm: usize,
    pub u_min: f64,
    pub l_max: f64,
    pub width: f64,
}

/// The result of one decision round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub arm: usize,
    pub stop_layer: usize,
    pub reward: f64,
    /// Scores of the played arm at the stopping layer.
    pub scores: BranchScores,
    /// The certificate radius in force this round (`rho`, or the epoch
    /// `rho_hat`; 0 when no pooled branch).
    pub rho_routed: f64,
    /// Every (layer, arm) pair scored this round.
    pub scored: Vec<ScoredArm>,
    /// Arms eliminated this round, with the layer at which they fell.
    pub eliminated: Vec<(usize, usize)>,
}

/// Mutable policy state for one run.
pub struct Policy {
    pub cfg: PolicyConfig,
    ridge: OfflineRidge,
    cert: Option<BiasCertificate>,
    beta_off_val: f64,
    layers: Vec<LayerState>,
    // Full-trajectory online ridge (all rounds, all layers), maintained in
    // epoch mode for the certificate construction.
    all_gram: Option<SpdMatrix>,
    all_b: Vec<f64>,
    epoch_certs: Vec<EpochCertificate>,
    dim: usize,
}

impl Policy {
    pub fn new(
        cfg: PolicyConfig,
        ridge: OfflineRidge,
        cert: Option<BiasCertificate>,
    ) -> Result<Self> {
        let dim = ridge.g_off.dim();
        if cfg.t_horizon == 0 {
            return Err(Error::Input("horizon must be >= 1".into()));
        }
        if cfg.mode == PolicyMode::FixedCertificate && cert.is_none() {
            return Err(Error::Input(
                "fixed-certificate mode requires a bias certificate".into(),
            ));
        }
        if cfg.mode == PolicyMode::EpochCertificate {
            if cfg.epoch_schedule.first() != Some(&1) {
                return Err(Error::Input(
                    "epoch schedule must start at tau_1 = 1".into(),
                ));
            }
            if cfg.epoch_schedule.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(
                    "epoch schedule must be strictly increasing".into(),
                ));
            }
            if cfg.epoch_schedule.last().copied().unwrap_or(0) > cfg.t_horizon {
                return Err(Error::Input("epoch schedule exceeds the horizon".into()));
            }
        }
        let top = top_layer(cfg.t_horizon);
        let pooled = cfg.mode.uses_pooled_branch();
        let mut layers = Vec::with_capacity(top + 1);
        for level in 0..=top {
            layers.push(LayerState::new(
                dim,
                level,
                if pooled { Some(&ridge.g_off) } else { None },
            )?);
        }
        if cfg.mode == PolicyMode::WarmStart {
            layers[0].warm_seed(&ridge, warm_seed_scale(&cfg, &ridge)?)?;
        }
        let beta_off_val = beta_off(&ridge, cfg.deltas.delta_off, cfg.sigma, cfg.s_bound)?;
        let all_gram = if cfg.mode == PolicyMode::EpochCertificate {
            Some(SpdMatrix::identity(dim))
        } else {
            None
        };
        Ok(Policy {
            cfg,
            ridge,
            cert,
            beta_off_val,
            layers,
            all_gram,
            all_b: vec![0.0; dim],
            epoch_certs: Vec::new(),
            dim,
        })
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn ridge(&self) -> &OfflineRidge {
        &self.ridge
    }

    pub fn beta_off_val(&self) -> f64 {
        self.beta_off_val
    }

    pub fn epoch_certificates(&self) -> &[EpochCertificate] {
        &self.epoch_certs
    }

    /// Replaces the active epoch certificate. Exposed for substitution tests
    /// and what-if analysis; normal runs never call this.
    pub fn override_epoch_certificate(&mut self, cert: EpochCertificate) {
        if let Some(slot) = self.epoch_certs.last_mut() {
            *slot = cert;
        }
    }

    /// The `(M, rho)` pair in force for pooled scoring this round.
    fn active_bias(&self) -> Result<(&SpdMatrix, f64)> {
        match self.cfg.mode {
            PolicyMode::FixedCertificate => {
                let c = self.cert.as_ref().expect("checked at construction");
                Ok((&c.m_bias, c.rho))
            }
            PolicyMode::EpochCertificate => {
                let c = self.epoch_certs.last().ok_or_else(|| {
                    Error::InternalInvariant("no epoch certificate at scoring time".into())
                })?;
                Ok((&c.m_hat, c.rho_hat))
            }
            _ => Err(Error::InternalInvariant(
                "no bias geometry in a single-branch mode".into(),
            )),
        }
    }

    /// Runs one decision round: scores, plays through `pull`, and routes the
    /// observation to the stopping layer.
    pub fn round(
        &mut self,
        t: usize,
        contexts: &RoundContexts,
        pull: &mut dyn FnMut(&Vector) -> f64,
    ) -> Result<RoundOutcome> {
        if contexts.arms.is_empty() {
            return Err(Error::Input("round has no arms".into()));
        }
        if self.cfg.mode == PolicyMode::EpochCertificate && self.cfg.epoch_schedule.contains(&t) {
            self.start_epoch(t)?;
        }
        let outcome = match self.cfg.mode {
            PolicyMode::OfflineGreedy => self.greedy_round(contexts, pull)?,
            _ => self.layered_round(contexts, pull)?,
        };
        Ok(outcome)
    }

    fn start_epoch(&mut self, tau_k: usize) -> Result<()> {
        let k = self.epoch_certs.len() + 1;
        let k_ep = self.cfg.epoch_schedule.len();
        let gram = self
            .all_gram
            .as_ref()
            .expect("epoch mode maintains the full-trajectory gram");
        let theta = Vector::new(gram.solve(&self.all_b))
            .map_err(|_| Error::Numerical("epoch ridge solve failed".into()))?;
        let beta_k_on = doubling_beta_k_on(
            tau_k,
            self.dim,
            k_ep,
            self.cfg.delta_bias,
            self.cfg.sigma,
            self.cfg.s_bound,
        );
        let beta_off_bias = beta_off(
            &self.ridge,
            self.cfg.delta_bias / 2.0,
            self.cfg.sigma,
            self.cfg.s_bound,
        )?;
        let cert = epoch_certificate(&self.ridge, k, gram, &theta, beta_k_on, beta_off_bias)?;
        self.epoch_certs.push(cert);
        Ok(())
    }

    fn greedy_round(
        &mut self,
        contexts: &RoundContexts,
        pull: &mut dyn FnMut(&Vector) -> f64,
    ) -> Result<RoundOutcome> {
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (a, x) in contexts.arms.iter().enumerate() {
            let val = x.dot(&self.ridge.theta_hat_off);
            if val > best_val {
                best = a;
                best_val = val;
            }
        }
        let reward = pull(&contexts.arms[best]);
        let scores = BranchScores::aggregate(best_val, best_val, best_val, best_val, 0.0, 0.0)?;
        Ok(RoundOutcome {
            arm: best,
            stop_layer: 0,
            reward,
            scores,
            rho_routed: 0.0,
            scored: Vec::new(),
            eliminated: Vec::new(),
        })
    }

    fn score_layer(
        &self,
        ell: usize,
        contexts: &RoundContexts,
        survivors: &[usize],
    ) -> Result<Vec<BranchScores>> {
        let layer = &self.layers[ell];
        let theta_on = layer.online_theta();
        let beta_on = online_beta(
            layer,
            self.cfg.deltas.on_tl(),
            self.cfg.sigma,
            self.cfg.s_bound,
        );
        let pooled_branch = self.cfg.mode.uses_pooled_branch();
        let (theta_pool, gamma, bias) = if pooled_branch {
            let theta_pool = pooled_estimator(layer, &self.ridge)?;
            let gamma = pooled_gamma(
                layer,
                &self.ridge,
                self.cfg.deltas.pool_tl(),
                self.cfg.sigma,
            )?;
            let (m, rho) = self.active_bias()?;
            (Some(theta_pool), gamma, Some((m, rho)))
        } else {
            (None, 0.0, None)
        };
        let mut out = Vec::with_capacity(survivors.len());
        for &a in survivors {
            let x = &contexts.arms[a];
            let center_on = x.dot(&theta_on);
            let rad_on = beta_on * layer.v().inv_norm(x)?;
            let scores = if let (Some(theta_pool), Some((m, rho))) = (&theta_pool, bias) {
                let center_pool = x.dot(theta_pool);
                let pooled_inv = layer.pooled()?.inv_norm(x)?;
                let psi_val = psi(layer, &self.ridge, m, x)?;
                let rad_pool = (gamma + self.beta_off_val) * pooled_inv + rho * psi_val;
                BranchScores::aggregate(
                    center_on - rad_on,
                    center_on + rad_on,
                    center_pool - rad_pool,
                    center_pool + rad_pool,
                    psi_val,
                    pooled_inv,
                )?
            } else {
                BranchScores::online_only(center_on, rad_on)?
            };
            out.push(scores);
        }
        Ok(out)
    }

    fn layered_round(
        &mut self,
        contexts: &RoundContexts,
        pull: &mut dyn FnMut(&Vector) -> f64,
    ) -> Result<RoundOutcome> {
        let top = self.layers.len() - 1;
        let k = contexts.arms.len();
        let mut survivors: Vec<usize> = (0..k).collect();
        let mut scored = Vec::new();
        let mut eliminated = Vec::new();
        let rho_routed = if self.cfg.mode.uses_pooled_branch() {
            self.active_bias()?.1
        } else {
            0.0
        };
        for ell in 0..=top {
            let scores = self.score_layer(ell, contexts, &survivors)?;
            for (&a, sc) in survivors.iter().zip(&scores) {
                scored.push(ScoredArm {
                    layer: ell,
                    arm: a,
                    u_min: sc.u_min,
                    l_max: sc.l_max,
                    width: sc.width,
                });
            }
            let threshold = 2.0_f64.powi(-(ell as i32));
            let max_width = scores
                .iter()
                .map(|s| s.width)
                .fold(f64::NEG_INFINITY, f64::max);
            let play_here = ell == top || max_width > threshold;
            if play_here {
                // At the terminal layer every survivor is eligible; otherwise
                // only the arms whose interval is still wide.
                let mut best: Option<(usize, usize, f64)> = None;
                for (i, (&a, sc)) in survivors.iter().zip(&scores).enumerate() {
                    if ell < top && !(sc.width > threshold) {
                        continue;
                    }
                    // Ties go to the lowest arm index.
                    if best.map_or(true, |(_, _, v)| sc.u_min > v) {
                        best = Some((i, a, sc.u_min));
                    }
                }
                let (idx, arm, _) = best.ok_or_else(|| {
                    Error::InternalInvariant("no eligible arm at the stopping layer".into())
                })?;
                let x = contexts.arms[arm].clone();
                let reward = pull(&x);
                let g_off = self
                    .cfg
                    .mode
                    .uses_pooled_branch()
                    .then(|| self.ridge.g_off.clone());
                self.layers[ell].update(&x, reward, g_off.as_ref())?;
                if let Some(gram) = self.all_gram.take() {
                    self.all_gram = Some(gram.rank_one_update(&x)?);
                    for (bi, xi) in self.all_b.iter_mut().zip(x.as_slice()) {
                        *bi += xi * reward;
                    }
                }
                return Ok(RoundOutcome {
                    arm,
                    stop_layer: ell,
                    reward,
                    scores: scores[idx],
                    rho_routed,
                    scored,
                    eliminated,
                });
            }
            // Narrow layer: eliminate and descend.
            let pivot = scores
                .iter()
                .map(|s| s.l_max)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut next = Vec::with_capacity(survivors.len());
            for (&a, sc) in survivors.iter().zip(&scores) {
                if sc.u_min >= pivot {
                    next.push(a);
                } else {
                    eliminated.push((ell, a));
                }
            }
            if next.is_empty() {
                return Err(Error::InternalInvariant(
                    "elimination emptied the survivor set".into(),
                ));
            }
            survivors = next;
        }
        Err(Error::InternalInvariant(
            "layer loop ended without playing".into(),
        ))
    }
}
