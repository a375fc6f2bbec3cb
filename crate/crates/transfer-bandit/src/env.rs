//! Synthetic linear contextual bandit environments, offline-data generators,
//! and the hard-instance constructors used by the lower-bound style tests.
//!
//! Instances and specs are immutable; each simulation run owns its RNG
//! substreams, so independent runs can execute concurrently with no shared
//! mutable state.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::offline::OfflineDataset;
use crate::spd::Vector;

/// How Gaussian draws are mapped into the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    /// Rescale onto the unit sphere only when the norm exceeds 1.
    Clip,
    /// Always rescale to unit norm.
    Always,
}

/// Law of contexts (online) or covariates (offline).
#[derive(Debug, Clone)]
pub enum SupportLaw {
    /// I.i.d. standard normal entries mapped into the unit ball.
    GaussianUnitBall { normalize: Normalize },
    /// As a context law: the action set returned every round.
    /// As a covariate law: the list is walked cyclically, so an explicit
    /// deterministic covariate schedule is the list itself.
    FixedActionSet(Vec<Vector>),
    /// Uniform per-coordinate draws in `[lower_j, upper_j]`, rescaled onto the
    /// sphere only if the norm exceeds 1.
    BoxSupport { lower: Vec<f64>, upper: Vec<f64> },
}

/// Reward noise model around the linear mean `x^T theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardModel {
    /// `r = x^T theta + eta`, `eta ~ Normal(0, sigma^2)`. No clipping: the
    /// reference experiments use parameter scales for which clipping to
    /// `[0, 1]` would distort the protocol.
    Gaussian,
    /// `r ~ Bernoulli(x^T theta)`, drawn by inverse CDF from one uniform.
    Bernoulli,
}

/// A synthetic online environment.
#[derive(Debug, Clone)]
pub struct BanditInstance {
    pub theta_star: Vector,
    pub k: usize,
    pub d: usize,
    pub sigma: f64,
    pub s_bound: f64,
    pub context_law: SupportLaw,
    pub reward_model: RewardModel,
}

impl BanditInstance {
    pub fn validate(&self) -> Result<()> {
        if self.theta_star.dim() != self.d {
            return Err(Error::Dimension("theta_star dim vs d".into()));
        }
        if self.theta_star.norm2() > self.s_bound + 1e-12 {
            return Err(Error::Input(format!(
                "||theta_star|| = {} exceeds S = {}",
                self.theta_star.norm2(),
                self.s_bound
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Input("sigma must be >= 0".into()));
        }
        if let SupportLaw::FixedActionSet(actions) = &self.context_law {
            if actions.len() != self.k {
                return Err(Error::Input(format!(
                    "fixed action set has {} arms, instance says K = {}",
                    actions.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// The offline data-generating process.
#[derive(Debug, Clone)]
pub struct OfflineSpec {
    pub theta_dagger: Vector,
    pub n_off: usize,
    pub covariate_law: SupportLaw,
    pub reward_model: RewardModel,
}

/// The action set revealed at one round.
#[derive(Debug, Clone)]
pub struct RoundContexts {
    pub t: usize,
    pub arms: Vec<Vector>,
}

/// Per-purpose RNG substreams for one simulation run. The per-run seed is
/// `base_seed + run_index` (wrapping); each purpose gets its own ChaCha
/// stream so context draws, online reward noise, and offline noise never
/// interleave.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub contexts: ChaCha12Rng,
    pub online_noise: ChaCha12Rng,
    pub offline_noise: ChaCha12Rng,
}

impl RunRngs {
    pub fn derive(base_seed: u64, run_index: u64) -> Self {
        let run_seed = base_seed.wrapping_add(run_index);
        let mk = |stream: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(run_seed);
            rng.set_stream(stream);
            rng
        };
        RunRngs {
            contexts: mk(1),
            online_noise: mk(2),
            offline_noise: mk(3),
        }
    }
}

fn draw_from_law(law: &SupportLaw, d: usize, index: usize, rng: &mut ChaCha12Rng) -> Vector {
    match law {
        SupportLaw::GaussianUnitBall { normalize } => {
            let mut entries = vec![0.0; d];
            for e in &mut entries {
                *e = StandardNormal.sample(rng);
            }
            let norm = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rescale = match normalize {
                Normalize::Always => norm > 0.0,
                Normalize::Clip => norm > 1.0,
            };
            if rescale {
                for e in &mut entries {
                    *e /= norm;
                }
            }
            Vector::new(entries).expect("finite gaussian draw")
        }
        SupportLaw::FixedActionSet(actions) => actions[index % actions.len()].clone(),
        SupportLaw::BoxSupport { lower, upper } => {
            let mut entries = vec![0.0; d];
            for (j, e) in entries.iter_mut().enumerate() {
                *e = rng.random_range(lower[j]..=upper[j]);
            }
            let norm = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 {
                for e in &mut entries {
                    *e /= norm;
                }
            }
            Vector::new(entries).expect("finite box draw")
        }
    }
}

/// Draws the action set for round `t`.
pub fn sample_round(instance: &BanditInstance, t: usize, rng: &mut ChaCha12Rng) -> RoundContexts {
    let arms = (0..instance.k)
        .map(|a| draw_from_law(&instance.context_law, instance.d, a, rng))
        .collect();
    RoundContexts { t, arms }
}

/// Plays `x` and returns the stochastic reward.
pub fn pull(instance: &BanditInstance, x: &Vector, rng: &mut ChaCha12Rng) -> f64 {
    let mean = x.dot(&instance.theta_star);
    match instance.reward_model {
        RewardModel::Gaussian => {
            if instance.sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                mean + instance.sigma * z
            } else {
                mean
            }
        }
        RewardModel::Bernoulli => {
            let u: f64 = rng.random();
            if u < mean {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Generates the offline regression sample `(z_i, y_i)_{i < n_off}` with
/// `y_i = z_i^T theta_dagger + xi_i`.
pub fn generate_offline(spec: &OfflineSpec, sigma: f64, rng: &mut ChaCha12Rng) -> OfflineDataset {
    let d = spec.theta_dagger.dim();
    let mut pairs = Vec::with_capacity(spec.n_off);
    for i in 0..spec.n_off {
        let z = draw_from_law(&spec.covariate_law, d, i, rng);
        let mean = z.dot(&spec.theta_dagger);
        let y = match spec.reward_model {
            RewardModel::Gaussian => {
                if sigma > 0.0 {
                    let xi: f64 = StandardNormal.sample(rng);
                    mean + sigma * xi
                } else {
                    mean
                }
            }
            RewardModel::Bernoulli => {
                let u: f64 = rng.random();
                if u < mean {
                    1.0
                } else {
                    0.0
                }
            }
        };
        pairs.push((z, y));
    }
    OfflineDataset::new(pairs).expect("laws keep covariates in the unit ball")
}

/// The three-instance Bernoulli family sharing one offline law: two hard
/// instances distinguished only by the sign of a hidden bias direction, and a
/// good instance where a fixed action is optimal throughout.
#[derive(Debug, Clone)]
pub struct HardTriple {
    pub plus: BanditInstance,
    pub minus: BanditInstance,
    pub good: BanditInstance,
    /// Shared offline process; its data law is identical under all three.
    pub offline: OfflineSpec,
    /// The lifted action set `[x0, x_plus, x_minus]` common to all rounds.
    pub actions: Vec<Vector>,
    /// Per-round regret of `x0` (and a lower bound for `x_plus`) under the
    /// minus instance: `sqrt(rho0^2 + rho_bar^2) - rho0`.
    pub minus_gap: f64,
}

/// Builds the hard triple for radii `0 < rho0 <= 1/4`, `0 < rho <= rho0 / 4`.
///
/// Construction in `R^3`: with `rho_bar = rho / sqrt(2)`, the base actions are
/// `a0 = e1` and `a_pm = (rho0 e1 +- rho_bar e2) / sqrt(rho0^2 + rho_bar^2)`,
/// lifted to `x = (e0 + a) / sqrt(2)`. The common offline parameter is
/// `e0/sqrt(2) + sqrt(2) rho0 e1`; the three online parameters move it by
/// exactly `rho` in Euclidean norm. Rewards are Bernoulli with mean `x^T theta`.
pub fn make_hard_triple(rho0: f64, rho: f64) -> Result<HardTriple> {
    if !(rho0 > 0.0 && rho0 <= 0.25) {
        return Err(Error::Input("need 0 < rho0 <= 1/4".into()));
    }
    if !(rho > 0.0 && rho <= rho0 / 4.0) {
        return Err(Error::Input("need 0 < rho <= rho0 / 4".into()));
    }
    let rho_bar = rho / 2.0_f64.sqrt();
    let denom = (rho0 * rho0 + rho_bar * rho_bar).sqrt();
    let lift = |a1: f64, a2: f64| {
        Vector::new(vec![
            1.0 / 2.0_f64.sqrt(),
            a1 / 2.0_f64.sqrt(),
            a2 / 2.0_f64.sqrt(),
        ])
        .expect("finite action")
    };
    let x0 = lift(1.0, 0.0);
    let x_plus = lift(rho0 / denom, rho_bar / denom);
    let x_minus = lift(rho0 / denom, -rho_bar / denom);
    let actions = vec![x0, x_plus, x_minus];

    let sqrt2 = 2.0_f64.sqrt();
    let theta_dagger = Vector::new(vec![1.0 / sqrt2, sqrt2 * rho0, 0.0])?;
    let theta_plus = Vector::new(vec![1.0 / sqrt2, sqrt2 * rho0, sqrt2 * rho_bar])?;
    let theta_minus = Vector::new(vec![1.0 / sqrt2, sqrt2 * rho0, -sqrt2 * rho_bar])?;
    let theta_good = Vector::new(vec![1.0 / sqrt2, sqrt2 * (rho0 + rho_bar), 0.0])?;

    for theta in [&theta_plus, &theta_minus, &theta_good] {
        let gap = theta.sub(&theta_dagger).norm2();
        if (gap - rho).abs() > 1e-12 {
            return Err(Error::InternalInvariant(format!(
                "hard triple parameter gap {gap} differs from rho {rho}"
            )));
        }
    }

    let instance = |theta: Vector| BanditInstance {
        theta_star: theta,
        k: 3,
        d: 3,
        // Bernoulli noise is 1/2-sub-Gaussian.
        sigma: 0.5,
        s_bound: 1.0,
        context_law: SupportLaw::FixedActionSet(actions.clone()),
        reward_model: RewardModel::Bernoulli,
    };
    let offline = OfflineSpec {
        theta_dagger,
        n_off: 900,
        covariate_law: SupportLaw::FixedActionSet(actions.clone()),
        reward_model: RewardModel::Bernoulli,
    };
    Ok(HardTriple {
        plus: instance(theta_plus),
        minus: instance(theta_minus),
        good: instance(theta_good),
        offline,
        actions,
        minus_gap: denom - rho0,
    })
}

/// Online/offline means for the diagonal family.
#[derive(Debug, Clone)]
pub struct DiagMeans {
    pub theta_star: Vec<f64>,
    pub theta_dagger: Vec<f64>,
}

/// A diagonal instance: orthonormal actions, arm-wise offline counts, and a
/// diagonal bias geometry.
#[derive(Debug, Clone)]
pub struct DiagInstance {
    pub instance: BanditInstance,
    pub offline: OfflineSpec,
    /// Diagonal entries of `M_bias`.
    pub bias_weights: Vec<f64>,
}

/// Builds the diagonal Gaussian family: actions `{e_1..e_d}`, offline design
/// `G_off = diag(1 + n_i)` realized by a deterministic schedule of `n_i`
/// pulls of `e_i`, bias geometry `M_bias = diag(b_i)`, unit-variance Gaussian
/// rewards.
pub fn make_diag_instance(
    arm_counts: &[usize],
    bias_weights: &[f64],
    means: &DiagMeans,
) -> Result<DiagInstance> {
    let d = arm_counts.len();
    if bias_weights.len() != d || means.theta_star.len() != d || means.theta_dagger.len() != d {
        return Err(Error::Dimension(
            "arm counts, bias weights, and means must share a length".into(),
        ));
    }
    if bias_weights.iter().any(|&b| b <= 0.0) {
        return Err(Error::Input("bias weights must be positive".into()));
    }
    let actions: Vec<Vector> = (0..d).map(|i| Vector::basis(d, i)).collect();
    let mut schedule = Vec::with_capacity(arm_counts.iter().sum());
    for (i, &n) in arm_counts.iter().enumerate() {
        for _ in 0..n {
            schedule.push(Vector::basis(d, i));
        }
    }
    let theta_star = Vector::new(means.theta_star.clone())?;
    let theta_dagger = Vector::new(means.theta_dagger.clone())?;
    let s_bound = theta_star.norm2().max(theta_dagger.norm2()).max(1.0);
    Ok(DiagInstance {
        instance: BanditInstance {
            theta_star,
            k: d,
            d,
            sigma: 1.0,
            s_bound,
            context_law: SupportLaw::FixedActionSet(actions),
            reward_model: RewardModel::Gaussian,
        },
        offline: OfflineSpec {
            theta_dagger,
            n_off: schedule.len(),
            covariate_law: SupportLaw::FixedActionSet(schedule),
            reward_model: RewardModel::Gaussian,
        },
        bias_weights: bias_weights.to_vec(),
    })
}

/// Arm-wise routing budgets `v_i = rho / sqrt(b_i)` for a diagonal bias
/// geometry.
pub fn bias_budgets(rho: f64, bias_weights: &[f64]) -> Vec<f64> {
    bias_weights.iter().map(|&b| rho / b.sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offline::fit_ridge;

    #[test]
    fn fixed_action_set_round_is_the_set() {
        let e1 = Vector::basis(2, 0);
        let e2 = Vector::basis(2, 1);
        let inst = BanditInstance {
            theta_star: Vector::zeros(2),
            k: 2,
            d: 2,
            sigma: 0.0,
            s_bound: 1.0,
            context_law: SupportLaw::FixedActionSet(vec![e1.clone(), e2.clone()]),
            reward_model: RewardModel::Gaussian,
        };
        let mut rng = RunRngs::derive(0, 0).contexts;
        let round = sample_round(&inst, 1, &mut rng);
        assert_eq!(round.arms[0], e1);
        assert_eq!(round.arms[1], e2);
    }

    #[test]
    fn gaussian_contexts_stay_in_unit_ball() {
        for normalize in [Normalize::Clip, Normalize::Always] {
            let inst = BanditInstance {
                theta_star: Vector::zeros(5),
                k: 1,
                d: 5,
                sigma: 0.0,
                s_bound: 1.0,
                context_law: SupportLaw::GaussianUnitBall { normalize },
                reward_model: RewardModel::Gaussian,
            };
            let mut rng = RunRngs::derive(7, 0).contexts;
            for t in 0..10_000 {
                let round = sample_round(&inst, t, &mut rng);
                assert!(round.arms[0].norm2() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn box_support_respects_narrow_coordinates() {
        // Narrow support on coordinates 2..d, wide on the first.
        let d = 5;
        let w = 0.01;
        let mut lower = vec![0.0; d];
        let mut upper = vec![w; d];
        lower[0] = 0.0;
        upper[0] = 1.0;
        let spec = OfflineSpec {
            theta_dagger: Vector::zeros(d),
            n_off: 2000,
            covariate_law: SupportLaw::BoxSupport { lower, upper },
            reward_model: RewardModel::Gaussian,
        };
        let mut rng = RunRngs::derive(3, 0).offline_noise;
        let data = generate_offline(&spec, 0.0, &mut rng);
        for (z, _) in data.pairs() {
            assert!(z.norm2() <= 1.0 + 1e-12);
            for j in 1..d {
                assert!(z.as_slice()[j].abs() <= w + 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_pull_is_the_mean() {
        let theta = Vector::new(vec![2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let inst = BanditInstance {
            theta_star: theta.clone(),
            k: 1,
            d: 5,
            sigma: 0.0,
            s_bound: theta.norm2(),
            context_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let mut rng = RunRngs::derive(0, 0).online_noise;
        let x = Vector::basis(5, 0);
        assert_eq!(pull(&inst, &x, &mut rng), 2.0);
    }

    #[test]
    fn zero_direction_pull_is_centered_noise() {
        let inst = BanditInstance {
            theta_star: Vector::zeros(2),
            k: 1,
            d: 2,
            sigma: 1.0,
            s_bound: 1.0,
            context_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let mut rng = RunRngs::derive(5, 0).online_noise;
        let x = Vector::zeros(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| pull(&inst, &x, &mut rng)).sum::<f64>() / n as f64;
        // 4 sigma / sqrt(n) band around zero.
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean = {mean}");
    }

    #[test]
    fn offline_generation_trivial_cases() {
        let spec = OfflineSpec {
            theta_dagger: Vector::basis(3, 0),
            n_off: 0,
            covariate_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let mut rng = RunRngs::derive(0, 0).offline_noise;
        assert_eq!(generate_offline(&spec, 0.1, &mut rng).pairs().len(), 0);

        let spec = OfflineSpec { n_off: 50, ..spec };
        let data = generate_offline(&spec, 0.0, &mut rng);
        for (z, y) in data.pairs() {
            assert_eq!(*y, z.as_slice()[0]);
        }
    }

    #[test]
    fn determinism_identical_seeds_identical_streams() {
        let inst = BanditInstance {
            theta_star: Vector::new(vec![0.3, -0.2, 0.1]).unwrap(),
            k: 4,
            d: 3,
            sigma: 0.5,
            s_bound: 1.0,
            context_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let mut a = RunRngs::derive(42, 3);
        let mut b = RunRngs::derive(42, 3);
        for t in 0..100 {
            let ra = sample_round(&inst, t, &mut a.contexts);
            let rb = sample_round(&inst, t, &mut b.contexts);
            for (x, y) in ra.arms.iter().zip(&rb.arms) {
                assert_eq!(x.as_slice(), y.as_slice());
            }
            let pa = pull(&inst, &ra.arms[0], &mut a.online_noise);
            let pb = pull(&inst, &rb.arms[0], &mut b.online_noise);
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn hard_triple_construction_values() {
        let triple = make_hard_triple(0.25, 0.0625).unwrap();
        // x0 . theta_good = 1/2 + rho0 + rho_bar.
        let x0 = &triple.actions[0];
        let mean = x0.dot(&triple.good.theta_star);
        let rho_bar = 0.0625 / 2.0_f64.sqrt();
        assert!((mean - (0.5 + 0.25 + rho_bar)).abs() < 1e-12);
        assert!((mean - 0.794194).abs() < 1e-6);
        // All three parameter gaps are exactly rho (checked at build; verify
        // once more from outside).
        for inst in [&triple.plus, &triple.minus, &triple.good] {
            let gap = inst.theta_star.sub(&triple.offline.theta_dagger).norm2();
            assert!((gap - 0.0625).abs() <= 1e-12);
        }
        // x0 is optimal under the good instance at every round.
        let best = triple
            .actions
            .iter()
            .map(|x| x.dot(&triple.good.theta_star))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, x0.dot(&triple.good.theta_star));
        // All online means are Bernoulli-feasible.
        for inst in [&triple.plus, &triple.minus, &triple.good] {
            for x in &triple.actions {
                let m = x.dot(&inst.theta_star);
                assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn hard_triple_rejects_bad_radii() {
        assert!(make_hard_triple(0.3, 0.01).is_err());
        assert!(make_hard_triple(0.25, 0.1).is_err());
    }

    #[test]
    fn diag_instance_schedule_and_ridge() {
        let means = DiagMeans {
            theta_star: vec![0.5; 5],
            theta_dagger: vec![0.5; 5],
        };
        let diag = make_diag_instance(&[100, 0, 0, 0, 0], &[1.0; 5], &means).unwrap();
        let mut rng = RunRngs::derive(1, 0).offline_noise;
        let data = generate_offline(&diag.offline, 0.0, &mut rng);
        assert_eq!(data.pairs().len(), 100);
        for (z, _) in data.pairs() {
            assert_eq!(z.as_slice(), Vector::basis(5, 0).as_slice());
        }
        let ridge = fit_ridge(&data).unwrap();
        assert!((ridge.g_off.entry(0, 0) - 101.0).abs() < 1e-9);
        for i in 1..5 {
            assert!((ridge.g_off.entry(i, i) - 1.0).abs() < 1e-9);
        }

        // Zero counts leave the pure ridge design.
        let diag0 = make_diag_instance(&[0; 5], &[1.0; 5], &means).unwrap();
        let data0 = generate_offline(&diag0.offline, 0.0, &mut rng);
        let ridge0 = crate::offline::fit_ridge_with_dim(&data0, 5).unwrap();
        for i in 0..5 {
            assert!((ridge0.g_off.entry(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_budget_formula() {
        let v = bias_budgets(0.5, &[4.0, 1.0, 0.25]);
        assert_eq!(v, vec![0.25, 0.5, 1.0]);
    }
}
