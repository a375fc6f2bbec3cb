//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::process::Command;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use transfer_bandit::diagnostics;
use transfer_bandit::env::{
    generate_offline, make_hard_triple, pull, sample_round, BanditInstance, Normalize, OfflineSpec,
    RewardModel, RunRngs, SupportLaw,
};
use transfer_bandit::harness;
use transfer_bandit::offline::{fit_ridge, fit_ridge_with_dim, BiasCertificate, OfflineDataset};
use transfer_bandit::policy::{
    pooled_estimator, pooled_gamma, pooled_radius, LayerState, PolicyConfig, PolicyMode,
};
use transfer_bandit::sim::simulate;
use transfer_bandit::spd::{self, SpdMatrix, Vector};

fn report(criterion: usize, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {criterion} ({name}): {verdict} — {detail}");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn random_vector(d: usize, rng: &mut ChaCha12Rng) -> Vector {
    Vector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_spd(d: usize, rng: &mut ChaCha12Rng) -> SpdMatrix {
    let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in 0..d {
                s += a[k * d + i] * a[k * d + j];
            }
            m[i * d + j] = s;
        }
    }
    SpdMatrix::from_entries(d, m).unwrap()
}

/// Dense symmetric Jacobi eigen-decomposition with eigenvectors, used only to
/// form explicit matrix square roots for the power-method oracle.
fn jacobi_with_vectors(d: usize, entries: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = entries.to_vec();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _ in 0..300 {
        let mut off = 0.0_f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off = off.max(a[i * d + j].abs());
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apq = a[p * d + r];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[r * d + r] - a[p * d + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + r];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + r] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[r * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[r * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkq = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkq;
                    q[k * d + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    let eigs: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eigs, q)
}

/// Brute-force grid maximization of `sum_j log(1 + a_j / g_j)` subject to
/// `a_j >= 0`, `sum a_j <= B`: a 200-point-per-axis dynamic program, refined
/// around its own optimum for four passes. Independent of the closed-form
/// water-level solve.
fn waterfill_grid_oracle(eigs: &[f64], budget: f64) -> f64 {
    let n = 200usize;
    let d = eigs.len();
    let mut lo = vec![0.0; d];
    let mut h = budget / n as f64;
    let mut alloc = vec![0.0; d];
    for _pass in 0..4 {
        let reserved: f64 = lo.iter().sum();
        let m_units = (((budget - reserved) / h).floor() as usize).max(1);
        let neg = f64::NEG_INFINITY;
        let mut prev = vec![neg; m_units + 1];
        prev[0] = 0.0;
        let mut choice = vec![vec![0usize; m_units + 1]; d];
        for j in 0..d {
            let mut cur = vec![neg; m_units + 1];
            for m in 0..=m_units {
                for k in 0..=n.min(m) {
                    if prev[m - k] == neg {
                        continue;
                    }
                    let val = prev[m - k] + (1.0 + (lo[j] + k as f64 * h) / eigs[j]).ln();
                    if val > cur[m] {
                        cur[m] = val;
                        choice[j][m] = k;
                    }
                }
            }
            prev = cur;
        }
        let mut best_m = 0;
        for m in 0..=m_units {
            if prev[m] > prev[best_m] {
                best_m = m;
            }
        }
        let mut m = best_m;
        for j in (0..d).rev() {
            let k = choice[j][m];
            alloc[j] = lo[j] + k as f64 * h;
            m -= k;
        }
        let window = (d as f64 + 2.0) * h;
        for j in 0..d {
            lo[j] = (alloc[j] - window).max(0.0);
        }
        h = 2.0 * window / n as f64;
    }
    alloc
        .iter()
        .zip(eigs)
        .map(|(a, g)| (1.0 + a / g).ln())
        .sum()
}

#[test]
fn criterion_1_exact_math_property_suite() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xACC1);

    // Matrix-determinant lemma on 1000 random rank-one updates, d <= 8.
    let mut worst_det = 0.0_f64;
    for i in 0..1000 {
        let d = 2 + (i % 7);
        let m = random_spd(d, &mut rng);
        let x = random_vector(d, &mut rng);
        let updated = m.rank_one_update(&x).unwrap();
        // det(M + x x^T) = det(M) (1 + ||x||^2_{M^{-1}}), compared in log
        // space where relative det error is absolute.
        let gap =
            (updated.log_det() - m.log_det() - (1.0 + m.inv_norm(&x).unwrap().powi(2)).ln()).abs();
        worst_det = worst_det.max(gap);
    }
    assert!(worst_det <= 1e-8, "determinant lemma drift {worst_det}");

    // Parallel-sum variational identity on 500 random (A, B, x) triples.
    let mut worst_par = 0.0_f64;
    for i in 0..500 {
        let d = 2 + (i % 5);
        let a = random_spd(d, &mut rng);
        let b = random_spd(d, &mut rng);
        let x = random_vector(d, &mut rng);
        let m = spd::parallel_sum(&a, &b).unwrap();
        let sum = a.add_sym(b.entries()).unwrap();
        let u = Vector::new(sum.solve(&b.mul_vec(x.as_slice()))).unwrap();
        let v = x.sub(&u);
        let lhs = m.elliptic_norm(&x).unwrap().powi(2);
        let rhs = a.elliptic_norm(&u).unwrap().powi(2) + b.elliptic_norm(&v).unwrap().powi(2);
        worst_par = worst_par.max((lhs - rhs).abs() / rhs.max(1.0));
    }
    assert!(worst_par <= 1e-8, "parallel-sum identity drift {worst_par}");

    // Waterfilling vs the grid oracle at d <= 5, B in {0.5, 1, 5, 20}.
    let mut worst_wf = 0.0_f64;
    for d in 2..=5 {
        let eigs: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..4.0)).collect();
        let g = SpdMatrix::diag(&eigs).unwrap();
        for budget in [0.5, 1.0, 5.0, 20.0] {
            let exact = spd::waterfill_phi(&g, budget).unwrap();
            let grid = waterfill_grid_oracle(&eigs, budget);
            worst_wf = worst_wf.max((exact - grid).abs());
        }
    }
    // And on non-diagonal G, where the oracle works on the Jacobi spectrum.
    for _ in 0..4 {
        let g = random_spd(4, &mut rng);
        let eigs = spd::sym_eigenvalues(4, g.entries()).unwrap();
        for budget in [0.5, 1.0, 5.0, 20.0] {
            let exact = spd::waterfill_phi(&g, budget).unwrap();
            let grid = waterfill_grid_oracle(&eigs, budget);
            worst_wf = worst_wf.max((exact - grid).abs());
        }
    }
    assert!(
        worst_wf <= 1e-4,
        "waterfill vs grid oracle drift {worst_wf}"
    );

    // Generalized eigenvalue vs power iteration on the explicitly formed
    // G^{1/2} M^{-1} G^{1/2}.
    let mut worst_ge = 0.0_f64;
    for _ in 0..20 {
        let d = 4;
        let g = random_spd(d, &mut rng);
        let m = random_spd(d, &mut rng);
        let (eigs, q) = jacobi_with_vectors(d, g.entries());
        let mut g_sqrt = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += q[i * d + k] * eigs[k].sqrt() * q[j * d + k];
                }
                g_sqrt[i * d + j] = s;
            }
        }
        // target = G^{1/2} M^{-1} G^{1/2} via column solves on M.
        let mut target = vec![0.0; d * d];
        for j in 0..d {
            let col: Vec<f64> = (0..d).map(|i| g_sqrt[i * d + j]).collect();
            let minv_col = m.solve(&col);
            for i in 0..d {
                target[i * d + j] = minv_col[i];
            }
        }
        let mut full = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += g_sqrt[i * d + k] * target[k * d + j];
                }
                full[i * d + j] = s;
            }
        }
        let mut v = vec![1.0; d];
        for _ in 0..50_000 {
            let mut w = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    w[i] += full[i * d + j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        // Rayleigh quotient of the converged vector.
        let mut av = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                av[i] += full[i * d + j] * v[j];
            }
        }
        let rayleigh: f64 = av.iter().zip(&v).map(|(a, b)| a * b).sum();
        let got = spd::gen_eig_max(&g, &m).unwrap();
        worst_ge = worst_ge.max((got - rayleigh).abs() / rayleigh.max(1.0));
    }
    assert!(worst_ge <= 1e-8, "gen_eig vs power method drift {worst_ge}");

    let elapsed = started.elapsed();
    report(
        1,
        "exact-math property suite",
        elapsed.as_secs() < 30,
        &format!(
            "det {worst_det:.2e}, parallel {worst_par:.2e}, waterfill {worst_wf:.2e}, \
             gen-eig {worst_ge:.2e}, runtime {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_2_trajectory_invariants_via_selftest() {
    let started = std::time::Instant::now();
    let result = harness::selftest(std::io::sink());
    report(
        2,
        "trajectory invariants (selftest, T=500, 20 seeds)",
        result.is_ok(),
        &format!(
            "{} in {:.1?}",
            result
                .map(|_| "all suites ok")
                .unwrap_or_else(|e| { Box::leak(format!("{e}").into_boxed_str()) }),
            started.elapsed()
        ),
    );
}

#[test]
fn criterion_3_confidence_coverage_monte_carlo() {
    let started = std::time::Instant::now();
    let d = 3;
    let theta_star = Vector::new(vec![0.7, 0.4, 0.2]).unwrap();
    let theta_dagger = Vector::new(vec![0.55, 0.5, 0.15]).unwrap();
    let gap = theta_star.sub(&theta_dagger).norm2();
    let cert = BiasCertificate::new(SpdMatrix::identity(d), gap * 1.0000001).unwrap();
    let instance = BanditInstance {
        s_bound: theta_star.norm2().max(theta_dagger.norm2()),
        theta_star: theta_star.clone(),
        k: 3,
        d,
        sigma: 0.1,
        context_law: SupportLaw::GaussianUnitBall {
            normalize: Normalize::Always,
        },
        reward_model: RewardModel::Gaussian,
    };
    assert!(
        transfer_bandit::offline::certificate_valid(&cert, &theta_star, &theta_dagger).unwrap()
    );

    let mut scored = 0usize;
    let mut violations = 0usize;
    for run_idx in 0..200u64 {
        let mut rngs = RunRngs::derive(1000, run_idx);
        let spec = OfflineSpec {
            theta_dagger: theta_dagger.clone(),
            n_off: 200,
            covariate_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let data = generate_offline(&spec, instance.sigma, &mut rngs.offline_noise);
        let ridge = fit_ridge(&data).unwrap();
        let cfg = PolicyConfig::new(
            500,
            instance.sigma,
            instance.s_bound,
            PolicyMode::FixedCertificate,
        );
        let outcome = simulate(&instance, &ridge, Some(&cert), cfg, &mut rngs).unwrap();
        scored += outcome.checks.scored_pairs;
        violations += outcome.checks.containment_violations;
    }
    let fraction = violations as f64 / scored as f64;
    let elapsed = started.elapsed();
    report(
        3,
        "confidence coverage Monte Carlo",
        fraction <= 0.01 && elapsed.as_secs() <= 120,
        &format!(
            "{violations} violations over {scored} scored pairs ({:.4}%), runtime {elapsed:.1?}",
            100.0 * fraction
        ),
    );
}

#[test]
fn criterion_4_epoch_certificate_validity() {
    let d = 3;
    let theta_star = Vector::new(vec![0.8, 0.3, 0.2]).unwrap();
    let theta_dagger = Vector::new(vec![0.6, 0.45, 0.2]).unwrap();
    let true_gap = theta_star.sub(&theta_dagger);
    let instance = BanditInstance {
        s_bound: theta_star.norm2().max(theta_dagger.norm2()),
        theta_star: theta_star.clone(),
        k: 3,
        d,
        sigma: 0.1,
        context_law: SupportLaw::GaussianUnitBall {
            normalize: Normalize::Always,
        },
        reward_model: RewardModel::Gaussian,
    };
    let mut valid_runs = 0usize;
    let n_runs = 200;
    for run_idx in 0..n_runs {
        let mut rngs = RunRngs::derive(2000, run_idx);
        let spec = OfflineSpec {
            theta_dagger: theta_dagger.clone(),
            n_off: 200,
            covariate_law: SupportLaw::GaussianUnitBall {
                normalize: Normalize::Always,
            },
            reward_model: RewardModel::Gaussian,
        };
        let data = generate_offline(&spec, instance.sigma, &mut rngs.offline_noise);
        let ridge = fit_ridge(&data).unwrap();
        let mut cfg = PolicyConfig::new(
            256,
            instance.sigma,
            instance.s_bound,
            PolicyMode::EpochCertificate,
        );
        cfg.delta_bias = 0.05;
        let outcome = simulate(&instance, &ridge, None, cfg, &mut rngs).unwrap();
        assert_eq!(outcome.epoch_certs.len(), 9, "doubling epochs at T=256");
        let all_valid = outcome
            .epoch_certs
            .iter()
            .all(|cert| cert.m_hat.elliptic_norm(&true_gap).unwrap() <= cert.rho_hat);
        if all_valid {
            valid_runs += 1;
        }
    }
    let fraction = valid_runs as f64 / n_runs as f64;
    report(
        4,
        "epoch-certificate simultaneous validity",
        fraction >= 0.94,
        &format!(
            "{valid_runs}/{n_runs} runs valid over every epoch ({:.1}%)",
            100.0 * fraction
        ),
    );
}

fn main_study_config(out: &str) -> String {
    format!(
        r#"
[instance]
d = 5
k = 5
sigma = 0.1
s = auto
theta_star = [1.1, 1, 1, 1, 1]
context_law = gaussian
normalize = always

[offline]
theta_dagger = [1, 1.1, 1, 1, 1]
n_off = 2000
covariate_law = gaussian
normalize = always

[certificate]
kind = fixed
rho = 0.2121321
m_bias = diag: [1, 1, 1, 1, 1]
delta_bias = 0.05

[run]
t = 5000
runs = 20
base_seed = 42
policies = [suplinucb, minucb, epoch_minucb, warmstart, offline_greedy]
out = {out}
checkpoints = 200
threads = 4

[sweep]
scenario = s1.1 | instance.theta_star=[1.1,1,1,1,1]; offline.theta_dagger=[1,1.1,1,1,1]; certificate.rho=0.2121321
scenario = s2 | instance.theta_star=[2,1,1,1,1]; offline.theta_dagger=[1,2,1,1,1]; certificate.rho=2.1213204
scenario = s10 | instance.theta_star=[10,1,1,1,1]; offline.theta_dagger=[1,10,1,1,1]; certificate.rho=19.0918831
"#
    )
}

#[test]
fn criterion_5_main_study_ordering_at_reduced_scale() {
    let started = std::time::Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("main");
    let text = main_study_config(&out.display().to_string());
    let cfg = harness::load_experiment(&text, true).unwrap();
    let result = harness::run_experiment(&cfg).unwrap();
    assert_eq!(result.failures, 0, "no run may fail its invariants");

    let final_of = |scenario: &str, policy: &str| -> f64 {
        result
            .curves
            .iter()
            .find(|c| c.scenario == scenario && c.policy == policy)
            .map(|c| c.final_mean())
            .unwrap_or_else(|| panic!("missing curve {scenario}/{policy}"))
    };

    let mut detail = String::new();
    let mut ok = true;
    // (a) pooling never hurts at mild and moderate mismatch.
    for scenario in ["s1.1", "s2"] {
        let minucb = final_of(scenario, "minucb");
        let suplin = final_of(scenario, "suplinucb");
        detail.push_str(&format!(
            "{scenario}: minucb {minucb:.1} vs suplinucb {suplin:.1}; "
        ));
        ok &= minucb <= suplin;
    }
    // (b) the non-adaptive policy pays at least 5x at severe mismatch.
    let greedy = final_of("s10", "offline_greedy");
    for policy in ["suplinucb", "minucb", "epoch_minucb", "warmstart"] {
        let adaptive = final_of("s10", policy);
        detail.push_str(&format!(
            "s10: greedy {greedy:.1} vs {policy} {adaptive:.1}; "
        ));
        ok &= greedy >= 5.0 * adaptive;
    }
    // (c) the learned certificate stays within 2x of the fixed one.
    for scenario in ["s1.1", "s2", "s10"] {
        let epoch = final_of(scenario, "epoch_minucb");
        let fixed = final_of(scenario, "minucb");
        detail.push_str(&format!(
            "{scenario}: epoch {epoch:.1} vs fixed {fixed:.1}; "
        ));
        ok &= epoch <= 2.0 * fixed;
    }
    let elapsed = started.elapsed();
    ok &= elapsed.as_secs() <= 600;
    report(
        5,
        "main-study ordering at reduced scale",
        ok,
        &format!("{detail}runtime {elapsed:.1?}"),
    );
}

#[test]
fn criterion_6_diagonal_specialization_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xD1A6);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let d = rng.random_range(2..=6);
        let mut pairs = Vec::new();
        for i in 0..d {
            for _ in 0..rng.random_range(0..10) {
                pairs.push((Vector::basis(d, i), rng.random_range(-1.0..1.0)));
            }
        }
        let ridge = if pairs.is_empty() {
            fit_ridge_with_dim(&OfflineDataset::default(), d).unwrap()
        } else {
            fit_ridge(&OfflineDataset::new(pairs).unwrap()).unwrap()
        };
        let m_bias = SpdMatrix::diag(
            &(0..d)
                .map(|_| rng.random_range(0.2..5.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cert = BiasCertificate::new(m_bias, rng.random_range(0.0..2.0)).unwrap();
        let mut layer = LayerState::new(d, 0, Some(&ridge.g_off)).unwrap();
        for _ in 0..rng.random_range(0..15) {
            let arm = rng.random_range(0..d);
            layer
                .update(
                    &Vector::basis(d, arm),
                    rng.random_range(-1.0..1.0),
                    Some(&ridge.g_off),
                )
                .unwrap();
        }
        let delta = 0.02;
        let sigma = 0.25;
        let beta_off_val = 1.1;
        let gamma = pooled_gamma(&layer, &ridge, delta, sigma).unwrap();
        let theta_pool = pooled_estimator(&layer, &ridge).unwrap();
        for arm in 0..d {
            let x = Vector::basis(d, arm);
            let matrix_path = x.dot(&theta_pool)
                + pooled_radius(&layer, &ridge, &cert, delta, beta_off_val, sigma, &x).unwrap();
            let closed_form =
                diagnostics::diagonal_oracle(&layer, &ridge, &cert, arm, gamma + beta_off_val)
                    .unwrap();
            worst = worst.max((matrix_path - closed_form).abs());
        }
    }
    report(
        6,
        "diagonal-specialization oracle",
        worst <= 1e-10,
        &format!("max |matrix - closed form| = {worst:.2e} over 100 instances"),
    );
}

#[test]
fn criterion_7_hard_triple_sanity() {
    let rho0 = 0.25;
    let rho = 0.0625;
    let triple = make_hard_triple(rho0, rho).unwrap();
    let t_horizon = 2000usize;

    // Under the good instance the fixed x0 policy has regret exactly 0.
    let mut rngs = RunRngs::derive(7, 0);
    let mut good_regret = 0.0;
    for t in 0..t_horizon {
        let round = sample_round(&triple.good, t, &mut rngs.contexts);
        let means: Vec<f64> = round
            .arms
            .iter()
            .map(|x| x.dot(&triple.good.theta_star))
            .collect();
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = pull(&triple.good, &round.arms[0], &mut rngs.online_noise);
        good_regret += best - means[0];
    }
    assert_eq!(good_regret, 0.0, "x0 is optimal every round under I_good");

    // Under the minus instance, any policy playing x0/x+ in at least T/2
    // rounds pays at least 0.8 (T/2) (sqrt(rho0^2 + rho_bar^2) - rho0);
    // OfflineGreedy is the canonical violator.
    let gap = triple.minus_gap;
    let bound = 0.8 * (t_horizon as f64 / 2.0) * gap;
    let mut qualifying = Vec::new();
    for run_idx in 0..50u64 {
        let mut rngs = RunRngs::derive(9000, run_idx);
        let data = generate_offline(&triple.offline, triple.minus.sigma, &mut rngs.offline_noise);
        let ridge = fit_ridge(&data).unwrap();
        let cfg = PolicyConfig::new(
            t_horizon,
            triple.minus.sigma,
            triple.minus.s_bound,
            PolicyMode::OfflineGreedy,
        );
        let outcome = simulate(&triple.minus, &ridge, None, cfg, &mut rngs).unwrap();
        let x0_xplus_rounds = outcome
            .trace
            .rows
            .iter()
            .filter(|r| r.arm == 0 || r.arm == 1)
            .count();
        if x0_xplus_rounds >= t_horizon / 2 {
            qualifying.push(outcome.trace.final_regret());
        }
    }
    let mean_regret = qualifying.iter().sum::<f64>() / qualifying.len().max(1) as f64;
    report(
        7,
        "hard-triple sanity",
        !qualifying.is_empty() && mean_regret >= bound,
        &format!(
            "good-instance regret 0 exactly; {}/50 greedy runs qualified, \
             mean regret {mean_regret:.2} >= bound {bound:.2}",
            qualifying.len()
        ),
    );
}

#[test]
fn criterion_8_run_determinism_across_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("exp.conf");
    let out1 = tmp.path().join("out1");
    let out2 = tmp.path().join("out2");
    let config = r#"
[instance]
d = 3
k = 3
sigma = 0.1
s = auto
theta_star = [0.9, 0.4, 0.2]
context_law = gaussian
normalize = always

[offline]
theta_dagger = [0.8, 0.5, 0.2]
n_off = 100
covariate_law = gaussian
normalize = always

[certificate]
kind = fixed
rho = 0.15
m_bias = diag: [1, 1, 1]

[run]
t = 300
runs = 4
base_seed = 11
policies = [suplinucb, minucb, epoch_minucb, warmstart, offline_greedy]
out = unused
checkpoints = 50
threads = 1
"#;
    std::fs::write(&config_path, config).unwrap();

    let bin = env!("CARGO_BIN_EXE_transfer-bandit");
    let run = |out: &std::path::Path, threads: &str| {
        let status = Command::new(bin)
            .args([
                "run",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ])
            .status()
            .expect("binary runs");
        assert!(status.success(), "run exited nonzero");
    };
    run(&out1, "1");
    run(&out2, "4");

    let mut names: Vec<String> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    assert!(names.contains(&"summary.csv".to_string()));
    assert!(names.len() > 1, "trace CSVs present");
    for name in &names {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs/thread counts");
    }
    report(
        8,
        "byte-identical reruns across thread counts",
        true,
        &format!("{} CSV files identical", names.len()),
    );
}

#[test]
fn cli_env_seed_override() {
    // TRANSFER_BANDIT_SEED takes precedence over --seed: a run with
    // TRANSFER_BANDIT_SEED=99 --seed 11 matches a plain --seed 99 run.
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("exp.conf");
    std::fs::write(
        &config_path,
        r#"
[instance]
d = 2
k = 2
sigma = 0.1
s = auto
theta_star = [1.0, 0.5]
context_law = gaussian
normalize = always

[offline]
theta_dagger = [0.9, 0.6]
n_off = 30
covariate_law = gaussian
normalize = always

[certificate]
kind = none

[run]
t = 50
runs = 2
base_seed = 1
policies = [suplinucb]
out = unused
checkpoints = 5
"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_transfer-bandit");
    let out_flag = tmp.path().join("by_flag");
    let out_env = tmp.path().join("by_env");
    let status = Command::new(bin)
        .args([
            "run",
            config_path.to_str().unwrap(),
            "--seed",
            "99",
            "--out",
            out_flag.to_str().unwrap(),
            "--no-svg",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let status = Command::new(bin)
        .args([
            "run",
            config_path.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out_env.to_str().unwrap(),
            "--no-svg",
        ])
        .env("TRANSFER_BANDIT_SEED", "99")
        .status()
        .unwrap();
    assert!(status.success());
    let a = std::fs::read(out_flag.join("trace_base_suplinucb_99.csv")).unwrap();
    let b = std::fs::read(out_env.join("trace_base_suplinucb_99.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_transfer-bandit");
    // Missing config file: exit 2, message names the path.
    let output = Command::new(bin)
        .args(["run", "/nonexistent/path.conf"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("/nonexistent/path.conf"));
    // Unknown subcommand: exit 2 with usage text.
    let output = Command::new(bin).args(["frobnicate"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
