//! Independent analytic and brute-force implementations of the theoretical
//! quantities the trainer relies on. Everything here is used only by tests
//! and the `verify` command, and none of it calls the training-path code it
//! checks (shared substrate: `ParamVector` forward/VJP).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::critic::CriticFn;
use crate::error::{Error, Result};
use crate::flow::DenoisingTrajectory;
use crate::numerics::ParamVector;

/// Finite distribution over at most 64 atoms.
#[derive(Debug, Clone)]
pub struct DiscreteDist {
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.len() != probs.len() {
            return Err(Error::Shape(format!(
                "{} atoms vs {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        if atoms.is_empty() || atoms.len() > 64 {
            return Err(Error::Domain(format!(
                "support size must lie in 1..=64, got {}",
                atoms.len()
            )));
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Domain("negative probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { atoms, probs })
    }

    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        let n = atoms.len();
        let probs = vec![1.0 / n as f64; n];
        Self::new(atoms, probs)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Exponential tilting `p_i proportional to base_i * exp(beta * q_i)`,
/// computed with a max shift for stability.
pub fn tilt_distribution(base: &DiscreteDist, q_values: &[f64], beta: f64) -> Result<DiscreteDist> {
    if q_values.len() != base.len() {
        return Err(Error::Shape(format!(
            "{} critic values for {} atoms",
            q_values.len(),
            base.len()
        )));
    }
    let qmax = q_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = base
        .probs
        .iter()
        .zip(q_values)
        .map(|(p, q)| p * (beta * (q - qmax)).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    DiscreteDist::new(
        base.atoms.clone(),
        weights.into_iter().map(|w| w / z).collect(),
    )
}

/// Exact KL divergence between aligned finite distributions.
pub fn kl_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(
            "distributions have different supports".into(),
        ));
    }
    let mut kl = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q.probs) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return Err(Error::Domain(
                    "q vanishes on the support of p; KL undefined".into(),
                ));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// Total variation distance, `0.5 * ||p - q||_1`.
pub fn tv_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(
            "distributions have different supports".into(),
        ));
    }
    Ok(0.5
        * p.probs
            .iter()
            .zip(&q.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Outcome of one exponential-tilting bound check.
#[derive(Debug, Clone, Serialize)]
pub struct TiltBoundReport {
    pub epsilon: f64,
    pub beta: f64,
    pub kl: f64,
    pub kl_bound: f64,
    pub tv: f64,
    pub tv_bound: f64,
    pub ratio_ok: bool,
    pub pass: bool,
}

/// Check the error-amplification bounds for exponentially tilted
/// distributions: with `eps = max |Q - Q~|`,
/// `KL(pi_Q || pi_Q~) <= 2 beta eps` and `TV <= (e^{2 beta eps} - 1) / 2`,
/// plus the atomwise likelihood-ratio bound
/// `e^{-2 beta eps} <= pi_Q / pi_Q~ <= e^{2 beta eps}`.
pub fn check_lemma_tilt_bounds(
    base: &DiscreteDist,
    q: &[f64],
    q_tilde: &[f64],
    beta: f64,
) -> Result<TiltBoundReport> {
    if q.len() != base.len() || q_tilde.len() != base.len() {
        return Err(Error::Shape(
            "critic value lengths do not match support".into(),
        ));
    }
    let epsilon = q
        .iter()
        .zip(q_tilde)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let p_q = tilt_distribution(base, q, beta)?;
    let p_qt = tilt_distribution(base, q_tilde, beta)?;
    let kl = kl_discrete(&p_q, &p_qt)?;
    let tv = tv_discrete(&p_q, &p_qt)?;
    let kl_bound = 2.0 * beta * epsilon;
    let tv_bound = 0.5 * ((2.0 * beta * epsilon).exp() - 1.0);
    let slack = 1e-9;
    let (lo, hi) = ((-2.0 * beta * epsilon).exp(), (2.0 * beta * epsilon).exp());
    let ratio_ok = p_q
        .probs
        .iter()
        .zip(&p_qt.probs)
        .filter(|(_, qt)| **qt > 0.0)
        .all(|(p, qt)| {
            let r = p / qt;
            r >= lo - slack && r <= hi + slack
        });
    let pass = kl <= kl_bound + slack && tv <= tv_bound + slack && ratio_ok;
    Ok(TiltBoundReport {
        epsilon,
        beta,
        kl,
        kl_bound,
        tv,
        tv_bound,
        ratio_ok,
        pass,
    })
}

/// Randomized sweep of the tilting bounds. Returns the number of violations
/// and the smallest KL-bound margin seen.
pub fn tilt_bounds_random_sweep(instances: usize, seed: u64) -> Result<(usize, f64)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..instances {
        let n = rng.random_range(2..=16);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        let base = DiscreteDist::new(
            (0..n).map(|i| i as f64).collect(),
            raw.iter().map(|w| w / z).collect(),
        )?;
        let q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let eps_target = rng.random::<f64>();
        let q_tilde: Vec<f64> = q
            .iter()
            .map(|v| v + (rng.random::<f64>() * 2.0 - 1.0) * eps_target)
            .collect();
        let beta = rng.random::<f64>() * 10.0;
        let report = check_lemma_tilt_bounds(&base, &q, &q_tilde, beta)?;
        if !report.pass {
            violations += 1;
        }
        min_margin = min_margin.min(report.kl_bound - report.kl);
    }
    Ok((violations, min_margin))
}

/// Exact KL of a shared-covariance Gaussian Markov chain whose per-step mean
/// deltas are state-independent: `sum_k ||dmu_k||^2 / (2 var_k)`.
pub fn exact_gaussian_chain_kl(mean_deltas: &[Vec<f64>], variances: &[f64]) -> Result<f64> {
    if mean_deltas.len() != variances.len() {
        return Err(Error::Shape(format!(
            "{} mean deltas vs {} variances",
            mean_deltas.len(),
            variances.len()
        )));
    }
    let mut kl = 0.0;
    for (dmu, &var) in mean_deltas.iter().zip(variances) {
        if !(var > 0.0) {
            return Err(Error::Domain(format!(
                "variance must be positive, got {var}"
            )));
        }
        kl += dmu.iter().map(|d| d * d).sum::<f64>() / (2.0 * var);
    }
    Ok(kl)
}

/// Ornstein-Uhlenbeck base dynamics
/// `dX = -theta X dtau + sqrt(lambda) sigma0 dB`.
#[derive(Debug, Clone, Copy)]
pub struct OuDrift {
    pub theta: f64,
    pub sigma0: f64,
}

/// Monte-Carlo estimate of the quadratic control cost
/// `E[(1 / 2 lambda) int ||u||^2 dtau]` along controlled paths, with its
/// standard error. Simulated on a grid of `n_steps` Euler cells (use at
/// least 10x the policy grid).
pub fn girsanov_mc_kl(
    control: &dyn Fn(f64, f64) -> f64,
    lambda: f64,
    drift: &OuDrift,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    girsanov_estimator(control, lambda, drift, n_paths, n_steps, seed, false)
}

/// Independent estimator of the same path KL: the Monte-Carlo average of the
/// Girsanov log-likelihood ratio `log dP^u/dP^base` along controlled paths.
pub fn girsanov_llr_kl(
    control: &dyn Fn(f64, f64) -> f64,
    lambda: f64,
    drift: &OuDrift,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    girsanov_estimator(control, lambda, drift, n_paths, n_steps, seed, true)
}

fn girsanov_estimator(
    control: &dyn Fn(f64, f64) -> f64,
    lambda: f64,
    drift: &OuDrift,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    log_likelihood_ratio: bool,
) -> Result<(f64, f64)> {
    if n_paths < 1000 {
        return Err(Error::Domain(format!(
            "need at least 1000 paths, got {n_paths}"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let h = 1.0 / n_steps as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Welford accumulation keeps the variance stable when all path costs
    // coincide (deterministic integrand).
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for path in 0..n_paths {
        let mut x: f64 = StandardNormal.sample(&mut rng);
        let mut acc = 0.0;
        for k in 0..n_steps {
            let tau = k as f64 * h;
            let u = control(x, tau);
            let eps: f64 = StandardNormal.sample(&mut rng);
            acc += if log_likelihood_ratio {
                u / lambda.sqrt() * h.sqrt() * eps + h * u * u / (2.0 * lambda)
            } else {
                h * u * u / (2.0 * lambda)
            };
            x += h * (-drift.theta * x + drift.sigma0 * u)
                + h.sqrt() * lambda.sqrt() * drift.sigma0 * eps;
            if !x.is_finite() {
                return Err(Error::NumericalDivergence {
                    step: k,
                    what: "controlled path diverged".into(),
                });
            }
        }
        let delta = acc - mean;
        mean += delta / (path + 1) as f64;
        m2 += delta * (acc - mean);
    }
    let n = n_paths as f64;
    let var = (m2 / n).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Closed-form terminal and path KL for the linear-Gaussian case: base
/// dynamics from `drift`, control `u(x, tau) = p x + q`, shared initial law
/// `N(m0, v0)`. The time integral runs over closed-form moment curves via
/// Simpson quadrature; both outputs are deterministic.
pub fn linear_gaussian_kls(
    drift: &OuDrift,
    lambda: f64,
    p: f64,
    q: f64,
    m0: f64,
    v0: f64,
) -> Result<(f64, f64)> {
    if !(lambda > 0.0) || !(v0 > 0.0) {
        return Err(Error::Domain("lambda and v0 must be positive".into()));
    }
    let s = drift.sigma0;
    let kappa_u = s * p - drift.theta;
    let kappa_b = -drift.theta;

    // exp-integral (e^{a t} - 1) / a with the a -> 0 limit.
    let ei = |a: f64, t: f64| -> f64 {
        if a.abs() < 1e-12 {
            t * (1.0 + 0.5 * a * t)
        } else {
            f64::exp_m1(a * t) / a
        }
    };
    let mean_u = |t: f64| (kappa_u * t).exp() * m0 + s * q * ei(kappa_u, t);
    let var_u = |t: f64| (2.0 * kappa_u * t).exp() * v0 + lambda * s * s * ei(2.0 * kappa_u, t);
    let mean_b = |t: f64| (kappa_b * t).exp() * m0;
    let var_b = |t: f64| (2.0 * kappa_b * t).exp() * v0 + lambda * s * s * ei(2.0 * kappa_b, t);

    // path KL = (1/2 lambda) int_0^1 E[(p X + q)^2] dtau under the
    // controlled law.
    let integrand = |t: f64| {
        let m = mean_u(t);
        let v = var_u(t);
        p * p * (v + m * m) + 2.0 * p * q * m + q * q
    };
    let n = 2000usize; // Simpson cells; the integrand is smooth
    let h = 1.0 / n as f64;
    let mut integral = integrand(0.0) + integrand(1.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += w * integrand(i as f64 * h);
    }
    integral *= h / 3.0;
    let path_kl = integral / (2.0 * lambda);

    // Terminal KL between the two Gaussian laws at tau = 1.
    let (mu, vu) = (mean_u(1.0), var_u(1.0));
    let (mb, vb) = (mean_b(1.0), var_b(1.0));
    let terminal_kl = 0.5 * ((vb / vu).ln() + vu / vb + (mu - mb) * (mu - mb) / vb - 1.0);
    Ok((path_kl, terminal_kl))
}

/// Data-processing check report.
#[derive(Debug, Clone, Serialize)]
pub struct DpiReport {
    pub path_kl: f64,
    pub terminal_kl: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Assert `terminal_kl <= path_kl + 1e-9`.
pub fn check_dpi_terminal(path_kl: f64, terminal_kl: f64) -> DpiReport {
    let margin = path_kl + 1e-9 - terminal_kl;
    DpiReport {
        path_kl,
        terminal_kl,
        margin,
        pass: margin >= 0.0,
    }
}

/// Gradient of `-Q(s, X_1)` in the fine-tuned parameters by exact
/// reverse-mode differentiation through the recorded Euler chain. Slow by
/// design; intended for toy networks.
pub fn bptt_gradient_oracle(
    v_ft: &ParamVector,
    state_dim: usize,
    critic: &dyn CriticFn,
    traj: &DenoisingTrajectory,
) -> Result<Vec<f64>> {
    let schedule = &traj.schedule;
    let k_steps = schedule.num_steps();
    let h = schedule.step_size();
    let action_dim = traj.points[0].len();
    if v_ft.input_dim() != state_dim + action_dim + 1 {
        return Err(Error::Shape(format!(
            "velocity net input dim {} does not match state {} + action {} + tau",
            v_ft.input_dim(),
            state_dim,
            action_dim
        )));
    }
    let mut grads = vec![0.0; v_ft.len()];
    // Terminal cotangent of -Q.
    let mut cot: Vec<f64> = critic
        .action_gradient(&traj.state, traj.terminal())?
        .into_iter()
        .map(|g| -g)
        .collect();
    for k in (0..k_steps).rev() {
        let tau = schedule.tau_clamped(k);
        let mut input = Vec::with_capacity(state_dim + action_dim + 1);
        input.extend_from_slice(&traj.state);
        input.extend_from_slice(&traj.points[k]);
        input.push(tau);
        let trace = v_ft.forward_trace(&input)?;
        // X_{k+1} = X_k + h (2 v(input_k) - X_k / tau) + noise: parameter
        // pullback with weight 2h, then the state cotangent.
        let input_cot = v_ft.backward_from_trace(&trace, &cot, Some(2.0 * h), &mut grads)?;
        let vx = &input_cot[state_dim..state_dim + action_dim];
        for i in 0..action_dim {
            cot[i] = cot[i] + h * (2.0 * vx[i] - cot[i] / tau);
        }
    }
    Ok(grads)
}

/// One verification check: a named pass/fail with a numeric margin
/// (positive means pass with room).
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
    pub detail: String,
}

/// Full oracle report, serialized by `trqam verify`.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, pass: bool, margin: f64, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            pass,
            margin,
            detail,
        });
        self.pass &= pass;
    }
}

/// Run the full oracle suite.
pub fn run_verification(seed: u64) -> Result<VerifyReport> {
    use crate::critic::CriticEnsemble;
    use crate::flow::{sample_memoryless_sde, AffineVelocity, FlowSchedule, MlpVelocity};
    use crate::numerics::{global_norm, mlp_init, Activation};

    let mut report = VerifyReport {
        pass: true,
        checks: Vec::new(),
    };

    // 1. Exponential-tilting bounds over randomized discrete instances.
    let (violations, min_margin) = tilt_bounds_random_sweep(1000, seed)?;
    report.push(
        "tilt_bounds_randomized",
        violations == 0,
        min_margin,
        format!("{violations} violations over 1000 instances; min KL margin {min_margin:.3e}"),
    );

    // 2. Tightness witness: identical critics meet both bounds with equality 0.
    {
        let base = DiscreteDist::uniform(vec![0.0, 1.0, 2.0])?;
        let q = vec![0.3, -0.2, 0.9];
        let r = check_lemma_tilt_bounds(&base, &q, &q, 5.0)?;
        let exact = r.epsilon == 0.0 && r.kl.abs() <= 1e-14 && r.tv.abs() <= 1e-14;
        report.push(
            "tilt_bounds_tight_at_zero_error",
            r.pass && exact,
            1e-14 - r.kl.abs(),
            format!("eps = {}, KL = {:.3e}, TV = {:.3e}", r.epsilon, r.kl, r.tv),
        );
    }

    // 3. Girsanov identity: two independent estimators of the path KL agree.
    {
        let drift = OuDrift {
            theta: 1.0,
            sigma0: 0.8,
        };
        let lambda = 0.7;
        let control = |x: f64, _tau: f64| 0.5 * x + 0.3;
        let (e1, se1) = girsanov_mc_kl(&control, lambda, &drift, 10_000, 100, seed ^ 0xA1)?;
        let (e2, se2) = girsanov_llr_kl(&control, lambda, &drift, 10_000, 100, seed ^ 0xB2)?;
        let combined = (se1 * se1 + se2 * se2).sqrt();
        let gap = (e1 - e2).abs();
        report.push(
            "girsanov_two_estimator_agreement",
            gap <= 3.0 * combined,
            3.0 * combined - gap,
            format!(
                "cost {e1:.5} (se {se1:.1e}) vs log-ratio {e2:.5} (se {se2:.1e}), gap {gap:.2e}"
            ),
        );

        // Cross-check against the closed-form linear-Gaussian value; allow
        // for the Euler discretization bias on top of Monte-Carlo error.
        let (analytic, _) = linear_gaussian_kls(&drift, lambda, 0.5, 0.3, 0.0, 1.0)?;
        let tol = 3.0 * se1 + 0.02 * analytic;
        report.push(
            "girsanov_matches_closed_form",
            (e1 - analytic).abs() <= tol,
            tol - (e1 - analytic).abs(),
            format!("estimate {e1:.5} vs analytic {analytic:.5}"),
        );

        // Discretization-bias guard: refining the grid beyond 10x the policy
        // grid does not move the estimate.
        let (e3, se3) = girsanov_mc_kl(&control, lambda, &drift, 10_000, 300, seed ^ 0xC3)?;
        let combined = (se1 * se1 + se3 * se3).sqrt();
        let gap = (e1 - e3).abs();
        let tol = 3.0 * combined + 0.01 * analytic;
        report.push(
            "girsanov_grid_refinement_invariance",
            gap <= tol,
            tol - gap,
            format!("100-step {e1:.5} vs 300-step {e3:.5}"),
        );
    }

    // 4. Data-processing inequality on the linear-Gaussian case.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xD4);
        let mut min_gap = f64::INFINITY;
        let mut all = true;
        for _ in 0..100 {
            let drift = OuDrift {
                theta: 0.3 + 1.7 * rng.random::<f64>(),
                sigma0: 0.3 + 1.2 * rng.random::<f64>(),
            };
            let lambda = 0.2 + 2.8 * rng.random::<f64>();
            let p = rng.random::<f64>() * 2.0 - 1.0;
            let q = rng.random::<f64>() * 2.0 - 1.0;
            let (path_kl, terminal_kl) = linear_gaussian_kls(&drift, lambda, p, q, 0.0, 1.0)?;
            let r = check_dpi_terminal(path_kl, terminal_kl);
            all &= r.pass;
            min_gap = min_gap.min(r.margin);
        }
        report.push(
            "dpi_random_linear_controls",
            all,
            min_gap,
            format!("100 draws; min margin {min_gap:.3e}"),
        );

        // Constant-shift witness: strictly below.
        let drift = OuDrift {
            theta: 1.0,
            sigma0: 1.0,
        };
        let (path_kl, terminal_kl) = linear_gaussian_kls(&drift, 1.0, 0.0, 0.8, 0.0, 1.0)?;
        report.push(
            "dpi_constant_shift_strict",
            terminal_kl < path_kl,
            path_kl - terminal_kl,
            format!("terminal {terminal_kl:.5} < path {path_kl:.5}"),
        );

        // Zero control: both sides vanish.
        let (pk0, tk0) = linear_gaussian_kls(&drift, 1.0, 0.0, 0.0, 0.0, 1.0)?;
        report.push(
            "dpi_zero_control",
            pk0.abs() <= 1e-12 && tk0.abs() <= 1e-12,
            1e-12 - pk0.abs().max(tk0.abs()),
            format!("path {pk0:.2e}, terminal {tk0:.2e}"),
        );
    }

    // 5. Chain-KL estimator vs the exact shared-covariance Gaussian value.
    {
        let base = AffineVelocity::new(vec![0.25], vec![-0.1])?;
        let delta = 0.6;
        let ft = AffineVelocity::new(vec![0.25], vec![-0.1 + delta])?;
        let schedule = FlowSchedule::new(10)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xE5);
        let trajs: Vec<DenoisingTrajectory> = (0..8)
            .map(|_| sample_memoryless_sde(&base, &[], &schedule, 1.0, &mut rng))
            .collect::<Result<_>>()?;
        let est = crate::trust_region::path_kl_estimate(&ft, &base, &trajs)?;
        let h = schedule.step_size();
        let mut deltas = Vec::new();
        let mut vars = Vec::new();
        for k in 0..schedule.num_steps() {
            let g = crate::flow::schedule_g(schedule.tau_clamped(k))?;
            deltas.push(vec![2.0 * h * delta]);
            vars.push(h * g * g);
        }
        let exact = exact_gaussian_chain_kl(&deltas, &vars)?;
        let rel = (est - exact).abs() / exact;
        report.push(
            "chain_kl_estimator_exact",
            rel <= 1e-12,
            1e-12 - rel,
            format!("estimator {est:.12} vs exact {exact:.12}, rel {rel:.2e}"),
        );
    }

    // 6. Adjoint-matching gradient equals full backpropagation through the
    // chain at v_ft = v_base, up to the constant 2/h.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xF6);
        let mut min_cos = f64::INFINITY;
        let mut max_rel = 0.0f64;
        for i in 0..20u64 {
            let state_dim = 1 + (i as usize % 2);
            let action_dim = 1 + (i as usize % 3);
            let hidden = 4 + (i as usize % 13); // up to 16 hidden units
            let params = mlp_init(
                &[state_dim + action_dim + 1, hidden, action_dim],
                Activation::Gelu,
                seed ^ (i * 7919),
            )?;
            let critic = CriticEnsemble::new(
                2,
                state_dim,
                action_dim,
                &[hidden],
                Activation::Tanh,
                0.5,
                0.005,
                0.99,
                seed ^ (i * 104_729),
            )?;
            let state: Vec<f64> = (0..state_dim).map(|_| rng.random::<f64>() - 0.5).collect();
            let schedule = FlowSchedule::new(10)?;
            let v = MlpVelocity::new(&params, state_dim, action_dim)?;
            let traj = sample_memoryless_sde(&v, &state, &schedule, 1.0, &mut rng)?;
            let adj = crate::adjoint::compute_adjoint_path(&critic, &v, &traj, 1.0)?;
            let items = vec![(&traj, &adj)];
            let (_, g_am) =
                crate::adjoint::adjoint_matching_batch_grad(&params, state_dim, &v, &items, 1.0)?;
            let g_bptt = bptt_gradient_oracle(&params, state_dim, &critic, &traj)?;

            let dot: f64 = g_am.iter().zip(&g_bptt).map(|(a, b)| a * b).sum();
            let cos = dot / (global_norm(&g_am) * global_norm(&g_bptt)).max(1e-300);
            min_cos = min_cos.min(cos);
            let h = schedule.step_size();
            let rel = g_am
                .iter()
                .zip(&g_bptt)
                .map(|(a, b)| (a * h / 2.0 - b).abs())
                .fold(0.0f64, f64::max)
                / global_norm(&g_bptt).max(1e-300);
            max_rel = max_rel.max(rel);
        }
        report.push(
            "adjoint_gradient_equivalence",
            min_cos >= 0.999,
            min_cos - 0.999,
            format!("min cosine {min_cos:.9}; max scaled deviation {max_rel:.2e}"),
        );
        report.push(
            "adjoint_gradient_scale",
            max_rel <= 1e-3,
            1e-3 - max_rel,
            format!("(h/2) * adjoint gradient vs backprop gradient, rel {max_rel:.2e}"),
        );
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tilt_examples() {
        let base = DiscreteDist::uniform(vec![0.0, 1.0]).unwrap();
        // Q = (0, ln 2), beta = 1 -> (1/3, 2/3).
        let t = tilt_distribution(&base, &[0.0, (2.0f64).ln()], 1.0).unwrap();
        assert!((t.probs[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((t.probs[1] - 2.0 / 3.0).abs() < 1e-14);

        // Constant Q leaves the base untouched.
        let c = tilt_distribution(&base, &[7.0, 7.0], 3.0).unwrap();
        assert!((c.probs[0] - 0.5).abs() < 1e-14 && (c.probs[1] - 0.5).abs() < 1e-14);

        // beta = 0 leaves the base untouched.
        let z = tilt_distribution(&base, &[5.0, -3.0], 0.0).unwrap();
        assert!((z.probs[0] - 0.5).abs() < 1e-14 && (z.probs[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kl_tv_examples() {
        let p = DiscreteDist::new(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let q = DiscreteDist::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((tv_discrete(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        assert!((kl_discrete(&p, &q).unwrap() - (2f64).ln()).abs() < 1e-15);
        assert_eq!(kl_discrete(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_discrete(&p, &p).unwrap(), 0.0);

        // Asymmetry witness.
        let a = DiscreteDist::new(vec![0.0, 1.0], vec![0.9, 0.1]).unwrap();
        let b = DiscreteDist::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let kl_ab = kl_discrete(&a, &b).unwrap();
        let kl_ba = kl_discrete(&b, &a).unwrap();
        assert!((kl_ab - kl_ba).abs() > 1e-3);

        // Support violation.
        assert!(kl_discrete(&q, &p).is_err());
    }

    #[test]
    fn dist_validation() {
        assert!(DiscreteDist::new(vec![0.0], vec![0.5]).is_err());
        assert!(DiscreteDist::new(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(DiscreteDist::new(vec![0.0, 1.0], vec![-0.1, 1.1]).is_err());
        assert!(
            DiscreteDist::new((0..65).map(|i| i as f64).collect(), vec![1.0 / 65.0; 65]).is_err()
        );
    }

    #[test]
    fn tilt_bounds_hold_at_zero_error() {
        let base = DiscreteDist::uniform(vec![0.0, 1.0, 2.0]).unwrap();
        let q = vec![1.0, -0.5, 0.25];
        let r = check_lemma_tilt_bounds(&base, &q, &q, 4.0).unwrap();
        assert!(r.pass);
        assert_eq!(r.epsilon, 0.0);
        assert_eq!(r.kl_bound, 0.0);
        assert!(r.kl.abs() < 1e-14 && r.tv.abs() < 1e-14);
    }

    #[test]
    fn tilt_bounds_randomized_sweep_has_no_violations() {
        let (violations, margin) = tilt_bounds_random_sweep(1000, 2024).unwrap();
        assert_eq!(violations, 0, "min margin {margin}");
    }

    #[test]
    fn chain_kl_examples() {
        assert_eq!(
            exact_gaussian_chain_kl(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[1.0, 2.0]).unwrap(),
            0.0
        );
        // One step, ||dmu||^2 = 2, var = 1 -> 1.
        let kl = exact_gaussian_chain_kl(&[vec![1.0, 1.0]], &[1.0]).unwrap();
        assert!((kl - 1.0).abs() < 1e-15);
        assert!(exact_gaussian_chain_kl(&[vec![1.0]], &[0.0]).is_err());
    }

    #[test]
    fn girsanov_zero_and_constant_controls() {
        let drift = OuDrift {
            theta: 1.0,
            sigma0: 1.0,
        };
        let zero = |_x: f64, _t: f64| 0.0;
        let (e, se) = girsanov_mc_kl(&zero, 1.0, &drift, 1000, 128, 1).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(se, 0.0);

        let c = 0.8;
        let constant = move |_x: f64, _t: f64| c;
        let lambda = 1.6;
        let (e, se) = girsanov_mc_kl(&constant, lambda, &drift, 1000, 128, 2).unwrap();
        let want = c * c / (2.0 * lambda);
        // Deterministic integrand: exact up to summation round-off, SE 0.
        assert!((e - want).abs() <= 1e-13 * want, "estimate {e} vs {want}");
        assert!(se <= 1e-12);

        assert!(girsanov_mc_kl(&zero, 1.0, &drift, 10, 128, 1).is_err());
    }

    #[test]
    fn girsanov_two_estimators_agree_statistically() {
        let drift = OuDrift {
            theta: 0.8,
            sigma0: 0.9,
        };
        let lambda = 1.3;
        let control = |x: f64, tau: f64| 0.4 * x - 0.2 + 0.1 * tau;
        let (e1, se1) = girsanov_mc_kl(&control, lambda, &drift, 10_000, 100, 11).unwrap();
        let (e2, se2) = girsanov_llr_kl(&control, lambda, &drift, 10_000, 100, 12).unwrap();
        let combined = (se1 * se1 + se2 * se2).sqrt();
        assert!(
            (e1 - e2).abs() <= 3.0 * combined,
            "estimates {e1} vs {e2}, combined se {combined}"
        );
    }

    #[test]
    fn linear_gaussian_constant_shift_closed_form() {
        // Constant control: path KL = q^2 / (2 lambda) exactly, and the
        // terminal mean shift is sigma0 q (1 - e^-theta) / theta with
        // variance unchanged by the control.
        let drift = OuDrift {
            theta: 1.2,
            sigma0: 0.9,
        };
        let (lambda, q) = (0.8, 0.7);
        let (path_kl, terminal_kl) = linear_gaussian_kls(&drift, lambda, 0.0, q, 0.0, 1.0).unwrap();
        let want_path = q * q / (2.0 * lambda);
        assert!(
            (path_kl - want_path).abs() < 1e-10,
            "{path_kl} vs {want_path}"
        );

        let shift = drift.sigma0 * q * (1.0 - (-drift.theta).exp()) / drift.theta;
        let vb = (-2.0 * drift.theta).exp() * 1.0
            + lambda * drift.sigma0 * drift.sigma0 * (1.0 - (-2.0 * drift.theta).exp())
                / (2.0 * drift.theta);
        let want_term = shift * shift / (2.0 * vb);
        assert!(
            (terminal_kl - want_term).abs() < 1e-10,
            "{terminal_kl} vs {want_term}"
        );
        assert!(terminal_kl < path_kl);
    }

    #[test]
    fn dpi_report_flags_violations() {
        let ok = check_dpi_terminal(1.0, 0.4);
        assert!(ok.pass);
        let bad = check_dpi_terminal(0.4, 1.0);
        assert!(!bad.pass);
    }

    #[test]
    fn bptt_constant_critic_gives_zero_gradient() {
        use crate::flow::{sample_memoryless_sde, FlowSchedule, MlpVelocity};
        use crate::numerics::{mlp_init, Activation};

        struct Flat;
        impl CriticFn for Flat {
            fn value(&self, _s: &[f64], _a: &[f64]) -> Result<f64> {
                Ok(42.0)
            }
            fn action_gradient(&self, _s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![0.0; a.len()])
            }
        }
        let params = mlp_init(&[3, 8, 1], Activation::Gelu, 5).unwrap();
        let v = MlpVelocity::new(&params, 1, 1).unwrap();
        let schedule = FlowSchedule::new(10).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let traj = sample_memoryless_sde(&v, &[0.2], &schedule, 1.0, &mut rng).unwrap();
        let g = bptt_gradient_oracle(&params, 1, &Flat, &traj).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bptt_one_step_linear_chain_matches_hand_derivation() {
        use crate::flow::{FlowSchedule, MlpVelocity};
        use crate::numerics::{mlp_init, Activation};

        // Single linear layer v = w . [s, x, tau] + b, K = 1 step, linear
        // critic Q = m a. Chain: X1 = X0 + h (2 v - X0 / tau~). The gradient
        // of -Q in (w, b) is -m * 2h * [s, x0, tau~, 1].
        let mut params = mlp_init(&[3, 1], Activation::Gelu, 0).unwrap();
        params.values_mut().copy_from_slice(&[0.3, -0.2, 0.1, 0.05]);
        let schedule = FlowSchedule::new(1).unwrap();
        let state = vec![0.7];
        let x0 = vec![-0.4];
        let v = MlpVelocity::new(&params, 1, 1).unwrap();
        let traj = {
            let next = crate::flow::sde_step(&v, &state, &x0, 0, &schedule, &[0.9]).unwrap();
            DenoisingTrajectory {
                state: state.clone(),
                points: vec![x0.clone(), next],
                noises: vec![vec![0.9]],
                lambda_used: 1.0,
                schedule,
            }
        };
        struct Lin(f64);
        impl CriticFn for Lin {
            fn value(&self, _s: &[f64], a: &[f64]) -> Result<f64> {
                Ok(self.0 * a[0])
            }
            fn action_gradient(&self, _s: &[f64], _a: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![self.0])
            }
        }
        let m = 1.7;
        let g = bptt_gradient_oracle(&params, 1, &Lin(m), &traj).unwrap();
        let h = 1.0;
        let tau = schedule.tau_clamped(0);
        let want = [
            -m * 2.0 * h * state[0],
            -m * 2.0 * h * x0[0],
            -m * 2.0 * h * tau,
            -m * 2.0 * h,
        ];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_verification_passes() {
        let report = run_verification(7).unwrap();
        for c in &report.checks {
            assert!(c.pass, "check {} failed: {}", c.name, c.detail);
        }
        assert!(report.pass);
    }
}
