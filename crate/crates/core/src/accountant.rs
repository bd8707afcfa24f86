//! Gaussian differential privacy arithmetic.
//!
//! Everything here is a pure function of its arguments:
//!
//! * conversion between a μ-GDP budget and an (ε, δ)-DP guarantee,
//! * composition of heterogeneous per-step budgets under Poisson subsampling
//!   with probability `p`,
//! * the two budget solvers used by the noise schedules (constant per-step
//!   budget in closed form, geometrically growing budget by bisection),
//! * the noise scale of the general-form algorithm, where the per-step noise
//!   is `σ̃·σ̃_k` for an arbitrary shape sequence `σ̃_k`.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;
use thiserror::Error;

/// Largest per-step budget the accountant accepts. `e^{μ²}` is still
/// representable above this, but the composed total loses accuracy.
pub const MU_STEP_LIMIT: f64 = 8.0;

/// Search interval for the μ_tot inversion.
pub const MU_TOT_BRACKET: (f64, f64) = (1e-8, 64.0);

/// Absolute tolerance on μ when inverting the (ε, δ) transfer.
pub const MU_TOT_TOLERANCE: f64 = 1e-12;

/// Relative residual accepted when solving for the initial growing budget.
pub const MU0_RELATIVE_RESIDUAL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountantError {
    #[error(
        "delta {delta} is not attainable for epsilon {epsilon} with mu in [{lo}, {hi}] \
         (reachable delta range [{delta_lo}, {delta_hi}])"
    )]
    NoBracket {
        epsilon: f64,
        delta: f64,
        lo: f64,
        hi: f64,
        delta_lo: f64,
        delta_hi: f64,
    },
    #[error("per-step budget mu_{step} = {mu} exceeds the limit {MU_STEP_LIMIT}")]
    BudgetOverflow { step: usize, mu: f64 },
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// Standard normal CDF.
///
/// Evaluated as `erfc(-t/√2)/2`, which keeps full relative precision in the
/// lower tail. Absolute error is below 1e-15 on the whole real line
/// (checked against a 50-digit reference in the tests).
pub fn gaussian_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

/// Natural log of the standard normal CDF, finite far into the lower tail
/// where `gaussian_cdf` underflows.
pub fn ln_gaussian_cdf(t: f64) -> f64 {
    if t > -30.0 {
        return gaussian_cdf(t).ln();
    }
    // Asymptotic expansion of the Mills ratio; the first omitted term is
    // 945/t^10 < 2e-12 for t <= -30.
    let u = 1.0 / (t * t);
    let series = 1.0 - u * (1.0 - 3.0 * u * (1.0 - 5.0 * u * (1.0 - 7.0 * u)));
    -0.5 * t * t - (-t).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
}

/// δ achieved by a μ-GDP mechanism at a given ε:
/// `δ = Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2)`.
///
/// The second term is evaluated in log space so large ε does not overflow.
pub fn delta_from_mu_eps(mu: f64, eps: f64) -> f64 {
    debug_assert!(mu > 0.0 && eps >= 0.0);
    let ratio = eps / mu;
    let upper = gaussian_cdf(-ratio + 0.5 * mu);
    let lower = (eps + ln_gaussian_cdf(-ratio - 0.5 * mu)).exp();
    (upper - lower).clamp(0.0, 1.0)
}

/// Inverts [`delta_from_mu_eps`] in μ by bisection on [`MU_TOT_BRACKET`].
pub fn mu_tot_from_eps_delta(eps: f64, delta: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AccountantError::InvalidParameter(format!(
            "epsilon must be positive and finite, got {eps}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidParameter(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let (mut lo, mut hi) = MU_TOT_BRACKET;
    let delta_lo = delta_from_mu_eps(lo, eps);
    let delta_hi = delta_from_mu_eps(hi, eps);
    if !(delta_lo <= delta && delta <= delta_hi && delta_lo < delta_hi) {
        return Err(AccountantError::NoBracket {
            epsilon: eps,
            delta,
            lo,
            hi,
            delta_lo,
            delta_hi,
        });
    }
    while hi - lo > MU_TOT_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if delta_from_mu_eps(mid, eps) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-step budgets plus the subsampling probability they were spent under.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionLedger {
    pub budgets: Vec<f64>,
    pub sampling_probability: f64,
}

impl CompositionLedger {
    pub fn new(budgets: Vec<f64>, sampling_probability: f64) -> Self {
        Self {
            budgets,
            sampling_probability,
        }
    }

    pub fn uniform(mu: f64, steps: usize, sampling_probability: f64) -> Self {
        Self::new(vec![mu; steps], sampling_probability)
    }

    pub fn compose(&self) -> Result<f64> {
        compose_general(self)
    }
}

/// Total budget after composing subsampled μ_k-GDP steps:
/// `μ_tot = p·√(Σ_k (e^{μ_k²} − 1))`.
pub fn compose_general(ledger: &CompositionLedger) -> Result<f64> {
    let p = ledger.sampling_probability;
    if !(p > 0.0 && p <= 1.0) {
        return Err(AccountantError::InvalidParameter(format!(
            "sampling probability must lie in (0, 1], got {p}"
        )));
    }
    let mut sum = 0.0;
    let mut outside_regime = 0usize;
    for (step, &mu) in ledger.budgets.iter().enumerate() {
        if !(mu >= 0.0) {
            return Err(AccountantError::InvalidParameter(format!(
                "mu_{step} must be nonnegative, got {mu}"
            )));
        }
        if mu > MU_STEP_LIMIT {
            return Err(AccountantError::BudgetOverflow { step, mu });
        }
        if mu * mu > 1.0 {
            outside_regime += 1;
        }
        sum += (mu * mu).exp_m1();
    }
    warn_outside_regime(outside_regime, ledger.budgets.len());
    Ok(p * sum.sqrt())
}

/// The constant per-step budget μ̄ that spends exactly `mu_tot` over
/// `iterations` steps at sampling probability `1/local_size`:
/// `μ̄ = √(ln(J²μ_tot²/K + 1))`.
pub fn uniform_budget(mu_tot: f64, local_size: usize, iterations: usize) -> f64 {
    let j = local_size as f64;
    let k = iterations as f64;
    ((j * j * mu_tot * mu_tot) / k).ln_1p().sqrt()
}

/// Left-hand side of the growing-budget equation,
/// `Σ_{k<K} (e^{(μ₀ ρ^{k/K})²} − 1)`.
pub fn growing_budget_lhs(mu0: f64, iterations: usize, rho_mu: f64) -> f64 {
    let k_total = iterations as f64;
    (0..iterations)
        .map(|k| {
            let mu = mu0 * rho_mu.powf(k as f64 / k_total);
            (mu * mu).exp_m1()
        })
        .sum()
}

/// Initial budget μ₀ of the schedule `μ_k = μ₀ ρ^{k/K}` that spends exactly
/// `mu_tot`, i.e. the root of `growing_budget_lhs(μ₀) = J²μ_tot²`.
///
/// `rho_mu == 1` is answered by the closed form of [`uniform_budget`].
pub fn solve_mu0(mu_tot: f64, local_size: usize, iterations: usize, rho_mu: f64) -> Result<f64> {
    if !(mu_tot > 0.0 && mu_tot.is_finite()) {
        return Err(AccountantError::InvalidParameter(format!(
            "mu_tot must be positive and finite, got {mu_tot}"
        )));
    }
    if local_size == 0 || iterations == 0 {
        return Err(AccountantError::InvalidParameter(
            "local dataset size and iteration count must be at least 1".into(),
        ));
    }
    if !(rho_mu >= 1.0 && rho_mu.is_finite()) {
        return Err(AccountantError::InvalidParameter(format!(
            "rho_mu must be >= 1, got {rho_mu}"
        )));
    }
    let last = iterations - 1;
    let uniform = uniform_budget(mu_tot, local_size, iterations);
    if rho_mu == 1.0 {
        if uniform > MU_STEP_LIMIT {
            return Err(AccountantError::BudgetOverflow {
                step: last,
                mu: uniform,
            });
        }
        return Ok(uniform);
    }

    let target = (local_size as f64 * mu_tot).powi(2);
    // Every μ_k lies in [μ₀, μ₀ρ), so the uniform solution μ̄ brackets the
    // root from above and μ̄/ρ from below.
    let mut lo = uniform / rho_mu;
    let mut hi = uniform;
    let lhs = |mu0: f64| growing_budget_lhs(mu0, iterations, rho_mu);
    while lhs(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    while lhs(lo) > target {
        hi = lo;
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if lhs(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mu0 = if (lhs(lo) - target).abs() <= (lhs(hi) - target).abs() {
        lo
    } else {
        hi
    };

    let mu_last = mu0 * rho_mu.powf(last as f64 / iterations as f64);
    if mu_last > MU_STEP_LIMIT {
        return Err(AccountantError::BudgetOverflow {
            step: last,
            mu: mu_last,
        });
    }
    debug_assert!((lhs(mu0) - target).abs() <= MU0_RELATIVE_RESIDUAL * target);
    Ok(mu0)
}

/// Noise scale σ̃ of the general-form algorithm:
/// `σ̃ = √(2·Σ_k C_k²/σ̃_k²) / (J·μ_tot)`. The per-step standard deviation
/// is then `σ̃·σ̃_k`.
pub fn noise_scale_general(
    clip_bounds: &[f64],
    sigma_shape: &[f64],
    local_size: usize,
    mu_tot: f64,
) -> Result<f64> {
    if clip_bounds.len() != sigma_shape.len() {
        return Err(AccountantError::InvalidParameter(format!(
            "{} clip bounds but {} noise levels",
            clip_bounds.len(),
            sigma_shape.len()
        )));
    }
    if local_size == 0 || !(mu_tot > 0.0) {
        return Err(AccountantError::InvalidParameter(
            "local dataset size and mu_tot must be positive".into(),
        ));
    }
    let mut sum = 0.0;
    for (k, (&c, &s)) in clip_bounds.iter().zip(sigma_shape).enumerate() {
        if !(c > 0.0 && c.is_finite() && s > 0.0 && s.is_finite()) {
            return Err(AccountantError::InvalidParameter(format!(
                "step {k}: clip bound {c} and noise level {s} must be positive and finite"
            )));
        }
        sum += (c / s).powi(2);
    }
    Ok((2.0 * sum).sqrt() / (local_size as f64 * mu_tot))
}

/// The global privacy contract: (ε, δ) for each node over `iterations`
/// steps, each sampling one of `local_size` records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub local_size: usize,
    pub iterations: usize,
    pub mu_tot: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, local_size: usize, iterations: usize) -> Result<Self> {
        if local_size == 0 || iterations == 0 {
            return Err(AccountantError::InvalidParameter(
                "local dataset size and iteration count must be at least 1".into(),
            ));
        }
        let mu_tot = mu_tot_from_eps_delta(epsilon, delta)?;
        Ok(Self {
            epsilon,
            delta,
            local_size,
            iterations,
            mu_tot,
        })
    }

    /// Same (ε, δ) and J, different horizon.
    pub fn with_iterations(&self, iterations: usize) -> Self {
        Self {
            iterations,
            ..*self
        }
    }

    pub fn sampling_probability(&self) -> f64 {
        1.0 / self.local_size as f64
    }

    /// `J·μ_tot > √n`, the condition under which the network-size step
    /// rule is meaningful.
    pub fn supports_network_size(&self, nodes: usize) -> bool {
        self.local_size as f64 * self.mu_tot > (nodes as f64).sqrt()
    }
}

fn warn_outside_regime(count: usize, total: usize) {
    if count > 0 {
        log::warn!(
            "{count} of {total} per-step budgets have mu^2 > 1; \
             the noise-scale bound assumes e^x - 1 < 2x, which needs x <= 1"
        );
    }
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    // 50-digit reference values of Φ.
    const CDF_REFERENCE: [(f64, f64); 16] = [
        (-8.0, 6.2209605742717841235e-16),
        (-6.0, 9.865876450376981407e-10),
        (-5.0, 2.8665157187919391167e-7),
        (-3.5, 0.00023262907903552503635),
        (-2.0, 0.0227501319481792072),
        (-1.5, 0.066807201268858066004),
        (-1.0, 0.15865525393145705141),
        (-0.5, 0.30853753872598689636),
        (-0.1, 0.46017216272297101633),
        (0.0, 0.5),
        (0.3, 0.61791142218895263307),
        (1.0, 0.84134474606854294859),
        (1.96, 0.97500210485177956379),
        (2.5, 0.99379033467422386483),
        (4.0, 0.99996832875816688008),
        (6.0, 0.99999999901341235496),
    ];

    #[test]
    fn cdf_matches_reference() {
        for (t, want) in CDF_REFERENCE {
            let got = gaussian_cdf(t);
            assert!((got - want).abs() <= 1e-12, "Phi({t}) = {got}, want {want}");
        }
        assert_eq!(gaussian_cdf(0.0), 0.5);
        assert!(gaussian_cdf(6.0) > 1.0 - 1e-8);
    }

    #[test]
    fn cdf_lower_tail_keeps_relative_precision() {
        for (t, want) in CDF_REFERENCE.iter().filter(|(t, _)| *t <= -3.0) {
            let got = gaussian_cdf(*t);
            assert!(((got - want) / want).abs() < 1e-12, "Phi({t})");
        }
    }

    #[test]
    fn ln_cdf_is_continuous_at_the_switch() {
        let below = ln_gaussian_cdf(-30.0 - 1e-9);
        let above = ln_gaussian_cdf(-30.0 + 1e-9);
        // d/dt ln Φ ≈ 30 here
        assert!((below - above).abs() < 1e-6, "{below} vs {above}");
        assert!(ln_gaussian_cdf(-1e3).is_finite());
    }

    #[test]
    fn delta_examples() {
        assert!(delta_from_mu_eps(1e-9, 1.0).abs() <= 1e-12);
        assert!((delta_from_mu_eps(1.0, 1.0) - 0.1269367375066439458).abs() < 1e-12);
        assert!((delta_from_mu_eps(1.0, 0.0) - 0.38292492254802620728).abs() < 1e-12);
        assert!((delta_from_mu_eps(0.5, 2.0) - 9.4391686349472337585e-6).abs() < 1e-15);
        assert!((delta_from_mu_eps(3.0, 0.5) - 0.82999580994769030778).abs() < 1e-12);
    }

    #[test]
    fn delta_is_monotone_in_mu() {
        for eps in [0.0, 0.3, 1.0, 3.0, 10.0] {
            let mut prev = 0.0;
            for i in 1..=400 {
                let mu = 0.02 * i as f64;
                let d = delta_from_mu_eps(mu, eps);
                assert!(d >= prev, "eps={eps} mu={mu}");
                prev = d;
            }
        }
    }

    #[test]
    fn mu_tot_matches_reference_and_round_trips() {
        let reference = [
            (0.3, 0.10771595582827625877),
            (0.7, 0.22882794697495240677),
            (1.0, 0.31390245831182955483),
            (3.0, 0.81755636125135544409),
        ];
        for (eps, want) in reference {
            let mu = mu_tot_from_eps_delta(eps, 1e-4).unwrap();
            assert!((mu - want).abs() < 1e-11, "eps={eps}: {mu} vs {want}");
            assert!((delta_from_mu_eps(mu, eps) - 1e-4).abs() <= 1e-9);
        }
        let weak = mu_tot_from_eps_delta(0.3, 1e-4).unwrap();
        let strong = mu_tot_from_eps_delta(3.0, 1e-4).unwrap();
        assert!(weak < strong);
    }

    #[test]
    fn degenerate_requests() {
        // Nearly-zero epsilon with a huge delta is still reachable: 2Φ(μ/2) − 1 = 0.99.
        let mu = mu_tot_from_eps_delta(1e-6, 0.99).unwrap();
        assert!((mu - 5.151658952885392674).abs() < 1e-6);
        // With a very large epsilon, no mu in the bracket reaches delta = 0.5.
        assert!(matches!(
            mu_tot_from_eps_delta(1e4, 0.5),
            Err(AccountantError::NoBracket { .. })
        ));
        assert!(mu_tot_from_eps_delta(0.0, 1e-4).is_err());
        assert!(mu_tot_from_eps_delta(1.0, 1.0).is_err());
    }

    #[test]
    fn compose_examples() {
        let one = compose_general(&CompositionLedger::uniform(1.0, 1, 1.0)).unwrap();
        assert!((one - (1f64.exp() - 1.0).sqrt()).abs() < 1e-15);
        assert!((one - 1.310832).abs() < 1e-6);

        let (k, mu, p) = (37, 0.4, 0.05);
        let got = compose_general(&CompositionLedger::uniform(mu, k, p)).unwrap();
        let want = p * (k as f64 * ((mu * mu).exp() - 1.0)).sqrt();
        assert!((got - want).abs() < 1e-14);

        let with_zero = compose_general(&CompositionLedger::new(vec![0.5, 0.0, 0.5], 1.0)).unwrap();
        let without = compose_general(&CompositionLedger::new(vec![0.5, 0.5], 1.0)).unwrap();
        assert_eq!(with_zero, without);
    }

    #[test]
    fn compose_rejects_overflow() {
        let err = compose_general(&CompositionLedger::new(vec![1.0, 8.5, 1.0], 0.1)).unwrap_err();
        assert_eq!(err, AccountantError::BudgetOverflow { step: 1, mu: 8.5 });
        assert!(compose_general(&CompositionLedger::new(vec![1.0], 0.0)).is_err());
        assert!(compose_general(&CompositionLedger::new(vec![-1.0], 0.5)).is_err());
    }

    #[test]
    fn uniform_budget_examples() {
        let mu_tot = (1f64.exp() - 1.0).sqrt();
        assert!((uniform_budget(mu_tot, 1, 1) - 1.0).abs() < 1e-15);
        assert_eq!(uniform_budget(0.0, 10, 10), 0.0);

        let mu_bar = uniform_budget(0.5, 100, 50);
        assert!((mu_bar - 1.9828831616422400221).abs() < 1e-12);
        let back = compose_general(&CompositionLedger::uniform(mu_bar, 50, 0.01)).unwrap();
        assert!((back - 0.5).abs() < 1e-12);
    }

    #[test]
    fn solve_mu0_examples() {
        // 40-digit references for (μ_tot, J, K) = (0.5, 100, 50).
        for (rho, want) in [(2.0, MU0_RHO2), (4.0, MU0_RHO4)] {
            let mu0 = solve_mu0(0.5, 100, 50, rho).unwrap();
            assert!((mu0 - want).abs() < 1e-12, "rho={rho}: {mu0} vs {want}");
            let lhs = growing_budget_lhs(mu0, 50, rho);
            assert!((lhs - 2500.0).abs() <= MU0_RELATIVE_RESIDUAL * 2500.0);
        }
        let slow = solve_mu0(0.5, 100, 50, 2.0).unwrap();
        let fast = solve_mu0(0.5, 100, 50, 4.0).unwrap();
        assert!(fast < slow);
    }

    const MU0_RHO2: f64 = 1.2131189604736069598;
    const MU0_RHO4: f64 = 0.65287450797213437928;

    #[test]
    fn solve_mu0_continuity_at_rho_one() {
        let uniform = uniform_budget(0.5, 100, 50);
        let near = solve_mu0(0.5, 100, 50, 1.0 + 1e-9).unwrap();
        assert!((near - uniform).abs() < 1e-6);
        assert_eq!(solve_mu0(0.5, 100, 50, 1.0).unwrap(), uniform);
    }

    #[test]
    fn solve_mu0_errors() {
        assert!(matches!(
            solve_mu0(0.5, 100, 50, 0.5),
            Err(AccountantError::InvalidParameter(_))
        ));
        // J²μ² = 1e32 over 2 steps puts μ_1 near √ln(1e32) ≈ 8.6.
        assert!(matches!(
            solve_mu0(1e12, 10_000, 2, 4.0),
            Err(AccountantError::BudgetOverflow { step: 1, .. })
        ));
    }

    #[test]
    fn noise_scale_examples() {
        let k = 50;
        let s = noise_scale_general(&vec![1.0; k], &vec![1.0; k], 10, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-15);

        let c = 2.5;
        let s = noise_scale_general(&vec![c; k], &vec![1.0; k], 7, 0.3).unwrap();
        let want = c * (2.0 * k as f64).sqrt() / (7.0 * 0.3);
        assert!((s - want).abs() < 1e-12);

        let clips: Vec<f64> = (0..k).map(|i| 1.0 + i as f64 * 0.1).collect();
        let shape: Vec<f64> = (0..k).map(|i| 0.5 + (i as f64).sin().abs()).collect();
        let base = noise_scale_general(&clips, &shape, 10, 0.4).unwrap();
        let doubled: Vec<f64> = clips.iter().map(|c| 2.0 * c).collect();
        let twice = noise_scale_general(&doubled, &shape, 10, 0.4).unwrap();
        assert!((twice - 2.0 * base).abs() < 1e-12 * base);

        assert!(noise_scale_general(&[1.0], &[1.0, 1.0], 1, 1.0).is_err());
        assert!(noise_scale_general(&[0.0], &[1.0], 1, 1.0).is_err());
    }

    #[test]
    fn privacy_spec_derives_mu_tot() {
        let spec = PrivacySpec::new(1.0, 1e-4, 250, 2000).unwrap();
        assert!((delta_from_mu_eps(spec.mu_tot, 1.0) - 1e-4).abs() < 1e-9);
        assert_eq!(spec.sampling_probability(), 1.0 / 250.0);
        assert!(spec.supports_network_size(20));
        assert!(PrivacySpec::new(1.0, 1e-4, 0, 10).is_err());
    }
}
