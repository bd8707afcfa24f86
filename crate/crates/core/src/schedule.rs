//! Per-iteration clipping bounds, privacy budgets and noise levels.
//!
//! All four schedule variants are precomputed for the whole horizon when
//! they are built. The engine only ever reads a [`StepTable`].

use std::fmt;
use std::str::FromStr;

use crate::accountant::{self, AccountantError, PrivacySpec};

/// Which of the two dynamic mechanisms a schedule uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Decaying clip bound and growing budget.
    Dyn,
    /// Decaying clip bound, constant budget.
    DynC,
    /// Constant clip bound, growing budget.
    DynMu,
    /// Constant clip bound and budget.
    Const,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dyn, Variant::DynC, Variant::DynMu, Variant::Const];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dyn => "dyn",
            Variant::DynC => "dyn-c",
            Variant::DynMu => "dyn-mu",
            Variant::Const => "const",
        }
    }

    pub fn decays_clip(self) -> bool {
        matches!(self, Variant::Dyn | Variant::DynC)
    }

    pub fn grows_budget(self) -> bool {
        matches!(self, Variant::Dyn | Variant::DynMu)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dyn" => Ok(Variant::Dyn),
            "dyn-c" | "dync" | "dyn_c" => Ok(Variant::DynC),
            "dyn-mu" | "dynmu" | "dyn_mu" => Ok(Variant::DynMu),
            "const" => Ok(Variant::Const),
            other => Err(format!(
                "unknown variant {other:?} (expected dyn, dyn-c, dyn-mu or const)"
            )),
        }
    }
}

/// A fully resolved noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub variant: Variant,
    pub iterations: usize,
    /// `C₀` for decaying variants, `C̄` otherwise.
    pub clip: f64,
    /// 1 for variants with a constant clip bound.
    pub rho_c: f64,
    /// 1 for variants with a constant budget.
    pub rho_mu: f64,
    /// `μ₀` for growing variants, `μ̄` otherwise.
    pub mu: f64,
    pub privacy: PrivacySpec,
}

impl NoiseSchedule {
    fn fraction(&self, k: usize) -> f64 {
        debug_assert!(k < self.iterations);
        k as f64 / self.iterations as f64
    }

    /// `C₀ ρ_c^{−k/K}` or `C̄`.
    pub fn clip_bound_at(&self, k: usize) -> f64 {
        if self.variant.decays_clip() {
            self.clip * self.rho_c.powf(-self.fraction(k))
        } else {
            self.clip
        }
    }

    /// `μ₀ ρ_μ^{k/K}` or `μ̄`.
    pub fn budget_at(&self, k: usize) -> f64 {
        if self.variant.grows_budget() {
            self.mu * self.rho_mu.powf(self.fraction(k))
        } else {
            self.mu
        }
    }

    /// `σ_k = C_k / μ_k`.
    pub fn sigma_at(&self, k: usize) -> f64 {
        self.clip_bound_at(k) / self.budget_at(k)
    }

    pub fn table(&self) -> StepTable {
        let k = self.iterations;
        StepTable {
            clip: (0..k).map(|i| self.clip_bound_at(i)).collect(),
            mu: (0..k).map(|i| self.budget_at(i)).collect(),
            sigma: (0..k).map(|i| self.sigma_at(i)).collect(),
        }
    }

    /// Total budget actually spent by the schedule.
    pub fn composed_mu_tot(&self) -> Result<f64, AccountantError> {
        let budgets = (0..self.iterations).map(|k| self.budget_at(k)).collect();
        accountant::compose_general(&accountant::CompositionLedger::new(
            budgets,
            self.privacy.sampling_probability(),
        ))
    }
}

/// Solves for the initial (or constant) budget of `variant` and freezes the
/// schedule.
///
/// `rho_c` is ignored by variants with a constant clip bound and `rho_mu`
/// by variants with a constant budget; both must be `>= 1` where used.
pub fn build_schedule(
    variant: Variant,
    privacy: PrivacySpec,
    clip: f64,
    rho_c: f64,
    rho_mu: f64,
) -> Result<NoiseSchedule, AccountantError> {
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(AccountantError::InvalidParameter(format!(
            "clip bound must be positive and finite, got {clip}"
        )));
    }
    let rho_c = if variant.decays_clip() {
        if !(rho_c >= 1.0 && rho_c.is_finite()) {
            return Err(AccountantError::InvalidParameter(format!(
                "rho_c must be >= 1, got {rho_c}"
            )));
        }
        rho_c
    } else {
        1.0
    };
    let (rho_mu, mu) = if variant.grows_budget() {
        let mu0 = accountant::solve_mu0(
            privacy.mu_tot,
            privacy.local_size,
            privacy.iterations,
            rho_mu,
        )?;
        (rho_mu, mu0)
    } else {
        let mu_bar =
            accountant::uniform_budget(privacy.mu_tot, privacy.local_size, privacy.iterations);
        if mu_bar > accountant::MU_STEP_LIMIT {
            return Err(AccountantError::BudgetOverflow {
                step: 0,
                mu: mu_bar,
            });
        }
        (1.0, mu_bar)
    };
    Ok(NoiseSchedule {
        variant,
        iterations: privacy.iterations,
        clip,
        rho_c,
        rho_mu,
        mu,
        privacy,
    })
}

/// Per-step `(C_k, μ_k, σ_k)` as consumed by the engine.
///
/// `clip` may be `+∞` (no clipping) and `sigma` zero (no noise).
#[derive(Debug, Clone, PartialEq)]
pub struct StepTable {
    pub clip: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StepTable {
    /// No clipping, no noise.
    pub fn non_private(iterations: usize) -> Self {
        Self {
            clip: vec![f64::INFINITY; iterations],
            mu: vec![f64::INFINITY; iterations],
            sigma: vec![0.0; iterations],
        }
    }

    /// General-form steps: noise `σ̃·σ̃_k` with σ̃ calibrated to spend
    /// `privacy.mu_tot`. The logged μ_k is the implied `C_k/σ_k`.
    pub fn general_form(
        clip: Vec<f64>,
        sigma_shape: &[f64],
        privacy: &PrivacySpec,
    ) -> Result<Self, AccountantError> {
        let scale = accountant::noise_scale_general(
            &clip,
            sigma_shape,
            privacy.local_size,
            privacy.mu_tot,
        )?;
        let sigma: Vec<f64> = sigma_shape.iter().map(|s| scale * s).collect();
        let mu = clip.iter().zip(&sigma).map(|(c, s)| c / s).collect();
        Ok(Self { clip, mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip.is_empty()
    }

    /// Same bounds with the noise switched off.
    pub fn without_noise(mut self) -> Self {
        self.sigma.iter_mut().for_each(|s| *s = 0.0);
        self
    }

    /// CSV audit dump: `k,C_k,mu_k,sigma_k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,C_k,mu_k,sigma_k\n");
        for k in 0..self.len() {
            out.push_str(&format!(
                "{k},{},{},{}\n",
                self.clip[k], self.mu[k], self.sigma[k]
            ));
        }
        out
    }
}
