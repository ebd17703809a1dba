//! Sensitivity of recovery to entrywise covariance perturbations.
//!
//! Perturbations follow the adversarial model `|ε_ij| ≤ (γ/√k)|Σ_ij|` with
//! `0 < γ < n⁻⁴`. The sampler draws each upper-triangular entry uniformly in
//! its allowed interval and mirrors it, since `Σ̃` must stay symmetric. The
//! bound is read with absolute values because covariance entries can be
//! negative.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{MixedGraph, VertexId};
use crate::linalg::{condition_number, norm2, submatrix};
use crate::lsem::{check_square, Covariance, Provenance};
use crate::recovery::{recover_all, RecoveryConfig};
use crate::rng::{derive_seed, rng_from_seed};

/// `max |A_ij − B_ij| / |A_ij|` over the nonzero entries of `A`.
pub fn relative_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut any = false;
    let mut worst = 0.0_f64;
    for (x, y) in a.iter().zip(b.iter()) {
        if *x != 0.0 {
            any = true;
            worst = worst.max((x - y).abs() / x.abs());
        }
    }
    if any {
        Ok(worst)
    } else {
        Err(Error::UndefinedDistance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerturbationSpec {
    pub gamma: f64,
    pub k: usize,
    pub seed: u64,
    /// Put one entry exactly on the boundary `ε_ij = (γ/√k)Σ_ij`, at the
    /// largest `|Σ_ij|`.
    pub enforce_tight: bool,
}

impl PerturbationSpec {
    /// Checks `0 < γ < n⁻⁴` and `k ≥ 1`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let limit = (n.max(1) as f64).powi(-4);
        if !(self.gamma > 0.0 && self.gamma < limit) {
            return Err(Error::Config(format!(
                "gamma = {:e} must lie in (0, n^-4) = (0, {limit:e})",
                self.gamma
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("degree bound k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `Σ̃ = Σ + ε` with `ε` drawn from the perturbation model.
pub fn sample_perturbation(sigma: &Covariance, spec: &PerturbationSpec) -> Result<Covariance> {
    spec.validate(sigma.n())?;
    perturb_unchecked(sigma, spec)
}

/// Same as [`sample_perturbation`] without the `γ < n⁻⁴` range check; used
/// by experiments that deliberately step outside the model.
pub fn perturb_unchecked(sigma: &Covariance, spec: &PerturbationSpec) -> Result<Covariance> {
    let n = sigma.n();
    check_square(&sigma.sigma, n, "sigma")?;
    if spec.k == 0 || !(spec.gamma >= 0.0) {
        return Err(Error::Config(format!(
            "invalid perturbation gamma = {}, k = {}",
            spec.gamma, spec.k
        )));
    }
    let scale = spec.gamma / (spec.k as f64).sqrt();
    let mut rng = rng_from_seed(spec.seed);
    let mut eps = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let bound = scale * sigma.sigma[(i, j)].abs();
            let e = if bound > 0.0 {
                rng.random_range(-bound..=bound)
            } else {
                0.0
            };
            eps[(i, j)] = e;
            eps[(j, i)] = e;
        }
    }
    if spec.enforce_tight {
        if let Some((i, j)) = argmax_abs_upper(&sigma.sigma) {
            let e = scale * sigma.sigma[(i, j)];
            eps[(i, j)] = e;
            eps[(j, i)] = e;
        }
    }
    Ok(Covariance::new(
        &sigma.sigma + eps,
        Provenance::Perturbed { gamma: spec.gamma },
    ))
}

fn argmax_abs_upper(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            let x = m[(i, j)].abs();
            if best.is_none_or(|(_, b)| x > b) {
                best = Some(((i, j), x));
            }
        }
    }
    best.map(|(ij, _)| ij)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionConfig {
    pub trials: usize,
    pub gammas: Vec<f64>,
    pub seed: u64,
    /// Degree bound used in `γ/√k`; defaults to the graph's.
    pub k: Option<usize>,
    pub enforce_tight: bool,
    /// Reject `γ ≥ n⁻⁴` instead of flagging it.
    pub formal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub gamma: f64,
    pub trial: usize,
    pub rel_lambda: Option<f64>,
    pub rel_sigma: Option<f64>,
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionEstimate {
    /// Largest ratio over successful trials; 0 when none succeeded.
    pub kappa_hat: f64,
    pub gamma_grid: Vec<f64>,
    pub trials: Vec<TrialRecord>,
    pub failures: usize,
    /// Some `γ` was at or above `n⁻⁴`.
    pub outside_model: bool,
}

/// Monte Carlo lower estimate of the relative `ℓ∞` condition number:
/// the largest `Rel(Λ, Λ̃)/Rel(Σ, Σ̃)` over sampled perturbations. Trial `t`
/// at grid point `g` always uses the seed derived from `(seed, g, t)`.
pub fn estimate_condition_number(
    g: &MixedGraph,
    sigma: &Covariance,
    cfg: &ConditionConfig,
    recovery: &RecoveryConfig,
) -> Result<ConditionEstimate> {
    let n = g.n();
    let k = cfg.k.unwrap_or_else(|| g.max_degree_k()).max(1);
    let limit = (n.max(1) as f64).powi(-4);
    let outside_model = cfg.gammas.iter().any(|&x| x >= limit);
    for &gamma in &cfg.gammas {
        let spec = PerturbationSpec {
            gamma,
            k,
            seed: 0,
            enforce_tight: cfg.enforce_tight,
        };
        if cfg.formal {
            spec.validate(n)?;
        } else if !(gamma > 0.0) {
            return Err(Error::Config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
    }
    let base = recover_all(g, sigma, recovery)?.lambda_hat;

    let mut trials = Vec::with_capacity(cfg.trials * cfg.gammas.len());
    let mut failures = 0;
    let mut kappa_hat = 0.0_f64;
    for (gi, &gamma) in cfg.gammas.iter().enumerate() {
        for t in 0..cfg.trials {
            let spec = PerturbationSpec {
                gamma,
                k,
                seed: derive_seed(cfg.seed, &[gi as u64, t as u64]),
                enforce_tight: cfg.enforce_tight,
            };
            let record = run_trial(g, sigma, &base, &spec, recovery, t);
            match record.ratio {
                Some(r) => kappa_hat = kappa_hat.max(r),
                None => failures += 1,
            }
            trials.push(record);
        }
    }
    Ok(ConditionEstimate {
        kappa_hat,
        gamma_grid: cfg.gammas.clone(),
        trials,
        failures,
        outside_model,
    })
}

fn run_trial(
    g: &MixedGraph,
    sigma: &Covariance,
    base: &DMatrix<f64>,
    spec: &PerturbationSpec,
    recovery: &RecoveryConfig,
    trial: usize,
) -> TrialRecord {
    let failed = |msg: String| TrialRecord {
        gamma: spec.gamma,
        trial,
        rel_lambda: None,
        rel_sigma: None,
        ratio: None,
        failure: Some(msg),
    };
    let perturbed = match perturb_unchecked(sigma, spec) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let lambda = match recover_all(g, &perturbed, recovery) {
        Ok(r) => r.lambda_hat,
        Err(e) => return failed(e.to_string()),
    };
    match (
        relative_distance(base, &lambda),
        relative_distance(&sigma.sigma, &perturbed.sigma),
    ) {
        (Ok(rl), Ok(rs)) if rs > 0.0 => TrialRecord {
            gamma: spec.gamma,
            trial,
            rel_lambda: Some(rl),
            rel_sigma: Some(rs),
            ratio: Some(rl / rs),
            failure: None,
        },
        (Ok(_), Ok(_)) => failed("perturbation left sigma unchanged".into()),
        (Err(e), _) | (_, Err(e)) => failed(e.to_string()),
    }
}

/// Pass thresholds for the three assumptions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AssumptionThresholds {
    /// A.1: `κ(Σ_{pa,pa}) ≤ kappa_max`.
    pub kappa_max: f64,
    /// A.2: every ratio `< alpha_max`.
    pub alpha_max: f64,
    /// A.3: `‖Λ_{spa,pa}‖ < beta_max`.
    pub beta_max: f64,
    /// A.3: every incoming `|Λ_{u,v}| > weight_floor`; `None` means `1/n²`.
    pub weight_floor: Option<f64>,
}

impl Default for AssumptionThresholds {
    fn default() -> Self {
        AssumptionThresholds {
            kappa_max: f64::INFINITY,
            alpha_max: 1.0,
            beta_max: 1.0,
            weight_floor: None,
        }
    }
}

impl AssumptionThresholds {
    /// Default thresholds with `κ ≤ 1/(2γ)`.
    pub fn for_gamma(gamma: f64) -> Self {
        AssumptionThresholds {
            kappa_max: 1.0 / (2.0 * gamma),
            ..AssumptionThresholds::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VertexAssumptions {
    pub kappa: f64,
    /// `‖Σ_{pa,v}‖`, `‖Σ_{spa,pa}‖` and `‖Σ_{spa,v}‖`, each over `‖Σ_{pa,pa}‖`.
    pub alpha_ratios: [f64; 3],
    pub beta_v: f64,
    /// Smallest incoming `|Λ_{u,v}|` over non-forced edges.
    pub min_weight: f64,
    pub pass_a1: bool,
    pub pass_a2: bool,
    pub pass_a3: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionProfile {
    pub alpha: f64,
    pub beta: f64,
    pub kappa0: f64,
    /// Smallest `|Λ_{u,v}|` over edges.
    pub lambda_floor: f64,
    pub k: usize,
    pub n: usize,
    pub per_vertex: BTreeMap<VertexId, VertexAssumptions>,
    pub pass_a1: bool,
    pub pass_a2: bool,
    pub pass_a3: bool,
}

impl AssumptionProfile {
    pub fn passes_all(&self) -> bool {
        self.pass_a1 && self.pass_a2 && self.pass_a3
    }
}

/// Per-vertex assumption constants and their worst cases. Vertices without
/// grandparents have empty `spa` blocks, whose norms count as 0. A singular
/// `Σ_{pa,pa}` fails A.1 at that vertex with infinite `κ`.
pub fn check_assumptions(
    g: &MixedGraph,
    sigma: &Covariance,
    lambda: &DMatrix<f64>,
    thresholds: &AssumptionThresholds,
) -> Result<AssumptionProfile> {
    let n = g.n();
    check_square(&sigma.sigma, n, "sigma")?;
    check_square(lambda, n, "lambda")?;
    let floor = thresholds
        .weight_floor
        .unwrap_or(1.0 / (n.max(1) as f64).powi(2));
    let s = &sigma.sigma;
    let mut per_vertex = BTreeMap::new();
    let (mut alpha, mut beta, mut kappa0) = (0.0_f64, 0.0_f64, 1.0_f64);
    let mut lambda_floor = f64::INFINITY;

    for v in g.vertices() {
        let pa: Vec<VertexId> = g
            .parents(v)?
            .iter()
            .copied()
            .filter(|&p| g.forced_weight(p, v).is_none())
            .collect();
        if pa.is_empty() {
            continue;
        }
        let spa = g.spa(v)?;
        let s_pp = submatrix(s, &pa, &pa);
        let norm_pp = norm2(&s_pp);
        let kappa = condition_number(&s_pp);
        let ratio = |m: DMatrix<f64>| {
            if norm_pp > 0.0 {
                norm2(&m) / norm_pp
            } else {
                f64::INFINITY
            }
        };
        let alpha_ratios = [
            ratio(submatrix(s, &pa, &[v])),
            ratio(submatrix(s, &spa, &pa)),
            ratio(submatrix(s, &spa, &[v])),
        ];
        let beta_v = norm2(&submatrix(lambda, &spa, &pa));
        let min_weight = pa
            .iter()
            .map(|p| lambda[(p.index(), v.index())].abs())
            .fold(f64::INFINITY, f64::min);
        let worst_ratio = alpha_ratios.iter().copied().fold(0.0, f64::max);
        let va = VertexAssumptions {
            kappa,
            alpha_ratios,
            beta_v,
            min_weight,
            pass_a1: kappa.is_finite() && kappa <= thresholds.kappa_max,
            pass_a2: worst_ratio < thresholds.alpha_max,
            pass_a3: beta_v < thresholds.beta_max && min_weight > floor,
        };
        alpha = alpha.max(worst_ratio);
        beta = beta.max(beta_v);
        kappa0 = kappa0.max(kappa);
        lambda_floor = lambda_floor.min(min_weight);
        per_vertex.insert(v, va);
    }
    let all = |f: fn(&VertexAssumptions) -> bool| per_vertex.values().all(f);
    Ok(AssumptionProfile {
        alpha,
        beta,
        kappa0,
        lambda_floor,
        k: g.max_degree_k(),
        n,
        pass_a1: all(|v| v.pass_a1),
        pass_a2: all(|v| v.pass_a2),
        pass_a3: all(|v| v.pass_a3),
        per_vertex,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PremiseReport {
    /// `αβκ₀`, required `< 0.99`.
    pub product: f64,
    /// `(ακ₀/(1−αβκ₀))·(1 + κ₀(1+β)/(1−αβκ₀))`, required `< 0.99/k`.
    pub growth: f64,
    pub growth_limit: f64,
    pub holds: bool,
}

/// Both inequalities of the condition-number theorem.
pub fn theorem_premise(profile: &AssumptionProfile) -> PremiseReport {
    premise_from(profile.alpha, profile.beta, profile.kappa0, profile.k)
}

pub fn premise_from(alpha: f64, beta: f64, kappa0: f64, k: usize) -> PremiseReport {
    let product = alpha * beta * kappa0;
    let d = 1.0 - product;
    let growth = if alpha == 0.0 {
        0.0
    } else {
        (alpha * kappa0 / d) * (1.0 + kappa0 * (1.0 + beta) / d)
    };
    let growth_limit = 0.99 / k.max(1) as f64;
    PremiseReport {
        product,
        growth,
        growth_limit,
        holds: product < 0.99 && growth < growth_limit,
    }
}

/// `κ₀ = ((1+μ)/μ)⁴ + (μ+1)²/(5μ²(μ−1))`, the input condition number that
/// instances of the small-weight generative model satisfy with high
/// probability.
pub fn generated_kappa0(mu: f64) -> f64 {
    ((1.0 + mu) / mu).powi(4) + (mu + 1.0).powi(2) / (5.0 * mu * mu * (mu - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LemmaConstants {
    pub eta: f64,
    /// `kη/n²`.
    pub tau: f64,
    pub c6: f64,
    pub premise_ok: bool,
    pub iterations: usize,
}

const ETA_REL_TOL: f64 = 1e-12;
const ETA_MAX_ITERS: usize = 100;

/// Coefficients of the per-vertex error recursion `η·D = N(η)`.
#[derive(Clone, Copy, Debug)]
pub struct EtaEquation {
    pub alpha: f64,
    pub beta: f64,
    pub kappa0: f64,
    pub k: f64,
    pub n: f64,
    pub gamma: f64,
}

impl EtaEquation {
    fn s(&self) -> f64 {
        1.0 - self.alpha * self.beta * self.kappa0
    }

    /// `D = 1 − kακ₀/s − kακ₀²(1+β)/s²` with `s = 1 − αβκ₀`.
    pub fn denominator(&self) -> f64 {
        let (a, b, kp, k, s) = (self.alpha, self.beta, self.kappa0, self.k, self.s());
        1.0 - k * a * kp / s - k * a * kp * kp * (1.0 + b) / (s * s)
    }

    pub fn tau(&self, eta: f64) -> f64 {
        self.k * eta / (self.n * self.n)
    }

    pub fn c6(&self, eta: f64) -> f64 {
        let (a, b, kp, k, s) = (self.alpha, self.beta, self.kappa0, self.k, self.s());
        let t = k * eta + 1.0 + b + self.tau(eta);
        4.0 * a * (1.0 + b) * kp.powi(3) * t * t / s.powi(3)
    }

    /// Right-hand side `N(η)`.
    pub fn numerator(&self, eta: f64) -> f64 {
        let (a, b, kp, s) = (self.alpha, self.beta, self.kappa0, self.s());
        let tau = self.tau(eta);
        a * kp * kp * (1.0 + b) * (1.0 + b + tau) / (s * s)
            + kp * a * (1.0 + b + tau) / s
            + self.c6(eta) * self.gamma
    }
}

/// Smallest fixed point of `η = N(η)/D`, by iteration from `η = 0`.
pub fn eta_bound(
    profile: &AssumptionProfile,
    n: usize,
    k: usize,
    gamma: f64,
) -> Result<LemmaConstants> {
    let eq = EtaEquation {
        alpha: profile.alpha,
        beta: profile.beta,
        kappa0: profile.kappa0,
        k: k.max(1) as f64,
        n: n as f64,
        gamma,
    };
    let premise_ok = premise_from(profile.alpha, profile.beta, profile.kappa0, k).holds;
    solve_eta(&eq, premise_ok)
}

pub fn solve_eta(eq: &EtaEquation, premise_ok: bool) -> Result<LemmaConstants> {
    if eq.s() <= 0.0 {
        return Err(Error::Premise(format!(
            "1 - alpha*beta*kappa0 = {} is not positive",
            eq.s()
        )));
    }
    let d = eq.denominator();
    if d <= 0.0 {
        return Err(Error::Premise(format!(
            "eta denominator {d} is not positive"
        )));
    }
    let mut eta = 0.0_f64;
    for it in 1..=ETA_MAX_ITERS {
        let next = eq.numerator(eta) / d;
        if !next.is_finite() {
            break;
        }
        let done = (next - eta).abs() <= ETA_REL_TOL * next.abs();
        eta = next;
        if done {
            return Ok(LemmaConstants {
                eta,
                tau: eq.tau(eta),
                c6: eq.c6(eta),
                premise_ok,
                iterations: it,
            });
        }
    }
    Err(Error::EtaConvergence {
        iterations: ETA_MAX_ITERS,
        last: eta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConditionBound {
    /// `η√k·n²`.
    pub bound: f64,
    /// `η√k/λ_floor`, when the measured weight floor exceeds `1/n²`.
    pub tight: Option<f64>,
}

pub fn condition_bound(
    constants: &LemmaConstants,
    profile: &AssumptionProfile,
    n: usize,
    k: usize,
) -> ConditionBound {
    let root_k = (k.max(1) as f64).sqrt();
    let n2 = (n as f64).powi(2);
    let floor = profile.lambda_floor;
    ConditionBound {
        bound: constants.eta * root_k * n2,
        tight: (floor.is_finite() && floor > 1.0 / n2).then(|| constants.eta * root_k / floor),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VertexErrorCheck {
    /// Largest `‖Λ_{pa,v} − Λ̃_{pa,v}‖₂` over perturbations.
    pub max_error: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub per_vertex: BTreeMap<VertexId, VertexErrorCheck>,
    pub perturbations: usize,
    /// Perturbations on which recovery failed.
    pub inconclusive: usize,
    /// `Rel(Λ, Λ̃)/Rel(Σ, Σ̃)` per successful perturbation.
    pub trial_ratios: Vec<f64>,
    pub all_pass: bool,
}

/// Draws `perturbations` samples (seeds derived from `spec.seed`) and
/// compares the per-vertex weight error with `η·γ`.
pub fn lemma1_error_check(
    g: &MixedGraph,
    sigma: &Covariance,
    lambda_true: &DMatrix<f64>,
    spec: &PerturbationSpec,
    constants: &LemmaConstants,
    perturbations: usize,
    recovery: &RecoveryConfig,
) -> Result<Lemma1Report> {
    spec.validate(g.n())?;
    check_square(lambda_true, g.n(), "lambda")?;
    let bound = constants.eta * spec.gamma;
    let targets: Vec<(VertexId, Vec<VertexId>)> = g
        .vertices()
        .filter_map(|v| {
            let pa: Vec<VertexId> = g
                .parents_of(v)
                .iter()
                .copied()
                .filter(|&p| g.forced_weight(p, v).is_none())
                .collect();
            (!pa.is_empty()).then_some((v, pa))
        })
        .collect();
    let mut max_err: BTreeMap<VertexId, f64> = targets.iter().map(|(v, _)| (*v, 0.0)).collect();
    let mut inconclusive = 0;
    let mut trial_ratios = Vec::new();
    for t in 0..perturbations {
        let trial_spec = PerturbationSpec {
            seed: derive_seed(spec.seed, &[t as u64]),
            ..*spec
        };
        let perturbed = sample_perturbation(sigma, &trial_spec)?;
        let Ok(res) = recover_all(g, &perturbed, recovery) else {
            inconclusive += 1;
            continue;
        };
        for (v, pa) in &targets {
            let err = pa
                .iter()
                .map(|p| {
                    (lambda_true[(p.index(), v.index())] - res.lambda_hat[(p.index(), v.index())])
                        .powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let slot = max_err.get_mut(v).expect("target vertex");
            *slot = slot.max(err);
        }
        if let (Ok(rl), Ok(rs)) = (
            relative_distance(lambda_true, &res.lambda_hat),
            relative_distance(&sigma.sigma, &perturbed.sigma),
        ) {
            if rs > 0.0 {
                trial_ratios.push(rl / rs);
            }
        }
    }
    let per_vertex: BTreeMap<VertexId, VertexErrorCheck> = max_err
        .into_iter()
        .map(|(v, e)| {
            (
                v,
                VertexErrorCheck {
                    max_error: e,
                    bound,
                    passed: e <= bound,
                },
            )
        })
        .collect();
    let all_pass = inconclusive == 0 && per_vertex.values().all(|c| c.passed);
    Ok(Lemma1Report {
        per_vertex,
        perturbations,
        inconclusive,
        trial_ratios,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{gen_model2_instance, GenerativeConfig, Model2Config};
    use crate::lsem::{forward_map, ParamSet};
    use approx::assert_relative_eq;

    fn m(rows: usize, cols: usize, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, xs)
    }

    #[test]
    fn relative_distance_definition() {
        let a = m(2, 2, &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(relative_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(
            relative_distance(&m(1, 1, &[2.0]), &m(1, 1, &[1.0])).unwrap(),
            0.5
        );
        let id = DMatrix::identity(2, 2);
        assert_eq!(
            relative_distance(&id, &m(2, 2, &[1.0, 9.0, 0.0, 1.0])).unwrap(),
            0.0
        );
        // denominators come from the first argument
        assert_eq!(
            relative_distance(&m(1, 1, &[1.0]), &m(1, 1, &[2.0])).unwrap(),
            1.0
        );
        assert!(matches!(
            relative_distance(&DMatrix::zeros(2, 2), &id),
            Err(Error::UndefinedDistance)
        ));
    }

    fn small_instance() -> (MixedGraph, ParamSet, Covariance) {
        let g = MixedGraph::from_edges(4, &[(0, 1), (1, 2), (0, 3), (2, 3)], &[(0, 2), (1, 3)])
            .unwrap();
        let mut lambda = DMatrix::zeros(4, 4);
        for &((a, b), w) in &[
            ((0, 1), 0.05),
            ((1, 2), -0.04),
            ((0, 3), 0.03),
            ((2, 3), 0.06),
        ] {
            lambda[(a, b)] = w;
        }
        let mut omega = DMatrix::identity(4, 4);
        for &(a, b, w) in &[(0, 2, 0.02), (1, 3, -0.03)] {
            omega[(a, b)] = w;
            omega[(b, a)] = w;
        }
        let p = ParamSet::new(lambda, omega);
        let s = forward_map(&g, &p).unwrap();
        (g, p, s)
    }

    #[test]
    fn perturbation_respects_bounds() {
        let (g, _, s) = small_instance();
        for seed in 0..10_000u64 {
            let spec = PerturbationSpec {
                gamma: 1e-3,
                k: 2,
                seed,
                enforce_tight: seed % 2 == 0,
            };
            let p = sample_perturbation(&s, &spec).unwrap();
            let scale = spec.gamma / 2f64.sqrt();
            for i in 0..4 {
                for j in 0..4 {
                    let e = p.sigma[(i, j)] - s.sigma[(i, j)];
                    assert!(e.abs() <= scale * s.sigma[(i, j)].abs() * (1.0 + 1e-12) + 1e-300);
                    assert_eq!(p.sigma[(i, j)], p.sigma[(j, i)]);
                }
            }
        }
        let _ = g;
    }

    #[test]
    fn tight_entry_at_largest_magnitude() {
        let s = Covariance::exact(m(2, 2, &[1.0, -3.0, -3.0, 10.0]));
        let p = sample_perturbation(
            &s,
            &PerturbationSpec {
                gamma: 0.001,
                k: 4,
                seed: 1,
                enforce_tight: true,
            },
        )
        .unwrap();
        assert_relative_eq!(
            p.sigma[(1, 1)] - 10.0,
            0.001 / 2.0 * 10.0,
            max_relative = 1e-9
        );
        let r = relative_distance(&s.sigma, &p.sigma).unwrap();
        assert_relative_eq!(r, 0.0005, max_relative = 1e-9);
    }

    #[test]
    fn gamma_range_is_checked() {
        let s = Covariance::exact(DMatrix::identity(3, 3));
        let spec = |gamma| PerturbationSpec {
            gamma,
            k: 1,
            seed: 0,
            enforce_tight: false,
        };
        assert!(sample_perturbation(&s, &spec(0.1)).is_err());
        assert!(sample_perturbation(&s, &spec(0.0)).is_err());
        let tiny = sample_perturbation(&s, &spec(1e-300)).unwrap();
        assert!((tiny.sigma - s.sigma).abs().max() < 1e-299);
    }

    #[test]
    fn claim_one_norm_bounds() {
        let (g, p, s) = small_instance();
        let prof = check_assumptions(&g, &s, &p.lambda, &AssumptionThresholds::default()).unwrap();
        for seed in 0..200 {
            let spec = PerturbationSpec {
                gamma: 1e-4,
                k: 2,
                seed,
                enforce_tight: true,
            };
            let eps = sample_perturbation(&s, &spec).unwrap().sigma - &s.sigma;
            for v in g.vertices() {
                let pa = g.parents(v).unwrap().to_vec();
                if pa.is_empty() {
                    continue;
                }
                let spa = g.spa(v).unwrap();
                let n_pp = norm2(&submatrix(&s.sigma, &pa, &pa));
                assert!(norm2(&submatrix(&eps, &pa, &pa)) <= spec.gamma * n_pp * (1.0 + 1e-12));
                assert!(
                    norm2(&submatrix(&eps, &spa, &[v]))
                        <= spec.gamma * prof.alpha * n_pp * (1.0 + 1e-12)
                );
            }
        }
    }

    #[test]
    fn identity_profile() {
        let g = MixedGraph::from_edges(3, &[], &[]).unwrap();
        let s = Covariance::exact(DMatrix::identity(3, 3));
        let prof = check_assumptions(
            &g,
            &s,
            &DMatrix::zeros(3, 3),
            &AssumptionThresholds::default(),
        )
        .unwrap();
        assert_eq!(prof.alpha, 0.0);
        assert_eq!(prof.kappa0, 1.0);
        assert!(prof.passes_all());
    }

    #[test]
    fn ratios_are_scale_invariant() {
        let (g, p, s) = small_instance();
        let t = AssumptionThresholds::default();
        let a = check_assumptions(&g, &s, &p.lambda, &t).unwrap();
        let scaled = Covariance::exact(&s.sigma * 7.5);
        let b = check_assumptions(&g, &scaled, &p.lambda, &t).unwrap();
        for (x, y) in a.per_vertex.values().zip(b.per_vertex.values()) {
            assert_relative_eq!(x.kappa, y.kappa, max_relative = 1e-10);
            for i in 0..3 {
                assert_relative_eq!(x.alpha_ratios[i], y.alpha_ratios[i], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn ill_conditioned_parents_fail_a1() {
        let g = MixedGraph::from_edges(3, &[(0, 2), (1, 2)], &[]).unwrap();
        let s = Covariance::exact(m(
            3,
            3,
            &[1.0, 0.999999, 0.1, 0.999999, 1.0, 0.1, 0.1, 0.1, 1.0],
        ));
        let mut lambda = DMatrix::zeros(3, 3);
        lambda[(0, 2)] = 0.5;
        lambda[(1, 2)] = 0.5;
        let prof =
            check_assumptions(&g, &s, &lambda, &AssumptionThresholds::for_gamma(1e-4)).unwrap();
        assert!(!prof.per_vertex[&VertexId(2)].pass_a1);
        assert!(!prof.pass_a1);
    }

    #[test]
    fn premise_cases() {
        assert!(premise_from(0.0, 0.5, 2.0, 3).holds);
        assert_eq!(premise_from(0.0, 0.5, 2.0, 3).growth, 0.0);
        assert!(!premise_from(1.0, 1.0, 1.0, 1).holds);
        let mu = 30.0;
        let kappa0 = generated_kappa0(mu);
        assert!((kappa0 - 1.147).abs() < 1e-3, "{kappa0}");
        assert!(premise_from(1.0 / mu, 1.0 / mu, kappa0, 2).holds);
    }

    fn profile(alpha: f64, beta: f64, kappa0: f64, k: usize) -> AssumptionProfile {
        AssumptionProfile {
            alpha,
            beta,
            kappa0,
            lambda_floor: f64::INFINITY,
            k,
            n: 0,
            per_vertex: BTreeMap::new(),
            pass_a1: true,
            pass_a2: true,
            pass_a3: true,
        }
    }

    /// Root of `η·D − N(η)` by bisection; an independent check on the
    /// fixed-point iteration.
    fn bisect_eta(eq: &EtaEquation) -> f64 {
        let f = |x: f64| x * eq.denominator() - eq.numerator(x);
        let (mut lo, mut hi) = (0.0, 1.0);
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn eta_matches_bisection() {
        let c = eta_bound(&profile(0.05, 0.05, 1.2, 2), 20, 2, 1e-9).unwrap();
        let eq = EtaEquation {
            alpha: 0.05,
            beta: 0.05,
            kappa0: 1.2,
            k: 2.0,
            n: 20.0,
            gamma: 1e-9,
        };
        assert!((c.eta - bisect_eta(&eq)).abs() <= 1e-10);
        assert_eq!(c.tau, 2.0 * c.eta / 400.0);
        assert!(c.premise_ok);
    }

    #[test]
    fn eta_edge_cases() {
        let zero = eta_bound(&profile(0.0, 0.3, 1.5, 2), 10, 2, 1e-6).unwrap();
        assert_eq!(zero.eta, 0.0);
        assert!(matches!(
            eta_bound(&profile(0.6, 0.5, 1.5, 2), 10, 2, 1e-6),
            Err(Error::Premise(_))
        ));
        let mu = 30.0;
        let kappa0 = generated_kappa0(mu);
        let c = eta_bound(&profile(1.0 / mu, 1.0 / mu, kappa0, 2), 20, 2, 1e-9).unwrap();
        assert!(c.eta.is_finite() && c.eta > 0.0 && c.eta * 2.0 < 1.0);
    }

    #[test]
    fn bound_arithmetic() {
        let p = profile(0.1, 0.1, 1.0, 4);
        let zero = LemmaConstants {
            eta: 0.0,
            tau: 0.0,
            c6: 0.0,
            premise_ok: true,
            iterations: 1,
        };
        assert_eq!(condition_bound(&zero, &p, 10, 4).bound, 0.0);
        let one = LemmaConstants { eta: 1.0, ..zero };
        assert_eq!(condition_bound(&one, &p, 10, 4).bound, 200.0);
        let floored = AssumptionProfile {
            lambda_floor: 0.5,
            ..p
        };
        assert_eq!(condition_bound(&one, &floored, 10, 4).tight, Some(4.0));
    }

    #[test]
    fn two_node_ratio_matches_finite_difference() {
        let g = MixedGraph::from_edges(2, &[(0, 1)], &[]).unwrap();
        let l = 0.3;
        let s = Covariance::exact(m(2, 2, &[1.0, l, l, 1.0 + l * l]));
        let cfg = ConditionConfig {
            trials: 1,
            gammas: vec![1e-9],
            seed: 4,
            k: None,
            enforce_tight: true,
            formal: false,
        };
        let est = estimate_condition_number(&g, &s, &cfg, &RecoveryConfig::default()).unwrap();

        // replay the single perturbation and differentiate along it
        let spec = PerturbationSpec {
            gamma: 1e-9,
            k: 1,
            seed: derive_seed(4, &[0, 0]),
            enforce_tight: true,
        };
        let eps = perturb_unchecked(&s, &spec).unwrap().sigma - &s.sigma;
        let lam = |t: f64| {
            let moved = &s.sigma + &eps * t;
            moved[(0, 1)] / moved[(0, 0)]
        };
        // ε is ~1e-9 relative, so even h = 1 stays in the linear regime
        let h = 1.0;
        let directional = ((lam(h) - lam(-h)) / (2.0 * h)).abs() / l;
        let rel_sigma = relative_distance(&s.sigma, &(&s.sigma + &eps)).unwrap();
        assert_relative_eq!(est.kappa_hat, directional / rel_sigma, max_relative = 1e-4);
    }

    #[test]
    fn kappa_hat_is_monotone_in_trials() {
        let (g, _, s) = small_instance();
        let mk = |trials| ConditionConfig {
            trials,
            gammas: vec![1e-3, 1e-2],
            seed: 9,
            k: None,
            enforce_tight: false,
            formal: false,
        };
        let a = estimate_condition_number(&g, &s, &mk(5), &RecoveryConfig::default()).unwrap();
        let b = estimate_condition_number(&g, &s, &mk(20), &RecoveryConfig::default()).unwrap();
        assert!(a.kappa_hat <= b.kappa_hat);
        assert!(a.outside_model);
        let formal = ConditionConfig {
            formal: true,
            ..mk(1)
        };
        assert!(estimate_condition_number(&g, &s, &formal, &RecoveryConfig::default()).is_err());
    }

    #[test]
    fn lemma_bound_holds_on_generated_instance() {
        let cfg = Model2Config::new(
            GenerativeConfig {
                d: 2000,
                ..GenerativeConfig::standard(12, 2, 21)
            },
            0.6,
        );
        let inst = gen_model2_instance(&cfg).unwrap();
        let prof = check_assumptions(
            &inst.graph,
            &inst.sigma,
            &inst.params.lambda,
            &AssumptionThresholds::default(),
        )
        .unwrap();
        let premise = theorem_premise(&prof);
        assert!(premise.holds, "{premise:?}");
        let gamma = 1e-8;
        let c = eta_bound(&prof, 12, 2, gamma).unwrap();
        let spec = PerturbationSpec {
            gamma,
            k: 2,
            seed: 3,
            enforce_tight: true,
        };
        let rep = lemma1_error_check(
            &inst.graph,
            &inst.sigma,
            &inst.params.lambda,
            &spec,
            &c,
            20,
            &RecoveryConfig::default(),
        )
        .unwrap();
        assert!(rep.all_pass, "{rep:?}");
        let bound = condition_bound(&c, &prof, 12, 2).bound;
        assert!(rep.trial_ratios.iter().all(|&r| r <= bound));
    }
}
