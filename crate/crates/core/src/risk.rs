//! Budget value functions, the positional risk measure, and the penalty
//! functions of its dual representation.
//!
//! Every value function here is the integral of its clamped derivative: where
//! the raw slope would exceed `p_max` (log near an empty budget, exponential
//! when far behind pace) the function continues linearly with slope `p_max`.
//! This keeps `v` concave and increasing with `v' <= p_max` everywhere, and
//! leaves the value unchanged wherever the raw slope is within the ceiling.

use thiserror::Error;

use crate::model::{Micros, PolicyConfig, PolicyKind, Position};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("missing or invalid parameter: {0}")]
    ParamMissing(String),
    #[error("weight of campaign {campaign} is zero on one side only")]
    ZeroWeight { campaign: usize },
    #[error("expected {expected} components, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Price of the log rule at remaining budget `s`.
#[inline]
pub fn log_price(p_eps: f64, lambda: f64, s: f64, floor: f64, p_max: f64) -> f64 {
    (p_eps + lambda / s.max(floor)).min(p_max)
}

/// Price of the exponential rule at remaining budget `s` of `budget`, with
/// `tau` the elapsed fraction of the horizon.
#[inline]
pub fn exp_price(p_eps: f64, kappa: f64, s: f64, budget: f64, tau: f64, p_max: f64) -> f64 {
    (p_eps * (kappa * ((budget - s) / budget - tau)).exp()).min(p_max)
}

/// `h / H` clamped to `[0, 1]`.
#[inline]
pub fn time_fraction(h: u64, horizon: u64) -> f64 {
    if horizon == 0 {
        return 1.0;
    }
    (h as f64 / horizon as f64).min(1.0)
}

/// Value function parameters for every campaign, in money units.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunctionSpec {
    pub kind: PolicyKind,
    pub p_eps: Vec<f64>,
    /// Full budgets; infinite for the house campaign, whose value is 0.
    pub budgets: Vec<f64>,
    pub lambda_log: f64,
    pub kappa: f64,
    pub h: u64,
    pub horizon: u64,
    pub epsilon_floor: f64,
    pub p_max: f64,
}

impl ValueFunctionSpec {
    pub fn from_policy(policy: &PolicyConfig, budgets: Vec<f64>, h: u64) -> ValueFunctionSpec {
        ValueFunctionSpec {
            kind: policy.kind,
            p_eps: policy.p_eps.prices().to_vec(),
            budgets,
            lambda_log: policy.lambda_log,
            kappa: policy.kappa,
            h,
            horizon: policy.horizon,
            epsilon_floor: policy.epsilon_floor,
            p_max: policy.p_max,
        }
    }

    pub fn tau(&self) -> f64 {
        time_fraction(self.h, self.horizon)
    }

    fn params(&self, i: usize) -> Result<(f64, f64), RiskError> {
        let b = *self
            .budgets
            .get(i)
            .ok_or_else(|| RiskError::ParamMissing(format!("budget of campaign {i}")))?;
        if self.kind == PolicyKind::Zero {
            return Ok((0.0, b));
        }
        let p = *self
            .p_eps
            .get(i)
            .ok_or_else(|| RiskError::ParamMissing(format!("price of campaign {i}")))?;
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(RiskError::ParamMissing(format!("p_max = {}", self.p_max)));
        }
        match self.kind {
            PolicyKind::Log if !(self.lambda_log > 0.0) => Err(RiskError::ParamMissing(format!(
                "lambda_log = {}",
                self.lambda_log
            ))),
            PolicyKind::Log if !(self.epsilon_floor > 0.0) => Err(RiskError::ParamMissing(
                format!("epsilon_floor = {}", self.epsilon_floor),
            )),
            PolicyKind::Exponential if !(self.kappa > 0.0) || self.horizon == 0 => {
                Err(RiskError::ParamMissing(format!(
                    "kappa = {}, horizon = {}",
                    self.kappa, self.horizon
                )))
            }
            _ => Ok((p, b)),
        }
    }

    /// Point below which the raw slope exceeds `p_max`, within `[0, b]`.
    fn knee(&self, p: f64, b: f64) -> f64 {
        let k = match self.kind {
            PolicyKind::Log => {
                let floor = self.epsilon_floor * b;
                if p >= self.p_max {
                    f64::INFINITY
                } else {
                    (self.lambda_log / (self.p_max - p)).max(floor)
                }
            }
            PolicyKind::Exponential => {
                if p <= 0.0 {
                    0.0
                } else {
                    b * (1.0 - self.tau() - (self.p_max / p).ln() / self.kappa)
                }
            }
            _ => 0.0,
        };
        k.clamp(0.0, b)
    }

    fn raw_value(&self, p: f64, b: f64, s: f64) -> f64 {
        match self.kind {
            PolicyKind::Zero => 0.0,
            PolicyKind::Linear => p * s,
            PolicyKind::Log => p * s + self.lambda_log * (s / b).ln(),
            PolicyKind::Exponential => {
                -p * (b / self.kappa) * (self.kappa * ((b - s) / b - self.tau())).exp()
            }
        }
    }

    fn slope(&self, p: f64, b: f64, s: f64) -> f64 {
        match self.kind {
            PolicyKind::Zero => 0.0,
            PolicyKind::Linear => p.min(self.p_max),
            PolicyKind::Log => log_price(p, self.lambda_log, s, self.epsilon_floor * b, self.p_max),
            PolicyKind::Exponential => exp_price(p, self.kappa, s, b, self.tau(), self.p_max),
        }
    }
}

/// `v_i(s)`.
pub fn value(spec: &ValueFunctionSpec, i: usize, s: f64) -> Result<f64, RiskError> {
    let (p, b) = spec.params(i)?;
    if !b.is_finite() || spec.kind == PolicyKind::Zero {
        return Ok(0.0);
    }
    let knee = spec.knee(p, b);
    if s >= knee {
        Ok(spec.raw_value(p, b, s))
    } else {
        Ok(spec.raw_value(p, b, knee) - spec.slope(p, b, knee) * (knee - s))
    }
}

/// `v_i'(s)`, clamped to at most `p_max`.
pub fn value_derivative(spec: &ValueFunctionSpec, i: usize, s: f64) -> Result<f64, RiskError> {
    let (p, b) = spec.params(i)?;
    if !b.is_finite() {
        return Ok(0.0);
    }
    Ok(spec.slope(p, b, s))
}

/// Risk of a position split into its cash part `-w` (exact) and the
/// budget part `-sum v_i(s_i)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskValue {
    pub cash: Micros,
    pub budget_term: f64,
}

impl RiskValue {
    pub fn total(&self) -> f64 {
        self.cash.as_units() + self.budget_term
    }
}

pub fn theta_parts(pos: &Position, spec: &ValueFunctionSpec) -> Result<RiskValue, RiskError> {
    if pos.s.len() != spec.budgets.len() {
        return Err(RiskError::Dimension {
            expected: spec.budgets.len(),
            got: pos.s.len(),
        });
    }
    let mut v = 0.0;
    for (i, s) in pos.s.iter().enumerate() {
        v += value(spec, i, s.as_units())?;
    }
    Ok(RiskValue {
        cash: Micros(-pos.w.0),
        budget_term: -v,
    })
}

/// `theta(S) = -w - sum v_i(s_i)`.
pub fn theta(pos: &Position, spec: &ValueFunctionSpec) -> Result<f64, RiskError> {
    Ok(theta_parts(pos, spec)?.total())
}

/// Prices and budgets for penalty evaluation, in money units.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyInput {
    pub p_eps: Vec<f64>,
    /// Expected prices under the belief being penalized.
    pub p_star: Vec<f64>,
    pub budgets: Vec<f64>,
}

impl PenaltyInput {
    pub fn new(
        p_eps: Vec<f64>,
        p_star: Vec<f64>,
        budgets: Vec<f64>,
    ) -> Result<PenaltyInput, RiskError> {
        for v in [&p_star, &budgets] {
            if v.len() != p_eps.len() {
                return Err(RiskError::Dimension {
                    expected: p_eps.len(),
                    got: v.len(),
                });
            }
        }
        if let Some(x) = p_eps
            .iter()
            .chain(&p_star)
            .chain(&budgets)
            .find(|x| !(x.is_finite() && **x >= 0.0))
        {
            return Err(RiskError::InvalidInput(format!("component {x}")));
        }
        Ok(PenaltyInput {
            p_eps,
            p_star,
            budgets,
        })
    }

    fn gaps(&self) -> impl Iterator<Item = f64> + '_ {
        self.p_eps
            .iter()
            .zip(&self.p_star)
            .zip(&self.budgets)
            .map(|((pe, ps), b)| pe * b - ps * b)
    }
}

/// `sum_i (p_eps_i b_i - p*_i b_i)_+`.
pub fn penalty_linear(inp: &PenaltyInput) -> f64 {
    inp.gaps().map(|x| x.max(0.0)).sum()
}

/// `|x|_lambda`: `x` when `x >= -lambda`, else `-lambda + lambda ln(lambda / -x)`.
pub fn soft_log_norm(x: f64, lambda: f64) -> f64 {
    if x >= -lambda {
        x
    } else {
        -lambda + lambda * (lambda / -x).ln()
    }
}

pub fn penalty_log(inp: &PenaltyInput, lambda_log: f64) -> Result<f64, RiskError> {
    if !(lambda_log > 0.0 && lambda_log.is_finite()) {
        return Err(RiskError::ParamMissing(format!(
            "lambda_log = {lambda_log}"
        )));
    }
    Ok(inp.gaps().map(|x| soft_log_norm(x, lambda_log)).sum())
}

/// `KL(q || p) = sum q log(q / p)` after normalizing both weight vectors.
/// Indices where both weights are zero are dropped.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64, RiskError> {
    if q.len() != p.len() {
        return Err(RiskError::Dimension {
            expected: q.len(),
            got: p.len(),
        });
    }
    for (i, (&a, &b)) in q.iter().zip(p).enumerate() {
        if (a == 0.0) != (b == 0.0) {
            return Err(RiskError::ZeroWeight { campaign: i });
        }
    }
    let sq: f64 = q.iter().sum();
    let sp: f64 = p.iter().sum();
    if sq == 0.0 {
        return Ok(0.0);
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| {
            let (qn, pn) = (a / sq, b / sp);
            qn * (qn / pn).ln()
        })
        .sum())
}

/// Stationary point of `v_i(s) - p*_i s` for the exponential value function.
/// The closed form below is exact when this lies in `[0, b]`.
pub fn exponential_optimizer(p_eps: f64, p_star: f64, budget: f64, kappa: f64, tau: f64) -> f64 {
    budget * (1.0 - tau - (p_star / p_eps).ln() / kappa)
}

/// Penalty of the exponential value function, written with `Q = p* b`,
/// `P = p_eps b` and their totals `S`, `T`:
/// `S (-(1 - h/H) + (KL(Q || P) + ln(S / T) - 1) / kappa)`.
/// The `ln(S / T)` term vanishes when both weight vectors carry the same
/// total.
pub fn penalty_exponential(
    inp: &PenaltyInput,
    kappa: f64,
    h: u64,
    horizon: u64,
) -> Result<f64, RiskError> {
    if !(kappa > 0.0 && kappa.is_finite()) || horizon == 0 {
        return Err(RiskError::ParamMissing(format!(
            "kappa = {kappa}, horizon = {horizon}"
        )));
    }
    let tau = time_fraction(h, horizon);
    let q: Vec<f64> = inp
        .p_star
        .iter()
        .zip(&inp.budgets)
        .map(|(p, b)| p * b)
        .collect();
    let p: Vec<f64> = inp
        .p_eps
        .iter()
        .zip(&inp.budgets)
        .map(|(p, b)| p * b)
        .collect();
    let kl = kl_divergence(&q, &p)?;
    let s: f64 = q.iter().sum();
    let t: f64 = p.iter().sum();
    if s == 0.0 {
        return Ok(0.0);
    }
    Ok(s * (-(1.0 - tau) + (kl + (s / t).ln() - 1.0) / kappa))
}

/// `sum_i sup_{s in [0, b_i]} (v_i(s) - p*_i s)` by grid search per campaign,
/// refined a few times around the best grid point.
pub fn penalty_numeric(
    spec: &ValueFunctionSpec,
    p_star: &[f64],
    grid_resolution: usize,
) -> Result<f64, RiskError> {
    if grid_resolution < 100 {
        return Err(RiskError::InvalidInput(format!(
            "grid_resolution = {grid_resolution} (need at least 100)"
        )));
    }
    if p_star.len() != spec.budgets.len() {
        return Err(RiskError::Dimension {
            expected: spec.budgets.len(),
            got: p_star.len(),
        });
    }
    let mut total = 0.0;
    for (i, &b) in spec.budgets.iter().enumerate() {
        if !b.is_finite() {
            continue;
        }
        let f = |s: f64| value(spec, i, s).map(|v| v - p_star[i] * s);
        let (mut lo, mut hi) = (0.0, b);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..4 {
            let step = (hi - lo) / (grid_resolution - 1) as f64;
            let mut arg = lo;
            for k in 0..grid_resolution {
                let s = lo + step * k as f64;
                let v = f(s)?;
                if v > best {
                    best = v;
                    arg = s;
                }
            }
            lo = (arg - step).max(0.0);
            hi = (arg + step).min(b);
        }
        total += best;
    }
    Ok(total)
}
