//! Domain types shared by the solver, the online engine and the harness.
//!
//! Money is carried as integer micro-units ([`Micros`]) everywhere state is
//! accumulated, so revenue and spend totals do not depend on summation
//! order. Rules and the LP work in `f64` money units (`micros / 1e6`).

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MICROS_PER_UNIT: f64 = 1_000_000.0;

/// An amount of money in integer micro-units.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Micros(pub i64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    pub fn from_units(units: f64) -> Micros {
        Micros((units * MICROS_PER_UNIT).round() as i64)
    }

    #[inline]
    pub fn as_units(self) -> f64 {
        self.0 as f64 / MICROS_PER_UNIT
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl AddAssign for Micros {
    fn add_assign(&mut self, rhs: Micros) {
        self.0 += rhs.0;
    }
}

impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl SubAssign for Micros {
    fn sub_assign(&mut self, rhs: Micros) {
        self.0 -= rhs.0;
    }
}

impl std::iter::Sum for Micros {
    fn sum<I: Iterator<Item = Micros>>(iter: I) -> Micros {
        Micros(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("impression {impression}: campaign index {campaign} out of range (N = {n})")]
    IndexOutOfRange {
        impression: String,
        campaign: usize,
        n: usize,
    },
    #[error("impression {impression}: negative money on campaign {campaign}")]
    NegativeMoney { impression: String, campaign: usize },
    #[error("impression {impression}: campaign {campaign} listed twice")]
    DuplicateEntry { impression: String, campaign: usize },
    #[error(
        "impression {impression}: entry for campaign {campaign} has zero revenue and zero cost"
    )]
    EmptyEntry { impression: String, campaign: usize },
    #[error("campaign {0}: budget must be positive")]
    NonPositiveBudget(String),
    #[error("campaign {0}: duplicate campaign id")]
    DuplicateCampaign(String),
    #[error("more than one house campaign ({0} and {1})")]
    MultipleHouse(String, String),
    #[error("house campaign {0} cannot carry a frequency cap")]
    HouseWithCap(String),
    #[error("spend on campaign {campaign} would exceed its budget")]
    Overspend { campaign: usize },
    #[error("price vector invalid: {0}")]
    InvalidPrices(String),
    #[error("policy parameter invalid: {0}")]
    InvalidPolicy(String),
}

/// One (campaign, revenue, cost) bid carried by an impression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub campaign: usize,
    pub revenue: Micros,
    pub cost: Micros,
}

impl Entry {
    pub fn new(campaign: usize, revenue: Micros, cost: Micros) -> Entry {
        Entry {
            campaign,
            revenue,
            cost,
        }
    }
}

/// A single ad request. Campaigns not listed bid `(0, 0)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impression {
    pub id: String,
    pub user: String,
    pub entries: Vec<Entry>,
}

impl Impression {
    pub fn new(id: impl Into<String>, user: impl Into<String>, entries: Vec<Entry>) -> Impression {
        Impression {
            id: id.into(),
            user: user.into(),
            entries,
        }
    }

    pub fn entry(&self, campaign: usize) -> Option<&Entry> {
        self.entries.iter().find(|e| e.campaign == campaign)
    }

    /// Checks the entry list against a book with `n` campaigns.
    pub fn validate(&self, n: usize) -> Result<(), ModelError> {
        for (k, e) in self.entries.iter().enumerate() {
            if e.campaign >= n {
                return Err(ModelError::IndexOutOfRange {
                    impression: self.id.clone(),
                    campaign: e.campaign,
                    n,
                });
            }
            if e.revenue.is_negative() || e.cost.is_negative() {
                return Err(ModelError::NegativeMoney {
                    impression: self.id.clone(),
                    campaign: e.campaign,
                });
            }
            if e.revenue.0 == 0 && e.cost.0 == 0 {
                return Err(ModelError::EmptyEntry {
                    impression: self.id.clone(),
                    campaign: e.campaign,
                });
            }
            if self.entries[..k].iter().any(|o| o.campaign == e.campaign) {
                return Err(ModelError::DuplicateEntry {
                    impression: self.id.clone(),
                    campaign: e.campaign,
                });
            }
        }
        Ok(())
    }
}

/// Static description of one campaign. `budget == None` marks the house
/// campaign, which has an unbounded budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: String,
    pub budget: Option<Micros>,
    pub fcap: Option<u32>,
}

impl Campaign {
    pub fn budgeted(id: impl Into<String>, budget: Micros) -> Campaign {
        Campaign {
            id: id.into(),
            budget: Some(budget),
            fcap: None,
        }
    }

    pub fn house(id: impl Into<String>) -> Campaign {
        Campaign {
            id: id.into(),
            budget: None,
            fcap: None,
        }
    }

    pub fn with_fcap(mut self, cap: u32) -> Campaign {
        self.fcap = Some(cap);
        self
    }

    pub fn is_house(&self) -> bool {
        self.budget.is_none()
    }
}

/// Campaigns with dense 0-based indices plus their spend to date.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CampaignBook {
    campaigns: Vec<Campaign>,
    spent: Vec<Micros>,
    house: Option<usize>,
    index: HashMap<String, usize>,
}

impl CampaignBook {
    pub fn new(campaigns: Vec<Campaign>) -> Result<CampaignBook, ModelError> {
        let mut house: Option<usize> = None;
        let mut index = HashMap::with_capacity(campaigns.len());
        for (i, c) in campaigns.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(ModelError::DuplicateCampaign(c.id.clone()));
            }
            match c.budget {
                Some(b) if b.0 <= 0 => return Err(ModelError::NonPositiveBudget(c.id.clone())),
                Some(_) => {}
                None => {
                    if let Some(h) = house {
                        return Err(ModelError::MultipleHouse(
                            campaigns[h].id.clone(),
                            c.id.clone(),
                        ));
                    }
                    if c.fcap.is_some() {
                        return Err(ModelError::HouseWithCap(c.id.clone()));
                    }
                    house = Some(i);
                }
            }
        }
        let spent = vec![Micros::ZERO; campaigns.len()];
        Ok(CampaignBook {
            campaigns,
            spent,
            house,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.campaigns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.campaigns.is_empty()
    }

    pub fn campaigns(&self) -> &[Campaign] {
        &self.campaigns
    }

    pub fn campaign(&self, i: usize) -> &Campaign {
        &self.campaigns[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn house(&self) -> Option<usize> {
        self.house
    }

    #[inline]
    pub fn is_house(&self, i: usize) -> bool {
        self.house == Some(i)
    }

    pub fn budget(&self, i: usize) -> Option<Micros> {
        self.campaigns[i].budget
    }

    pub fn fcap(&self, i: usize) -> Option<u32> {
        self.campaigns[i].fcap
    }

    pub fn spent(&self, i: usize) -> Micros {
        self.spent[i]
    }

    /// `b_i - spent_i`; `None` for the house campaign.
    #[inline]
    pub fn remaining(&self, i: usize) -> Option<Micros> {
        self.campaigns[i].budget.map(|b| b - self.spent[i])
    }

    /// Records spend on campaign `i`, refusing anything that would overspend.
    pub fn charge(&mut self, i: usize, cost: Micros) -> Result<(), ModelError> {
        if let Some(rem) = self.remaining(i) {
            if cost > rem {
                return Err(ModelError::Overspend { campaign: i });
            }
        }
        self.spent[i] += cost;
        Ok(())
    }

    /// A copy of this book with all spend cleared.
    pub fn fresh(&self) -> CampaignBook {
        let mut book = self.clone();
        book.spent.iter_mut().for_each(|s| *s = Micros::ZERO);
        book
    }

    /// Budget vector in money units. The house campaign maps to `+inf`.
    pub fn budgets_units(&self) -> Vec<f64> {
        self.campaigns
            .iter()
            .map(|c| c.budget.map_or(f64::INFINITY, Micros::as_units))
            .collect()
    }

    pub fn has_fcaps(&self) -> bool {
        self.campaigns.iter().any(|c| c.fcap.is_some())
    }
}

/// The allocation state `(w, s_1, ..., s_N)`. The house campaign's slot in
/// `s` is held at zero and never consulted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub w: Micros,
    pub s: Vec<Micros>,
}

impl Position {
    pub fn new(w: Micros, s: Vec<Micros>) -> Position {
        Position { w, s }
    }

    pub fn from_book(book: &CampaignBook) -> Position {
        let s = (0..book.len())
            .map(|i| book.remaining(i).unwrap_or(Micros::ZERO))
            .collect();
        Position { w: Micros::ZERO, s }
    }

    /// Position after assigning an impression worth `revenue` at `cost` to `i`.
    pub fn assigned(&self, i: usize, revenue: Micros, cost: Micros) -> Position {
        let mut next = self.clone();
        next.assign(i, revenue, cost);
        next
    }

    pub(crate) fn assign(&mut self, i: usize, revenue: Micros, cost: Micros) {
        self.w += revenue;
        self.s[i] -= cost;
    }
}

/// Per-campaign prices, each in `[0, p_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPriceVector {
    prices: Vec<f64>,
    p_max: f64,
}

impl DualPriceVector {
    pub fn new(prices: Vec<f64>, p_max: f64) -> Result<DualPriceVector, ModelError> {
        if !(p_max.is_finite() && p_max > 0.0) {
            return Err(ModelError::InvalidPrices(format!("p_max = {p_max}")));
        }
        if let Some((i, p)) = prices
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p >= 0.0 && **p <= p_max))
        {
            return Err(ModelError::InvalidPrices(format!(
                "price {i} = {p} outside [0, {p_max}]"
            )));
        }
        Ok(DualPriceVector { prices, p_max })
    }

    /// Builds a vector by clamping every component into `[0, p_max]`.
    /// Non-finite inputs map to the nearest bound (NaN to 0).
    pub fn clamped(prices: Vec<f64>, p_max: f64) -> Result<DualPriceVector, ModelError> {
        let prices = prices
            .into_iter()
            .map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, p_max) })
            .collect();
        DualPriceVector::new(prices, p_max)
    }

    pub fn zeros(n: usize, p_max: f64) -> DualPriceVector {
        DualPriceVector {
            prices: vec![0.0; n],
            p_max,
        }
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.prices[i]
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Greedy: highest revenue among feasible campaigns.
    Zero,
    /// Fixed dual prices.
    Linear,
    /// Prices rise as `lambda / s_i` when budgets run low.
    Log,
    /// Prices follow the spend-vs-time pacing error exponentially.
    Exponential,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Zero,
        PolicyKind::Linear,
        PolicyKind::Log,
        PolicyKind::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Zero => "zero",
            PolicyKind::Linear => "linear",
            PolicyKind::Log => "log",
            PolicyKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero" | "greedy" => Ok(PolicyKind::Zero),
            "linear" | "fixed" | "fixed-dual" => Ok(PolicyKind::Linear),
            "log" => Ok(PolicyKind::Log),
            "exponential" | "exp" => Ok(PolicyKind::Exponential),
            other => Err(format!("unknown policy kind `{other}`")),
        }
    }
}

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-6;

/// Which allocation rule to run, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub p_eps: DualPriceVector,
    /// Regularizer of the log rule.
    pub lambda_log: f64,
    pub kappa: f64,
    /// Number of impressions expected in the serving window.
    pub horizon: u64,
    pub epsilon_floor: f64,
    pub p_max: f64,
}

impl PolicyConfig {
    pub fn greedy(n: usize) -> PolicyConfig {
        PolicyConfig {
            kind: PolicyKind::Zero,
            p_eps: DualPriceVector::zeros(n, 1.0),
            lambda_log: 1.0,
            kappa: 1.0,
            horizon: 1,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            p_max: 1.0,
        }
    }

    pub fn fixed_dual(p_eps: DualPriceVector) -> PolicyConfig {
        PolicyConfig {
            kind: PolicyKind::Linear,
            p_max: p_eps.p_max(),
            p_eps,
            lambda_log: 1.0,
            kappa: 1.0,
            horizon: 1,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }

    pub fn log(p_eps: DualPriceVector, lambda_log: f64) -> PolicyConfig {
        PolicyConfig {
            kind: PolicyKind::Log,
            lambda_log,
            ..PolicyConfig::fixed_dual(p_eps)
        }
    }

    pub fn exponential(p_eps: DualPriceVector, kappa: f64, horizon: u64) -> PolicyConfig {
        PolicyConfig {
            kind: PolicyKind::Exponential,
            kappa,
            horizon,
            ..PolicyConfig::fixed_dual(p_eps)
        }
    }

    /// Same parameters under a different rule.
    pub fn with_kind(&self, kind: PolicyKind) -> PolicyConfig {
        PolicyConfig {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidPolicy(msg));
        if !(self.p_max.is_finite() && self.p_max > 0.0) {
            return bad(format!("p_max = {}", self.p_max));
        }
        if self.kind != PolicyKind::Zero && self.p_eps.len() != n {
            return bad(format!(
                "p_eps has {} prices for {} campaigns",
                self.p_eps.len(),
                n
            ));
        }
        match self.kind {
            PolicyKind::Log if !(self.lambda_log > 0.0 && self.lambda_log.is_finite()) => {
                bad(format!("lambda_log = {}", self.lambda_log))
            }
            PolicyKind::Log if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 1.0) => {
                bad(format!("epsilon_floor = {}", self.epsilon_floor))
            }
            PolicyKind::Exponential if !(self.kappa > 0.0 && self.kappa.is_finite()) => {
                bad(format!("kappa = {}", self.kappa))
            }
            PolicyKind::Exponential if self.horizon == 0 => bad("horizon = 0".into()),
            _ => Ok(()),
        }
    }
}

/// Outcome of evaluating the rule on one impression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub chosen: Option<usize>,
    /// Winning adjusted score; 0 when nothing is chosen.
    pub score: f64,
    pub revenue: Micros,
    pub cost: Micros,
}

impl Decision {
    pub const DROP: Decision = Decision {
        chosen: None,
        score: 0.0,
        revenue: Micros::ZERO,
        cost: Micros::ZERO,
    };
}

/// Returns the first problem found in the stream, or `Ok(())`.
pub fn validate_instance<'a, I>(impressions: I, book: &CampaignBook) -> Result<(), ModelError>
where
    I: IntoIterator<Item = &'a Impression>,
{
    let n = book.len();
    impressions.into_iter().try_for_each(|imp| imp.validate(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book2() -> CampaignBook {
        CampaignBook::new(vec![
            Campaign::budgeted("a", Micros(10)),
            Campaign::budgeted("b", Micros(20)),
        ])
        .unwrap()
    }

    #[test]
    fn empty_stream_is_valid() {
        assert_eq!(validate_instance(&[], &book2()), Ok(()));
    }

    #[test]
    fn index_at_n_is_out_of_range() {
        let imp = Impression::new("i0", "u", vec![Entry::new(2, Micros(1), Micros(1))]);
        assert!(matches!(
            validate_instance(&[imp], &book2()),
            Err(ModelError::IndexOutOfRange { campaign: 2, .. })
        ));
    }

    #[test]
    fn negative_revenue_rejected() {
        let imp = Impression::new(
            "i0",
            "u",
            vec![Entry::new(0, Micros(-1_000_000), Micros(1))],
        );
        assert!(matches!(
            validate_instance(&[imp], &book2()),
            Err(ModelError::NegativeMoney { .. })
        ));
    }

    #[test]
    fn duplicate_and_empty_entries_rejected() {
        let dup = Impression::new(
            "i0",
            "u",
            vec![
                Entry::new(1, Micros(1), Micros(1)),
                Entry::new(1, Micros(2), Micros(1)),
            ],
        );
        assert!(matches!(
            dup.validate(2),
            Err(ModelError::DuplicateEntry { campaign: 1, .. })
        ));
        let empty = Impression::new("i1", "u", vec![Entry::new(0, Micros(0), Micros(0))]);
        assert!(matches!(
            empty.validate(2),
            Err(ModelError::EmptyEntry { .. })
        ));
    }

    #[test]
    fn book_rules() {
        assert!(matches!(
            CampaignBook::new(vec![Campaign::house("h1"), Campaign::house("h2")]),
            Err(ModelError::MultipleHouse(..))
        ));
        assert!(matches!(
            CampaignBook::new(vec![Campaign::budgeted("a", Micros(0))]),
            Err(ModelError::NonPositiveBudget(_))
        ));
        assert!(matches!(
            CampaignBook::new(vec![Campaign::house("h").with_fcap(1)]),
            Err(ModelError::HouseWithCap(_))
        ));
        let book = CampaignBook::new(vec![
            Campaign::budgeted("a", Micros(5)),
            Campaign::house("h"),
        ])
        .unwrap();
        assert_eq!(book.house(), Some(1));
        assert_eq!(book.index_of("h"), Some(1));
        assert_eq!(book.remaining(1), None);
    }

    #[test]
    fn charge_never_overspends() {
        let mut book = book2();
        book.charge(0, Micros(10)).unwrap();
        assert_eq!(book.remaining(0), Some(Micros(0)));
        assert_eq!(
            book.charge(0, Micros(1)),
            Err(ModelError::Overspend { campaign: 0 })
        );
        assert_eq!(book.spent(0), Micros(10));
    }

    #[test]
    fn position_assignment_touches_one_coordinate() {
        let pos = Position::new(Micros(3), vec![Micros(10), Micros(20), Micros(30)]);
        let next = pos.assigned(1, Micros(5), Micros(4));
        assert_eq!(next.w, Micros(8));
        assert_eq!(next.s, vec![Micros(10), Micros(16), Micros(30)]);
    }

    #[test]
    fn price_vector_bounds() {
        assert!(DualPriceVector::new(vec![0.0, 2.0], 1.0).is_err());
        assert!(DualPriceVector::new(vec![f64::NAN], 1.0).is_err());
        let p = DualPriceVector::clamped(vec![-1.0, 0.5, 9.0], 2.0).unwrap();
        assert_eq!(p.prices(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn policy_validation() {
        let p = DualPriceVector::zeros(2, 1.0);
        assert!(PolicyConfig::log(p.clone(), 0.0).validate(2).is_err());
        assert!(PolicyConfig::exponential(p.clone(), 1.0, 0)
            .validate(2)
            .is_err());
        assert!(PolicyConfig::exponential(p.clone(), 1.0, 10)
            .validate(2)
            .is_ok());
        assert!(PolicyConfig::fixed_dual(p).validate(3).is_err());
        assert!(PolicyConfig::greedy(0).validate(5).is_ok());
    }
}
