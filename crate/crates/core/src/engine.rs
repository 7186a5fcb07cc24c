//! Online allocation: score each arriving impression with the configured
//! rule, pick the best feasible campaign, and update budgets.

use std::fmt;

use thiserror::Error;

use crate::fcap::UserCapCounter;
use crate::model::{
    CampaignBook, Decision, Impression, Micros, ModelError, PolicyConfig, PolicyKind, Position,
};
use crate::risk::{exp_price, log_price, time_fraction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("campaign {campaign} cannot cover a cost of {cost}")]
    Exhausted { campaign: usize, cost: Micros },
    #[error("decision no longer applies: {0}")]
    StaleDecision(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Book, position and counters of one sequential allocation run.
#[derive(Clone, Debug)]
pub struct EngineState {
    book: CampaignBook,
    position: Position,
    h: u64,
    policy: PolicyConfig,
    caps: Option<UserCapCounter>,
    budgets: Vec<f64>,
    floors: Vec<f64>,
    prices: Vec<f64>,
}

impl EngineState {
    /// Starts a run from the book's current spend. Per-user caps are
    /// enforced when any campaign carries one.
    pub fn new(book: CampaignBook, policy: PolicyConfig) -> Result<EngineState, EngineError> {
        policy.validate(book.len())?;
        let budgets: Vec<f64> = book.budgets_units();
        let floors = budgets.iter().map(|b| b * policy.epsilon_floor).collect();
        let prices = (0..book.len())
            .map(|i| {
                if policy.kind == PolicyKind::Zero || book.is_house(i) {
                    0.0
                } else {
                    policy.p_eps.get(i)
                }
            })
            .collect();
        let caps = book.has_fcaps().then(UserCapCounter::new);
        Ok(EngineState {
            position: Position::from_book(&book),
            book,
            h: 0,
            policy,
            caps,
            budgets,
            floors,
            prices,
        })
    }

    pub fn book(&self) -> &CampaignBook {
        &self.book
    }

    pub fn position(&self) -> &Position {
        &self.position
    }

    /// Impressions processed so far.
    pub fn h(&self) -> u64 {
        self.h
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn caps(&self) -> Option<&UserCapCounter> {
        self.caps.as_ref()
    }

    /// Continues counting from an earlier run over the same window.
    pub fn set_caps(&mut self, counter: UserCapCounter) {
        if self.caps.is_some() {
            self.caps = Some(counter);
        }
    }

    pub fn take_caps(&mut self) -> Option<UserCapCounter> {
        self.caps.take()
    }

    /// Elapsed fraction of the horizon at the impression being decided,
    /// counting it: `(h + 1) / H`, at most 1.
    pub fn tau(&self) -> f64 {
        time_fraction(self.h + 1, self.policy.horizon)
    }

    #[inline]
    fn price_after(&self, i: usize, s_after: f64, tau: f64) -> f64 {
        let p = self.prices[i];
        match self.policy.kind {
            PolicyKind::Zero => 0.0,
            PolicyKind::Linear => p,
            PolicyKind::Log => log_price(
                p,
                self.policy.lambda_log,
                s_after,
                self.floors[i],
                self.policy.p_max,
            ),
            PolicyKind::Exponential => exp_price(
                p,
                self.policy.kappa,
                s_after,
                self.budgets[i],
                tau,
                self.policy.p_max,
            ),
        }
    }

    /// Price of campaign `i` for an impression costing `cost`, evaluated at
    /// the budget that would remain after paying it.
    pub fn effective_price(&self, i: usize, cost: Micros) -> Result<f64, EngineError> {
        if self.book.is_house(i) {
            return Ok(0.0);
        }
        let s = self.position.s[i] - cost;
        if s.is_negative() {
            return Err(EngineError::Exhausted { campaign: i, cost });
        }
        Ok(self.price_after(i, s.as_units(), self.tau()))
    }

    /// Best feasible campaign under the rule. Ties go to the lowest index;
    /// a non-house winner needs a positive score. Does not mutate state.
    pub fn decide(&self, imp: &Impression) -> Decision {
        match self.best_entry(imp) {
            Some(d) if d.score > 0.0 || d.chosen.is_some_and(|i| self.book.is_house(i)) => d,
            _ => Decision::DROP,
        }
    }

    /// Highest-scoring feasible entry regardless of sign, lowest index on ties.
    pub fn best_entry(&self, imp: &Impression) -> Option<Decision> {
        let n = self.book.len();
        let tau = self.tau();
        let user = self.caps.as_ref().map(|c| c.user_key(&imp.user));
        let mut best: Option<(usize, f64, Micros, Micros)> = None;
        for e in &imp.entries {
            let i = e.campaign;
            if i >= n {
                continue;
            }
            let score = if self.book.is_house(i) {
                e.revenue.as_units()
            } else {
                let s = self.position.s[i] - e.cost;
                if s.is_negative() {
                    continue;
                }
                if let (Some(c), Some(key), Some(f)) = (&self.caps, user, self.book.fcap(i)) {
                    if c.count_for(key, i) >= f {
                        continue;
                    }
                }
                e.revenue.as_units() - self.price_after(i, s.as_units(), tau) * e.cost.as_units()
            };
            let better = match best {
                None => true,
                Some((bi, bs, _, _)) => score > bs || (score == bs && i < bi),
            };
            if better {
                best = Some((i, score, e.revenue, e.cost));
            }
        }
        best.map(|(i, score, revenue, cost)| Decision {
            chosen: Some(i),
            score,
            revenue,
            cost,
        })
    }

    /// Applies a decision made by [`decide`](Self::decide) on this state.
    pub fn apply(&mut self, imp: &Impression, d: &Decision) -> Result<(), EngineError> {
        if let Some(i) = d.chosen {
            let e = imp
                .entry(i)
                .filter(|e| e.revenue == d.revenue && e.cost == d.cost)
                .ok_or_else(|| {
                    EngineError::StaleDecision(format!(
                        "impression {} has no matching entry for campaign {i}",
                        imp.id
                    ))
                })?;
            if !self.book.is_house(i) {
                if (self.position.s[i] - e.cost).is_negative() {
                    return Err(EngineError::StaleDecision(format!(
                        "campaign {i} cannot cover {}",
                        e.cost
                    )));
                }
                if let Some(c) = self.caps.as_mut() {
                    if !c.check_and_count(&imp.user, i, self.book.fcap(i)) {
                        return Err(EngineError::StaleDecision(format!(
                            "user {} is at the cap of campaign {i}",
                            imp.user
                        )));
                    }
                }
                self.book.charge(i, e.cost)?;
                self.position.assign(i, e.revenue, e.cost);
            } else {
                self.position.w += e.revenue;
            }
        }
        self.h += 1;
        Ok(())
    }

    /// Decides and applies every impression in order, calling `step` after
    /// each one with the impression, its decision and the updated state.
    pub fn run_with<'a, I, F>(&mut self, impressions: I, mut step: F) -> Result<(), EngineError>
    where
        I: IntoIterator<Item = &'a Impression>,
        F: FnMut(&Impression, &Decision, &EngineState),
    {
        for imp in impressions {
            imp.validate(self.book.len())?;
            let d = self.decide(imp);
            self.apply(imp, &d)?;
            step(imp, &d, self);
        }
        Ok(())
    }

    /// Runs the stream and returns the decision log.
    pub fn run_stream<'a, I>(
        &mut self,
        impressions: I,
        mut hook: Option<&mut dyn FnMut(u64, &Decision, &EngineState)>,
    ) -> Result<Vec<DecisionRecord>, EngineError>
    where
        I: IntoIterator<Item = &'a Impression>,
    {
        let mut log = Vec::new();
        self.run_with(impressions, |imp, d, state| {
            let h = state.h();
            if let Some(f) = hook.as_mut() {
                f(h, d, state);
            }
            log.push(DecisionRecord {
                h,
                id: imp.id.clone(),
                decision: *d,
            });
        })?;
        Ok(log)
    }
}

/// One line of the decision log. `h` counts the impression itself (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRecord {
    pub h: u64,
    pub id: String,
    pub decision: Decision,
}

impl fmt::Display for DecisionRecord {
    /// `h  id  campaign-index|-  score  revenue_micros  cost_micros`, tab separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.decision;
        write!(f, "{}\t{}\t", self.h, self.id)?;
        match d.chosen {
            Some(i) => write!(f, "{i}")?,
            None => f.write_str("-")?,
        }
        write!(f, "\t{}\t{}\t{}", d.score, d.revenue.0, d.cost.0)
    }
}
