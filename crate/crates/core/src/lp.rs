//! Sample/offline packing LP and dual price extraction.
//!
//! The LP is
//!
//! ```text
//! max  sum_j sum_i r_ji x_ji
//! s.t. sum_j a_ji x_ji <= b_i            (budget rows, one per campaign)
//!      sum_{j in P} x_ji <= f(i, P)      (optional partition-cap rows)
//!      sum_i x_ji <= 1                   (one assignment row per impression)
//!      x >= 0
//! ```
//!
//! and is solved with a primal revised simplex that treats the assignment
//! rows as generalized upper bounds: each impression keeps one *key*
//! variable in the basis, and only the budget and cap rows form the explicit
//! working basis. The working-basis inverse is kept dense and updated with
//! rank-one transforms, with a periodic refactorization.
//!
//! Pricing is Dantzig's rule over a rotating window of impressions. After a
//! run of degenerate pivots the solver switches to Bland's rule until it makes
//! progress again. Everything is deterministic for a given instance.

use std::io::{self, Write};

use thiserror::Error;

use crate::model::{CampaignBook, DualPriceVector, Impression, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("epsilon must lie in (0, 1), got {0}")]
    EpsilonOutOfRange(f64),
    #[error("sample is empty")]
    EmptySample,
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("simplex hit the iteration limit ({0})")]
    IterationLimit(usize),
    #[error("internal solver error: {0}")]
    Internal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the sample budget `b_i^eps` is derived from `b_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `eps * (1 - eps) * b_i`
    #[default]
    EpsOneMinusEps,
    /// `eps * b_i`
    Eps,
}

pub fn scale_budgets(budgets: &[f64], eps: f64) -> Result<Vec<f64>, LpError> {
    scale_budgets_with(budgets, eps, ScaleMode::EpsOneMinusEps)
}

pub fn scale_budgets_with(budgets: &[f64], eps: f64, mode: ScaleMode) -> Result<Vec<f64>, LpError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LpError::EpsilonOutOfRange(eps));
    }
    let factor = match mode {
        ScaleMode::EpsOneMinusEps => eps * (1.0 - eps),
        ScaleMode::Eps => eps,
    };
    Ok(budgets.iter().map(|b| b * factor).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpEntry {
    pub campaign: usize,
    pub revenue: f64,
    pub cost: f64,
}

/// `sum_{j in members} x_{j, campaign} <= cap`
#[derive(Clone, Debug, PartialEq)]
pub struct CapRow {
    pub campaign: usize,
    pub members: Vec<usize>,
    pub cap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpInstance {
    n: usize,
    budgets: Vec<f64>,
    rows: Vec<Vec<LpEntry>>,
    caps: Vec<CapRow>,
}

impl LpInstance {
    /// `budgets[i] = +inf` leaves campaign `i` without a budget row.
    pub fn new(budgets: Vec<f64>, rows: Vec<Vec<LpEntry>>) -> Result<LpInstance, LpError> {
        let n = budgets.len();
        for (i, b) in budgets.iter().enumerate() {
            if b.is_nan() || *b < 0.0 {
                return Err(LpError::InvalidInstance(format!("budget {i} = {b}")));
            }
        }
        for (j, row) in rows.iter().enumerate() {
            for (k, e) in row.iter().enumerate() {
                if e.campaign >= n {
                    return Err(LpError::InvalidInstance(format!(
                        "row {j}: campaign {} out of range",
                        e.campaign
                    )));
                }
                if !(e.revenue.is_finite() && e.cost.is_finite()) || e.revenue < 0.0 || e.cost < 0.0
                {
                    return Err(LpError::InvalidInstance(format!(
                        "row {j}: coefficients for campaign {} must be finite and >= 0",
                        e.campaign
                    )));
                }
                if row[..k].iter().any(|o| o.campaign == e.campaign) {
                    return Err(LpError::InvalidInstance(format!(
                        "row {j}: campaign {} listed twice",
                        e.campaign
                    )));
                }
            }
        }
        Ok(LpInstance {
            n,
            budgets,
            rows,
            caps: Vec::new(),
        })
    }

    pub fn from_impressions(
        impressions: &[Impression],
        budgets: Vec<f64>,
    ) -> Result<LpInstance, LpError> {
        for imp in impressions {
            imp.validate(budgets.len())?;
        }
        let rows = impressions
            .iter()
            .map(|imp| {
                imp.entries
                    .iter()
                    .map(|e| LpEntry {
                        campaign: e.campaign,
                        revenue: e.revenue.as_units(),
                        cost: e.cost.as_units(),
                    })
                    .collect()
            })
            .collect();
        LpInstance::new(budgets, rows)
    }

    /// Adds a partition-cap row. Every member impression must bid on `campaign`.
    pub fn add_cap_row(&mut self, row: CapRow) -> Result<(), LpError> {
        if row.campaign >= self.n {
            return Err(LpError::InvalidInstance(format!(
                "cap row campaign {} out of range",
                row.campaign
            )));
        }
        if row.cap.is_nan() || row.cap < 0.0 {
            return Err(LpError::InvalidInstance(format!("cap {}", row.cap)));
        }
        for &j in &row.members {
            let bids = self
                .rows
                .get(j)
                .map_or(false, |r| r.iter().any(|e| e.campaign == row.campaign));
            if !bids {
                return Err(LpError::InvalidInstance(format!(
                    "cap row member {j} has no entry for campaign {}",
                    row.campaign
                )));
            }
        }
        for (c, other) in self.caps.iter().enumerate() {
            if other.campaign == row.campaign
                && other.members.iter().any(|m| row.members.contains(m))
            {
                return Err(LpError::InvalidInstance(format!(
                    "cap row overlaps cap row {c} for campaign {}",
                    row.campaign
                )));
            }
        }
        self.caps.push(row);
        Ok(())
    }

    pub fn n_campaigns(&self) -> usize {
        self.n
    }

    pub fn n_impressions(&self) -> usize {
        self.rows.len()
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn rows(&self) -> &[Vec<LpEntry>] {
        &self.rows
    }

    pub fn cap_rows(&self) -> &[CapRow] {
        &self.caps
    }

    /// Total constraint count, assignment rows included.
    pub fn n_constraints(&self) -> usize {
        self.budgets.iter().filter(|b| b.is_finite()).count() + self.caps.len() + self.rows.len()
    }

    /// Same instance with every revenue multiplied by `c`.
    pub fn scale_revenues(&self, c: f64) -> LpInstance {
        let mut out = self.clone();
        out.rows.iter_mut().flatten().for_each(|e| e.revenue *= c);
        out
    }

    /// Plain-text listing, one constraint per line:
    ///
    /// ```text
    /// max: +r x<j>_<i> ...
    /// budget <i>: +a x<j>_<i> ... <= b
    /// cap <c> campaign <i>: +1 x<j>_<i> ... <= f
    /// assign <j>: +1 x<j>_<i> ... <= 1
    /// ```
    pub fn write_listing<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "# lp listing: {} campaigns, {} impressions, {} cap rows",
            self.n,
            self.rows.len(),
            self.caps.len()
        )?;
        write!(out, "max:")?;
        for (j, row) in self.rows.iter().enumerate() {
            for e in row {
                write!(out, " +{} x{}_{}", e.revenue, j, e.campaign)?;
            }
        }
        writeln!(out)?;
        for (i, b) in self.budgets.iter().enumerate() {
            if !b.is_finite() {
                continue;
            }
            write!(out, "budget {i}:")?;
            for (j, row) in self.rows.iter().enumerate() {
                if let Some(e) = row.iter().find(|e| e.campaign == i && e.cost != 0.0) {
                    write!(out, " +{} x{}_{}", e.cost, j, i)?;
                }
            }
            writeln!(out, " <= {b}")?;
        }
        for (c, cap) in self.caps.iter().enumerate() {
            write!(out, "cap {c} campaign {}:", cap.campaign)?;
            for j in &cap.members {
                write!(out, " +1 x{}_{}", j, cap.campaign)?;
            }
            writeln!(out, " <= {}", cap.cap)?;
        }
        for (j, row) in self.rows.iter().enumerate() {
            write!(out, "assign {j}:")?;
            for e in row {
                write!(out, " +1 x{}_{}", j, e.campaign)?;
            }
            writeln!(out, " <= 1")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualSolution {
    /// `x[j][k]` is the assignment of impression `j` to its `k`-th entry.
    pub x: Vec<Vec<f64>>,
    /// Budget-row duals, one per campaign (0 for campaigns without a row).
    pub p: Vec<f64>,
    /// Assignment-row duals, one per impression.
    pub p_hat: Vec<f64>,
    /// Duals of the partition-cap rows, in insertion order.
    pub cap_duals: Vec<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Worst-case violations of a primal/dual pair, all `>= 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Residuals {
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementary_slackness: f64,
    /// `max_j |p_hat_j - max(0, max_i (r_ji - a_ji p_i - sigma))|`
    pub p_hat_reconstruction: f64,
    pub relative_gap: f64,
}

impl PrimalDualSolution {
    pub fn residuals(&self, inst: &LpInstance) -> Residuals {
        let mut res = Residuals::default();
        let mut load = vec![0.0; inst.n];
        let cap_of = cap_lookup(inst);
        let mut cap_load = vec![0.0; inst.caps.len()];
        for (j, row) in inst.rows.iter().enumerate() {
            let mut assigned = 0.0;
            let mut best = 0.0f64;
            for (k, e) in row.iter().enumerate() {
                let x = self.x[j][k];
                res.primal_infeasibility = res.primal_infeasibility.max(-x);
                assigned += x;
                load[e.campaign] += e.cost * x;
                let sigma = match cap_of[j][k] {
                    Some(c) => {
                        cap_load[c] += x;
                        self.cap_duals[c]
                    }
                    None => 0.0,
                };
                let slack = self.p_hat[j] + e.cost * self.p[e.campaign] + sigma - e.revenue;
                res.dual_infeasibility = res.dual_infeasibility.max(-slack);
                res.complementary_slackness = res.complementary_slackness.max((x * slack).abs());
                best = best.max(e.revenue - e.cost * self.p[e.campaign] - sigma);
            }
            res.primal_infeasibility = res.primal_infeasibility.max(assigned - 1.0);
            res.dual_infeasibility = res.dual_infeasibility.max(-self.p_hat[j]);
            res.complementary_slackness = res
                .complementary_slackness
                .max((self.p_hat[j] * (1.0 - assigned)).abs());
            res.p_hat_reconstruction = res.p_hat_reconstruction.max((self.p_hat[j] - best).abs());
        }
        for (i, b) in inst.budgets.iter().enumerate() {
            res.dual_infeasibility = res.dual_infeasibility.max(-self.p[i]);
            if b.is_finite() {
                res.primal_infeasibility = res.primal_infeasibility.max(load[i] - b);
                res.complementary_slackness = res
                    .complementary_slackness
                    .max((self.p[i] * (b - load[i])).abs());
            }
        }
        for (c, cap) in inst.caps.iter().enumerate() {
            res.dual_infeasibility = res.dual_infeasibility.max(-self.cap_duals[c]);
            res.primal_infeasibility = res.primal_infeasibility.max(cap_load[c] - cap.cap);
            res.complementary_slackness = res
                .complementary_slackness
                .max((self.cap_duals[c] * (cap.cap - cap_load[c])).abs());
        }
        res.relative_gap = self.gap.abs() / (1.0 + self.primal_value.abs());
        res
    }
}

fn cap_lookup(inst: &LpInstance) -> Vec<Vec<Option<usize>>> {
    let mut out: Vec<Vec<Option<usize>>> = inst.rows.iter().map(|r| vec![None; r.len()]).collect();
    for (c, cap) in inst.caps.iter().enumerate() {
        for &j in &cap.members {
            if let Some(k) = inst.rows[j].iter().position(|e| e.campaign == cap.campaign) {
                out[j][k] = Some(c);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// Absolute tolerance on residuals.
    pub tol: f64,
    /// `None` picks a limit proportional to the instance size.
    pub max_iterations: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iterations: None,
        }
    }
}

pub fn solve_lp(inst: &LpInstance, tol: f64) -> Result<PrimalDualSolution, LpError> {
    solve_lp_with(
        inst,
        SolveOptions {
            tol,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_lp_with(inst: &LpInstance, opts: SolveOptions) -> Result<PrimalDualSolution, LpError> {
    if !(opts.tol > 0.0) {
        return Err(LpError::InvalidInstance(format!("tol = {}", opts.tol)));
    }
    let mut simplex = GubSimplex::build(inst, opts);
    simplex.run()?;
    Ok(simplex.extract(inst))
}

const NONE: u32 = u32::MAX;
const NONBASIC: u32 = u32::MAX;
const KEY: u32 = u32::MAX - 1;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_RUN_FOR_BLAND: usize = 32;

/// Sparse column of a structural variable over the coupling rows.
#[derive(Clone, Copy, Debug)]
struct Column {
    rows: [u32; 2],
    vals: [f64; 2],
    len: u8,
}

impl Column {
    const EMPTY: Column = Column {
        rows: [0; 2],
        vals: [0.0; 2],
        len: 0,
    };

    fn push(&mut self, row: usize, val: f64) {
        self.rows[self.len as usize] = row as u32;
        self.vals[self.len as usize] = val;
        self.len += 1;
    }

    #[inline]
    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len as usize).map(move |k| (self.rows[k] as usize, self.vals[k]))
    }

    #[inline]
    fn dot(&self, y: &[f64]) -> f64 {
        self.iter().map(|(r, v)| v * y[r]).sum()
    }
}

/// Variable layout: `0..m` are coupling-row slacks (no set); then for each
/// impression `j`, variable `set_start[j]` is its assignment slack followed by
/// one variable per entry.
struct GubSimplex {
    m: usize,
    nsets: usize,
    set_start: Vec<usize>,
    set_of: Vec<u32>,
    cost: Vec<f64>,
    cols: Vec<Column>,
    rhs: Vec<f64>,
    budget_row: Vec<Option<usize>>,

    status: Vec<u32>,
    key: Vec<u32>,
    xkey: Vec<f64>,
    working: Vec<u32>,
    xw: Vec<f64>,
    /// Column-major `m x m` inverse of the working basis.
    winv: Vec<f64>,
    pi: Vec<f64>,

    dj_tol: f64,
    piv_tol: f64,
    max_iter: usize,
    iterations: usize,
    since_refactor: usize,
    cursor: usize,
    chunk: usize,
    bland: bool,
    degenerate_run: usize,

    alpha: Vec<f64>,
    rate: Vec<f64>,
    marked: Vec<bool>,
    touched: Vec<u32>,
}

enum Leaving {
    Working(usize),
    Key(usize),
}

impl GubSimplex {
    fn build(inst: &LpInstance, opts: SolveOptions) -> GubSimplex {
        let mut budget_row = vec![None; inst.n];
        let mut rhs = Vec::new();
        for (i, b) in inst.budgets.iter().enumerate() {
            if b.is_finite() {
                budget_row[i] = Some(rhs.len());
                rhs.push(*b);
            }
        }
        let cap_base = rhs.len();
        rhs.extend(inst.caps.iter().map(|c| c.cap));
        let m = rhs.len();
        let nsets = inst.rows.len();
        let cap_of = cap_lookup(inst);

        let total = m + inst.rows.iter().map(|r| r.len() + 1).sum::<usize>();
        let mut set_start = Vec::with_capacity(nsets + 1);
        let mut set_of = Vec::with_capacity(total);
        let mut cost = Vec::with_capacity(total);
        let mut cols = Vec::with_capacity(total);
        for r in 0..m {
            set_of.push(NONE);
            cost.push(0.0);
            let mut col = Column::EMPTY;
            col.push(r, 1.0);
            cols.push(col);
        }
        let mut cmax = 0.0f64;
        for (j, row) in inst.rows.iter().enumerate() {
            set_start.push(set_of.len());
            set_of.push(j as u32);
            cost.push(0.0);
            cols.push(Column::EMPTY);
            for (k, e) in row.iter().enumerate() {
                set_of.push(j as u32);
                cost.push(e.revenue);
                cmax = cmax.max(e.revenue);
                let mut col = Column::EMPTY;
                if let Some(r) = budget_row[e.campaign] {
                    if e.cost != 0.0 {
                        col.push(r, e.cost);
                    }
                }
                if let Some(c) = cap_of[j][k] {
                    col.push(cap_base + c, 1.0);
                }
                cols.push(col);
            }
        }
        set_start.push(set_of.len());

        let mut status = vec![NONBASIC; total];
        let mut winv = vec![0.0; m * m];
        let working: Vec<u32> = (0..m as u32).collect();
        for r in 0..m {
            status[r] = r as u32;
            winv[r * m + r] = 1.0;
        }
        let key: Vec<u32> = set_start[..nsets].iter().map(|&s| s as u32).collect();
        for &k in &key {
            status[k as usize] = KEY;
        }
        let max_iter = opts.max_iterations.unwrap_or(200 * (nsets + m) + 10_000);
        GubSimplex {
            m,
            nsets,
            set_start,
            set_of,
            cost,
            cols,
            xw: rhs.clone(),
            rhs,
            budget_row,
            status,
            key,
            xkey: vec![1.0; nsets],
            working,
            winv,
            pi: vec![0.0; m],
            dj_tol: opts.tol * 0.01 * cmax.max(1.0),
            piv_tol: 1e-9,
            max_iter,
            iterations: 0,
            since_refactor: 0,
            cursor: 0,
            chunk: (nsets / 8).clamp(64, 4096),
            bland: false,
            degenerate_run: 0,
            alpha: vec![0.0; m],
            rate: vec![0.0; nsets],
            marked: vec![false; nsets],
            touched: Vec::new(),
        }
    }

    fn run(&mut self) -> Result<(), LpError> {
        loop {
            self.compute_pi();
            let entering = match self.price(false) {
                Some(q) => q,
                None => {
                    // Confirm optimality on a fresh factorization with a full scan.
                    self.refactor()?;
                    self.compute_pi();
                    match self.price(true) {
                        Some(q) => q,
                        None => return Ok(()),
                    }
                }
            };
            if self.iterations >= self.max_iter {
                return Err(LpError::IterationLimit(self.iterations));
            }
            self.iterations += 1;
            self.pivot(entering)?;
            self.since_refactor += 1;
            if self.since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
        }
    }

    fn compute_pi(&mut self) {
        let m = self.m;
        let cw: Vec<f64> = self
            .working
            .iter()
            .map(|&v| {
                let v = v as usize;
                match self.set_of[v] {
                    NONE => self.cost[v],
                    j => self.cost[v] - self.cost[self.key[j as usize] as usize],
                }
            })
            .collect();
        for c in 0..m {
            let col = &self.winv[c * m..(c + 1) * m];
            self.pi[c] = col.iter().zip(&cw).map(|(a, b)| a * b).sum();
        }
    }

    #[inline]
    fn reduced_cost_in_set(&self, var: usize, key_cost: f64, key_dot: f64) -> f64 {
        (self.cost[var] - key_cost) - (self.cols[var].dot(&self.pi) - key_dot)
    }

    /// Returns an entering variable with positive reduced cost, if any.
    fn price(&mut self, full: bool) -> Option<usize> {
        if self.bland {
            return self.price_bland();
        }
        let mut best: Option<(f64, usize)> = None;
        let consider = |best: &mut Option<(f64, usize)>, d: f64, v: usize| {
            if d > self.dj_tol && best.map_or(true, |(bd, _)| d > bd) {
                *best = Some((d, v));
            }
        };
        for r in 0..self.m {
            if self.status[r] == NONBASIC {
                consider(&mut best, -self.pi[r], r);
            }
        }
        if self.nsets == 0 {
            return best.map(|(_, v)| v);
        }
        let mut scanned = 0;
        let mut j = self.cursor;
        while scanned < self.nsets {
            let key = self.key[j] as usize;
            let kc = self.cost[key];
            let kd = self.cols[key].dot(&self.pi);
            for v in self.set_start[j]..self.set_start[j + 1] {
                if self.status[v] == NONBASIC {
                    consider(&mut best, self.reduced_cost_in_set(v, kc, kd), v);
                }
            }
            scanned += 1;
            j += 1;
            if j == self.nsets {
                j = 0;
            }
            if !full && best.is_some() && scanned >= self.chunk {
                break;
            }
        }
        self.cursor = j;
        best.map(|(_, v)| v)
    }

    fn price_bland(&self) -> Option<usize> {
        for r in 0..self.m {
            if self.status[r] == NONBASIC && -self.pi[r] > self.dj_tol {
                return Some(r);
            }
        }
        for j in 0..self.nsets {
            let key = self.key[j] as usize;
            let kc = self.cost[key];
            let kd = self.cols[key].dot(&self.pi);
            for v in self.set_start[j]..self.set_start[j + 1] {
                if self.status[v] == NONBASIC && self.reduced_cost_in_set(v, kc, kd) > self.dj_tol {
                    return Some(v);
                }
            }
        }
        None
    }

    /// `alpha = W^-1 (a_q - a_key(q))`
    fn compute_alpha(&mut self, q: usize) {
        let m = self.m;
        self.alpha.iter_mut().for_each(|a| *a = 0.0);
        let add = |alpha: &mut [f64], col: &Column, sign: f64| {
            for (r, v) in col.iter() {
                let w = &self.winv[r * m..(r + 1) * m];
                for (a, x) in alpha.iter_mut().zip(w) {
                    *a += sign * v * x;
                }
            }
        };
        let mut alpha = std::mem::take(&mut self.alpha);
        add(&mut alpha, &self.cols[q], 1.0);
        if self.set_of[q] != NONE {
            let key = self.key[self.set_of[q] as usize] as usize;
            add(&mut alpha, &self.cols[key], -1.0);
        }
        self.alpha = alpha;
    }

    fn pivot(&mut self, q: usize) -> Result<(), LpError> {
        self.compute_alpha(q);
        let q_set = self.set_of[q];

        // Rates of change of the key variables per unit step of x_q.
        self.touched.clear();
        for p in 0..self.m {
            let s = self.set_of[self.working[p] as usize];
            if s != NONE && self.alpha[p] != 0.0 {
                let s = s as usize;
                if !self.marked[s] {
                    self.marked[s] = true;
                    self.touched.push(s as u32);
                }
                self.rate[s] += self.alpha[p];
            }
        }
        if q_set != NONE {
            let s = q_set as usize;
            if !self.marked[s] {
                self.marked[s] = true;
                self.touched.push(q_set);
            }
            self.rate[s] -= 1.0;
        }

        // Ratio test.
        let mut best: Option<(f64, f64, usize, Leaving)> = None; // (ratio, |pivot|, var, which)
        let bland = self.bland;
        // Ties: Bland takes the lowest index; otherwise a key variable leaves
        // first (keeping the assignment integral), then the largest pivot.
        let offer = |best: &mut Option<(f64, f64, usize, Leaving)>,
                     ratio: f64,
                     piv: f64,
                     var: usize,
                     which: Leaving| {
            let better = match best {
                None => true,
                Some((br, bp, bv, bw)) => {
                    if ratio < *br - 1e-12 {
                        true
                    } else if ratio <= *br + 1e-12 {
                        let is_key = matches!(which, Leaving::Key(_));
                        let best_key = matches!(bw, Leaving::Key(_));
                        if bland {
                            var < *bv
                        } else if is_key != best_key {
                            is_key
                        } else {
                            piv > *bp || (piv == *bp && var < *bv)
                        }
                    } else {
                        false
                    }
                }
            };
            if better {
                *best = Some((ratio, piv, var, which));
            }
        };
        for p in 0..self.m {
            let a = self.alpha[p];
            if a > self.piv_tol {
                offer(
                    &mut best,
                    self.xw[p].max(0.0) / a,
                    a,
                    self.working[p] as usize,
                    Leaving::Working(p),
                );
            }
        }
        for &s in &self.touched {
            let s = s as usize;
            let rate = self.rate[s];
            if rate < -self.piv_tol {
                offer(
                    &mut best,
                    self.xkey[s].max(0.0) / -rate,
                    -rate,
                    self.key[s] as usize,
                    Leaving::Key(s),
                );
            }
        }
        let Some((t, _, _, leaving)) = best else {
            self.clear_rates();
            return Err(LpError::Internal(
                "unbounded direction in a bounded packing LP".into(),
            ));
        };

        if t <= 1e-12 {
            self.degenerate_run += 1;
            if self.degenerate_run >= DEGENERATE_RUN_FOR_BLAND {
                self.bland = true;
            }
        } else {
            self.degenerate_run = 0;
            self.bland = false;
        }

        // Step.
        for p in 0..self.m {
            self.xw[p] -= t * self.alpha[p];
        }
        for &s in &self.touched {
            let s = s as usize;
            self.xkey[s] += t * self.rate[s];
        }

        match leaving {
            Leaving::Working(r) => self.replace_working(r, q, t),
            Leaving::Key(s) if q_set != NONE && s == q_set as usize => {
                let old = self.key[s] as usize;
                let k = self.positions_in_set(s);
                let denom = 1.0 - k.iter().map(|&p| self.alpha[p]).sum::<f64>();
                if denom.abs() < 1e-14 {
                    self.clear_rates();
                    return Err(LpError::Internal("singular key exchange".into()));
                }
                if !k.is_empty() {
                    let m = self.m;
                    for c in 0..m {
                        let col = &mut self.winv[c * m..(c + 1) * m];
                        let v: f64 = k.iter().map(|&p| col[p]).sum();
                        if v != 0.0 {
                            let f = v / denom;
                            for (w, a) in col.iter_mut().zip(&self.alpha) {
                                *w += a * f;
                            }
                        }
                    }
                }
                self.status[old] = NONBASIC;
                self.status[q] = KEY;
                self.key[s] = q as u32;
                self.xkey[s] = t;
            }
            Leaving::Key(s) => {
                let old = self.key[s] as usize;
                let k = self.positions_in_set(s);
                // New key: the member with the largest value (lowest position on ties).
                let star = *k
                    .iter()
                    .max_by(|&&a, &&b| {
                        self.xw[a]
                            .partial_cmp(&self.xw[b])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .ok_or_else(|| LpError::Internal("key leaves with empty set".into()))?;
                let m = self.m;
                for c in 0..m {
                    let col = &mut self.winv[c * m..(c + 1) * m];
                    let v: f64 = k.iter().map(|&p| col[p]).sum();
                    col[star] = -v;
                }
                let a_sum: f64 = k.iter().map(|&p| self.alpha[p]).sum();
                self.alpha[star] = -a_sum;
                let new_key = self.working[star] as usize;
                let new_key_val = self.xw[star];
                self.status[new_key] = KEY;
                self.key[s] = new_key as u32;
                self.working[star] = old as u32;
                self.status[old] = star as u32;
                self.xw[star] = self.xkey[s];
                self.xkey[s] = new_key_val;
                self.replace_working(star, q, t);
            }
        }
        self.clear_rates();
        Ok(())
    }

    fn clear_rates(&mut self) {
        for &s in &self.touched {
            self.rate[s as usize] = 0.0;
            self.marked[s as usize] = false;
        }
        self.touched.clear();
    }

    fn positions_in_set(&self, s: usize) -> Vec<usize> {
        (0..self.m)
            .filter(|&p| self.set_of[self.working[p] as usize] == s as u32)
            .collect()
    }

    /// Basis exchange at working position `r` with pivot column `alpha`.
    fn replace_working(&mut self, r: usize, q: usize, value: f64) {
        let m = self.m;
        let piv = self.alpha[r];
        for c in 0..m {
            let col = &mut self.winv[c * m..(c + 1) * m];
            let w = col[r] / piv;
            if w != 0.0 {
                for (x, a) in col.iter_mut().zip(&self.alpha) {
                    *x -= a * w;
                }
            }
            col[r] = w;
        }
        let old = self.working[r] as usize;
        self.status[old] = NONBASIC;
        self.working[r] = q as u32;
        self.status[q] = r as u32;
        self.xw[r] = value;
    }

    /// Rebuilds the working-basis inverse and the basic values from scratch.
    fn refactor(&mut self) -> Result<(), LpError> {
        self.since_refactor = 0;
        let m = self.m;
        if m == 0 {
            self.recompute_keys();
            return Ok(());
        }
        // Column-major W.
        let mut w = vec![0.0; m * m];
        for p in 0..m {
            let v = self.working[p] as usize;
            let col = &mut w[p * m..(p + 1) * m];
            for (r, a) in self.cols[v].iter() {
                col[r] += a;
            }
            if self.set_of[v] != NONE {
                let key = self.key[self.set_of[v] as usize] as usize;
                for (r, a) in self.cols[key].iter() {
                    col[r] -= a;
                }
            }
        }
        self.winv = invert(&w, m)
            .ok_or_else(|| LpError::Internal("working basis became singular".into()))?;

        let mut b = self.rhs.clone();
        for &k in &self.key {
            for (r, a) in self.cols[k as usize].iter() {
                b[r] -= a;
            }
        }
        for p in 0..m {
            self.xw[p] = (0..m).map(|c| self.winv[c * m + p] * b[c]).sum();
        }
        self.recompute_keys();
        Ok(())
    }

    fn recompute_keys(&mut self) {
        self.xkey.iter_mut().for_each(|x| *x = 1.0);
        for p in 0..self.m {
            let s = self.set_of[self.working[p] as usize];
            if s != NONE {
                self.xkey[s as usize] -= self.xw[p];
            }
        }
    }

    fn value_of(&self, var: usize) -> f64 {
        match self.status[var] {
            NONBASIC => 0.0,
            KEY => self.xkey[self.set_of[var] as usize],
            p => self.xw[p as usize],
        }
    }

    fn extract(&self, inst: &LpInstance) -> PrimalDualSolution {
        let mut x = Vec::with_capacity(self.nsets);
        let mut primal = 0.0;
        for (j, row) in inst.rows.iter().enumerate() {
            let base = self.set_start[j] + 1;
            let xs: Vec<f64> = (0..row.len())
                .map(|k| self.value_of(base + k).clamp(0.0, 1.0))
                .collect();
            primal += xs.iter().zip(row).map(|(x, e)| x * e.revenue).sum::<f64>();
            x.push(xs);
        }
        let p: Vec<f64> = self
            .budget_row
            .iter()
            .map(|r| r.map_or(0.0, |r| self.pi[r].max(0.0)))
            .collect();
        let cap_base = self.m - inst.caps.len();
        let cap_duals: Vec<f64> = (0..inst.caps.len())
            .map(|c| self.pi[cap_base + c].max(0.0))
            .collect();
        let p_hat: Vec<f64> = (0..self.nsets)
            .map(|j| {
                let key = self.key[j] as usize;
                (self.cost[key] - self.cols[key].dot(&self.pi)).max(0.0)
            })
            .collect();
        let dual = p_hat.iter().sum::<f64>()
            + inst
                .budgets
                .iter()
                .zip(&p)
                .filter(|(b, _)| b.is_finite())
                .map(|(b, p)| b * p)
                .sum::<f64>()
            + inst
                .caps
                .iter()
                .zip(&cap_duals)
                .map(|(c, d)| c.cap * d)
                .sum::<f64>();
        PrimalDualSolution {
            x,
            p,
            p_hat,
            cap_duals,
            primal_value: primal,
            dual_value: dual,
            gap: dual - primal,
            iterations: self.iterations,
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting of a column-major matrix.
fn invert(a: &[f64], m: usize) -> Option<Vec<f64>> {
    // Work row-major on [A | I].
    let w = 2 * m;
    let mut aug = vec![0.0; m * w];
    for r in 0..m {
        for c in 0..m {
            aug[r * w + c] = a[c * m + r];
        }
        aug[r * w + m + r] = 1.0;
    }
    for c in 0..m {
        let (piv_row, piv_abs) = (c..m)
            .map(|r| (r, aug[r * w + c].abs()))
            .fold((c, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if piv_abs < 1e-13 {
            return None;
        }
        if piv_row != c {
            for k in 0..w {
                aug.swap(c * w + k, piv_row * w + k);
            }
        }
        let piv = aug[c * w + c];
        for k in 0..w {
            aug[c * w + k] /= piv;
        }
        let pivot_row: Vec<f64> = aug[c * w..(c + 1) * w].to_vec();
        for r in 0..m {
            if r != c {
                let f = aug[r * w + c];
                if f != 0.0 {
                    for (x, p) in aug[r * w..(r + 1) * w].iter_mut().zip(&pivot_row) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    let mut inv = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            inv[c * m + r] = aug[r * w + m + c];
        }
    }
    Some(inv)
}

/// `argmax_i (r_ji - a_ji p_i)` over the listed entries, or `(None, 0)` when
/// that maximum is not positive. Ties go to the lowest campaign index.
pub fn reduced_price(imp: &Impression, p: &DualPriceVector) -> (Option<usize>, f64) {
    let mut best: Option<(usize, f64)> = None;
    for e in &imp.entries {
        let v = e.revenue.as_units() - e.cost.as_units() * p.get(e.campaign);
        let better = match best {
            None => true,
            Some((bi, bv)) => v > bv || (v == bv && e.campaign < bi),
        };
        if better {
            best = Some((e.campaign, v));
        }
    }
    match best {
        Some((i, v)) if v > 0.0 => (Some(i), v),
        _ => (None, 0.0),
    }
}

/// `max a_ji / b_i` over listed entries of budgeted campaigns; 0 when empty.
pub fn bid_budget_ratio(sample: &[Impression], book: &CampaignBook) -> f64 {
    sample
        .iter()
        .flat_map(|imp| imp.entries.iter())
        .filter_map(|e| {
            book.budget(e.campaign)
                .map(|b| e.cost.as_units() / b.as_units())
        })
        .fold(0.0, f64::max)
}

/// Ten times the largest `r_ji / a_ji` in the sample (1.0 if nothing qualifies).
pub fn default_p_max(sample: &[Impression]) -> f64 {
    let ratio = sample
        .iter()
        .flat_map(|imp| imp.entries.iter())
        .filter(|e| e.cost.0 > 0)
        .map(|e| e.revenue.as_units() / e.cost.as_units())
        .fold(0.0, f64::max);
    if ratio > 0.0 {
        10.0 * ratio
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualEstimateOptions {
    pub eps: f64,
    pub tol: f64,
    pub scale_mode: ScaleMode,
    /// `None` uses [`default_p_max`] on the sample.
    pub p_max: Option<f64>,
}

impl DualEstimateOptions {
    pub fn new(eps: f64) -> DualEstimateOptions {
        DualEstimateOptions {
            eps,
            tol: 1e-9,
            scale_mode: ScaleMode::default(),
            p_max: None,
        }
    }
}

/// Sample LP for `sample` with budgets scaled by `eps`.
pub fn sample_instance(
    sample: &[Impression],
    book: &CampaignBook,
    eps: f64,
    mode: ScaleMode,
) -> Result<LpInstance, LpError> {
    if sample.is_empty() {
        return Err(LpError::EmptySample);
    }
    let budgets = scale_budgets_with(&book.budgets_units(), eps, mode)?;
    LpInstance::from_impressions(sample, budgets)
}

pub fn estimate_initial_duals(
    sample: &[Impression],
    book: &CampaignBook,
    eps: f64,
    tol: f64,
) -> Result<DualPriceVector, LpError> {
    estimate_initial_duals_with(
        sample,
        book,
        DualEstimateOptions {
            tol,
            ..DualEstimateOptions::new(eps)
        },
    )
}

pub fn estimate_initial_duals_with(
    sample: &[Impression],
    book: &CampaignBook,
    opts: DualEstimateOptions,
) -> Result<DualPriceVector, LpError> {
    let inst = sample_instance(sample, book, opts.eps, opts.scale_mode)?;
    duals_from_instance(&inst, sample, opts)
}

/// Solves a prepared sample instance (e.g. one carrying cap rows) and clamps
/// its budget duals into `[0, p_max]`.
pub fn duals_from_instance(
    inst: &LpInstance,
    sample: &[Impression],
    opts: DualEstimateOptions,
) -> Result<DualPriceVector, LpError> {
    let sol = solve_lp(inst, opts.tol)?;
    let p_max = opts.p_max.unwrap_or_else(|| default_p_max(sample));
    Ok(DualPriceVector::clamped(sol.p, p_max)?)
}

/// Fractional optimum of the full-information LP on `full` with unscaled
/// budgets, in money units.
pub fn offline_optimum(full: &[Impression], book: &CampaignBook, tol: f64) -> Result<f64, LpError> {
    if full.is_empty() {
        return Ok(0.0);
    }
    let inst = LpInstance::from_impressions(full, book.budgets_units())?;
    Ok(solve_lp(&inst, tol)?.primal_value)
}
