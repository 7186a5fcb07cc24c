//! Data files, synthetic streams, the two-phase experiment runner, metrics
//! and the dual-stability study.
//!
//! Campaign file, one campaign per line:
//!
//! ```text
//! # id  budget_micros|inf  [fcap]
//! c000  250000000
//! c001  90000000  3
//! house inf
//! ```
//!
//! Impression file, one impression per line, entries as
//! `campaign_id:revenue_micros:cost_micros`:
//!
//! ```text
//! i0 u17 c000:1250000:1100000 c001:800000:950000
//! ```
//!
//! Fields are separated by whitespace, `#` starts a comment, blank lines are
//! skipped. Identifiers may not contain whitespace or `#`; campaign ids may
//! not contain `:`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DecisionRecord, EngineError, EngineState};
use crate::fcap::{build_fcap_lp, FcapError, PartitionSet, UserCapCounter};
use crate::lp::{
    bid_budget_ratio, default_p_max, duals_from_instance, offline_optimum, sample_instance,
    solve_lp, DualEstimateOptions, LpError, LpInstance, ScaleMode,
};
use crate::model::{
    Campaign, CampaignBook, Decision, DualPriceVector, Entry, Impression, Micros, ModelError,
    PolicyConfig, PolicyKind, DEFAULT_EPSILON_FLOOR,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Fcap(#[from] FcapError),
    #[error("writing output: {0}")]
    Output(String),
}

impl HarnessError {
    /// Process exit code: 1 usage, 2 data, 3 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Lp(_) | HarnessError::Fcap(FcapError::Lp(_)) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn content(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn parse_campaign(line: &str, n: usize) -> Result<Campaign, HarnessError> {
    let bad = |msg: String| HarnessError::Parse { line: n, msg };
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() < 2 || tok.len() > 3 {
        return Err(bad(format!(
            "expected `id budget [fcap]`, got {} fields",
            tok.len()
        )));
    }
    let mut c = if tok[1] == "inf" {
        Campaign::house(tok[0])
    } else {
        let b: i64 = tok[1]
            .parse()
            .map_err(|_| bad(format!("budget `{}` is not an integer", tok[1])))?;
        Campaign::budgeted(tok[0], Micros(b))
    };
    if let Some(f) = tok.get(2) {
        let f: u32 = f
            .parse()
            .map_err(|_| bad(format!("fcap `{f}` is not a nonnegative integer")))?;
        c = c.with_fcap(f);
    }
    Ok(c)
}

pub fn read_campaigns<R: BufRead>(reader: R) -> Result<CampaignBook, HarnessError> {
    let mut campaigns: Vec<Campaign> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut house = None;
    for (k, line) in reader.lines().enumerate() {
        let n = k + 1;
        let line = line.map_err(|e| HarnessError::Parse {
            line: n,
            msg: e.to_string(),
        })?;
        let body = content(&line);
        if body.is_empty() {
            continue;
        }
        let c = parse_campaign(body, n)?;
        let schema = |msg: String| HarnessError::Schema { line: n, msg };
        if let Some(first) = seen.insert(c.id.clone(), n) {
            return Err(schema(format!(
                "campaign `{}` already defined on line {first}",
                c.id
            )));
        }
        if c.is_house() {
            if c.fcap.is_some() {
                return Err(schema(
                    "the house campaign cannot carry a frequency cap".into(),
                ));
            }
            if let Some(first) = house.replace(n) {
                return Err(schema(format!(
                    "second house campaign (first on line {first})"
                )));
            }
        } else if c.budget.is_some_and(|b| b.0 <= 0) {
            return Err(schema(format!("budget of `{}` must be positive", c.id)));
        }
        campaigns.push(c);
    }
    Ok(CampaignBook::new(campaigns)?)
}

pub fn load_campaigns(path: &Path) -> Result<CampaignBook, HarnessError> {
    read_campaigns(BufReader::new(File::open(path).map_err(io_err(path))?))
}

/// Streaming reader over an impression file; holds one line at a time.
pub struct ImpressionReader<'a, R> {
    lines: io::Lines<R>,
    line: usize,
    book: &'a CampaignBook,
}

impl<'a, R: BufRead> ImpressionReader<'a, R> {
    pub fn new(reader: R, book: &'a CampaignBook) -> Self {
        ImpressionReader {
            lines: reader.lines(),
            line: 0,
            book,
        }
    }

    fn parse(&self, body: &str) -> Result<Impression, HarnessError> {
        let n = self.line;
        let mut tok = body.split_whitespace();
        let (id, user) = match (tok.next(), tok.next()) {
            (Some(id), Some(user)) => (id, user),
            _ => {
                return Err(HarnessError::Parse {
                    line: n,
                    msg: "expected `id user entries...`".into(),
                })
            }
        };
        let mut entries = Vec::new();
        for t in tok {
            let mut parts = t.rsplitn(3, ':');
            let (a, r, c) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(r), Some(c)) => (a, r, c),
                _ => {
                    return Err(HarnessError::Parse {
                        line: n,
                        msg: format!("entry `{t}` is not `campaign:revenue:cost`"),
                    })
                }
            };
            let num = |s: &str| {
                s.parse::<i64>().map_err(|_| HarnessError::Parse {
                    line: n,
                    msg: format!("`{s}` in entry `{t}` is not an integer"),
                })
            };
            let (r, a) = (num(r)?, num(a)?);
            let i = self.book.index_of(c).ok_or_else(|| HarnessError::Schema {
                line: n,
                msg: format!("unknown campaign `{c}`"),
            })?;
            entries.push(Entry::new(i, Micros(r), Micros(a)));
        }
        let imp = Impression::new(id, user, entries);
        imp.validate(self.book.len())
            .map_err(|e| HarnessError::Schema {
                line: n,
                msg: e.to_string(),
            })?;
        Ok(imp)
    }
}

impl<R: BufRead> Iterator for ImpressionReader<'_, R> {
    type Item = Result<Impression, HarnessError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line += 1;
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(HarnessError::Parse {
                        line: self.line,
                        msg: e.to_string(),
                    }))
                }
            };
            let body = content(&line);
            if !body.is_empty() {
                return Some(self.parse(body));
            }
        }
    }
}

pub fn open_impressions<'a>(
    path: &Path,
    book: &'a CampaignBook,
) -> Result<ImpressionReader<'a, BufReader<File>>, HarnessError> {
    Ok(ImpressionReader::new(
        BufReader::new(File::open(path).map_err(io_err(path))?),
        book,
    ))
}

/// Loads a campaign file and the full impression file it describes.
pub fn load_stream(
    impressions: &Path,
    campaigns: &Path,
) -> Result<(CampaignBook, Vec<Impression>), HarnessError> {
    let book = load_campaigns(campaigns)?;
    let stream = open_impressions(impressions, &book)?.collect::<Result<Vec<_>, _>>()?;
    Ok((book, stream))
}

fn check_token(s: &str, what: &str) -> io::Result<()> {
    if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '#') {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{what} `{s}` cannot be written"),
        ));
    }
    Ok(())
}

pub fn write_campaigns<W: Write>(book: &CampaignBook, mut out: W) -> io::Result<()> {
    for c in book.campaigns() {
        check_token(&c.id, "campaign id")?;
        if c.id.contains(':') {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("campaign id `{}` contains `:`", c.id),
            ));
        }
        match c.budget {
            Some(b) => write!(out, "{} {}", c.id, b.0)?,
            None => write!(out, "{} inf", c.id)?,
        }
        if let Some(f) = c.fcap {
            write!(out, " {f}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_impressions<'a, W, I>(stream: I, book: &CampaignBook, mut out: W) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Impression>,
{
    for imp in stream {
        check_token(&imp.id, "impression id")?;
        check_token(&imp.user, "user id")?;
        write!(out, "{} {}", imp.id, imp.user)?;
        for e in &imp.entries {
            write!(
                out,
                " {}:{}:{}",
                book.campaign(e.campaign).id,
                e.revenue.0,
                e.cost.0
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Knobs of the synthetic stream generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub campaigns: usize,
    pub impressions: usize,
    /// Mean fraction of campaigns bidding on an impression.
    pub sparsity: f64,
    /// 0 keeps the segment mix fixed; up to 1 rotates it over the stream.
    pub drift: f64,
    /// Budget as a multiple of each campaign's fair share of its demand.
    pub budget_tightness: f64,
    pub users: usize,
    /// Number of audience segments campaigns differ in their interest for.
    pub segments: usize,
    pub house: bool,
    pub fcap: Option<u32>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            campaigns: 50,
            impressions: 40_000,
            sparsity: 0.2,
            drift: 0.0,
            budget_tightness: 0.5,
            users: 5_000,
            segments: 8,
            house: false,
            fcap: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.campaigns == 0 {
            return bad("synthetic stream needs at least one campaign");
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad("sparsity must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return bad("drift must lie in [0, 1]");
        }
        if !(self.budget_tightness > 0.0 && self.budget_tightness.is_finite()) {
            return bad("budget tightness must be positive");
        }
        if self.users == 0 || self.segments == 0 {
            return bad("users and segments must be positive");
        }
        Ok(())
    }
}

const HOUSE_REVENUE: Micros = Micros(1_000);

/// Seeded synthetic stream. Each campaign has a value level and an interest
/// profile over audience segments; each impression belongs to one segment
/// and draws bids from the interested campaigns. Costs differ from revenues
/// by a per-bid margin, so value per unit of budget varies across bids.
pub fn synth_generate(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(CampaignBook, Vec<Impression>), HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln = |s: f64| LogNormal::new(0.0, s).expect("valid sigma");
    let (level, quality, noise, margin) = (ln(0.5), ln(0.3), ln(0.25), ln(0.35));
    let n = spec.campaigns;
    let k = spec.segments;
    let levels: Vec<f64> = (0..n).map(|_| level.sample(&mut rng)).collect();
    let bid_prob: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.9)).collect();
            let mean = w.iter().sum::<f64>() / k as f64;
            w.iter()
                .map(|x| (spec.sparsity * x / mean).min(1.0))
                .collect()
        })
        .collect();
    let m = spec.impressions;
    let mut stream = Vec::with_capacity(m);
    let mut weights = vec![0.0; k];
    for j in 0..m {
        let t = j as f64 / m.max(1) as f64;
        for (s, w) in weights.iter_mut().enumerate() {
            let phase = std::f64::consts::TAU * (s as f64 / k as f64 + t);
            *w = 1.0 + spec.drift * phase.sin();
        }
        let total: f64 = weights.iter().sum();
        let mut x = rng.gen_range(0.0..total);
        let mut seg = k - 1;
        for (s, w) in weights.iter().enumerate() {
            if x < *w {
                seg = s;
                break;
            }
            x -= w;
        }
        let q = quality.sample(&mut rng);
        let mut entries = Vec::new();
        for i in 0..n {
            if rng.gen_bool(bid_prob[i][seg]) {
                let r = levels[i] * q * noise.sample(&mut rng);
                let a = r * margin.sample(&mut rng);
                let r = Micros::from_units(r).0.max(1);
                let a = Micros::from_units(a).0.max(1);
                entries.push(Entry::new(i, Micros(r), Micros(a)));
            }
        }
        let u: f64 = rng.gen();
        let user = ((u * u) * spec.users as f64) as usize;
        stream.push(Impression::new(
            format!("i{j}"),
            format!("u{user}"),
            entries,
        ));
    }
    let mut demand = vec![0i64; n];
    let mut bids = 0usize;
    for imp in &stream {
        bids += imp.entries.len();
        for e in &imp.entries {
            demand[e.campaign] += e.cost.0;
        }
    }
    let per_imp = (bids as f64 / m.max(1) as f64).max(1.0);
    let mut campaigns: Vec<Campaign> = (0..n)
        .map(|i| {
            let b = (spec.budget_tightness * demand[i] as f64 / per_imp).round() as i64;
            let c = Campaign::budgeted(format!("c{i:03}"), Micros(b.max(1)));
            match spec.fcap {
                Some(f) => c.with_fcap(f),
                None => c,
            }
        })
        .collect();
    if spec.house {
        campaigns.push(Campaign::house("house"));
        for imp in &mut stream {
            imp.entries.push(Entry::new(n, HOUSE_REVENUE, Micros::ZERO));
        }
    }
    Ok((CampaignBook::new(campaigns)?, stream))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Files {
        impressions: PathBuf,
        campaigns: PathBuf,
    },
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub input: InputSource,
    /// Rate at which the learning window is sampled for dual estimation.
    pub delta: f64,
    /// Budget scaling fraction; by default the sample's share of the
    /// serving window, `delta |T1| / |T2|`.
    pub eps: Option<f64>,
    pub scale_mode: ScaleMode,
    pub policies: Vec<PolicyKind>,
    pub lambda_log: f64,
    pub kappa: f64,
    /// Price ceiling; by default ten times the largest revenue/cost ratio in T1.
    pub p_max: Option<f64>,
    pub epsilon_floor: f64,
    pub reverse_stream: bool,
    /// Split the serving window into this many periods with separate budgets.
    pub rolling: Option<usize>,
    pub fcap_mode: bool,
    pub n_bins: usize,
    pub seed: u64,
    /// Share of the stream used as the learning window.
    pub t1_fraction: f64,
    /// Absolute oob threshold for every campaign, replacing the per-campaign
    /// minimum cost seen in T1.
    pub oob_threshold: Option<Micros>,
    pub offline_bound: bool,
    pub series_every: u64,
    /// Use these prices instead of estimating them from T1.
    pub duals: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(input: InputSource) -> ExperimentConfig {
        ExperimentConfig {
            input,
            delta: 0.1,
            eps: None,
            scale_mode: ScaleMode::default(),
            policies: PolicyKind::ALL.to_vec(),
            lambda_log: 1.0,
            kappa: 1.0,
            p_max: None,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            reverse_stream: false,
            rolling: None,
            fcap_mode: false,
            n_bins: 10,
            seed: 0,
            t1_fraction: 0.5,
            oob_threshold: None,
            offline_bound: false,
            series_every: 100,
            duals: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta = {} must lie in (0, 1]", self.delta));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0 && e < 1.0) {
                return bad(format!("eps = {e} must lie in (0, 1)"));
            }
        }
        if self.policies.is_empty() {
            return bad("no policies to run".into());
        }
        if !(self.t1_fraction >= 0.0 && self.t1_fraction < 1.0) {
            return bad(format!(
                "t1 fraction = {} must lie in [0, 1)",
                self.t1_fraction
            ));
        }
        if self.rolling == Some(0) {
            return bad("rolling needs at least one period".into());
        }
        if self.n_bins == 0 {
            return bad("n_bins must be positive".into());
        }
        if self.series_every == 0 {
            return bad("series interval must be positive".into());
        }
        if let InputSource::Synthetic(s) = &self.input {
            s.validate()?;
        }
        Ok(())
    }
}

/// How decision logs are turned into revenue and oob counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSpec {
    /// A campaign is out of budget once its remaining budget drops below this.
    pub thresholds: Vec<Micros>,
    /// Step (impressions processed) at which the mid-flight count is taken.
    pub mid_flight: u64,
    pub series_every: u64,
    /// Steps at which budgets reset to the book's values; `[0]` for one period.
    pub period_starts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PolicyMetrics {
    pub total_revenue: Micros,
    pub spend: Vec<Micros>,
    pub allocated: u64,
    pub dropped: u64,
    pub mid_flight_oob: u64,
    pub final_oob: u64,
    /// Decisions whose cost exceeded the replayed remaining budget.
    pub budget_violations: u64,
    /// `(step, cumulative revenue, oob count)`.
    pub series: Vec<(u64, Micros, u64)>,
}

/// Replays a decision sequence against the book's budgets.
pub fn compute_metrics(
    decisions: &[Decision],
    book: &CampaignBook,
    spec: &MetricsSpec,
) -> PolicyMetrics {
    let n = book.len();
    let budget: Vec<Option<Micros>> = (0..n).map(|i| book.budget(i)).collect();
    let mut remaining = budget.clone();
    let oob = |rem: &[Option<Micros>]| {
        rem.iter()
            .zip(&spec.thresholds)
            .filter(|(r, t)| r.is_some_and(|r| r < **t))
            .count() as u64
    };
    let mut m = PolicyMetrics {
        spend: vec![Micros::ZERO; n],
        ..PolicyMetrics::default()
    };
    let mut revenue = Micros::ZERO;
    if spec.mid_flight == 0 {
        m.mid_flight_oob = oob(&remaining);
    }
    m.final_oob = oob(&remaining);
    for (k, d) in decisions.iter().enumerate() {
        let before = k as u64;
        if before > 0 && spec.period_starts.contains(&before) {
            remaining.clone_from(&budget);
        }
        match d.chosen {
            Some(i) => {
                m.allocated += 1;
                revenue += d.revenue;
                m.spend[i] += d.cost;
                if let Some(r) = remaining[i].as_mut() {
                    *r -= d.cost;
                    if r.is_negative() {
                        m.budget_violations += 1;
                    }
                }
            }
            None => m.dropped += 1,
        }
        let step = before + 1;
        let count = oob(&remaining);
        if step == spec.mid_flight {
            m.mid_flight_oob = count;
        }
        if step % spec.series_every == 0 || step == decisions.len() as u64 {
            m.series.push((step, revenue, count));
        }
        m.final_oob = count;
    }
    m.total_revenue = revenue;
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: PolicyKind,
    pub total_revenue_micros: i64,
    pub total_revenue: f64,
    /// `revenue / greedy revenue - 1`, when greedy ran and earned something.
    pub improvement_over_greedy: Option<f64>,
    pub mid_flight_oob: u64,
    pub final_oob: u64,
    pub allocated: u64,
    pub dropped: u64,
    pub total_spend_micros: i64,
    /// Most serves of one campaign to one user, over capped campaigns.
    pub max_user_serves: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub n_campaigns: usize,
    pub t1_len: usize,
    pub t2_len: usize,
    pub sample_len: usize,
    pub delta: f64,
    pub eps: Option<f64>,
    pub reverse_stream: bool,
    pub rolling: Option<usize>,
    pub fcap_mode: bool,
    pub p_max: f64,
    pub bid_budget_ratio: f64,
    /// Prices used for the first (or only) period.
    pub duals: Vec<f64>,
    pub offline_upper_bound: Option<f64>,
    pub policies: Vec<PolicyReport>,
}

impl Report {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    pub policy: PolicyKind,
    pub cum_revenue_micros: i64,
    pub cum_revenue: f64,
    pub oob_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub report: Report,
    pub series: Vec<SeriesRow>,
    pub decisions: Vec<(PolicyKind, Vec<Decision>)>,
}

/// Loads or generates the configured input and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    config.validate()?;
    let (book, stream) = match &config.input {
        InputSource::Files {
            impressions,
            campaigns,
        } => load_stream(impressions, campaigns)?,
        InputSource::Synthetic(spec) => synth_generate(spec, config.seed)?,
    };
    run_on_stream(config, &book, &stream)
}

fn sample_stream(stream: &[Impression], delta: f64, rng: &mut ChaCha8Rng) -> Vec<Impression> {
    if delta >= 1.0 {
        return stream.to_vec();
    }
    stream
        .iter()
        .filter(|_| rng.gen_bool(delta))
        .cloned()
        .collect()
}

fn split_periods(len: usize, periods: usize) -> Vec<(usize, usize)> {
    (0..periods)
        .map(|t| (t * len / periods, (t + 1) * len / periods))
        .collect()
}

/// Per-period budgets: each budget divided evenly across `periods`.
fn period_book(book: &CampaignBook, periods: usize) -> Result<CampaignBook, HarnessError> {
    let campaigns = book
        .campaigns()
        .iter()
        .map(|c| Campaign {
            budget: c.budget.map(|b| Micros((b.0 / periods as i64).max(1))),
            ..c.clone()
        })
        .collect();
    Ok(CampaignBook::new(campaigns)?)
}

/// Smallest nonzero cost each campaign bids in `window`, or 1 micro.
pub fn min_costs(window: &[Impression], n: usize) -> Vec<Micros> {
    let mut out = vec![Micros(i64::MAX); n];
    for e in window.iter().flat_map(|imp| &imp.entries) {
        if e.cost.0 > 0 && e.cost < out[e.campaign] {
            out[e.campaign] = e.cost;
        }
    }
    out.into_iter()
        .map(|c| if c.0 == i64::MAX { Micros(1) } else { c })
        .collect()
}

struct DualPlan {
    sample_len: usize,
    eps: Option<f64>,
    p_max: f64,
    per_period: Vec<DualPriceVector>,
}

fn estimate(
    config: &ExperimentConfig,
    window: &[Impression],
    serve_len: usize,
    book: &CampaignBook,
    p_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<DualPriceVector>, usize, f64), HarnessError> {
    let sample = sample_stream(window, config.delta, rng);
    let eps = config
        .eps
        .unwrap_or(config.delta * window.len() as f64 / serve_len.max(1) as f64);
    if sample.is_empty() {
        return Ok((None, 0, eps));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(HarnessError::Config(format!(
            "derived eps = {eps} is outside (0, 1); lower delta or set eps"
        )));
    }
    let opts = DualEstimateOptions {
        p_max: Some(p_max),
        scale_mode: config.scale_mode,
        ..DualEstimateOptions::new(eps)
    };
    let inst = if config.fcap_mode {
        let parts = PartitionSet::build(&sample, book, config.n_bins)?;
        build_fcap_lp(&sample, book, eps, config.scale_mode, &parts)?
    } else {
        sample_instance(&sample, book, eps, config.scale_mode)?
    };
    Ok((
        Some(duals_from_instance(&inst, &sample, opts)?),
        sample.len(),
        eps,
    ))
}

fn plan_duals(
    config: &ExperimentConfig,
    t1: &[Impression],
    serve: &[&Impression],
    periods: &[(usize, usize)],
    book: &CampaignBook,
) -> Result<DualPlan, HarnessError> {
    let n = book.len();
    let p_max = config.p_max.unwrap_or_else(|| default_p_max(t1));
    let needs = config.policies.iter().any(|k| *k != PolicyKind::Zero);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d0a1);
    let first_len = periods.first().map_or(0, |(a, b)| b - a);
    let (first, sample_len, eps) = match &config.duals {
        Some(p) => {
            if p.len() != n {
                return Err(HarnessError::Config(format!(
                    "{} prices given for {n} campaigns",
                    p.len()
                )));
            }
            (
                Some(DualPriceVector::clamped(p.clone(), p_max)?),
                0,
                config.eps,
            )
        }
        None if needs && !t1.is_empty() => {
            let (d, len, eps) = estimate(config, t1, first_len, book, p_max, &mut rng)?;
            (d, len, Some(eps))
        }
        None => (None, 0, config.eps),
    };
    let mut per_period = vec![first.unwrap_or_else(|| DualPriceVector::zeros(n, p_max))];
    if needs {
        for w in periods.windows(2) {
            let prev: Vec<Impression> = serve[w[0].0..w[0].1].iter().map(|&i| i.clone()).collect();
            let (d, _, _) = estimate(config, &prev, w[1].1 - w[1].0, book, p_max, &mut rng)?;
            let last = per_period.last().expect("first period present").clone();
            per_period.push(d.unwrap_or(last));
        }
    } else {
        let zero = per_period[0].clone();
        per_period.resize(periods.len().max(1), zero);
    }
    Ok(DualPlan {
        sample_len,
        eps,
        p_max,
        per_period,
    })
}

/// Runs the two-phase protocol on an in-memory stream: the first
/// `t1_fraction` of arrivals is the learning window, the rest is served.
pub fn run_on_stream(
    config: &ExperimentConfig,
    book: &CampaignBook,
    stream: &[Impression],
) -> Result<Experiment, HarnessError> {
    config.validate()?;
    crate::model::validate_instance(stream, book)?;
    let n = book.len();
    let split = (config.t1_fraction * stream.len() as f64).round() as usize;
    let (t1, t2) = stream.split_at(split.min(stream.len()));
    let mut serve: Vec<&Impression> = t2.iter().collect();
    if config.reverse_stream {
        serve.reverse();
    }
    let n_periods = config.rolling.unwrap_or(1);
    let periods = split_periods(serve.len(), n_periods);
    let pbook = if n_periods > 1 {
        period_book(book, n_periods)?
    } else {
        book.fresh()
    };
    let plan = plan_duals(config, t1, &serve, &periods, &pbook)?;
    let thresholds = match config.oob_threshold {
        Some(t) => vec![t; n],
        None => min_costs(t1, n),
    };
    let mspec = MetricsSpec {
        thresholds,
        mid_flight: serve.len() as u64 / 2,
        series_every: config.series_every,
        period_starts: periods.iter().map(|p| p.0 as u64).collect(),
    };
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut runs = Vec::new();
    for &kind in &config.policies {
        let mut decisions = Vec::with_capacity(serve.len());
        let mut revenue = Micros::ZERO;
        let mut counter: Option<UserCapCounter> = None;
        let mut log_out = match &config.out_dir {
            Some(dir) => {
                let path = dir.join(format!("decisions-{kind}.log"));
                Some((
                    BufWriter::new(File::create(&path).map_err(io_err(&path))?),
                    path,
                ))
            }
            None => None,
        };
        for (t, &(a, b)) in periods.iter().enumerate() {
            let policy = policy_for(
                kind,
                config,
                plan.per_period[t].clone(),
                plan.p_max,
                (b - a) as u64,
            );
            let mut engine = EngineState::new(pbook.clone(), policy)?;
            if let Some(c) = counter.take() {
                engine.set_caps(c);
            }
            let mut write_err = None;
            engine.run_with(serve[a..b].iter().copied(), |imp, d, st| {
                decisions.push(*d);
                if let Some((w, _)) = log_out.as_mut() {
                    let rec = DecisionRecord {
                        h: a as u64 + st.h(),
                        id: imp.id.clone(),
                        decision: *d,
                    };
                    if let Err(e) = writeln!(w, "{rec}") {
                        write_err.get_or_insert(e);
                    }
                }
            })?;
            if let (Some(e), Some((_, path))) = (write_err, &log_out) {
                return Err(io_err(path)(e));
            }
            revenue += engine.position().w;
            counter = engine.take_caps();
        }
        if let Some((mut w, path)) = log_out {
            w.flush().map_err(io_err(&path))?;
        }
        let metrics = compute_metrics(&decisions, &pbook, &mspec);
        if metrics.total_revenue != revenue || metrics.budget_violations > 0 {
            return Err(HarnessError::Output(format!(
                "metrics replay disagrees with the engine for {kind}: {} vs {}, {} violations",
                metrics.total_revenue, revenue, metrics.budget_violations
            )));
        }
        let max_serves = counter.as_ref().map(|c| {
            (0..n)
                .filter(|&i| book.fcap(i).is_some())
                .map(|i| c.max_count(i))
                .max()
                .unwrap_or(0)
        });
        runs.push((kind, decisions, metrics, max_serves));
    }

    let greedy = runs
        .iter()
        .find(|r| r.0 == PolicyKind::Zero)
        .map(|r| r.2.total_revenue);
    let mut series = Vec::new();
    let mut policies = Vec::new();
    for (kind, _, m, max_serves) in &runs {
        policies.push(PolicyReport {
            policy: *kind,
            total_revenue_micros: m.total_revenue.0,
            total_revenue: m.total_revenue.as_units(),
            improvement_over_greedy: greedy
                .filter(|g| g.0 > 0)
                .map(|g| m.total_revenue.0 as f64 / g.0 as f64 - 1.0),
            mid_flight_oob: m.mid_flight_oob,
            final_oob: m.final_oob,
            allocated: m.allocated,
            dropped: m.dropped,
            total_spend_micros: m.spend.iter().copied().sum::<Micros>().0,
            max_user_serves: *max_serves,
        });
        series.extend(m.series.iter().map(|&(step, rev, oob)| SeriesRow {
            step,
            policy: *kind,
            cum_revenue_micros: rev.0,
            cum_revenue: rev.as_units(),
            oob_count: oob,
        }));
    }
    let offline_upper_bound = if config.offline_bound {
        Some(offline_optimum(t2, book, 1e-9)?)
    } else {
        None
    };
    let report = Report {
        seed: config.seed,
        n_campaigns: n,
        t1_len: t1.len(),
        t2_len: t2.len(),
        sample_len: plan.sample_len,
        delta: config.delta,
        eps: plan.eps,
        reverse_stream: config.reverse_stream,
        rolling: config.rolling,
        fcap_mode: config.fcap_mode,
        p_max: plan.p_max,
        bid_budget_ratio: bid_budget_ratio(t1, book),
        duals: plan.per_period[0].prices().to_vec(),
        offline_upper_bound,
        policies,
    };
    let exp = Experiment {
        report,
        series,
        decisions: runs.into_iter().map(|(k, d, _, _)| (k, d)).collect(),
    };
    if let Some(dir) = &config.out_dir {
        write_artifacts(&exp, dir)?;
    }
    Ok(exp)
}

fn policy_for(
    kind: PolicyKind,
    config: &ExperimentConfig,
    p_eps: DualPriceVector,
    p_max: f64,
    horizon: u64,
) -> PolicyConfig {
    PolicyConfig {
        kind,
        p_eps,
        lambda_log: config.lambda_log,
        kappa: config.kappa,
        horizon: horizon.max(1),
        epsilon_floor: config.epsilon_floor,
        p_max,
    }
}

pub fn write_report<W: Write>(report: &Report, out: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(out, report).map_err(|e| HarnessError::Output(e.to_string()))
}

pub fn write_series<W: Write>(rows: &[SeriesRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Output(e.to_string()))
}

/// Writes `report.json` and `series.csv` into `dir`.
pub fn write_artifacts(exp: &Experiment, dir: &Path) -> Result<(), HarnessError> {
    let path = dir.join("report.json");
    let mut f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_report(&exp.report, &mut f)?;
    writeln!(f).and_then(|_| f.flush()).map_err(io_err(&path))?;
    let path = dir.join("series.csv");
    let f = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    write_series(&exp.series, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub campaign: String,
    pub size_a: usize,
    pub size_b: usize,
    pub dual_a: f64,
    pub dual_b: f64,
    /// Impressions with a positive bid from the campaign in the larger prefix.
    pub nonzero_bids: usize,
}

/// Permutes the stream with `seed`, solves the sample LP on prefixes of each
/// size (budgets scaled by `size / |stream|`), and pairs the duals of
/// consecutive sizes.
pub fn dual_stability_study(
    stream: &[Impression],
    book: &CampaignBook,
    sizes: &[usize],
    seed: u64,
    mode: ScaleMode,
) -> Result<Vec<StabilityRow>, HarnessError> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::Config("sizes must be ascending".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s >= stream.len()) {
        return Err(HarnessError::Config(format!(
            "prefix size {s} must lie in [1, {})",
            stream.len()
        )));
    }
    let mut order: Vec<&Impression> = stream.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let duals = sizes
        .iter()
        .map(|&m| {
            let prefix: Vec<Impression> = order[..m].iter().map(|&i| i.clone()).collect();
            let eps = m as f64 / stream.len() as f64;
            let budgets = crate::lp::scale_budgets_with(&book.budgets_units(), eps, mode)?;
            let inst = LpInstance::from_impressions(&prefix, budgets)?;
            Ok(solve_lp(&inst, 1e-9)?.p)
        })
        .collect::<Result<Vec<Vec<f64>>, HarnessError>>()?;
    let mut rows = Vec::new();
    for k in 1..sizes.len() {
        let mut bids = vec![0usize; book.len()];
        for imp in &order[..sizes[k]] {
            for e in imp.entries.iter().filter(|e| e.revenue.0 > 0) {
                bids[e.campaign] += 1;
            }
        }
        for i in (0..book.len()).filter(|&i| !book.is_house(i)) {
            rows.push(StabilityRow {
                campaign: book.campaign(i).id.clone(),
                size_a: sizes[k - 1],
                size_b: sizes[k],
                dual_a: duals[k - 1][i],
                dual_b: duals[k][i],
                nonzero_bids: bids[i],
            });
        }
    }
    Ok(rows)
}

/// Mean `|dual_a - dual_b|` over the rows pairing `size_a` with `size_b`.
pub fn mean_abs_change(rows: &[StabilityRow], size_a: usize, size_b: usize) -> Option<f64> {
    let d: Vec<f64> = rows
        .iter()
        .filter(|r| r.size_a == size_a && r.size_b == size_b)
        .map(|r| (r.dual_a - r.dual_b).abs())
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

pub fn write_stability<W: Write>(rows: &[StabilityRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Output(e.to_string()))
}
