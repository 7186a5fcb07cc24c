//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use rand::Rng;
use riskalloc::lp::{LpEntry, LpInstance};
use riskalloc::model::{Campaign, CampaignBook, Entry, Impression, Micros};

/// Maximizes `c.x` subject to `A x <= b`, `x >= 0` by enumerating every
/// vertex of the feasible region. Exponential; only for tiny problems.
/// Returns `(value, x)`.
pub fn enumerate_lp_max(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> (f64, Vec<f64>) {
    let n = c.len();
    // Constraints as (row, rhs): A rows then -x_k <= 0.
    let mut rows: Vec<(Vec<f64>, f64)> = a.iter().cloned().zip(b.iter().copied()).collect();
    for k in 0..n {
        let mut r = vec![0.0; n];
        r[k] = -1.0;
        rows.push((r, 0.0));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let sys: Vec<&(Vec<f64>, f64)> = idx.iter().map(|&i| &rows[i]).collect();
        if let Some(x) = solve_square(&sys) {
            let feasible = rows.iter().all(|(r, rhs)| dot(r, &x) <= rhs + 1e-9);
            if feasible {
                let v = dot(c, &x);
                if best.as_ref().map_or(true, |(bv, _)| v > *bv + 1e-12) {
                    best = Some((v, x));
                }
            }
        }
        if !next_combination(&mut idx, rows.len()) {
            break;
        }
    }
    best.expect("feasible region has a vertex")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn solve_square(sys: &[&(Vec<f64>, f64)]) -> Option<Vec<f64>> {
    let n = sys.len();
    let mut m: Vec<Vec<f64>> = sys
        .iter()
        .map(|(r, rhs)| {
            let mut row = r.clone();
            row.push(*rhs);
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..=n {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

/// Dense form of the packing LP over the listed entries:
/// variables in (impression, entry) order.
pub fn dense_packing(inst: &LpInstance) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let vars: Vec<(usize, LpEntry)> = inst
        .rows()
        .iter()
        .enumerate()
        .flat_map(|(j, r)| r.iter().map(move |e| (j, *e)))
        .collect();
    let c = vars.iter().map(|(_, e)| e.revenue).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, &bi) in inst.budgets().iter().enumerate() {
        if bi.is_finite() {
            a.push(
                vars.iter()
                    .map(|(_, e)| if e.campaign == i { e.cost } else { 0.0 })
                    .collect(),
            );
            b.push(bi);
        }
    }
    for cap in inst.cap_rows() {
        a.push(
            vars.iter()
                .map(|(j, e)| {
                    if e.campaign == cap.campaign && cap.members.contains(j) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        b.push(cap.cap);
    }
    for j in 0..inst.n_impressions() {
        a.push(
            vars.iter()
                .map(|(jj, _)| if *jj == j { 1.0 } else { 0.0 })
                .collect(),
        );
        b.push(1.0);
    }
    (c, a, b)
}

/// Minimum of the dual `sum p_hat + sum b p` by vertex enumeration, written as
/// a maximization of the negated objective over `(p, p_hat) >= 0`.
pub fn enumerate_dual_min(inst: &LpInstance) -> (f64, Vec<f64>) {
    let n = inst.n_campaigns();
    let m = inst.n_impressions();
    let nv = n + m;
    let mut c = vec![0.0; nv];
    for i in 0..n {
        c[i] = -inst.budgets()[i];
    }
    for j in 0..m {
        c[n + j] = -1.0;
    }
    // p_hat_j + a_ji p_i >= r_ji  ->  -p_hat_j - a_ji p_i <= -r_ji
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (j, row) in inst.rows().iter().enumerate() {
        for e in row {
            let mut r = vec![0.0; nv];
            r[e.campaign] = -e.cost;
            r[n + j] = -1.0;
            a.push(r);
            b.push(-e.revenue);
        }
    }
    let (v, x) = enumerate_lp_max(&c, &a, &b);
    (-v, x)
}

pub fn random_instance<R: Rng>(rng: &mut R, m: usize, n: usize, density: f64) -> LpInstance {
    let hi = (m as f64 / 3.0).max(1.0);
    let budgets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..hi)).collect();
    let rows = (0..m)
        .map(|_| {
            let mut row: Vec<LpEntry> = Vec::new();
            for i in 0..n {
                if rng.gen_bool(density) {
                    row.push(LpEntry {
                        campaign: i,
                        revenue: rng.gen_range(0.01..2.0),
                        cost: rng.gen_range(0.05..1.5),
                    });
                }
            }
            if row.is_empty() {
                let i = rng.gen_range(0..n);
                row.push(LpEntry {
                    campaign: i,
                    revenue: rng.gen_range(0.01..2.0),
                    cost: rng.gen_range(0.05..1.5),
                });
            }
            row
        })
        .collect();
    LpInstance::new(budgets, rows).unwrap()
}

pub fn imp(id: &str, user: &str, entries: &[(usize, i64, i64)]) -> Impression {
    Impression::new(
        id,
        user,
        entries
            .iter()
            .map(|&(c, r, a)| Entry::new(c, Micros(r), Micros(a)))
            .collect(),
    )
}

pub fn book(budgets: &[i64]) -> CampaignBook {
    CampaignBook::new(
        budgets
            .iter()
            .enumerate()
            .map(|(i, &b)| Campaign::budgeted(format!("c{i}"), Micros(b)))
            .collect(),
    )
    .unwrap()
}

/// Random stream with integer micro amounts and entries in shuffled order.
pub fn random_stream<R: Rng>(
    rng: &mut R,
    m: usize,
    n: usize,
    density: f64,
    users: usize,
) -> Vec<Impression> {
    (0..m)
        .map(|j| {
            let mut entries: Vec<Entry> = Vec::new();
            for i in 0..n {
                if rng.gen_bool(density) {
                    let r = rng.gen_range(1..3_000_000);
                    let a = rng.gen_range(1..2_000_000);
                    entries.push(Entry::new(i, Micros(r), Micros(a)));
                }
            }
            // Shuffle entry order so nothing relies on sorted indices.
            for k in (1..entries.len()).rev() {
                let s = rng.gen_range(0..=k);
                entries.swap(k, s);
            }
            Impression::new(
                format!("imp{j}"),
                format!("u{}", rng.gen_range(0..users.max(1))),
                entries,
            )
        })
        .collect()
}

/// Reference greedy allocator: highest revenue among campaigns whose
/// remaining budget covers the cost, lowest index on ties, drop when the
/// best revenue is not positive. Returns the chosen campaign per impression.
pub fn greedy_oracle(stream: &[Impression], budgets: &[i64]) -> Vec<Option<usize>> {
    let mut remaining = budgets.to_vec();
    let mut out = Vec::with_capacity(stream.len());
    for imp in stream {
        let mut best: Option<(i64, usize)> = None;
        for i in 0..budgets.len() {
            if let Some(e) = imp.entries.iter().find(|e| e.campaign == i) {
                if e.cost.0 <= remaining[i] && e.revenue.0 > 0 {
                    if best.map_or(true, |(r, _)| e.revenue.0 > r) {
                        best = Some((e.revenue.0, i));
                    }
                }
            }
        }
        if let Some((_, i)) = best {
            let e = imp.entries.iter().find(|e| e.campaign == i).unwrap();
            remaining[i] -= e.cost.0;
        }
        out.push(best.map(|(_, i)| i));
    }
    out
}
