//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical or history code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triage_core::{EventInstance, HistoryDb, InstanceId, Priority, TickRecord};

/// Solves `XᵀX β = Xᵀy` by Gaussian elimination with partial pivoting.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (row, &target) in rows.iter().zip(y) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += row[i] * row[j];
            }
            a[i][n] += row[i] * target;
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let factor = row[col] / pivot_row[col];
                for (cell, p) in row.iter_mut().zip(&pivot_row).skip(col) {
                    *cell -= factor * p;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Textbook single-response PLS with unit-length scores. Each component
/// keeps its score scale so new points can be projected by deflation.
#[derive(Debug, Clone, Default)]
pub struct NaivePls {
    pub n_factors: usize,
    /// (w, p, c, score_scale) per component.
    pub components: Vec<(Vec<f64>, Vec<f64>, f64, f64)>,
}

impl NaivePls {
    pub fn fit(x: &[Vec<f64>], y: &[f64], epsilon: f64) -> Self {
        let n = x[0].len();
        let mut e: Vec<Vec<f64>> = x.to_vec();
        let mut f: Vec<f64> = y.to_vec();
        let scale = e.iter().map(|r| dot(r, r)).sum::<f64>().sqrt().max(1e-300);
        let mut components = Vec::new();
        for _ in 0..n.min(x.len()) {
            let frob = e.iter().map(|r| dot(r, r)).sum::<f64>().sqrt();
            if frob <= epsilon || frob <= 1e-10 * scale {
                break;
            }
            let mut w: Vec<f64> = (0..n).map(|j| e.iter().zip(&f).map(|(r, fi)| r[j] * fi).sum()).collect();
            if norm(&w) <= 1e-12 * frob * norm(&f).max(1.0) {
                w = e
                    .iter()
                    .max_by(|a, b| norm(a).total_cmp(&norm(b)))
                    .unwrap()
                    .clone();
            }
            let wn = norm(&w);
            w.iter_mut().for_each(|v| *v /= wn);
            let mut t: Vec<f64> = e.iter().map(|r| dot(r, &w)).collect();
            let s = norm(&t);
            if s <= 1e-10 * scale {
                break;
            }
            t.iter_mut().for_each(|v| *v /= s);
            let p: Vec<f64> = (0..n).map(|j| e.iter().zip(&t).map(|(r, ti)| r[j] * ti).sum()).collect();
            let c = dot(&f, &t);
            for (row, ti) in e.iter_mut().zip(&t) {
                for j in 0..n {
                    row[j] -= ti * p[j];
                }
            }
            for (fi, ti) in f.iter_mut().zip(&t) {
                *fi -= ti * c;
            }
            components.push((w, p, c, s));
        }
        Self { n_factors: n, components }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut residual = x.to_vec();
        let mut y = 0.0;
        for (w, p, c, s) in &self.components {
            let t = dot(&residual, w) / s;
            y += t * c;
            for j in 0..residual.len() {
                residual[j] -= t * p[j];
            }
        }
        y
    }

    /// Refit on `[Pᵀ; x]` against `[c; y]`.
    pub fn absorb(&self, x: &[f64], y: f64, epsilon: f64) -> Self {
        let mut rows: Vec<Vec<f64>> = self.components.iter().map(|(_, p, _, _)| p.clone()).collect();
        let mut targets: Vec<f64> = self.components.iter().map(|(_, _, c, _)| *c).collect();
        rows.push(x.to_vec());
        targets.push(y);
        Self::fit(&rows, &targets, epsilon)
    }
}

/// Stored tick as plain maps: priority and valuation per present instance.
#[derive(Debug, Clone)]
pub struct PlainTick {
    pub present: BTreeSet<String>,
    pub pri: BTreeMap<String, i64>,
    pub alpha: BTreeMap<String, f64>,
}

pub fn plain_ticks(db: &HistoryDb) -> Vec<PlainTick> {
    db.ticks()
        .iter()
        .map(|r| PlainTick {
            present: r.events.iter().map(|e| e.instance_id.0.clone()).collect(),
            pri: r.sa_priorities.iter().map(|(k, v)| (k.0.clone(), v.value() as i64)).collect(),
            alpha: r.predictions.iter().map(|(k, v)| (k.0.clone(), *v)).collect(),
        })
        .collect()
}

pub fn naive_phi(pri_v: i64, pri_w: i64, alpha_v: f64, alpha_w: f64) -> i64 {
    if ((pri_v - pri_w) as f64) * (alpha_v - alpha_w) > 0.0 {
        0
    } else {
        1
    }
}

/// Correction for `v` at tick `t` evaluated straight from the definitions,
/// with exact rational arithmetic for the final ceiling.
pub fn naive_delta(ticks: &[PlainTick], t: usize, chi_t: &BTreeSet<String>, v: &str) -> u64 {
    if t == 0 {
        return 0;
    }
    let mut lambda_sum: i64 = 0;
    let mut meta = 0i64;
    let mut omega: BTreeSet<String> = BTreeSet::new();
    for past in ticks.iter().take(t) {
        if !past.present.contains(v) {
            continue;
        }
        let (Some(&pv), Some(&av)) = (past.pri.get(v), past.alpha.get(v)) else {
            continue;
        };
        let mut theta = Vec::new();
        for w in past.present.intersection(chi_t) {
            if w == v {
                continue;
            }
            let (Some(&pw), Some(&aw)) = (past.pri.get(w), past.alpha.get(w)) else {
                continue;
            };
            if naive_phi(pv, pw, av, aw) == 1 {
                lambda_sum += pv - pw;
                theta.push(w.clone());
            }
        }
        if !theta.is_empty() {
            meta += 1;
            omega.extend(theta);
        }
    }
    if lambda_sum <= 0 || meta == 0 {
        return 0;
    }
    let num = lambda_sum * (omega.len() as i64 + 1);
    let den = meta * chi_t.len() as i64;
    ((num + den - 1) / den) as u64
}

/// Random history obeying the persistence rules: instances stay until
/// resolved and never come back.
pub fn random_history(rng: &mut ChaCha8Rng, max_ticks: usize, max_events: usize, max_priority: u32) -> HistoryDb {
    let ticks = rng.random_range(1..=max_ticks);
    let mut db = HistoryDb::new();
    let mut open: Vec<(String, u64)> = Vec::new();
    let mut next_id = 0;
    for t in 0..ticks as u64 {
        let room = max_events - open.len();
        let arrivals = if room == 0 { 0 } else { rng.random_range(usize::from(open.is_empty())..=room) };
        for _ in 0..arrivals {
            open.push((format!("i{next_id}"), t));
            next_id += 1;
        }
        let events: Vec<EventInstance> = open
            .iter()
            .map(|(id, first)| EventInstance {
                instance_id: InstanceId::new(id.clone()),
                type_id: "t".into(),
                first_reported: *first,
                factors: vec![1.0],
            })
            .collect();
        let mut sa_priorities = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        for (id, _) in &open {
            let id = InstanceId::new(id.clone());
            sa_priorities.insert(id.clone(), Priority::new(rng.random_range(1..=max_priority)).unwrap());
            // Coarse grid so that valuation ties actually occur.
            let alpha = if rng.random_bool(0.3) {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-5.0..5.0)
            };
            predictions.insert(id, alpha);
        }
        let resolved: BTreeSet<InstanceId> = open
            .iter()
            .filter(|_| rng.random_bool(0.3))
            .map(|(id, _)| InstanceId::new(id.clone()))
            .collect();
        open.retain(|(id, _)| !resolved.contains(&InstanceId::new(id.clone())));
        db.append_tick(TickRecord {
            tick: t,
            events,
            sa_priorities,
            predictions,
            resolved,
        })
        .unwrap();
    }
    db
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
