//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use merit_core::losses::LossConfig;
use merit_core::metrics::LabelMask;
use merit_core::{RngStream, Tensor};
use std::collections::BTreeSet;

/// Plain-loop soft Dice + CE on `[N,C,H,W]` logits, independent of the tape.
pub fn oracle_combined(logits: &Tensor<f64>, target: &[usize], cfg: &LossConfig) -> f64 {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut tsum = vec![0.0; c];
    let mut ce = 0.0;
    for b in 0..n {
        for i in 0..hw {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * hw + i]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let t = target[b * hw + i];
            ce -= z[t] - lse;
            for k in 0..c {
                let p = (z[k] - lse).exp();
                psum[k] += p;
                if k == t {
                    inter[k] += p;
                    tsum[k] += 1.0;
                }
            }
        }
    }
    let e = cfg.smoothing;
    let dice = 1.0 - (0..c).map(|k| (2.0 * inter[k] + e) / (psum[k] + tsum[k] + e)).sum::<f64>() / c as f64;
    cfg.lambda1 * dice + cfg.lambda2 * ce / (n * hw) as f64
}

/// Lists every non-empty subset by recursion rather than bit tricks.
pub fn all_subsets(n: usize) -> Vec<Vec<usize>> {
    fn go(i: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            if !cur.is_empty() {
                out.push(cur.clone());
            }
            return;
        }
        go(i + 1, n, cur, out);
        cur.push(i);
        go(i + 1, n, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    go(0, n, &mut Vec::new(), &mut out);
    out
}

pub fn oracle_mutation(maps: &[Tensor<f64>], target: &[usize], cfg: &LossConfig) -> f64 {
    all_subsets(maps.len())
        .iter()
        .map(|s| {
            let sum = Tensor::from_fn(maps[0].shape(), |i| s.iter().map(|&m| maps[m].data()[i]).sum());
            oracle_combined(&sum, target, cfg)
        })
        .sum()
}

pub type Set = BTreeSet<(usize, usize)>;

pub fn pixels(m: &LabelMask, class: u8) -> Set {
    let mut s = Set::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) == class {
                s.insert((r, c));
            }
        }
    }
    s
}

pub fn oracle_dsc(a: &Set, b: &Set) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 100.0;
    }
    200.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

pub fn oracle_boundary(s: &Set, w: usize, h: usize) -> Set {
    s.iter()
        .copied()
        .filter(|&(r, c)| {
            let nb = [(r as i64 - 1, c as i64), (r as i64 + 1, c as i64), (r as i64, c as i64 - 1), (r as i64, c as i64 + 1)];
            nb.iter().any(|&(y, x)| {
                y < 0 || x < 0 || y >= h as i64 || x >= w as i64 || !s.contains(&(y as usize, x as usize))
            })
        })
        .collect()
}

pub fn directed(from: &Set, to: &Set) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(y, x)| ((r as f64 - y as f64).powi(2) + (c as f64 - x as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let k = (0.95 * d.len() as f64).ceil() as usize;
    d[k.max(1) - 1]
}

pub fn oracle_hd95(a: &Set, b: &Set, w: usize, h: usize) -> Option<f64> {
    let (ba, bb) = (oracle_boundary(a, w, h), oracle_boundary(b, w, h));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => Some(directed(&ba, &bb).max(directed(&bb, &ba))),
        _ => None,
    }
}

pub fn random_mask(rng: &mut RngStream, n: usize, classes: usize, density: f64) -> LabelMask {
    let labels = (0..n * n)
        .map(|_| if rng.uniform() < density { 1 + rng.below(classes - 1) as u8 } else { 0 })
        .collect();
    LabelMask::new(n, n, labels).unwrap()
}

pub fn from_points(n: usize, pts: &[(usize, usize)], class: u8) -> LabelMask {
    let mut m = LabelMask::filled(n, n, 0);
    for &(r, c) in pts {
        m.set(r, c, class);
    }
    m
}
