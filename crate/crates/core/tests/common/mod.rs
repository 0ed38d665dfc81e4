//! Independent reference implementations used by the acceptance target.

#![allow(dead_code)]

use statrs::function::gamma::{digamma, ln_gamma};

/// Generic KL(Dir(a) || Dir(b)).
pub fn dirichlet_kl(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let mut kl = ln_gamma(sa) - ln_gamma(sb);
    for (&ai, &bi) in a.iter().zip(b) {
        kl += ln_gamma(bi) - ln_gamma(ai) + (ai - bi) * (digamma(ai) - digamma(sa));
    }
    kl
}

/// Dempster's rule on a single pixel, written over the full belief product
/// matrix. Returns `(belief, uncertainty, prob)`.
pub fn ds_pixel(e1: &[f64], e2: &[f64]) -> (Vec<f64>, f64, Vec<f64>) {
    let k = e1.len();
    let opinion = |e: &[f64]| {
        let s: f64 = e.iter().map(|v| v + 1.0).sum();
        (e.iter().map(|v| v / s).collect::<Vec<_>>(), k as f64 / s)
    };
    let (b1, u1) = opinion(e1);
    let (b2, u2) = opinion(e2);
    let mut conflict = 0.0;
    for (i, x) in b1.iter().enumerate() {
        for (j, y) in b2.iter().enumerate() {
            if i != j {
                conflict += x * y;
            }
        }
    }
    let scale = 1.0 / (1.0 - conflict);
    let b: Vec<f64> = (0..k)
        .map(|i| scale * (b1[i] * b2[i] + b1[i] * u2 + b2[i] * u1))
        .collect();
    let u = scale * u1 * u2;
    let alpha: Vec<f64> = b.iter().map(|bi| k as f64 * bi / u + 1.0).collect();
    let s: f64 = alpha.iter().sum();
    (b, u, alpha.iter().map(|a| a / s).collect())
}

/// Brute-force segmentation metrics for one binary mask pair:
/// `(dsc, jac, Option<(asd, hd95)>)`.
pub struct BruteMetrics {
    pub dsc: f64,
    pub jac: f64,
    pub surface: Option<(f64, f64)>,
}

fn inside(m: &[bool], h: usize, w: usize, y: i64, x: i64) -> bool {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        return false;
    }
    m[y as usize * w + x as usize]
}

fn edge_pixels(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for idx in 0..h * w {
        let (y, x) = ((idx / w) as i64, (idx % w) as i64);
        if !m[idx] {
            continue;
        }
        let neighbours = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
        if neighbours.iter().any(|&(a, b)| !inside(m, h, w, a, b)) {
            out.push((y, x));
        }
    }
    out
}

fn directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(from.len());
    for &(y, x) in from {
        let mut best = f64::INFINITY;
        for &(v, u) in to {
            let d = (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt();
            if d < best {
                best = d;
            }
        }
        out.push(best);
    }
    out
}

pub fn brute_metrics(pred: &[bool], truth: &[bool], h: usize, w: usize) -> BruteMetrics {
    let both = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count() as f64;
    let either = pred.iter().zip(truth).filter(|(a, b)| **a || **b).count() as f64;
    let np = pred.iter().filter(|v| **v).count() as f64;
    let nt = truth.iter().filter(|v| **v).count() as f64;
    let (dsc, jac) = if either == 0.0 {
        (1.0, 1.0)
    } else {
        (2.0 * both / (np + nt), both / either)
    };
    let (ep, et) = (edge_pixels(pred, h, w), edge_pixels(truth, h, w));
    let surface = (!ep.is_empty() && !et.is_empty()).then(|| {
        let a = directed(&ep, &et);
        let b = directed(&et, &ep);
        let asd =
            0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64);
        let mut all = [a, b].concat();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = all.len();
        let rank = n - (5 * n) / 100;
        (asd, all[rank - 1])
    });
    BruteMetrics { dsc, jac, surface }
}
