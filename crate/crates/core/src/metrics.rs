//! Segmentation metrics: Dice (DSC), Jaccard (JAC), average surface
//! distance (ASD) and the 95th-percentile Hausdorff distance (HD95).
//!
//! Boundary pixels are mask pixels with at least one 4-neighbour outside the
//! mask; the image border counts as outside. Distances are Euclidean in
//! pixels. HD95 is the nearest-rank 95th percentile of the nearest-neighbour
//! distances pooled from both directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{EtcError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(EtcError::Dimension(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_labels(
        labels: &[usize],
        height: usize,
        width: usize,
        class: usize,
    ) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize]
    }

    /// Boundary pixels as `(row, col)` in row-major order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let (yi, xi) = (y as isize, x as isize);
                if self.at(yi, xi)
                    && !(self.at(yi - 1, xi)
                        && self.at(yi + 1, xi)
                        && self.at(yi, xi - 1)
                        && self.at(yi, xi + 1))
                {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(EtcError::Dimension(format!(
            "masks {}x{} and {}x{} differ in shape",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `(DSC, JAC)`; two empty masks agree perfectly and score 1.
pub fn overlap_metrics(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    same_shape(pred, truth)?;
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + t - inter;
    Ok((
        2.0 * inter as f64 / (p + t) as f64,
        inter as f64 / union as f64,
    ))
}

fn nearest_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            let best = to
                .iter()
                .map(|&(v, u)| {
                    let dy = y as i64 - v as i64;
                    let dx = x as i64 - u as i64;
                    dy * dy + dx * dx
                })
                .min()
                .expect("nonempty boundary");
            (best as f64).sqrt()
        })
        .collect()
}

/// `(ASD, HD95)`, or `None` when either mask is empty.
pub fn surface_metrics(pred: &Mask, truth: &Mask) -> Result<Option<(f64, f64)>> {
    same_shape(pred, truth)?;
    let (bp, bt) = (pred.boundary(), truth.boundary());
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    let d_pt = nearest_distances(&bp, &bt);
    let d_tp = nearest_distances(&bt, &bp);
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let asd = (mean(&d_pt) + mean(&d_tp)) / 2.0;
    let mut pooled: Vec<f64> = d_pt.into_iter().chain(d_tp).collect();
    pooled.sort_by(f64::total_cmp);
    let rank = (95 * pooled.len()).div_ceil(100);
    Ok(Some((asd, pooled[rank - 1])))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub jac: f64,
    /// `None` when no sample had both masks nonempty.
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    /// Foreground classes `1..K`, keyed `class_k`.
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub mean: ClassMetrics,
}

/// Running per-class sums over a test set for one prediction source.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    classes: usize,
    samples: usize,
    dsc: Vec<f64>,
    jac: Vec<f64>,
    asd: Vec<f64>,
    hd95: Vec<f64>,
    surface_n: Vec<usize>,
    excluded: usize,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            samples: 0,
            dsc: vec![0.0; classes],
            jac: vec![0.0; classes],
            asd: vec![0.0; classes],
            hd95: vec![0.0; classes],
            surface_n: vec![0; classes],
            excluded: 0,
        }
    }

    /// Adds one sample's predicted and true label maps.
    pub fn add(
        &mut self,
        pred: &[usize],
        truth: &[usize],
        height: usize,
        width: usize,
    ) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(EtcError::Dimension(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        for c in 1..self.classes {
            let p = Mask::from_labels(pred, height, width, c)?;
            let t = Mask::from_labels(truth, height, width, c)?;
            let (d, j) = overlap_metrics(&p, &t)?;
            self.dsc[c] += d;
            self.jac[c] += j;
            match surface_metrics(&p, &t)? {
                Some((a, h)) => {
                    self.asd[c] += a;
                    self.hd95[c] += h;
                    self.surface_n[c] += 1;
                }
                None => self.excluded += 1,
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn finish(&self) -> BranchReport {
        let n = self.samples.max(1) as f64;
        let mut per_class = BTreeMap::new();
        let mut rows = Vec::new();
        for c in 1..self.classes {
            let sn = self.surface_n[c];
            let m = ClassMetrics {
                dsc: self.dsc[c] / n,
                jac: self.jac[c] / n,
                asd: (sn > 0).then(|| self.asd[c] / sn as f64),
                hd95: (sn > 0).then(|| self.hd95[c] / sn as f64),
            };
            per_class.insert(format!("class_{c}"), m);
            rows.push(m);
        }
        let avg =
            |f: &dyn Fn(&ClassMetrics) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let defined: Vec<&ClassMetrics> = rows.iter().filter(|m| m.asd.is_some()).collect();
        let surf = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
            (!defined.is_empty())
                .then(|| defined.iter().filter_map(|m| f(m)).sum::<f64>() / defined.len() as f64)
        };
        let mean = ClassMetrics {
            dsc: avg(&|m| m.dsc),
            jac: avg(&|m| m.jac),
            asd: surf(&|m| m.asd),
            hd95: surf(&|m| m.hd95),
        };
        BranchReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed by source: `ecb`, `epb`, `efb`, `ensemble`.
    pub branches: BTreeMap<String, BranchReport>,
    pub excluded_surface_cases: usize,
}

impl MetricReport {
    /// `{branch: {class_k: {...}, mean: {...}}, excluded_surface_cases: n}`
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        for (name, b) in &self.branches {
            let mut entry = serde_json::Map::new();
            for (k, m) in &b.per_class {
                entry.insert(k.clone(), json!(m));
            }
            entry.insert("mean".into(), json!(b.mean));
            obj.insert(name.clone(), Value::Object(entry));
        }
        obj.insert(
            "excluded_surface_cases".into(),
            json!(self.excluded_surface_cases),
        );
        Value::Object(obj)
    }

    pub fn mean_dsc(&self, branch: &str) -> Option<f64> {
        self.branches.get(branch).map(|b| b.mean.dsc)
    }
}

#[cfg(test)]
mod tests;
