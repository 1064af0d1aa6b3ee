//! Dice similarity and 95th-percentile Hausdorff distance on label masks.

use crate::error::{Error, Result};

/// A `height × width` map of class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    /// Error unless every label is below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::invalid(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    /// Foreground mask of one class.
    pub fn binary(&self, class_id: usize) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l as usize == class_id).collect(),
        }
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::invalid(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Foreground/background mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("binary mask length does not match its size"));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Dice similarity (%) of one class; 100 when the class is absent from both.
pub fn dsc(gt: &LabelMask, pred: &LabelMask, class_id: usize) -> Result<f64> {
    gt.same_dims(pred)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        let (g, p) = (g as usize == class_id, p as usize == class_id);
        a += g as usize;
        b += p as usize;
        both += (g && p) as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * both as f64 / (a + b) as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground (the image
/// border counts as outside), as `(row, col)` in row-major order.
pub fn boundary_points(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_edt(width: usize, height: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut g = vec![FAR; width * height];
    for &(r, c) in sites {
        g[r * width + c] = 0.0;
    }
    let n = width.max(height);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0; n], vec![0.0; n + 1]);
    for c in 0..width {
        for r in 0..height {
            f[r] = g[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            g[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        let row = &mut g[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    g
}

/// Nearest-rank 95th percentile: the `⌈0.95·m⌉`-th smallest value.
pub fn percentile95(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = (95 * values.len()).div_ceil(100);
    Some(values[rank - 1])
}

fn directed95(from: &[(usize, usize)], to_dist: &[f64], width: usize) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&(r, c)| to_dist[r * width + c].sqrt()).collect();
    percentile95(&mut d).expect("non-empty boundary")
}

/// Symmetric 95th-percentile boundary distance (pixels) of one class.
/// `Some(0)` when the class is absent from both masks, `None` when it is
/// present in exactly one.
pub fn hd95(gt: &LabelMask, pred: &LabelMask, class_id: usize) -> Result<Option<f64>> {
    gt.same_dims(pred)?;
    let (w, h) = (gt.width, gt.height);
    let bg = boundary_points(&gt.binary(class_id));
    let bp = boundary_points(&pred.binary(class_id));
    match (bg.is_empty(), bp.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let dg = squared_edt(w, h, &bg);
    let dp = squared_edt(w, h, &bp);
    Ok(Some(directed95(&bg, &dp, w).max(directed95(&bp, &dg, w))))
}

/// Per-class and mean scores over the foreground classes `1..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// DSC (%) of classes `1..C`.
    pub per_class_dsc: Vec<f64>,
    /// HD95 (pixels) of classes `1..C`; `None` where undefined.
    pub per_class_hd95: Vec<Option<f64>>,
    pub mean_dsc: f64,
    /// Mean over defined entries; `None` when none is defined.
    pub mean_hd95: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    fn from_parts(per_class_dsc: Vec<f64>, per_class_hd95: Vec<Option<f64>>) -> Self {
        let mean_dsc = per_class_dsc.iter().sum::<f64>() / per_class_dsc.len().max(1) as f64;
        let mean_hd95 = mean_defined(per_class_hd95.iter().copied());
        Self {
            per_class_dsc,
            per_class_hd95,
            mean_dsc,
            mean_hd95,
        }
    }

    /// Average several case reports class by class (undefined HD95 entries
    /// are skipped).
    pub fn mean_of(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::invalid("no reports to average"))?;
        let k = first.per_class_dsc.len();
        if reports.iter().any(|r| r.per_class_dsc.len() != k) {
            return Err(Error::invalid("reports cover different class counts"));
        }
        let dsc = (0..k)
            .map(|c| reports.iter().map(|r| r.per_class_dsc[c]).sum::<f64>() / reports.len() as f64)
            .collect();
        let hd = (0..k)
            .map(|c| mean_defined(reports.iter().map(|r| r.per_class_hd95[c])))
            .collect();
        Ok(Self::from_parts(dsc, hd))
    }
}

/// Metrics of one case for every foreground class. A class absent from
/// both masks scores DSC 100 and contributes no HD95.
pub fn evaluate_case(gt: &LabelMask, pred: &LabelMask, num_classes: usize) -> Result<MetricsReport> {
    gt.same_dims(pred)?;
    if num_classes < 2 {
        return Err(Error::invalid("need at least one foreground class"));
    }
    let mut d = Vec::with_capacity(num_classes - 1);
    let mut h = Vec::with_capacity(num_classes - 1);
    for c in 1..num_classes {
        d.push(dsc(gt, pred, c)?);
        // a class absent from both masks has no contour to score
        let absent = !gt.labels.iter().chain(&pred.labels).any(|&l| l as usize == c);
        h.push(if absent { None } else { hd95(gt, pred, c)? });
    }
    Ok(MetricsReport::from_parts(d, h))
}

/// Areas of the 4-connected foreground components, in scan order of their
/// first pixel.
pub fn component_areas(mask: &BinaryMask) -> Vec<usize> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        areas.push(area);
    }
    areas
}
