//! Segmentation quality metrics: Dice overlap, symmetric average surface
//! distance in millimetres, the Wilcoxon signed-rank test, and summary
//! statistics for result tables.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, Normal};
use std::path::Path;

/// One evaluated subject under one training variant.
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub variant: String,
    pub epoch: usize,
    pub class_id: u8,
    pub dsc: f64,
    /// None when either surface was empty (undefined distance).
    pub asd_mm: Option<f64>,
}

fn check_shapes(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (pred.h, pred.w) != (truth.h, truth.w) {
        return Err(Error::shape(
            format!("{}x{}", truth.h, truth.w),
            format!("{}x{}", pred.h, pred.w),
        ));
    }
    Ok(())
}

/// Dice coefficient of `class_id` over a stack of slice pairs pooled into
/// one 3-D mask pair. Both masks empty counts as perfect agreement (1.0).
pub fn dice_stack(pairs: &[(&LabelMap, &LabelMap)], class_id: u8) -> Result<f64> {
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (pred, truth) in pairs {
        check_shapes(pred, truth)?;
        for (p, t) in pred.classes.iter().zip(&truth.classes) {
            let fp = *p == class_id;
            let ft = *t == class_id;
            a += fp as u64;
            b += ft as u64;
            inter += (fp && ft) as u64;
        }
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn dice(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    dice_stack(&[(pred, truth)], class_id)
}

/// Boundary pixels of `class_id`: foreground with a background 4-neighbor,
/// where everything beyond the image border counts as background.
fn boundary_points(map: &LabelMap, class_id: u8) -> Vec<(usize, usize)> {
    let (h, w) = (map.h, map.w);
    let fg = |i: usize, j: usize| map.classes[i * w + j] == class_id;
    let mut pts = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !fg(i, j) {
                continue;
            }
            if i == 0
                || j == 0
                || i + 1 == h
                || j + 1 == w
                || !fg(i - 1, j)
                || !fg(i + 1, j)
                || !fg(i, j - 1)
                || !fg(i, j + 1)
            {
                pts.push((i, j));
            }
        }
    }
    pts
}

fn nearest_mm(p: (usize, usize), to: &[(usize, usize)], spacing: (f32, f32)) -> f64 {
    let mut best = f64::INFINITY;
    for &(ti, tj) in to {
        let dr = (p.0 as f64 - ti as f64) * spacing.0 as f64;
        let dc = (p.1 as f64 - tj as f64) * spacing.1 as f64;
        let d2 = dr * dr + dc * dc;
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// Symmetric average surface distance over a stack of slice pairs.
/// Surfaces are 2-D and distances stay in-plane; directed distances from
/// every slice are pooled into one average. Each slice uses the truth
/// slice's pixel spacing. A slice where either mask lacks a boundary
/// contributes nothing; if that holds everywhere the distance is undefined
/// and `None` is returned.
pub fn asd_stack(pairs: &[(&LabelMap, &LabelMap)], class_id: u8) -> Result<Option<f64>> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (pred, truth) in pairs {
        check_shapes(pred, truth)?;
        let bp = boundary_points(pred, class_id);
        let bt = boundary_points(truth, class_id);
        if bp.is_empty() || bt.is_empty() {
            continue;
        }
        let spacing = truth.spacing_mm;
        for &p in &bp {
            sum += nearest_mm(p, &bt, spacing);
        }
        for &t in &bt {
            sum += nearest_mm(t, &bp, spacing);
        }
        count += bp.len() + bt.len();
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

pub fn asd(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    asd_stack(&[(pred, truth)], class_id)
}

/// Wilcoxon signed-rank result. `n_used` counts pairs surviving
/// zero-difference removal; `exact` records which branch produced `p`.
#[derive(Clone, Copy, Debug)]
pub struct Wilcoxon {
    pub w: f64,
    pub p: f64,
    pub n_used: usize,
    pub exact: bool,
}

/// Mid-ranks of already-positive magnitudes, 1-based, ties averaged.
fn midranks(abs_d: &[f64]) -> Vec<f64> {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p for `min(W+, W-) <= w_obs` by counting sign subsets.
/// Mid-ranks are multiples of 1/2, so doubling every rank makes all sums
/// integers and the subset-sum distribution fits a dense count table.
fn exact_p(ranks: &[f64], w_obs: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (w_obs * 2.0).round() as usize;
    let mut hits = 0u64;
    for (s, &c) in counts.iter().enumerate() {
        if s.min(total - s) <= w2 {
            hits += c;
        }
    }
    hits as f64 / (1u64 << ranks.len()) as f64
}

/// Normal approximation with tie correction and 0.5 continuity correction.
fn normal_p(ranks: &[f64], w_obs: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: subtract sum(t^3 - t)/48 over groups of equal ranks
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_obs - mean + 0.5) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).unwrap().cdf(z);
    (2.0 * phi).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test. Zero differences are
/// dropped; all-zero input is no evidence and yields p = 1.0 with a
/// warning on stderr. Exact distribution up to n = 20, normal
/// approximation beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    wilcoxon_signed_rank_with(a, b, 20)
}

/// Same test with a configurable exact/approximate crossover: the exact
/// distribution is used while n <= max_exact_n. Setting 0 forces the
/// normal approximation at any n (useful for cross-validating branches).
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], max_exact_n: usize) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} pairs", a.len()), format!("{}", b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("wilcoxon needs at least one pair".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        eprintln!("warning: wilcoxon: all paired differences are zero; p = 1.0");
        return Ok(Wilcoxon { w: 0.0, p: 1.0, n_used: 0, exact: true });
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 =
        d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let n = d.len();
    let (p, exact) = if n <= max_exact_n {
        (exact_p(&ranks, w), true)
    } else {
        (normal_p(&ranks, w), false)
    };
    Ok(Wilcoxon { w, p, n_used: n, exact })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    /// Population standard deviation (divide by n).
    pub std: f64,
}

pub fn summarize(xs: &[f64]) -> Result<Summary> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("summarize needs at least one value".into()));
    }
    let n = xs.len();
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Ok(Summary { n, median, mean, std: var.sqrt() })
}

/// Report marker at the p < 0.05 threshold.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.05 {
        "*"
    } else {
        "N.S."
    }
}

/// Per-subject results table; missing surface distances print as NA.
pub fn write_results_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("subject_id,variant,epoch,class,dsc,asd_mm\n");
    for r in records {
        let asd = r.asd_mm.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            r.subject_id, r.variant, r.epoch, r.class_id, r.dsc, asd
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
