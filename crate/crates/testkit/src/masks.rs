//! Brute-force overlap and surface-distance references for binary masks.
//!
//! Conventions pinned here:
//! * Dice of two empty masks is 1.0; one empty and one not gives 0.0.
//! * A boundary pixel is a foreground pixel with at least one 4-neighbor
//!   that is background; pixels on the image border count their missing
//!   neighbors as background (so any foreground touching the border is
//!   boundary).
//! * Distances are Euclidean in millimetres using per-axis pixel spacing.
//! * The symmetric average surface distance is the mean over the union of
//!   both directed distance multisets (A-to-B and B-to-A concatenated).
//! * Multi-slice subjects pool directed distances across slices; surfaces
//!   are 2-D, so distances never cross slice boundaries, and a slice where
//!   only one mask has a boundary contributes nothing.

use std::collections::HashSet;

/// Dice via explicit set arithmetic over foreground coordinates.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    2.0 * inter as f64 / (sa.len() + sb.len()) as f64
}

/// Boundary pixel coordinates of one slice, border-as-background rule.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    assert_eq!(mask.len(), h * w);
    let mut pts = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let bg = (i == 0 || !mask[(i - 1) * w + j])
                || (i + 1 == h || !mask[(i + 1) * w + j])
                || (j == 0 || !mask[i * w + j - 1])
                || (j + 1 == w || !mask[i * w + j + 1]);
            if bg {
                pts.push((i, j));
            }
        }
    }
    pts
}

/// All-pairs directed nearest distances from each point of `from` to `to`.
pub fn directed(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    from.iter()
        .map(|&(ai, aj)| {
            to.iter()
                .map(|&(bi, bj)| {
                    let dr = (ai as f64 - bi as f64) * spacing.0;
                    let dc = (aj as f64 - bj as f64) * spacing.1;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Symmetric average surface distance over one or more slice pairs.
/// Returns None when no slice has a boundary on both sides.
pub fn asd(slices: &[(&[bool], &[bool])], h: usize, w: usize, spacing: (f64, f64)) -> Option<f64> {
    let mut dists = Vec::new();
    for &(a, b) in slices {
        let pa = boundary(a, h, w);
        let pb = boundary(b, h, w);
        if pa.is_empty() || pb.is_empty() {
            continue;
        }
        dists.extend(directed(&pa, &pb, spacing));
        dists.extend(directed(&pb, &pa, spacing));
    }
    if dists.is_empty() {
        None
    } else {
        Some(dists.iter().sum::<f64>() / dists.len() as f64)
    }
}
