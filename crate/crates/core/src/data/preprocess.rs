//! Intensity normalization and resampling. All maps are pinned here:
//! percentile windowing over the whole volume, the fixed [-1000, 1000]
//! linear CT window, align-corners bilinear for images, align-corners
//! nearest (round half up) for label maps.

use crate::error::{Error, Result};

/// q-th percentile (0..=100) by linear interpolation between order
/// statistics: rank = q/100 * (n-1).
fn percentile(sorted: &[f32], q: f64) -> f32 {
    debug_assert!(!sorted.is_empty());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = (rank - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// The (2.5th, 97.5th) percentile window of a whole volume.
pub fn percentile_window(volume: &[f32]) -> Result<(f32, f32)> {
    if volume.is_empty() {
        return Err(Error::Data("empty volume".into()));
    }
    let mut sorted = volume.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN intensities"));
    Ok((percentile(&sorted, 2.5), percentile(&sorted, 97.5)))
}

/// Windowed min-max normalization into [0,1], tails clamped. A constant
/// volume (window collapses) maps to all 0.5; the returned flag tells the
/// caller to warn.
pub fn normalize_percentile(volume: &mut [f32]) -> Result<bool> {
    let (lo, hi) = percentile_window(volume)?;
    if hi <= lo {
        volume.iter_mut().for_each(|v| *v = 0.5);
        return Ok(true);
    }
    let inv = 1.0 / (hi - lo);
    for v in volume.iter_mut() {
        *v = ((*v - lo) * inv).clamp(0.0, 1.0);
    }
    Ok(false)
}

/// Fixed CT window: clamp to [-1000, 1000] then map linearly to [0,1].
pub fn normalize_hu(volume: &mut [f32]) {
    for v in volume.iter_mut() {
        *v = (v.clamp(-1000.0, 1000.0) + 1000.0) / 2000.0;
    }
}

/// Align-corners bilinear resample: src = dst * (len-1)/(len'-1), corner
/// pixels map exactly onto corners, so same-size resampling is the
/// identity. Returns the resampled grid row-major.
pub fn resample_bilinear(px: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f32>> {
    if px.len() != h * w {
        return Err(Error::shape(format!("{} pixels", h * w), format!("{}", px.len())));
    }
    if h < 2 || w < 2 || oh < 2 || ow < 2 {
        return Err(Error::InvalidArgument("resampling needs extents >= 2".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(px.to_vec());
    }
    let mut out = vec![0.0f32; oh * ow];
    let fi_scale = (h - 1) as f64 / (oh - 1) as f64;
    let fj_scale = (w - 1) as f64 / (ow - 1) as f64;
    for oi in 0..oh {
        let fi = oi as f64 * fi_scale;
        let i0 = fi.floor() as usize;
        let i1 = (i0 + 1).min(h - 1);
        let di = (fi - i0 as f64) as f32;
        for oj in 0..ow {
            let fj = oj as f64 * fj_scale;
            let j0 = fj.floor() as usize;
            let j1 = (j0 + 1).min(w - 1);
            let dj = (fj - j0 as f64) as f32;
            let top = px[i0 * w + j0] * (1.0 - dj) + px[i0 * w + j1] * dj;
            let bot = px[i1 * w + j0] * (1.0 - dj) + px[i1 * w + j1] * dj;
            out[oi * ow + oj] = top * (1.0 - di) + bot * di;
        }
    }
    Ok(out)
}

/// Nearest-neighbor resample under the same align-corners mapping, rounding
/// half up. Never invents class values.
pub fn resample_nearest(px: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<u8>> {
    if px.len() != h * w {
        return Err(Error::shape(format!("{} pixels", h * w), format!("{}", px.len())));
    }
    if h < 1 || w < 1 || oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument("empty resample target".into()));
    }
    if (oh, ow) == (h, w) {
        return Ok(px.to_vec());
    }
    let mut out = vec![0u8; oh * ow];
    for oi in 0..oh {
        let fi = if oh == 1 { 0.0 } else { oi as f64 * (h - 1) as f64 / (oh - 1) as f64 };
        let si = ((fi + 0.5).floor() as usize).min(h - 1);
        for oj in 0..ow {
            let fj = if ow == 1 { 0.0 } else { oj as f64 * (w - 1) as f64 / (ow - 1) as f64 };
            let sj = ((fj + 0.5).floor() as usize).min(w - 1);
            out[oi * ow + oj] = px[si * w + sj];
        }
    }
    Ok(out)
}

/// Physical spacing after resampling an axis: the align-corners mapping
/// preserves the span (len-1) * spacing.
pub fn rescale_spacing(spacing: f32, len: usize, new_len: usize) -> f32 {
    spacing * (len - 1) as f32 / (new_len - 1) as f32
}
