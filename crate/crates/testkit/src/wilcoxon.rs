//! Exact Wilcoxon signed-rank reference by full sign enumeration.
//!
//! Conventions pinned here:
//! * zero differences are dropped before ranking;
//! * |d| ties receive mid-ranks;
//! * the statistic is W = min(W+, W-);
//! * the exact two-sided p-value is the fraction of all 2^n sign
//!   assignments whose min(W+, W-) is <= the observed W.

/// Mid-ranks of |d| in ascending order of magnitude.
pub fn midranks(abs_d: &[f64]) -> Vec<f64> {
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
        // positions i..=j share the same magnitude; 1-based ranks
        let mid = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Full 2^n enumeration. Input are the paired samples; returns (W, p).
/// Panics when every difference is zero (the caller's contract).
pub fn exact(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0)
        .collect();
    assert!(!d.is_empty(), "all differences zero");
    let n = d.len();
    assert!(n <= 24, "enumeration oracle capped at 2^24 assignments");
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_obs = w_plus.min(total - w_plus);
    let mut count: u64 = 0;
    for signs in 0u64..(1u64 << n) {
        let mut wp = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if signs >> i & 1 == 1 {
                wp += r;
            }
        }
        let wm = total - wp;
        // ranks are multiples of 0.5, so exact comparison is safe with a
        // half-ulp guard against accumulated float error
        if wp.min(wm) <= w_obs + 1e-9 {
            count += 1;
        }
    }
    (w_obs, count as f64 / (1u64 << n) as f64)
}
