//! Small statistical helpers for distribution-shape assertions in tests.

/// Two-sample Kolmogorov-Smirnov statistic: max |ECDF_a - ECDF_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let ecdf = |s: &[f64], v: f64| -> f64 {
        let idx = s.partition_point(|&x| x <= v);
        idx as f64 / s.len() as f64
    };
    let mut d: f64 = 0.0;
    for &v in sa.iter().chain(sb.iter()) {
        d = d.max((ecdf(&sa, v) - ecdf(&sb, v)).abs());
    }
    d
}

/// Pearson chi-square statistic for independence on an r x c contingency
/// table of observed counts.
pub fn chi_square_independence(table: &[Vec<u64>]) -> f64 {
    let r = table.len();
    let c = table[0].len();
    let row: Vec<f64> = table.iter().map(|t| t.iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..c)
        .map(|j| table.iter().map(|t| t[j]).sum::<u64>() as f64)
        .collect();
    let total: f64 = row.iter().sum();
    let mut stat = 0.0;
    for i in 0..r {
        for j in 0..c {
            let expected = row[i] * col[j] / total;
            if expected > 0.0 {
                let diff = table[i][j] as f64 - expected;
                stat += diff * diff / expected;
            }
        }
    }
    stat
}

/// Population standard deviation (divide by n).
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Percentile by sorting and linearly interpolating at rank q/100*(n-1),
/// entirely in f64.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty() && (0.0..=100.0).contains(&q));
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    s[lo] * (1.0 - frac) + s[hi] * frac
}

/// Median with mean-of-middle-two for even n.
pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
