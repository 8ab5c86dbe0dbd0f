//! Summary statistics: quantiles, win rates, the exact one-sided binomial
//! test and Spearman rank correlation.

use serde::Serialize;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub n: usize,
    pub median: f64,
    pub iqr_low: f64,
    pub iqr_high: f64,
    pub win_rate: Option<f64>,
    pub binomial_p: Option<f64>,
    pub spearman_r: Option<f64>,
    pub spearman_p: Option<f64>,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile (Hyndman–Fan type 7). NaNs are dropped.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    let v = sorted(values);
    if v.is_empty() {
        return None;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(wins: usize, n: usize) -> f64 {
    if n == 0 || wins == 0 {
        return 1.0;
    }
    if wins > n {
        return 0.0;
    }
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    b.sf(wins as u64 - 1)
}

/// Fraction of pairs where the first entry strictly exceeds the second, and
/// the one-sided binomial p-value of that many wins.
pub fn win_rate(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pairs.is_empty() {
        return None;
    }
    let wins = pairs.iter().filter(|(a, b)| a > b).count();
    Some((wins as f64 / pairs.len() as f64, binomial_upper_tail(wins, pairs.len())))
}

/// Average ranks starting at 1; ties share their midrank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ with a two-sided p-value from the t approximation
/// `t = r √((n−2)/(1−r²))` on `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let r = pearson(&midranks(x), &midranks(y))?;
    let df = (x.len() - 2) as f64;
    let p = if r.abs() >= 1.0 {
        f64::MIN_POSITIVE
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        (2.0 * dist.sf(t.abs())).clamp(f64::MIN_POSITIVE, 1.0)
    };
    Some((r, p))
}

pub fn summarize(values: &[f64], pairs: &[(f64, f64)], correlate_with: Option<&[f64]>) -> StatsSummary {
    let wr = win_rate(pairs);
    let sp = correlate_with.and_then(|x| spearman(x, values));
    StatsSummary {
        n: values.len(),
        median: median(values).unwrap_or(f64::NAN),
        iqr_low: quantile(values, 0.25).unwrap_or(f64::NAN),
        iqr_high: quantile(values, 0.75).unwrap_or(f64::NAN),
        win_rate: wr.map(|w| w.0),
        binomial_p: wr.map(|w| w.1),
        spearman_r: sp.map(|s| s.0),
        spearman_p: sp.map(|s| s.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_wins_ten() {
        let pairs = vec![(2.0, 1.0); 10];
        let (w, p) = win_rate(&pairs).unwrap();
        assert_eq!(w, 1.0);
        assert!((p - 2f64.powi(-10)).abs() < 1e-15);
    }

    #[test]
    fn binomial_tail_by_direct_sum() {
        let n = 17u64;
        for k in 0..=17usize {
            let mut direct = 0.0;
            for j in k as u64..=n {
                let mut c = 1.0;
                for i in 0..j {
                    c *= (n - i) as f64 / (i + 1) as f64;
                }
                direct += c;
            }
            direct /= 2f64.powi(17);
            assert!((binomial_upper_tail(k, 17) - direct.min(1.0)).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn monotone_pairs_give_unit_spearman() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [10.0, 20.0, 25.0, 100.0, 101.0];
        assert_eq!(spearman(&x, &y).unwrap().0, 1.0);
    }

    #[test]
    fn five_point_hand_computed() {
        // sorted: 1 2 3 7 9; type-7 quartiles at positions 1 and 3
        let v = [7.0, 1.0, 3.0, 9.0, 2.0];
        assert_eq!(median(&v), Some(3.0));
        assert_eq!(quantile(&v, 0.25), Some(2.0));
        assert_eq!(quantile(&v, 0.75), Some(7.0));
        // ranks x = 1..5, ranks y = (4,1,3,5,2): Σd² = 9+1+0+1+9 = 20, r = 1 − 6·20/120 = 0
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(spearman(&x, &v).unwrap().0.abs() < 1e-15);
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        // Σd² = 0+1+1+1+1 = 4 → r = 1 − 24/120 = 0.8
        assert!((spearman(&x, &y).unwrap().0 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ties_are_midranked() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn interpolated_quantile() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&v, 0.25).unwrap() - 1.75).abs() < 1e-15);
        assert!((median(&v).unwrap() - 2.5).abs() < 1e-15);
    }
}
