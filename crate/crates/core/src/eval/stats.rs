//! Paired Wilcoxon signed-rank test and Bonferroni flags.

use crate::error::{Error, Result};

/// Largest sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 25;

/// Relative tolerance under which two absolute differences count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, which must be sorted ascending.
/// Returns the ranks and the sizes of the tie groups.
pub fn midranks_sorted(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut ranks = vec![0.0; values.len()];
    let mut groups = Vec::new();
    let mut i = 0;
    while i < values.len() {
        let mut j = i + 1;
        while j < values.len() && values[j] - values[i] <= TIE_TOLERANCE * values[i].abs().max(f64::MIN_POSITIVE) {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        ranks[i..j].fill(rank);
        groups.push(j - i);
        i = j;
    }
    (ranks, groups)
}

/// `(rank, positive)` per non-zero difference, plus the tie group sizes.
pub type SignedRanks = (Vec<(f64, bool)>, Vec<usize>);

/// Signed ranks of the non-zero differences `a - b`, as `(rank, positive)`.
pub fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("paired samples contain non-finite values".into()));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, groups) = midranks_sorted(&abs);
    Ok((ranks.into_iter().zip(diffs.iter().map(|&d| d > 0.0)).collect(), groups))
}

/// Two-tailed paired Wilcoxon signed-rank test of `a` against `b`.
///
/// Zero differences are dropped and tied magnitudes get midranks. Up to
/// [`EXACT_MAX_N`] pairs the p-value comes from the exact permutation
/// distribution of `W+`; above that a normal approximation with tie
/// correction is used. With no non-zero differences `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (signed, groups) = signed_ranks(a, b)?;
    let n = signed.len();
    let w_plus: f64 = signed.iter().filter(|(_, pos)| *pos).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    if n == 0 {
        return Ok(WilcoxonResult {
            n,
            w_plus,
            w_minus,
            p_value: 1.0,
            exact: true,
        });
    }
    let (p_value, exact) = if n <= EXACT_MAX_N {
        let doubled: Vec<usize> = signed.iter().map(|(r, _)| (2.0 * r).round() as usize).collect();
        (exact_two_tailed(&doubled, (2.0 * w_plus).round() as usize), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let ties: f64 = groups.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = (w_plus - mean) / var.sqrt();
            libm::erfc(z.abs() / std::f64::consts::SQRT_2)
        };
        (p.min(1.0), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value,
        exact,
    })
}

/// Exact two-tailed p for an observed doubled rank sum, by counting sign
/// assignments per achievable sum.
fn exact_two_tailed(doubled_ranks: &[usize], observed: usize) -> f64 {
    let max: usize = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(doubled_ranks.len() as i32);
    let lower: f64 = counts[..=observed].iter().sum();
    let upper: f64 = counts[observed..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

/// Bonferroni: `p_i` is significant iff `p_i < alpha / m`.
pub fn bonferroni_adjust(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if p_values.is_empty() {
        return Err(Error::Data("Bonferroni correction needs at least one p-value".into()));
    }
    let threshold = alpha / p_values.len() as f64;
    Ok(p_values.iter().map(|&p| p < threshold).collect())
}

/// Bonferroni-adjusted p-values `min(1, m p)`.
pub fn bonferroni_adjusted(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len() as f64;
    p_values.iter().map(|&p| (m * p).min(1.0)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force over all 2^n sign patterns of the observed ranks.
    pub(crate) fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
        let (signed, _) = signed_ranks(a, b).unwrap();
        let n = signed.len();
        if n == 0 {
            return 1.0;
        }
        let observed: f64 = signed.iter().filter(|s| s.1).map(|s| s.0).sum();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| signed[i].0).sum();
            if w <= observed + 1e-9 {
                le += 1;
            }
            if w >= observed - 1e-9 {
                ge += 1;
            }
        }
        (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn identical_samples_give_one() {
        let a = [0.6, 0.7, 0.8];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap().p_value, 1.0);
    }

    #[test]
    fn five_positive_differences() {
        let a = [0.9, 0.8, 0.85, 0.7, 0.95];
        let b = [0.5, 0.6, 0.55, 0.52, 0.51];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_minus, 0.0);
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.p_value, 2.0 / 32.0);
    }

    #[test]
    fn midranks_for_ties() {
        let (r, g) = midranks_sorted(&[0.1, 0.2, 0.2, 0.2, 0.5]);
        assert_eq!(r, vec![1.0, 3.0, 3.0, 3.0, 5.0]);
        assert_eq!(g, vec![1, 3, 1]);
    }

    #[test]
    fn large_sample_uses_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| 0.5 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| 0.5 + 0.01 * i as f64 - if i % 4 == 0 { -0.03 } else { 0.02 }).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
        // Same sign pattern at n = 25 is exact; both methods agree to a few percent.
        let e = wilcoxon_signed_rank(&a[..25], &b[..25]).unwrap();
        assert!(e.exact);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni_adjust(&[0.04], 0.05).unwrap(), vec![true]);
        assert!(!bonferroni_adjust(&[0.04, 0.5, 0.5, 0.5], 0.05).unwrap()[0]);
        assert!(bonferroni_adjust(&[0.01, 0.5, 0.5, 0.5], 0.05).unwrap()[0]);
        assert!(bonferroni_adjust(&[], 0.05).is_err());
        assert_eq!(bonferroni_adjusted(&[0.01, 0.3]), vec![0.02, 0.6]);
    }

    proptest! {
        #[test]
        fn exact_path_matches_enumeration(pairs in proptest::collection::vec((0u8..20, 0u8..20), 1..11)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.05).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.05).collect();
            let fast = wilcoxon_signed_rank(&a, &b).unwrap().p_value;
            prop_assert!((fast - enumerate_p(&a, &b)).abs() <= 1e-12);
        }

        #[test]
        fn swapping_samples_keeps_p(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let x = wilcoxon_signed_rank(&a, &b).unwrap();
            let y = wilcoxon_signed_rank(&b, &a).unwrap();
            prop_assert!((x.p_value - y.p_value).abs() <= 1e-12);
            prop_assert!(x.p_value > 0.0 && x.p_value <= 1.0);
            prop_assert!((x.w_plus - y.w_minus).abs() <= 1e-9);
        }
    }
}
