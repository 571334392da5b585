//! CART split search on pseudo-outcomes.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::data::Dataset;
use crate::moments::PseudoOutcomes;

use super::SplitOptions;

/// Relative margin a candidate needs to displace the incumbent best split.
/// Keeps ties among numerically identical partitions resolved by the
/// (feature, threshold) order instead of summation rounding.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// `Δ̃(C₁, C₂)` of the chosen partition.
    pub criterion: f64,
}

/// Draw `min(max(Poisson(m), 1), p)` distinct feature indices, sorted.
pub fn select_split_variables<R: Rng + ?Sized>(p: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    assert!(p >= 1 && rate > 0.0, "need p >= 1 and a positive rate");
    let draw = Poisson::new(rate)
        .expect("positive Poisson rate")
        .sample(rng);
    let k = (draw as usize).max(1).min(p);
    let mut picked = rand::seq::index::sample(rng, p, k).into_vec();
    picked.sort_unstable();
    picked
}

/// `a` strictly beats `b` by more than the tie margin.
#[inline]
pub(crate) fn improves(a: f64, b: f64) -> bool {
    a > b + TIE_TOLERANCE * b.abs()
}

/// Midpoint between consecutive distinct values that still separates them.
#[inline]
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi || mid < lo {
        lo
    } else {
        mid
    }
}

/// Smallest admissible child size for a parent with `parent_size` members.
pub fn min_child_size(parent_size: usize, opts: &SplitOptions) -> usize {
    let balanced = (opts.balance_fraction * parent_size as f64).ceil() as usize;
    opts.min_node_size.max(balanced)
}

enum Labels<'a> {
    Values(&'a [f64]),
    Classes(&'a [u32], usize),
}

/// Maximize `Δ̃ = Σ_j (Σ_{C_j} ρ)² / |C_j|` over midpoint thresholds of the
/// candidate `features`, one prefix-sum pass per feature.
///
/// Class labels are scored one-hot: the criterion is summed over the class
/// indicator vectors. Returns `None` when no admissible split strictly
/// improves on leaving the node whole.
pub fn find_best_split(
    rho: &PseudoOutcomes,
    data: &Dataset,
    features: &[usize],
    members: &[usize],
    opts: &SplitOptions,
) -> Option<Split> {
    let n = members.len();
    assert_eq!(rho.len(), n, "one pseudo-outcome per member");
    let min_child = min_child_size(n, opts);
    if n < 2 * min_child {
        return None;
    }
    let labels = match rho {
        PseudoOutcomes::Values(v) => {
            if v.iter().all(|r| *r == v[0]) {
                return None;
            }
            Labels::Values(v)
        }
        PseudoOutcomes::Classes {
            labels,
            num_classes,
        } => {
            if labels.iter().all(|c| *c == labels[0]) {
                return None;
            }
            Labels::Classes(labels, *num_classes)
        }
    };

    let mut best: Option<Split> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut class_left = Vec::new();
    let mut class_total = Vec::new();
    let baseline;
    match labels {
        Labels::Values(v) => {
            let total: f64 = v.iter().sum();
            baseline = total * total / n as f64;
        }
        Labels::Classes(l, k) => {
            class_total = vec![0.0f64; k];
            for &c in l {
                class_total[c as usize] += 1.0;
            }
            baseline = class_total.iter().map(|t| t * t).sum::<f64>() / n as f64;
            class_left = vec![0.0f64; k];
        }
    }

    for &feature in features {
        let column = data.column(feature);
        order.sort_by(|&a, &b| column[members[a]].total_cmp(&column[members[b]]));
        let x = |pos: usize| column[members[order[pos]]];

        match labels {
            Labels::Values(v) => {
                let total: f64 = v.iter().sum();
                let mut left_sum = 0.0;
                for pos in 0..n - 1 {
                    left_sum += v[order[pos]];
                    let n_left = pos + 1;
                    let n_right = n - n_left;
                    if n_left < min_child {
                        continue;
                    }
                    if n_right < min_child {
                        break;
                    }
                    let (lo, hi) = (x(pos), x(pos + 1));
                    if lo >= hi {
                        continue;
                    }
                    let right_sum = total - left_sum;
                    let crit = left_sum * left_sum / n_left as f64
                        + right_sum * right_sum / n_right as f64;
                    if best.is_none_or(|b| improves(crit, b.criterion)) {
                        best = Some(Split {
                            feature,
                            threshold: midpoint(lo, hi),
                            criterion: crit,
                        });
                    }
                }
            }
            Labels::Classes(l, _) => {
                class_left.iter_mut().for_each(|c| *c = 0.0);
                for pos in 0..n - 1 {
                    class_left[l[order[pos]] as usize] += 1.0;
                    let n_left = pos + 1;
                    let n_right = n - n_left;
                    if n_left < min_child {
                        continue;
                    }
                    if n_right < min_child {
                        break;
                    }
                    let (lo, hi) = (x(pos), x(pos + 1));
                    if lo >= hi {
                        continue;
                    }
                    let (sq_left, sq_right) = class_left
                        .iter()
                        .zip(&class_total)
                        .fold((0.0, 0.0), |(sl, sr), (cl, ct)| {
                            (sl + cl * cl, sr + (ct - cl) * (ct - cl))
                        });
                    let crit = sq_left / n_left as f64 + sq_right / n_right as f64;
                    if best.is_none_or(|b| improves(crit, b.criterion)) {
                        best = Some(Split {
                            feature,
                            threshold: midpoint(lo, hi),
                            criterion: crit,
                        });
                    }
                }
            }
        }
    }

    best.filter(|b| improves(b.criterion, baseline))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(min_node_size: usize, balance_fraction: f64) -> SplitOptions {
        SplitOptions {
            min_node_size,
            balance_fraction,
            mtry_rate: None,
        }
    }

    fn line(x: &[f64]) -> Dataset {
        Dataset::from_columns(vec![x.to_vec()]).unwrap()
    }

    #[test]
    fn picks_the_jump() {
        let d = line(&[1.0, 2.0, 3.0, 4.0]);
        let rho = PseudoOutcomes::Values(vec![0.0, 0.0, 10.0, 10.0]);
        let s = find_best_split(&rho, &d, &[0], &[0, 1, 2, 3], &opts(1, 1e-9)).unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 2.5);
        assert_eq!(s.criterion, 200.0);
    }

    #[test]
    fn constant_pseudo_outcomes_do_not_split() {
        let d = line(&[1.0, 2.0, 3.0, 4.0]);
        let rho = PseudoOutcomes::Values(vec![3.0; 4]);
        assert!(find_best_split(&rho, &d, &[0], &[0, 1, 2, 3], &opts(1, 0.0)).is_none());
    }

    #[test]
    fn tied_feature_values_have_no_threshold() {
        let d = line(&[5.0, 5.0]);
        let rho = PseudoOutcomes::Values(vec![-1.0, 1.0]);
        assert!(find_best_split(&rho, &d, &[0], &[0, 1], &opts(1, 0.0)).is_none());
    }

    #[test]
    fn balance_constraint_excludes_lopsided_splits() {
        let d = line(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let mut v = vec![0.0; 10];
        v[9] = 100.0;
        let rho = PseudoOutcomes::Values(v);
        let members: Vec<usize> = (0..10).collect();
        let s = find_best_split(&rho, &d, &[0], &members, &opts(1, 0.3)).unwrap();
        // Children need at least ceil(0.3 * 10) = 3 members.
        assert_eq!(s.threshold, 7.5);
    }

    #[test]
    fn ties_go_to_lowest_feature_then_threshold() {
        let d = Dataset::from_columns(vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]])
            .unwrap();
        let rho = PseudoOutcomes::Values(vec![1.0, -1.0, 1.0, -1.0]);
        let s = find_best_split(&rho, &d, &[0, 1], &[0, 1, 2, 3], &opts(1, 0.0)).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 1.5));
    }

    #[test]
    fn multiclass_criterion_separates_classes() {
        let d = line(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rho = PseudoOutcomes::Classes {
            labels: vec![0, 0, 2, 2, 1, 1],
            num_classes: 3,
        };
        let s = find_best_split(&rho, &d, &[0], &[0, 1, 2, 3, 4, 5], &opts(1, 0.0)).unwrap();
        // {0,0} | {2,2,1,1}: 4/2 + (4+4)/4 = 4; {0,0,2,2} | {1,1}: (4+4)/4 + 4/2 = 4. First wins.
        assert_eq!(s.threshold, 2.5);
        assert_eq!(s.criterion, 4.0);
    }

    #[test]
    fn subset_of_members_uses_member_values() {
        let d = line(&[9.0, 1.0, 2.0, 3.0, 4.0, 9.0]);
        let rho = PseudoOutcomes::Values(vec![0.0, 0.0, 10.0, 10.0]);
        let s = find_best_split(&rho, &d, &[0], &[1, 2, 3, 4], &opts(1, 0.0)).unwrap();
        assert_eq!(s.threshold, 2.5);
    }

    #[test]
    fn split_variable_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(select_split_variables(1, 0.5, &mut rng), vec![0]);
        assert_eq!(
            select_split_variables(10, 1e9, &mut rng),
            (0..10).collect::<Vec<_>>()
        );
        for _ in 0..100 {
            let s = select_split_variables(20, 3.0, &mut rng);
            assert!(!s.is_empty() && s.len() <= 20);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn midpoint_separates_adjacent_floats() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let m = midpoint(lo, hi);
        assert!(lo <= m && m < hi);
    }
}
