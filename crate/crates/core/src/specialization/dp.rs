use crate::error::{Error, Result};

/// Cost sentinel for infeasible table entries. All cost arithmetic
/// saturates, so sums involving the sentinel stay at the sentinel.
pub const INFEASIBLE: u128 = u128::MAX;

/// Occupancy histogram: `count(i)` is the number of nodes with exactly `i`
/// occupied slots, for `i` in `1..=n`. Zero-occupancy nodes are not part of
/// the domain; the trie deletes empty nodes instead of storing them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(counts: Vec<u64>) -> Result<Histogram> {
        if counts.is_empty() {
            return Err(Error::invalid("histogram must cover at least one type"));
        }
        Ok(Histogram { counts })
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    /// Count of nodes with exactly `occupancy` slots used (1-based).
    pub fn count(&self, occupancy: usize) -> u64 {
        self.counts[occupancy - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Per-capacity byte cost: `byte_cost(i)` is the record size of the variant
/// holding up to `i` slots, for `i` in `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpaceFunction {
    costs: Vec<u64>,
}

impl SpaceFunction {
    pub fn new(costs: Vec<u64>) -> Result<SpaceFunction> {
        if costs.is_empty() {
            return Err(Error::invalid("space function must cover at least one type"));
        }
        if costs.contains(&0) {
            return Err(Error::invalid("space costs must be positive"));
        }
        Ok(SpaceFunction { costs })
    }

    /// The linear form `s(i) = overhead + i * per_slot`.
    pub fn linear(n: usize, overhead: u64, per_slot: u64) -> Result<SpaceFunction> {
        SpaceFunction::new((1..=n as u64).map(|i| overhead + i * per_slot).collect())
    }

    pub fn n(&self) -> usize {
        self.costs.len()
    }

    /// Byte cost of capacity `i` (1-based).
    pub fn byte_cost(&self, i: usize) -> u64 {
        self.costs[i - 1]
    }

    pub fn is_monotone(&self) -> bool {
        self.costs.windows(2).all(|w| w[0] <= w[1])
    }
}

/// The solved specialization: split points, the per-type mapping, and the
/// remapped mapping after envelope post-processing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecializationPlan {
    pub n: usize,
    pub k: usize,
    /// Split points `x_1 < ... < x_{k-1}`; `n` is always implicitly included.
    pub splits: Vec<usize>,
    /// `mapping[i - 1]` is the specialization chosen for occupancy `i` under
    /// the (monotone) space function the solver ran on.
    pub mapping: Vec<usize>,
    /// `remapped[i - 1]` is the actual capacity after re-interpreting the
    /// solution under the original space function. Equals `mapping` until
    /// [`remap`] is applied.
    pub remapped: Vec<usize>,
    /// Total bytes under the space function the solver ran on.
    pub total_cost: u128,
}

impl SpecializationPlan {
    /// The distinct capacities actually used, ascending.
    pub fn capacities(&self) -> Vec<usize> {
        let mut caps: Vec<usize> = self.remapped.clone();
        caps.sort_unstable();
        caps.dedup();
        caps
    }

    /// Checks the constraints of a valid specialization function directly on
    /// the mapping: coverage (`i <= mapping(i)`), domain, cardinality and
    /// surjectivity, and constancy on each interval.
    pub fn validate(&self) -> Result<()> {
        if self.mapping.len() != self.n {
            return Err(Error::invalid("mapping length differs from n"));
        }
        let mut image: Vec<usize> = self.mapping.clone();
        image.sort_unstable();
        image.dedup();
        if image.len() != self.k {
            return Err(Error::invalid(format!(
                "mapping image has {} values, expected k = {}",
                image.len(),
                self.k
            )));
        }
        for (idx, &m) in self.mapping.iter().enumerate() {
            let i = idx + 1;
            if m < i || m > self.n {
                return Err(Error::invalid(format!(
                    "coverage violated: type {i} mapped to {m}"
                )));
            }
            // Each type maps to the right endpoint of its interval.
            if !self.splits.contains(&m) && m != self.n {
                return Err(Error::invalid(format!(
                    "type {i} mapped to {m}, which is not a split point"
                )));
            }
        }
        Ok(())
    }
}

/// Prefix sums of the histogram: `F[0] = 0`, `F[i] = F[i-1] + f(i)`, so the
/// frequency mass of `[i, j]` is `F[j] - F[i-1]`.
pub fn cumulative(f: &Histogram) -> Vec<u64> {
    let mut prefix = Vec::with_capacity(f.n() + 1);
    prefix.push(0);
    let mut acc = 0u64;
    for &c in f.counts() {
        acc += c;
        prefix.push(acc);
    }
    prefix
}

/// Cost of assigning the types in `[i, j]` to the specialization `j`:
/// `s(j) * (F[j] - F[i-1])`. Indices are 1-based; `prefix` comes from
/// [`cumulative`].
pub fn interval_cost(i: usize, j: usize, s: &SpaceFunction, prefix: &[u64]) -> Result<u128> {
    if i == 0 || i > j || j > s.n() {
        return Err(Error::invalid(format!("invalid interval [{i}, {j}]")));
    }
    let mass = (prefix[j] - prefix[i - 1]) as u128;
    Ok(s.byte_cost(j) as u128 * mass)
}

/// Monotone envelope `s'(i) = min_{i <= l <= n} s(l)` (suffix minimum).
pub fn monotone_envelope(s: &SpaceFunction) -> SpaceFunction {
    let mut costs = s.costs.clone();
    for i in (0..costs.len().saturating_sub(1)).rev() {
        costs[i] = costs[i].min(costs[i + 1]);
    }
    SpaceFunction { costs }
}

/// Solves the k-specialization problem by dynamic programming.
///
/// `s` must be monotone (apply [`monotone_envelope`] first for layouts where
/// a larger variant can be cheaper). Ties in the recurrence are broken
/// toward the smallest split index, and the returned split points are
/// recovered from the witness matrix by backtracking.
pub fn solve(k: usize, s: &SpaceFunction, f: &Histogram) -> Result<SpecializationPlan> {
    let n = f.n();
    if s.n() != n {
        return Err(Error::invalid("space and frequency domains differ"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::Infeasible(format!(
            "cannot partition {n} types into {k} non-empty intervals"
        )));
    }
    if !s.is_monotone() {
        return Err(Error::invalid(
            "space function must be monotone; apply the envelope first",
        ));
    }

    let prefix = cumulative(f);
    let cost = |i: usize, j: usize| -> u128 {
        s.byte_cost(j) as u128 * (prefix[j] - prefix[i - 1]) as u128
    };

    // y[j][l]: minimal cost of an (l+1)-partition of [1, j+1].
    // w[j][l]: witness split index for the recursive case.
    let mut y = vec![vec![INFEASIBLE; k]; n];
    let mut w = vec![vec![0usize; k]; n];
    for j in 1..=n {
        y[j - 1][0] = cost(1, j);
    }
    for l in 2..=k {
        for j in 2..=n {
            let mut best = INFEASIBLE;
            let mut witness = 0;
            for i in 1..j {
                let candidate = y[i - 1][l - 2].saturating_add(cost(i + 1, j));
                if candidate < best {
                    best = candidate;
                    witness = i;
                }
            }
            y[j - 1][l - 1] = best;
            w[j - 1][l - 1] = witness;
        }
    }

    let total_cost = y[n - 1][k - 1];
    if total_cost == INFEASIBLE {
        return Err(Error::Infeasible(format!(
            "no {k}-partition of [1, {n}] exists"
        )));
    }

    // Backtrack: x_{k-1} = w[n][k], x_l = w[x_{l+1}][l+1].
    let mut splits = vec![0usize; k - 1];
    let mut boundary = n;
    for l in (1..k).rev() {
        let x = w[boundary - 1][l];
        splits[l - 1] = x;
        boundary = x;
    }

    let mapping = mapping_from_splits(n, &splits);
    Ok(SpecializationPlan {
        n,
        k,
        splits,
        remapped: mapping.clone(),
        mapping,
        total_cost,
    })
}

fn mapping_from_splits(n: usize, splits: &[usize]) -> Vec<usize> {
    let mut mapping = Vec::with_capacity(n);
    let mut cursor = 0;
    for i in 1..=n {
        while cursor < splits.len() && i > splits[cursor] {
            cursor += 1;
        }
        mapping.push(if cursor < splits.len() { splits[cursor] } else { n });
    }
    mapping
}

/// Re-interprets a plan solved under the monotone envelope in terms of the
/// original space function: each chosen specialization moves to the cheapest
/// capacity at or above it, `remapped(i) = argmin_{mapping(i) <= l <= n} s(l)`
/// (smallest index among minima). Coverage is preserved since the remap only
/// moves upward.
pub fn remap(plan: &SpecializationPlan, original: &SpaceFunction) -> Result<SpecializationPlan> {
    if original.n() != plan.n {
        return Err(Error::invalid("space function domain differs from plan"));
    }
    // argmin over the suffix, computed right to left.
    let n = plan.n;
    let mut arg = vec![0usize; n + 1];
    arg[n] = n;
    for i in (1..n).rev() {
        let right = arg[i + 1];
        arg[i] = if original.byte_cost(i) <= original.byte_cost(right) {
            i
        } else {
            right
        };
    }
    let mut out = plan.clone();
    out.remapped = plan.mapping.iter().map(|&m| arg[m]).collect();
    Ok(out)
}

/// Exhaustive oracle: enumerates all `C(n-1, k-1)` split sets and returns
/// the exact optimum. Only tractable for small n.
pub fn brute_force(k: usize, s: &SpaceFunction, f: &Histogram) -> Result<(u128, Vec<usize>)> {
    let n = f.n();
    if k == 0 || k > n {
        return Err(Error::invalid("k out of range for brute force"));
    }
    let prefix = cumulative(f);
    let mut best = INFEASIBLE;
    let mut best_splits = Vec::new();

    let mut splits: Vec<usize> = (1..k).collect();
    loop {
        let mut total = 0u128;
        let mut start = 1;
        for &x in &splits {
            total = total.saturating_add(interval_cost(start, x, s, &prefix)?);
            start = x + 1;
        }
        total = total.saturating_add(interval_cost(start, n, s, &prefix)?);
        if total < best {
            best = total;
            best_splits = splits.clone();
        }
        if !next_combination(&mut splits, n - 1) {
            break;
        }
    }
    Ok((best, best_splits))
}

/// Advances `combo` to the next k-combination of `1..=max`, returning false
/// after the last one. An empty combo (k = 1) has a single iteration.
fn next_combination(combo: &mut [usize], max: usize) -> bool {
    let k = combo.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < max - (k - 1 - i) {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Solves for every k in the range, returning `(k, cost, plan)` rows. Costs
/// are non-increasing in k for a monotone space function.
pub fn pareto_sweep(
    k_range: std::ops::RangeInclusive<usize>,
    s: &SpaceFunction,
    f: &Histogram,
) -> Result<Vec<(usize, u128, SpecializationPlan)>> {
    let mut rows = Vec::new();
    for k in k_range {
        let plan = solve(k, s, f)?;
        rows.push((k, plan.total_cost, plan));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_instance() -> (SpaceFunction, Histogram) {
        let s = SpaceFunction::new(vec![2, 3, 4, 5]).unwrap();
        let f = Histogram::new(vec![10, 1, 1, 10]).unwrap();
        (s, f)
    }

    #[test]
    fn cumulative_prefix_sums() {
        let (_, f) = small_instance();
        assert_eq!(cumulative(&f), vec![0, 10, 11, 12, 22]);
        let zero = Histogram::new(vec![0, 0, 0]).unwrap();
        assert_eq!(cumulative(&zero), vec![0, 0, 0, 0]);
        let single = Histogram::new(vec![7]).unwrap();
        assert_eq!(cumulative(&single), vec![0, 7]);
    }

    #[test]
    fn interval_cost_formula() {
        let (s, f) = small_instance();
        let prefix = cumulative(&f);
        assert_eq!(interval_cost(1, 1, &s, &prefix).unwrap(), 20);
        assert_eq!(interval_cost(2, 4, &s, &prefix).unwrap(), 5 * (22 - 10));
        let empty = Histogram::new(vec![10, 0, 0, 10]).unwrap();
        let prefix = cumulative(&empty);
        assert_eq!(interval_cost(2, 3, &s, &prefix).unwrap(), 0);
        assert!(interval_cost(3, 2, &s, &prefix).is_err());
    }

    #[test]
    fn envelope_examples() {
        let monotone = SpaceFunction::new(vec![1, 2, 3]).unwrap();
        assert_eq!(monotone_envelope(&monotone), monotone);

        let bumpy = SpaceFunction::new(vec![5, 9, 3, 4]).unwrap();
        assert_eq!(
            monotone_envelope(&bumpy),
            SpaceFunction::new(vec![3, 3, 3, 4]).unwrap()
        );
    }

    #[test]
    fn envelope_is_monotone_and_dominated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let costs: Vec<u64> = (0..n).map(|_| rng.gen_range(1..1000)).collect();
            let s = SpaceFunction::new(costs).unwrap();
            let env = monotone_envelope(&s);
            assert!(env.is_monotone());
            for i in 1..=s.n() {
                assert!(env.byte_cost(i) <= s.byte_cost(i));
            }
            assert_eq!(env.byte_cost(s.n()), s.byte_cost(s.n()));
        }
    }

    #[test]
    fn solve_small_instance() {
        let (s, f) = small_instance();
        // Brute force over x1 in {1,2,3}: costs 80, 88, 98.
        let plan = solve(2, &s, &f).unwrap();
        assert_eq!(plan.splits, vec![1]);
        assert_eq!(plan.total_cost, 80);
        assert_eq!(plan.mapping, vec![1, 4, 4, 4]);
        plan.validate().unwrap();

        let single = solve(1, &s, &f).unwrap();
        assert_eq!(single.total_cost, 5 * 22);
        assert_eq!(single.mapping, vec![4, 4, 4, 4]);
        assert!(single.splits.is_empty());

        let identity = solve(4, &s, &f).unwrap();
        assert_eq!(identity.total_cost, 2 * 10 + 3 + 4 + 5 * 10);
        assert_eq!(identity.mapping, vec![1, 2, 3, 4]);
    }

    #[test]
    fn solve_rejects_bad_k() {
        let (s, f) = small_instance();
        assert!(matches!(solve(0, &s, &f), Err(Error::InvalidArgument(_))));
        assert!(matches!(solve(5, &s, &f), Err(Error::Infeasible(_))));
    }

    #[test]
    fn solve_requires_monotone_space() {
        let s = SpaceFunction::new(vec![5, 9, 3, 4]).unwrap();
        let f = Histogram::new(vec![1, 1, 1, 1]).unwrap();
        assert!(solve(2, &s, &f).is_err());
        assert!(solve(2, &monotone_envelope(&s), &f).is_ok());
    }

    #[test]
    fn brute_force_trivial_cases() {
        let (s, f) = small_instance();
        let (cost, splits) = brute_force(2, &s, &f).unwrap();
        assert_eq!(cost, 80);
        assert_eq!(splits, vec![1]);

        let s1 = SpaceFunction::new(vec![3]).unwrap();
        let f1 = Histogram::new(vec![4]).unwrap();
        assert_eq!(brute_force(1, &s1, &f1).unwrap(), (12, vec![]));
    }

    #[test]
    fn solve_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..60 {
            let n = rng.gen_range(1..=12usize);
            let mut costs: Vec<u64> = (0..n).map(|_| rng.gen_range(1..100)).collect();
            costs.sort_unstable();
            let s = SpaceFunction::new(costs).unwrap();
            let f =
                Histogram::new((0..n).map(|_| rng.gen_range(0..50)).collect()).unwrap();
            for k in 1..=n {
                let plan = solve(k, &s, &f).unwrap();
                let (oracle_cost, _) = brute_force(k, &s, &f).unwrap();
                assert_eq!(plan.total_cost, oracle_cost, "n={n} k={k}");
                // The returned splits must achieve the optimal cost.
                let prefix = cumulative(&f);
                let mut achieved = 0u128;
                let mut start = 1;
                for &x in &plan.splits {
                    achieved += interval_cost(start, x, &s, &prefix).unwrap();
                    start = x + 1;
                }
                achieved += interval_cost(start, n, &s, &prefix).unwrap();
                assert_eq!(achieved, oracle_cost);
                plan.validate().unwrap();
            }
        }
    }

    #[test]
    fn remap_examples() {
        let bumpy = SpaceFunction::new(vec![5, 9, 3, 4]).unwrap();
        let env = monotone_envelope(&bumpy);
        let f = Histogram::new(vec![1, 1, 1, 1]).unwrap();
        let plan = solve(2, &env, &f).unwrap();
        let remapped = remap(&plan, &bumpy).unwrap();
        for (idx, &m) in remapped.remapped.iter().enumerate() {
            let i = idx + 1;
            assert!(m >= i);
            // Never costs more under the original s than the envelope value.
            assert!(bumpy.byte_cost(m) <= env.byte_cost(plan.mapping[idx]));
        }
        // A type mapped to spec 2 under the envelope moves to spec 3.
        if plan.mapping.contains(&2) {
            let idx = plan.mapping.iter().position(|&m| m == 2).unwrap();
            assert_eq!(remapped.remapped[idx], 3);
        }

        // Monotone original: remap is the identity.
        let mono = SpaceFunction::new(vec![1, 2, 3, 4]).unwrap();
        let plan = solve(2, &mono, &f).unwrap();
        let remapped = remap(&plan, &mono).unwrap();
        assert_eq!(remapped.remapped, plan.mapping);
    }

    #[test]
    fn sweep_costs_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 24;
        let mut costs: Vec<u64> = (0..n).map(|_| rng.gen_range(1..500)).collect();
        costs.sort_unstable();
        let s = SpaceFunction::new(costs).unwrap();
        let f = Histogram::new((0..n).map(|_| rng.gen_range(0..100)).collect()).unwrap();
        let rows = pareto_sweep(1..=n, &s, &f).unwrap();
        for pair in rows.windows(2) {
            assert!(pair[1].1 <= pair[0].1);
        }
        // k = n achieves the minimal possible cost.
        let min_cost: u128 = (1..=n)
            .map(|i| s.byte_cost(i) as u128 * f.count(i) as u128)
            .sum();
        assert_eq!(rows.last().unwrap().1, min_cost);
    }

    #[test]
    fn element_wise_cost_equals_interval_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let n = rng.gen_range(2..=16usize);
            let mut costs: Vec<u64> = (0..n).map(|_| rng.gen_range(1..100)).collect();
            costs.sort_unstable();
            let s = SpaceFunction::new(costs).unwrap();
            let f =
                Histogram::new((0..n).map(|_| rng.gen_range(0..50)).collect()).unwrap();
            let k = rng.gen_range(1..=n);
            let plan = solve(k, &s, &f).unwrap();
            let element_wise: u128 = plan
                .mapping
                .iter()
                .enumerate()
                .map(|(idx, &m)| s.byte_cost(m) as u128 * f.count(idx + 1) as u128)
                .sum();
            assert_eq!(element_wise, plan.total_cost);
        }
    }
}
