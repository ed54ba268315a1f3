//! Head-constrained feature permutations and the weight-transport map.
//!
//! A permutation acts on the *columns* of the token-feature matrix: `Z·P`
//! moves column `i` to column `dest[i]`. Multi-head attention only commutes
//! with permutations that shuffle columns inside a head or move whole head
//! blocks — never mix columns across heads — so the validated
//! [`PermutationSpec`] is built from a head reordering plus per-head
//! arrangements. The raw [`ColumnPermutation`] underneath is unconstrained;
//! tests use it to build deliberately invalid cross-head permutations.
//!
//! Transporting weights through a permutation (`P(θ)`) maps every square
//! attention matrix `W` to `P·W·P⁻¹`, the MLP input side to `W⁽¹⁾·P⁻¹`, the
//! MLP output side to `P·W⁽²⁾`, and every feature-dimension vector `v` to
//! `v·P⁻¹`. All of it is pure index gathering: exact, bit-stable and closed
//! under composition.

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::transformer::TransformerWeights;

#[derive(Error, Debug)]
pub enum PermutationError {
    #[error("not a bijection: {0}")]
    NotBijective(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("head constraint violated: {0}")]
    HeadConstraint(String),
}

// ── Raw column permutation ──────────────────────────────────────────────────

/// An arbitrary permutation of `d` columns; `dest[i]` is where source column
/// `i` lands. No head constraint — see [`PermutationSpec`] for the validated
/// kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnPermutation {
    dest: Vec<usize>,
}

impl ColumnPermutation {
    pub fn identity(d: usize) -> Self {
        ColumnPermutation { dest: (0..d).collect() }
    }

    pub fn from_dest(dest: Vec<usize>) -> Result<Self, PermutationError> {
        let mut seen = vec![false; dest.len()];
        for &t in &dest {
            if t >= dest.len() || seen[t] {
                return Err(PermutationError::NotBijective(format!("dest map {dest:?}")));
            }
            seen[t] = true;
        }
        Ok(ColumnPermutation { dest })
    }

    pub fn len(&self) -> usize {
        self.dest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dest.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.dest.iter().enumerate().all(|(i, &t)| i == t)
    }

    /// Destination of source column `i`.
    pub fn dest(&self) -> &[usize] {
        &self.dest
    }

    /// src[j] = which source column lands at j.
    pub fn src(&self) -> Vec<usize> {
        let mut src = vec![0; self.dest.len()];
        for (i, &t) in self.dest.iter().enumerate() {
            src[t] = i;
        }
        src
    }

    pub fn inverse(&self) -> Self {
        ColumnPermutation { dest: self.src() }
    }

    /// `self` then `next`: applying the result equals applying `self` first.
    pub fn compose(&self, next: &ColumnPermutation) -> Self {
        assert_eq!(self.len(), next.len(), "compose length mismatch");
        ColumnPermutation { dest: self.dest.iter().map(|&t| next.dest[t]).collect() }
    }

    /// Dense 0/1 matrix with `P[i, dest[i]] = 1`, so that row-major `Z·P`
    /// reproduces [`ColumnPermutation::apply`].
    pub fn materialize(&self) -> Tensor {
        let d = self.len();
        let mut data = vec![0.0; d * d];
        for (i, &t) in self.dest.iter().enumerate() {
            data[i * d + t] = 1.0;
        }
        Tensor::from_vec(&[d, d], data).expect("square by construction")
    }

    /// Column gather map realizing `·P` (forward) or `·Pᵀ` (inverse):
    /// out[:, j] = in[:, map[j]].
    pub fn gather_map(&self, direction: Direction) -> Vec<usize> {
        match direction {
            Direction::Forward => self.src(),
            Direction::Inverse => self.dest.clone(),
        }
    }

    /// Reorder the columns of a matrix (or the entries of a vector).
    /// Exact data movement; forward-then-inverse is bit-identical.
    pub fn apply(&self, t: &Tensor, direction: Direction) -> Result<Tensor, PermutationError> {
        let (rows, cols) = t.dims2();
        if cols != self.len() {
            return Err(PermutationError::Dimension(format!(
                "{} columns vs permutation of {}",
                cols,
                self.len()
            )));
        }
        let map = self.gather_map(direction);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            for (j, &s) in map.iter().enumerate() {
                out[i * cols + j] = src[i * cols + s];
            }
        }
        Ok(Tensor::from_vec(t.shape(), out).expect("same shape"))
    }
}

/// Which side of the permutation to apply to features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `Z · P`
    Forward,
    /// `Z · Pᵀ = Z · P⁻¹`
    Inverse,
}

// ── Head-constrained spec ───────────────────────────────────────────────────

/// Families of valid head-constrained permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationFamily {
    /// Heads stay put; columns shuffle inside each head. Size ((d/h)!)^h.
    WithinHeadsOnly,
    /// Whole-head moves plus independent within-head shuffles.
    /// Size h!·((d/h)!)^h — the full group the attention structure admits.
    HeadsAndWithin,
    /// Whole-head moves plus one shared within-head shuffle replicated
    /// across heads. Size h!·(d/h)!, the space counted in the source
    /// discussion ("12! × 64!").
    PaperCounted,
}

/// A validated head-constrained permutation of the feature dimension.
///
/// `head_order[i]` is the destination head of source head `i`;
/// `within_head[i][a]` is the destination offset (inside the destination
/// head) of offset `a` of source head `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSpec {
    pub d: usize,
    pub n_heads: usize,
    pub head_order: Vec<usize>,
    pub within_head: Vec<Vec<usize>>,
}

impl PermutationSpec {
    pub fn identity(d: usize, n_heads: usize) -> Self {
        let dh = d / n_heads;
        PermutationSpec {
            d,
            n_heads,
            head_order: (0..n_heads).collect(),
            within_head: vec![(0..dh).collect(); n_heads],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<(), PermutationError> {
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(PermutationError::Dimension(format!(
                "d = {} not divisible into {} heads",
                self.d, self.n_heads
            )));
        }
        let dh = self.head_dim();
        check_bijection(&self.head_order, self.n_heads, "head_order")?;
        if self.within_head.len() != self.n_heads {
            return Err(PermutationError::Dimension(format!(
                "{} within-head permutations for {} heads",
                self.within_head.len(),
                self.n_heads
            )));
        }
        for (i, w) in self.within_head.iter().enumerate() {
            check_bijection(w, dh, &format!("within_head[{i}]"))?;
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.column_map().is_identity()
    }

    /// Flatten to the raw column map.
    pub fn column_map(&self) -> ColumnPermutation {
        let dh = self.head_dim();
        let mut dest = vec![0; self.d];
        for i in 0..self.n_heads {
            for a in 0..dh {
                dest[i * dh + a] = self.head_order[i] * dh + self.within_head[i][a];
            }
        }
        ColumnPermutation { dest }
    }

    pub fn inverse(&self) -> Self {
        let dh = self.head_dim();
        let mut head_order = vec![0; self.n_heads];
        let mut within_head = vec![vec![0; dh]; self.n_heads];
        for i in 0..self.n_heads {
            let j = self.head_order[i];
            head_order[j] = i;
            for a in 0..dh {
                within_head[j][self.within_head[i][a]] = a;
            }
        }
        PermutationSpec { d: self.d, n_heads: self.n_heads, head_order, within_head }
    }

    /// `self` then `next`, staying inside the spec representation.
    pub fn compose(&self, next: &PermutationSpec) -> Self {
        assert_eq!((self.d, self.n_heads), (next.d, next.n_heads), "compose config mismatch");
        let dh = self.head_dim();
        let mut head_order = vec![0; self.n_heads];
        let mut within_head = vec![vec![0; dh]; self.n_heads];
        for i in 0..self.n_heads {
            let mid = self.head_order[i];
            head_order[i] = next.head_order[mid];
            for a in 0..dh {
                within_head[i][a] = next.within_head[mid][self.within_head[i][a]];
            }
        }
        PermutationSpec { d: self.d, n_heads: self.n_heads, head_order, within_head }
    }

    /// Fraction of columns both specs send to the same destination.
    pub fn overlap(&self, other: &PermutationSpec) -> f64 {
        assert_eq!(self.d, other.d, "overlap dimension mismatch");
        let a = self.column_map();
        let b = other.column_map();
        let same = a.dest.iter().zip(&b.dest).filter(|(x, y)| x == y).count();
        same as f64 / self.d as f64
    }
}

fn check_bijection(map: &[usize], n: usize, what: &str) -> Result<(), PermutationError> {
    if map.len() != n {
        return Err(PermutationError::NotBijective(format!("{what}: length {} ≠ {n}", map.len())));
    }
    let mut seen = vec![false; n];
    for &t in map {
        if t >= n || seen[t] {
            return Err(PermutationError::NotBijective(format!("{what}: {map:?}")));
        }
        seen[t] = true;
    }
    Ok(())
}

// ── Sampling, counting, enumeration ─────────────────────────────────────────

/// Uniform sample over the family (the identity included).
pub fn sample(rng: &mut impl Rng, d: usize, n_heads: usize, family: PermutationFamily) -> PermutationSpec {
    let dh = d / n_heads;
    let shuffled = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        v
    };
    match family {
        PermutationFamily::WithinHeadsOnly => PermutationSpec {
            d,
            n_heads,
            head_order: (0..n_heads).collect(),
            within_head: (0..n_heads).map(|_| shuffled(rng, dh)).collect(),
        },
        PermutationFamily::HeadsAndWithin => PermutationSpec {
            d,
            n_heads,
            head_order: shuffled(rng, n_heads),
            within_head: (0..n_heads).map(|_| shuffled(rng, dh)).collect(),
        },
        PermutationFamily::PaperCounted => {
            let shared = shuffled(rng, dh);
            PermutationSpec {
                d,
                n_heads,
                head_order: shuffled(rng, n_heads),
                within_head: vec![shared; n_heads],
            }
        }
    }
}

/// Uniform sample excluding the identity; used when drawing a watermark key.
/// Falls back to the identity only when the family contains nothing else.
pub fn sample_non_identity(
    rng: &mut impl Rng,
    d: usize,
    n_heads: usize,
    family: PermutationFamily,
) -> PermutationSpec {
    if count(d, n_heads, family) == BigUint::from(1u32) {
        return PermutationSpec::identity(d, n_heads);
    }
    loop {
        let spec = sample(rng, d, n_heads, family);
        if !spec.is_identity() {
            return spec;
        }
    }
}

pub fn factorial(n: usize) -> BigUint {
    (1..=n as u64).map(BigUint::from).fold(BigUint::from(1u32), |acc, k| acc * k)
}

/// Exact size of a family.
pub fn count(d: usize, n_heads: usize, family: PermutationFamily) -> BigUint {
    let dh = d / n_heads;
    match family {
        PermutationFamily::WithinHeadsOnly => factorial(dh).pow(n_heads as u32),
        PermutationFamily::HeadsAndWithin => factorial(n_heads) * factorial(dh).pow(n_heads as u32),
        PermutationFamily::PaperCounted => factorial(n_heads) * factorial(dh),
    }
}

/// All members of a small family, for brute-force cross-checks.
pub fn enumerate(d: usize, n_heads: usize, family: PermutationFamily) -> Vec<PermutationSpec> {
    let dh = d / n_heads;
    let head_orders: Vec<Vec<usize>> = match family {
        PermutationFamily::WithinHeadsOnly => vec![(0..n_heads).collect()],
        _ => all_permutations(n_heads),
    };
    let withins = all_permutations(dh);
    let mut out = Vec::new();
    match family {
        PermutationFamily::PaperCounted => {
            for ho in &head_orders {
                for w in &withins {
                    out.push(PermutationSpec {
                        d,
                        n_heads,
                        head_order: ho.clone(),
                        within_head: vec![w.clone(); n_heads],
                    });
                }
            }
        }
        _ => {
            for ho in &head_orders {
                let mut stack = vec![Vec::new()];
                for _ in 0..n_heads {
                    let mut next = Vec::new();
                    for partial in &stack {
                        for w in &withins {
                            let mut p: Vec<Vec<usize>> = partial.clone();
                            p.push(w.clone());
                            next.push(p);
                        }
                    }
                    stack = next;
                }
                for within_head in stack {
                    out.push(PermutationSpec { d, n_heads, head_order: ho.clone(), within_head });
                }
            }
        }
    }
    out
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    permute_rec(&mut items, 0, &mut out);
    out
}

fn permute_rec(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute_rec(items, k + 1, out);
        items.swap(k, i);
    }
}

// ── Weight transport ────────────────────────────────────────────────────────

/// `P(θ)`: the permuted weight set that the permuted-input computation
/// implicitly uses. Embedding tables and task heads are untouched.
pub fn transport_weights(weights: &TransformerWeights, spec: &PermutationSpec) -> TransformerWeights {
    transport_weights_raw(weights, &spec.column_map())
}

/// Transport through a raw column permutation (no head-constraint check);
/// the negative controls rely on being able to transport invalid maps.
pub fn transport_weights_raw(
    weights: &TransformerWeights,
    perm: &ColumnPermutation,
) -> TransformerWeights {
    assert_eq!(perm.len(), weights.config().d, "permutation dimension vs model d");
    let out = weights.deep_clone();
    let dest = perm.dest();
    for layer in out.layers() {
        for w in [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_a] {
            let mut t = w.borrow_mut();
            let d = perm.len();
            let src = t.data().to_vec();
            let dst = t.data_mut();
            // P·W·P⁻¹: out[r, c] = W[dest[r], dest[c]]
            for r in 0..d {
                for c in 0..d {
                    dst[r * d + c] = src[dest[r] * d + dest[c]];
                }
            }
        }
        {
            // W⁽¹⁾·P⁻¹: out[r, c] = W[r, dest[c]]
            let mut t = layer.w_1.borrow_mut();
            let (rows, cols) = t.dims2();
            let src = t.data().to_vec();
            let dst = t.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    dst[r * cols + c] = src[r * cols + dest[c]];
                }
            }
        }
        {
            // P·W⁽²⁾: out[r, c] = W[dest[r], c]
            let mut t = layer.w_2.borrow_mut();
            let (rows, cols) = t.dims2();
            let src = t.data().to_vec();
            let dst = t.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    dst[r * cols + c] = src[dest[r] * cols + c];
                }
            }
        }
        // v·P⁻¹ for every feature-dimension vector; the MLP hidden bias b₁
        // lives in the hidden dimension and stays put.
        for v in [
            &layer.b_q,
            &layer.b_k,
            &layer.b_v,
            &layer.b_a,
            &layer.b_2,
            &layer.ln1_gamma,
            &layer.ln1_beta,
            &layer.ln2_gamma,
            &layer.ln2_beta,
        ] {
            let mut t = v.borrow_mut();
            let src = t.data().to_vec();
            let dst = t.data_mut();
            for (c, slot) in dst.iter_mut().enumerate() {
                *slot = src[dest[c]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedHub;

    #[test]
    fn materialized_spec_is_orthogonal() {
        let hub = SeedHub::new(3);
        let mut rng = hub.stream("perm.orth");
        for _ in 0..10 {
            let spec = sample(&mut rng, 8, 2, PermutationFamily::HeadsAndWithin);
            spec.validate().unwrap();
            let p = spec.column_map().materialize();
            let d = 8;
            // P·Pᵀ == I with exact 0/1 arithmetic
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += p.data()[i * d + k] * p.data()[j * d + k];
                    }
                    assert_eq!(s, if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn apply_round_trip_bit_identical() {
        let hub = SeedHub::new(4);
        let mut rng = hub.stream("perm.roundtrip");
        let spec = sample(&mut rng, 12, 3, PermutationFamily::HeadsAndWithin);
        let z = Tensor::randn(&mut rng, &[5, 12], 1.0);
        let map = spec.column_map();
        let fwd = map.apply(&z, Direction::Forward).unwrap();
        let back = map.apply(&fwd, Direction::Inverse).unwrap();
        assert_eq!(back.data(), z.data());
    }

    #[test]
    fn identity_spec_leaves_features_unchanged() {
        let hub = SeedHub::new(5);
        let mut rng = hub.stream("perm.id");
        let z = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let id = PermutationSpec::identity(8, 2);
        assert!(id.is_identity());
        let out = id.column_map().apply(&z, Direction::Forward).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn single_swap_moves_columns() {
        let perm = ColumnPermutation::from_dest(vec![1, 0, 2, 3]).unwrap();
        let z = Tensor::from_vec(&[1, 4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let out = perm.apply(&z, Direction::Forward).unwrap();
        assert_eq!(out.data(), &[20.0, 10.0, 30.0, 40.0]);
    }

    #[test]
    fn apply_checks_dimensions() {
        let perm = ColumnPermutation::identity(4);
        let z = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            perm.apply(&z, Direction::Forward),
            Err(PermutationError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_against_materialized_matrix_agrees() {
        let hub = SeedHub::new(6);
        let mut rng = hub.stream("perm.dense");
        let spec = sample(&mut rng, 8, 2, PermutationFamily::HeadsAndWithin);
        let z = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let fast = spec.column_map().apply(&z, Direction::Forward).unwrap();
        let g = crate::tensor::Graph::inference();
        let dense = g
            .matmul(g.input(&z), g.input(&spec.column_map().materialize()))
            .unwrap();
        assert_eq!(fast.data(), g.data(dense).as_slice());
    }

    #[test]
    fn within_heads_only_keeps_head_order() {
        let hub = SeedHub::new(7);
        let mut rng = hub.stream("perm.within");
        for _ in 0..20 {
            let spec = sample(&mut rng, 4, 2, PermutationFamily::WithinHeadsOnly);
            assert_eq!(spec.head_order, vec![0, 1]);
        }
    }

    #[test]
    fn d2_single_head_reaches_both_specs() {
        let hub = SeedHub::new(8);
        let mut rng = hub.stream("perm.d2");
        let mut saw_identity = false;
        let mut saw_swap = false;
        for _ in 0..50 {
            let spec = sample(&mut rng, 2, 1, PermutationFamily::HeadsAndWithin);
            if spec.is_identity() {
                saw_identity = true;
            } else {
                saw_swap = true;
            }
        }
        assert!(saw_identity && saw_swap);
    }

    #[test]
    fn sampling_is_uniform_over_small_family() {
        // 10,000 draws over the 4 specs at d=4, h=2, within-heads-only:
        // every frequency within 0.25 ± 0.02.
        let hub = SeedHub::new(9);
        let mut rng = hub.stream("perm.chisq");
        let all = enumerate(4, 2, PermutationFamily::WithinHeadsOnly);
        assert_eq!(all.len(), 4);
        let mut counts = vec![0usize; all.len()];
        for _ in 0..10_000 {
            let s = sample(&mut rng, 4, 2, PermutationFamily::WithinHeadsOnly);
            let idx = all.iter().position(|x| *x == s).expect("sampled spec in enumeration");
            counts[idx] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02, "spec {i} frequency {f}");
        }
    }

    #[test]
    fn non_identity_sampler_rejects_identity() {
        let hub = SeedHub::new(10);
        let mut rng = hub.stream("perm.nonid");
        for _ in 0..100 {
            let s = sample_non_identity(&mut rng, 2, 1, PermutationFamily::HeadsAndWithin);
            assert!(!s.is_identity());
        }
        // degenerate family of size 1 falls back to the identity
        let s = sample_non_identity(&mut rng, 1, 1, PermutationFamily::HeadsAndWithin);
        assert!(s.is_identity());
    }

    #[test]
    fn count_matches_enumeration_for_small_configs() {
        for (d, h) in [(4, 2), (6, 2), (6, 3), (4, 1), (8, 4)] {
            for family in [
                PermutationFamily::WithinHeadsOnly,
                PermutationFamily::HeadsAndWithin,
                PermutationFamily::PaperCounted,
            ] {
                let counted = count(d, h, family);
                let listed = enumerate(d, h, family);
                assert_eq!(
                    counted,
                    BigUint::from(listed.len()),
                    "{family:?} at d={d}, h={h}"
                );
                // enumeration contains no duplicates
                let mut uniq = listed.clone();
                uniq.sort_by_key(|s| s.column_map().dest().to_vec());
                uniq.dedup();
                assert_eq!(uniq.len(), listed.len());
            }
        }
    }

    #[test]
    fn count_simple_cases() {
        assert_eq!(count(3, 1, PermutationFamily::HeadsAndWithin), BigUint::from(6u32));
        assert_eq!(count(3, 1, PermutationFamily::WithinHeadsOnly), BigUint::from(6u32));
        assert_eq!(count(3, 1, PermutationFamily::PaperCounted), BigUint::from(6u32));
        assert_eq!(count(4, 2, PermutationFamily::HeadsAndWithin), BigUint::from(8u32));
    }

    #[test]
    fn heads_and_within_equals_filtered_dense_enumeration() {
        // all 24 permutations of 4 columns, kept iff every head block maps
        // onto a head block
        let all4 = all_permutations(4);
        let valid = all4
            .iter()
            .filter(|p| {
                let block = |i: usize| p[i] / 2;
                block(0) == block(1) && block(2) == block(3)
            })
            .count();
        assert_eq!(valid, 8);
        assert_eq!(count(4, 2, PermutationFamily::HeadsAndWithin), BigUint::from(valid));
    }

    #[test]
    fn overlap_identities() {
        let hub = SeedHub::new(11);
        let mut rng = hub.stream("perm.overlap");
        let a = sample(&mut rng, 8, 2, PermutationFamily::HeadsAndWithin);
        assert_eq!(a.overlap(&a), 1.0);
        let id = PermutationSpec::identity(2, 1);
        let swap = PermutationSpec {
            d: 2,
            n_heads: 1,
            head_order: vec![0],
            within_head: vec![vec![1, 0]],
        };
        assert_eq!(id.overlap(&swap), 0.0);
    }

    #[test]
    fn expected_overlap_of_uniform_within_head_pairs() {
        // per column, P(dest_a == dest_b) = 1/(d/h); Monte Carlo over 10^4
        // pairs at d/h = 4 must land within ±0.01 of 0.25.
        let hub = SeedHub::new(12);
        let mut rng = hub.stream("perm.overlap.mc");
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let a = sample(&mut rng, 8, 2, PermutationFamily::WithinHeadsOnly);
            let b = sample(&mut rng, 8, 2, PermutationFamily::WithinHeadsOnly);
            total += a.overlap(&b);
        }
        let mean = total / n as f64;
        assert!((mean - 0.25).abs() < 0.01, "mean overlap {mean}");
    }

    #[test]
    fn composition_stays_in_family_and_matches_maps() {
        let hub = SeedHub::new(13);
        let mut rng = hub.stream("perm.compose");
        for family in [
            PermutationFamily::WithinHeadsOnly,
            PermutationFamily::HeadsAndWithin,
            PermutationFamily::PaperCounted,
        ] {
            let a = sample(&mut rng, 8, 2, family);
            let b = sample(&mut rng, 8, 2, family);
            let c = a.compose(&b);
            c.validate().unwrap();
            if family == PermutationFamily::PaperCounted {
                assert!(c.within_head.iter().all(|w| *w == c.within_head[0]));
            }
            let via_maps = a.column_map().compose(&b.column_map());
            assert_eq!(c.column_map(), via_maps);
            // inverse composes to identity
            assert!(a.compose(&a.inverse()).is_identity());
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let hub = SeedHub::new(14);
        let mut rng = hub.stream("perm.json");
        let spec = sample(&mut rng, 8, 2, PermutationFamily::HeadsAndWithin);
        let json = serde_json::to_string(&spec).unwrap();
        let back: PermutationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        assert!(json.contains("\"head_order\""));
    }

    #[test]
    fn paper_counted_space_magnitude() {
        // 12 heads of 64 columns: |family| = 12!·64! ≈ 6.1×10^97
        let n = count(768, 12, PermutationFamily::PaperCounted);
        assert_eq!(n, factorial(12) * factorial(64));
        let s = n.to_string();
        assert_eq!(s.len(), 98, "magnitude 10^97");
        let mantissa: f64 = format!("{}.{}", &s[..1], &s[1..6]).parse().unwrap();
        assert!((mantissa - 6.1).abs() < 0.05, "leading digits {mantissa}");
    }
}
