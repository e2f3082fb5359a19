//! Per-identity vertex→patch memory: greedy max-min construction, a local
//! optimality checker, and persistence.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::MouthVertexSet;
use crate::storage::{self, BlobBuilder, BlobEntry};

/// Mouth image patch `[P, P, C]`, values in `[0, 1]`.
pub type ImagePatch = Array3<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct VertexPatchPair {
    pub key: MouthVertexSet,
    pub value: ImagePatch,
    pub source_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitMemoryBank {
    pub pairs: Vec<VertexPatchPair>,
    pub identity_tag: String,
    pub min_pair_distance: f64,
    pub seed: u64,
}

impl ExplicitMemoryBank {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn patch_shape(&self) -> (usize, usize, usize) {
        let s = self.pairs[0].value.shape();
        (s[0], s[1], s[2])
    }

    pub fn h_v(&self) -> usize {
        self.pairs[0].key.h_v()
    }

    /// Flattened keys `[N, h_v * 3]`.
    pub fn key_matrix(&self) -> Array2<f64> {
        let width = self.h_v() * 3;
        let mut out = Array2::zeros((self.n(), width));
        for (i, p) in self.pairs.iter().enumerate() {
            for (j, &x) in p.key.coords.iter().enumerate() {
                out[[i, j]] = x;
            }
        }
        out
    }

    pub fn source_frames(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.source_frame).collect()
    }

    /// Recompute the minimum pairwise RMS distance and check it against the
    /// stored value.
    pub fn verify(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::argument("explicit memory needs at least two pairs"));
        }
        let shape = self.pairs[0].value.shape().to_vec();
        if self.pairs.iter().any(|p| p.value.shape() != shape.as_slice()) {
            return Err(Error::argument("patches in a bank must share one shape"));
        }
        let keys: Vec<&MouthVertexSet> = self.pairs.iter().map(|p| &p.key).collect();
        let (_, _, d) = closest_pair(&keys)?;
        if (d - self.min_pair_distance).abs() > 1e-9 {
            return Err(Error::integrity(
                "bank.json",
                format!("stored min distance {} but keys give {d}", self.min_pair_distance),
            ));
        }
        Ok(())
    }
}

/// `sqrt(mean_i ‖a_i − b_i‖²)` over corresponding vertices.
pub fn rms_distance(a: &MouthVertexSet, b: &MouthVertexSet) -> Result<f64> {
    if a.coords.shape() != b.coords.shape() {
        return Err(Error::argument(format!(
            "vertex sets have shapes {:?} and {:?}",
            a.coords.shape(),
            b.coords.shape()
        )));
    }
    Ok(rms_unchecked(a, b))
}

fn rms_unchecked(a: &MouthVertexSet, b: &MouthVertexSet) -> f64 {
    let h_v = a.coords.nrows();
    if h_v == 0 {
        return 0.0;
    }
    let ss: f64 = a
        .coords
        .iter()
        .zip(b.coords.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (ss / h_v as f64).sqrt()
}

/// Most similar pair `(i, j, d)` with `i < j`; ties go to the
/// lexicographically smallest index pair.
pub fn closest_pair(keys: &[&MouthVertexSet]) -> Result<(usize, usize, f64)> {
    if keys.len() < 2 {
        return Err(Error::argument("closest pair needs at least two keys"));
    }
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let d = rms_distance(keys[i], keys[j])?;
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub n: usize,
    pub seed: u64,
    pub identity_tag: String,
    /// Repeat full passes until one accepts no swap. With `false` exactly one
    /// pass is made, which can leave an improving swap behind.
    pub until_stable: bool,
}

impl BuildOptions {
    pub fn new(n: usize, seed: u64, identity_tag: impl Into<String>) -> Self {
        Self {
            n,
            seed,
            identity_tag: identity_tag.into(),
            until_stable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub initial_min_distance: f64,
    pub final_min_distance: f64,
    pub swaps: usize,
    pub passes: usize,
}

/// Pairwise distances among the current members plus the closest pair.
struct Selection<'a> {
    pool: &'a [VertexPatchPair],
    members: Vec<usize>,
    dist: Vec<f64>,
    n: usize,
    m1: usize,
    m2: usize,
    d_min: f64,
    /// Minimum over pairs avoiding slot `m1` (resp. `m2`).
    rest1: f64,
    rest2: f64,
}

impl<'a> Selection<'a> {
    fn new(pool: &'a [VertexPatchPair], members: Vec<usize>) -> Self {
        let n = members.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = rms_unchecked(&pool[members[i]].key, &pool[members[j]].key);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let mut s = Self {
            pool,
            members,
            dist,
            n,
            m1: 0,
            m2: 1,
            d_min: 0.0,
            rest1: 0.0,
            rest2: 0.0,
        };
        s.refresh();
        s
    }

    fn min_excluding(&self, skip: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.n {
            if i == skip {
                continue;
            }
            for j in i + 1..self.n {
                if j != skip {
                    best = best.min(self.dist[i * self.n + j]);
                }
            }
        }
        best
    }

    fn refresh(&mut self) {
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let d = self.dist[i * self.n + j];
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        (self.m1, self.m2, self.d_min) = best;
        self.rest1 = self.min_excluding(self.m1);
        self.rest2 = self.min_excluding(self.m2);
    }

    /// Distances from a candidate to every slot.
    fn candidate_distances(&self, cand: usize) -> Vec<f64> {
        self.members
            .iter()
            .map(|&m| rms_unchecked(&self.pool[cand].key, &self.pool[m].key))
            .collect()
    }

    /// `(D_min1, D_min2)`: closest-pair distance after replacing slot `m1`
    /// or slot `m2` with the candidate.
    fn trial(&self, cd: &[f64]) -> (f64, f64) {
        let mut with1 = self.rest1;
        let mut with2 = self.rest2;
        for (slot, &d) in cd.iter().enumerate() {
            if slot != self.m1 {
                with1 = with1.min(d);
            }
            if slot != self.m2 {
                with2 = with2.min(d);
            }
        }
        (with1, with2)
    }

    fn replace(&mut self, slot: usize, cand: usize, cd: &[f64]) {
        self.members[slot] = cand;
        for (j, &d) in cd.iter().enumerate() {
            if j != slot {
                self.dist[slot * self.n + j] = d;
                self.dist[j * self.n + slot] = d;
            }
        }
        self.dist[slot * self.n + slot] = 0.0;
        self.refresh();
    }

    /// One sweep over the pool; returns the number of accepted swaps.
    fn pass(&mut self) -> usize {
        let mut swaps = 0;
        let mut in_bank = vec![false; self.pool.len()];
        for &m in &self.members {
            in_bank[m] = true;
        }
        for cand in 0..self.pool.len() {
            // a current member can only reproduce the same set or create a
            // duplicate, neither of which raises the minimum
            if in_bank[cand] {
                continue;
            }
            let cd = self.candidate_distances(cand);
            let (d1, d2) = self.trial(&cd);
            if d1.max(d2) > self.d_min {
                let slot = if d1 > d2 { self.m1 } else { self.m2 };
                in_bank[self.members[slot]] = false;
                in_bank[cand] = true;
                self.replace(slot, cand, &cd);
                swaps += 1;
            }
        }
        swaps
    }
}

fn validate_pool(pool: &[VertexPatchPair], n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::argument("explicit memory needs N >= 2"));
    }
    if n > pool.len() {
        return Err(Error::argument(format!(
            "cannot select {n} pairs from a pool of {}",
            pool.len()
        )));
    }
    let kshape = pool[0].key.coords.shape().to_vec();
    let vshape = pool[0].value.shape().to_vec();
    for (i, p) in pool.iter().enumerate() {
        if p.key.coords.shape() != kshape.as_slice() || p.value.shape() != vshape.as_slice() {
            return Err(Error::argument(format!("pool entry {i} has inconsistent shape")));
        }
    }
    Ok(())
}

/// Greedy max-min selection: random initial subset, then a pass over the pool
/// trying to replace either member of the closest pair with each candidate.
pub fn build_explicit_memory_with_report(
    pool: &[VertexPatchPair],
    opts: &BuildOptions,
) -> Result<(ExplicitMemoryBank, BuildReport)> {
    validate_pool(pool, opts.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let members = rand::seq::index::sample(&mut rng, pool.len(), opts.n).into_vec();
    let mut sel = Selection::new(pool, members);
    let initial = sel.d_min;
    let mut swaps = 0;
    let mut passes = 0;
    loop {
        let accepted = sel.pass();
        swaps += accepted;
        passes += 1;
        if !opts.until_stable || accepted == 0 || passes >= 1000 {
            break;
        }
    }
    let bank = ExplicitMemoryBank {
        pairs: sel.members.iter().map(|&i| pool[i].clone()).collect(),
        identity_tag: opts.identity_tag.clone(),
        min_pair_distance: sel.d_min,
        seed: opts.seed,
    };
    let report = BuildReport {
        initial_min_distance: initial,
        final_min_distance: sel.d_min,
        swaps,
        passes,
    };
    Ok((bank, report))
}

pub fn build_explicit_memory(pool: &[VertexPatchPair], opts: &BuildOptions) -> Result<ExplicitMemoryBank> {
    Ok(build_explicit_memory_with_report(pool, opts)?.0)
}

/// Build a bank for a new identity from its own frames.
pub fn rebuild_for_identity(
    pool_new: &[VertexPatchPair],
    n: usize,
    seed: u64,
    identity_tag: impl Into<String>,
) -> Result<ExplicitMemoryBank> {
    build_explicit_memory(pool_new, &BuildOptions::new(n, seed, identity_tag))
}

/// True iff no single pool candidate, swapped in for either member of the
/// bank's closest pair, strictly increases the minimum pairwise distance.
/// Candidates are matched to bank members by `source_frame`.
pub fn stability_check(bank: &ExplicitMemoryBank, pool: &[VertexPatchPair]) -> bool {
    let n = bank.n();
    if n < 2 {
        return true;
    }
    let keys: Vec<&MouthVertexSet> = bank.pairs.iter().map(|p| &p.key).collect();
    let Ok((m1, m2, d_min)) = closest_pair(&keys) else {
        return false;
    };
    let mut rest = [f64::INFINITY; 2];
    for (r, skip) in rest.iter_mut().zip([m1, m2]) {
        for i in 0..n {
            for j in i + 1..n {
                if i != skip && j != skip {
                    *r = r.min(rms_unchecked(keys[i], keys[j]));
                }
            }
        }
    }
    let members: std::collections::HashSet<usize> = bank.source_frames().into_iter().collect();
    for cand in pool {
        if members.contains(&cand.source_frame) {
            continue;
        }
        if cand.key.coords.shape() != keys[0].coords.shape() {
            return false;
        }
        let mut d1 = rest[0];
        let mut d2 = rest[1];
        for (slot, k) in keys.iter().enumerate() {
            let d = rms_unchecked(&cand.key, k);
            if slot != m1 {
                d1 = d1.min(d);
            }
            if slot != m2 {
                d2 = d2.min(d);
            }
        }
        if d1.max(d2) > d_min {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankManifest {
    identity_tag: String,
    n: usize,
    p: usize,
    c: usize,
    h_v: usize,
    seed: u64,
    d_min: f64,
    source_frames: Vec<usize>,
    keys: BlobEntry,
    values: BlobEntry,
}

pub fn save_bank(bank: &ExplicitMemoryBank, dir: &Path) -> Result<()> {
    storage::ensure_dir(dir)?;
    let (p, p2, c) = bank.patch_shape();
    if p != p2 {
        return Err(Error::argument("patches must be square"));
    }
    let h_v = bank.h_v();
    let n = bank.n();
    let keys: Vec<f64> = bank.pairs.iter().flat_map(|x| x.key.coords.iter().copied()).collect();
    let values: Vec<f32> = bank
        .pairs
        .iter()
        .flat_map(|x| x.value.as_standard_layout().iter().copied().collect::<Vec<_>>())
        .collect();
    let mut kb = BlobBuilder::new("keys.f32");
    kb.push_f64("keys", &[n, h_v, 3], &keys)?;
    let mut vb = BlobBuilder::new("values.f32");
    vb.push("values", &[n, p, p, c], &values)?;
    let manifest = BankManifest {
        identity_tag: bank.identity_tag.clone(),
        n,
        p,
        c,
        h_v,
        seed: bank.seed,
        d_min: bank.min_pair_distance,
        source_frames: bank.source_frames(),
        keys: kb.write(dir)?,
        values: vb.write(dir)?,
    };
    storage::write_json(&dir.join("bank.json"), &manifest)
}

pub fn load_bank(dir: &Path) -> Result<ExplicitMemoryBank> {
    let m: BankManifest = storage::read_json(&dir.join("bank.json"))?;
    if m.source_frames.len() != m.n {
        return Err(Error::integrity("bank.json", "source frame list length differs from N"));
    }
    let keys = storage::read_blob(dir, &m.keys)?.get_f64("keys", &[m.n, m.h_v, 3])?;
    let vc = storage::read_blob(dir, &m.values)?;
    let values = vc.get_shaped("values", &[m.n, m.p, m.p, m.c])?;
    let per_key = m.h_v * 3;
    let per_patch = m.p * m.p * m.c;
    let pairs = (0..m.n)
        .map(|i| VertexPatchPair {
            key: MouthVertexSet {
                coords: Array2::from_shape_vec((m.h_v, 3), keys[i * per_key..(i + 1) * per_key].to_vec()).unwrap(),
            },
            value: Array3::from_shape_vec((m.p, m.p, m.c), values[i * per_patch..(i + 1) * per_patch].to_vec())
                .unwrap(),
            source_frame: m.source_frames[i],
        })
        .collect();
    let bank = ExplicitMemoryBank {
        pairs,
        identity_tag: m.identity_tag,
        min_pair_distance: m.d_min,
        seed: m.seed,
    };
    bank.verify()?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn key1d(x: f64) -> MouthVertexSet {
        MouthVertexSet {
            coords: Array2::from_shape_vec((1, 3), vec![x, 0.0, 0.0]).unwrap(),
        }
    }

    fn pool1d(xs: &[f64]) -> Vec<VertexPatchPair> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| VertexPatchPair {
                key: key1d(x),
                value: Array3::from_elem((2, 2, 1), i as f32 / 10.0),
                source_frame: i,
            })
            .collect()
    }

    #[test]
    fn rms_examples() {
        let a = key1d(0.0);
        assert_eq!(rms_distance(&a, &a).unwrap(), 0.0);
        let b = MouthVertexSet { coords: Array2::from_shape_vec((1, 3), vec![3.0, 4.0, 0.0]).unwrap() };
        assert_eq!(rms_distance(&a, &b).unwrap(), 5.0);
        let c = MouthVertexSet { coords: Array2::zeros((2, 3)) };
        let d = MouthVertexSet { coords: Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap() };
        assert!((rms_distance(&c, &d).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(rms_distance(&a, &c).is_err());
    }

    #[test]
    fn closest_pair_examples() {
        let ks = [key1d(0.0), key1d(1.0), key1d(10.0)];
        let refs: Vec<&MouthVertexSet> = ks.iter().collect();
        assert_eq!(closest_pair(&refs).unwrap(), (0, 1, 1.0));

        let same = [key1d(2.0), key1d(2.0)];
        assert_eq!(closest_pair(&same.iter().collect::<Vec<_>>()).unwrap().2, 0.0);

        let equal = [key1d(0.0), key1d(1.0), key1d(2.0)];
        // pairs (0,1) and (1,2) tie at 1.0
        assert_eq!(closest_pair(&equal.iter().collect::<Vec<_>>()).unwrap(), (0, 1, 1.0));
        assert!(closest_pair(&[&key1d(0.0)]).is_err());
    }

    #[test]
    fn three_point_pool_reaches_optimum_for_every_seed() {
        let pool = pool1d(&[0.0, 1.0, 10.0]);
        for seed in 0..50 {
            let bank = build_explicit_memory(&pool, &BuildOptions::new(2, seed, "a")).unwrap();
            let mut xs: Vec<f64> = bank.pairs.iter().map(|p| p.key.coords[[0, 0]]).collect();
            xs.sort_by(f64::total_cmp);
            assert_eq!(xs, vec![0.0, 10.0], "seed {seed}");
            assert_eq!(bank.min_pair_distance, 10.0);
            assert!(stability_check(&bank, &pool));
        }
    }

    #[test]
    fn full_pool_and_degenerate_pool() {
        let pool = pool1d(&[3.0, -1.0, 7.5, 2.0]);
        let bank = build_explicit_memory(&pool, &BuildOptions::new(4, 9, "a")).unwrap();
        assert_eq!(bank.min_pair_distance, 1.0);
        assert!(stability_check(&bank, &pool));

        let same = pool1d(&[1.0; 6]);
        let (bank, report) = build_explicit_memory_with_report(&same, &BuildOptions::new(3, 1, "a")).unwrap();
        assert_eq!(bank.min_pair_distance, 0.0);
        assert_eq!(report.passes, 1);
        assert_eq!(report.swaps, 0);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let pool = pool1d(&[0.0, 1.0]);
        assert!(build_explicit_memory(&pool, &BuildOptions::new(3, 0, "a")).is_err());
        assert!(build_explicit_memory(&pool, &BuildOptions::new(1, 0, "a")).is_err());
    }

    #[test]
    fn stability_detects_bad_member() {
        let pool = pool1d(&[0.0, 1.0, 10.0]);
        let bank = ExplicitMemoryBank {
            pairs: pool[..2].to_vec(),
            identity_tag: "a".into(),
            min_pair_distance: 1.0,
            seed: 0,
        };
        assert!(!stability_check(&bank, &pool));
    }

    #[test]
    fn rebuild_uses_new_pool_only_and_is_deterministic() {
        let mut pool = pool1d(&[0.5, 4.0, -2.0, 9.0, 1.5, 6.0]);
        for p in &mut pool {
            p.source_frame += 1000;
        }
        let a = rebuild_for_identity(&pool, 3, 4, "b").unwrap();
        let b = rebuild_for_identity(&pool, 3, 4, "b").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.identity_tag, "b");
        assert!(a.source_frames().iter().all(|&f| f >= 1000));
    }

    #[test]
    fn save_load_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let pool = pool1d(&[0.0, 0.25, 3.0, 8.0, 8.5]);
        let bank = build_explicit_memory(&pool, &BuildOptions::new(3, 2, "id-x")).unwrap();
        save_bank(&bank, dir.path()).unwrap();
        let back = load_bank(dir.path()).unwrap();
        assert_eq!(back, bank);
        assert_eq!(stability_check(&back, &pool), stability_check(&bank, &pool));

        let path = dir.path().join("values.f32");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, bytes).unwrap();
        match load_bank(dir.path()) {
            Err(Error::Integrity { blob, .. }) => assert_eq!(blob, "values.f32"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, h_v: usize) -> MouthVertexSet {
        let v = crate::nn::seeded_normal(rng, h_v * 3, 1.0);
        MouthVertexSet { coords: Array2::from_shape_vec((h_v, 3), v).unwrap() }
    }

    proptest! {
        #[test]
        fn rms_is_a_metric(seed in 0u64..10_000, h_v in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_set(&mut rng, h_v);
            let b = random_set(&mut rng, h_v);
            let c = random_set(&mut rng, h_v);
            let ab = rms_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, rms_distance(&b, &a).unwrap());
            prop_assert_eq!(rms_distance(&a, &a).unwrap(), 0.0);
            prop_assert!(ab > 0.0);
            let ac = rms_distance(&a, &c).unwrap();
            let bc = rms_distance(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn build_never_worsens_and_is_locally_stable(seed in 0u64..10_000, size in 2usize..12, n in 2usize..5) {
            prop_assume!(n <= size);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool: Vec<VertexPatchPair> = (0..size)
                .map(|i| VertexPatchPair { key: random_set(&mut rng, 2), value: Array3::zeros((1, 1, 1)), source_frame: i })
                .collect();
            let (bank, report) = build_explicit_memory_with_report(&pool, &BuildOptions::new(n, seed, "p")).unwrap();
            prop_assert!(report.final_min_distance >= report.initial_min_distance);
            prop_assert!(stability_check(&bank, &pool));
            bank.verify().unwrap();
        }
    }
}
