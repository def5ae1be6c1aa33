//! Best-of-N generation and selection by lowest average surprise.

use rayon::prelude::*;

use crate::rng::{self, Rng};
use crate::worldsim::FrameChunk;

pub const DEFAULT_N: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Vec<FrameChunk>>,
    /// `N × num_chunks`: surprise of each generated chunk given the chunk before it.
    pub chunk_surprises: Vec<Vec<f64>>,
    pub base_seed: u64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Generates `n` candidates, candidate `i` from `rng::stream(base_seed, i)`,
/// and scores every generated chunk against its realized context (the seed
/// context for the first chunk). Runs candidates in parallel; the result does
/// not depend on scheduling.
pub fn generate_candidates<G, S, E>(
    n: usize,
    seed_context: &FrameChunk,
    generator: G,
    surprise_fn: S,
    base_seed: u64,
) -> Result<CandidateSet, E>
where
    G: Fn(&mut Rng) -> Result<Vec<FrameChunk>, E> + Sync,
    S: Fn(&FrameChunk, &FrameChunk) -> Result<f64, E> + Sync,
    E: Send,
{
    assert!(n >= 1, "Best-of-N needs at least one candidate");
    let rows: Vec<(Vec<FrameChunk>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(base_seed, i as u64);
            let seq = generator(&mut r)?;
            let mut scores = Vec::with_capacity(seq.len());
            for (k, chunk) in seq.iter().enumerate() {
                let ctx = if k == 0 { seed_context } else { &seq[k - 1] };
                scores.push(surprise_fn(ctx, chunk)?);
            }
            Ok((seq, scores))
        })
        .collect::<Result<_, E>>()?;
    let (candidates, chunk_surprises) = rows.into_iter().unzip();
    Ok(CandidateSet {
        candidates,
        chunk_surprises,
        base_seed,
    })
}

/// Mean surprise over the generated chunks of candidate `i`.
pub fn average_surprise(set: &CandidateSet, i: usize) -> f64 {
    let row = &set.chunk_surprises[i];
    row.iter().sum::<f64>() / row.len() as f64
}

/// Index of the lowest average surprise; ties go to the lowest index.
pub fn select_best(set: &CandidateSet) -> usize {
    assert!(!set.is_empty(), "empty candidate set");
    let mut best = 0;
    let mut best_score = average_surprise(set, 0);
    for i in 1..set.len() {
        let s = average_surprise(set, i);
        if s < best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn set_from(rows: Vec<Vec<f64>>) -> CandidateSet {
        let chunk = FrameChunk::from_flat(1, 1, vec![0.0]);
        CandidateSet {
            candidates: rows.iter().map(|r| vec![chunk.clone(); r.len()]).collect(),
            chunk_surprises: rows,
            base_seed: 0,
        }
    }

    /// Exhaustive scan: the first index whose average is <= every other average.
    fn oracle_best(rows: &[Vec<f64>]) -> usize {
        let avgs: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        (0..avgs.len())
            .find(|&i| avgs.iter().all(|&a| avgs[i] <= a))
            .unwrap()
    }

    #[test]
    fn average_examples() {
        let s = set_from(vec![vec![0.2, 0.4], vec![0.7], vec![0.3, 0.3]]);
        assert!((average_surprise(&s, 0) - 0.3).abs() < 1e-15);
        assert_eq!(average_surprise(&s, 1), 0.7);
        assert!((average_surprise(&s, 0) - average_surprise(&s, 2)).abs() < 1e-15);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_best(&set_from(vec![vec![0.3], vec![0.1], vec![0.5]])), 1);
        assert_eq!(select_best(&set_from(vec![vec![0.2], vec![0.2]])), 0);
        assert_eq!(DEFAULT_N, 16);
    }

    #[test]
    fn selection_matches_exhaustive_scan() {
        let mut r = rng::seeded(77);
        for case in 0..200 {
            let n = r.random_range(1..=20);
            let k = r.random_range(1..=4);
            // Coarse grid so ties show up regularly.
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| r.random_range(0..5) as f64 * 0.25).collect())
                .collect();
            assert_eq!(select_best(&set_from(rows.clone())), oracle_best(&rows), "case {case}");
        }
    }

    proptest! {
        #[test]
        fn permutation_equivariance(
            rows in proptest::collection::vec(proptest::collection::vec(0u8..4, 2), 1..12),
            seed in 0u64..1000,
        ) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng::seeded(seed));
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let picked = select_best(&set_from(permuted.clone()));
            prop_assert_eq!(picked, oracle_best(&permuted));
            let original = perm[picked];
            let best_avg = rows[oracle_best(&rows)].iter().sum::<f64>();
            prop_assert_eq!(rows[original].iter().sum::<f64>(), best_avg);
        }
    }

    fn toy_generator(r: &mut crate::rng::Rng) -> Result<Vec<FrameChunk>, String> {
        Ok((0..3)
            .map(|_| FrameChunk::from_flat(1, 2, vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]))
            .collect())
    }

    fn toy_surprise(ctx: &FrameChunk, x: &FrameChunk) -> Result<f64, String> {
        Ok(ctx.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).sum())
    }

    #[test]
    fn single_candidate_equals_direct_call() {
        let seed_ctx = FrameChunk::from_flat(1, 2, vec![0.0, 0.5]);
        let set = generate_candidates(1, &seed_ctx, toy_generator, toy_surprise, 42).unwrap();
        let direct = toy_generator(&mut rng::stream(42, 0)).unwrap();
        assert_eq!(set.candidates, vec![direct.clone()]);
        assert_eq!(set.chunk_surprises[0][0], toy_surprise(&seed_ctx, &direct[0]).unwrap());
        assert_eq!(set.chunk_surprises[0][2], toy_surprise(&direct[1], &direct[2]).unwrap());
    }

    #[test]
    fn serial_and_parallel_agree() {
        let seed_ctx = FrameChunk::from_flat(1, 2, vec![0.0, 0.5]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| generate_candidates(16, &seed_ctx, toy_generator, toy_surprise, 5).unwrap());
        let b = four.install(|| generate_candidates(16, &seed_ctx, toy_generator, toy_surprise, 5).unwrap());
        assert_eq!(a, b);
        for i in 0..16 {
            assert_eq!(a.candidates[i], toy_generator(&mut rng::stream(5, i as u64)).unwrap());
        }
    }

    #[test]
    fn generator_errors_propagate() {
        let seed_ctx = FrameChunk::from_flat(1, 2, vec![0.0, 0.5]);
        let failing = |_: &mut crate::rng::Rng| -> Result<Vec<FrameChunk>, String> { Err("boom".into()) };
        assert_eq!(
            generate_candidates(4, &seed_ctx, failing, toy_surprise, 1).unwrap_err(),
            "boom"
        );
    }
}
