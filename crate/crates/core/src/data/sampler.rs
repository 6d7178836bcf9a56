//! Block down-sampling and episodic N-way K-shot sampling.

use super::{
    BinaryMask, ClassSplit, DataError, Episode, LabeledPointCloud, QueryEntry, SupportEntry,
};
use crate::seeds::{self, stream};
use ndarray::{Array1, Array2};
use rand::Rng;

/// Which side of the class split episodes are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Episode sampling knobs.
#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    /// Minimum fraction of block points a class must occupy to make the
    /// block eligible for that class.
    pub min_class_fraction: f64,
    /// Re-sample each selected block down to this many points. `None` uses
    /// blocks as stored.
    pub episode_points: Option<usize>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            min_class_fraction: 0.02,
            episode_points: None,
        }
    }
}

/// Draw exactly `t` points from `cloud`: uniformly without replacement when
/// the cloud has at least `t` points, with replacement otherwise.
pub fn sample_block(
    cloud: &LabeledPointCloud,
    t: usize,
    seed: u64,
) -> Result<LabeledPointCloud, DataError> {
    assert!(t >= 1, "sample_block needs t >= 1");
    if cloud.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    let mut rng = seeds::rng(&[seed, stream::BLOCK_SAMPLE]);
    let n = cloud.len();
    let indices: Vec<usize> = if n >= t {
        // partial Fisher-Yates: first t entries of a uniform permutation
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..t {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(t);
        idx
    } else {
        (0..t).map(|_| rng.random_range(0..n)).collect()
    };
    Ok(take_rows(cloud, &indices))
}

fn take_rows(cloud: &LabeledPointCloud, indices: &[usize]) -> LabeledPointCloud {
    let f0 = cloud.extra_dim();
    let mut coords = Array2::<f32>::zeros((indices.len(), 3));
    let mut extras = Array2::<f32>::zeros((indices.len(), f0));
    let mut labels = Array1::<i32>::zeros(indices.len());
    for (r, &i) in indices.iter().enumerate() {
        coords.row_mut(r).assign(&cloud.coords.row(i));
        extras.row_mut(r).assign(&cloud.extras.row(i));
        labels[r] = cloud.labels[i];
    }
    LabeledPointCloud::new(coords, extras, labels)
}

/// Re-sample a block while keeping at least one point of `class_id`,
/// retrying with derived seeds. The eligibility threshold makes success
/// overwhelmingly likely; a bounded retry keeps the call total.
fn resample_keeping(
    cloud: &LabeledPointCloud,
    t: usize,
    class_id: u32,
    seed: u64,
) -> Result<LabeledPointCloud, DataError> {
    const MAX_TRIES: u64 = 32;
    for attempt in 0..MAX_TRIES {
        let sampled = sample_block(cloud, t, seeds::mix(&[seed, attempt]))?;
        if sampled.labels.iter().any(|&l| l == class_id as i32) {
            return Ok(sampled);
        }
    }
    Err(DataError::CorpusIntegrity(format!(
        "could not retain class {class_id} while re-sampling a block to {t} points"
    )))
}

/// Sample one N-way K-shot episode.
///
/// For each of the `n_way` classes the sampler takes `k_shot` support blocks
/// plus one class-matched query block, all block choices disjoint across the
/// episode. Query ground truth uses episode-local ids `{0..N}`; points of
/// classes outside the episode map to background 0.
pub fn sample_episode(
    corpus: &[LabeledPointCloud],
    split: &ClassSplit,
    phase: Phase,
    n_way: usize,
    k_shot: usize,
    seed: u64,
    options: &EpisodeOptions,
) -> Result<Episode, DataError> {
    assert!(n_way >= 2, "n_way must be >= 2");
    assert!(k_shot >= 1, "k_shot must be >= 1");
    let pool: Vec<u32> = match phase {
        Phase::Train => split.seen.iter().copied().collect(),
        Phase::Test => split.unseen.iter().copied().collect(),
    };
    let needed = k_shot + 1;

    // eligible blocks per class in the pool; the class must actually be
    // present even when the fraction threshold is zero
    let mut eligible: Vec<(u32, Vec<usize>)> = Vec::new();
    for &class in &pool {
        let blocks: Vec<usize> = corpus
            .iter()
            .enumerate()
            .filter(|(_, b)| {
                let frac = b.label_fraction(class as i32);
                frac > 0.0 && frac >= options.min_class_fraction
            })
            .map(|(i, _)| i)
            .collect();
        eligible.push((class, blocks));
    }
    let candidates: Vec<usize> = (0..eligible.len())
        .filter(|&i| eligible[i].1.len() >= needed)
        .collect();
    if candidates.len() < n_way {
        return Err(DataError::InsufficientClasses {
            available: candidates.len(),
            requested: n_way,
        });
    }

    let mut rng = seeds::rng(&[seed, stream::EPISODE]);
    // choose n_way distinct classes by partial shuffle
    let mut order = candidates;
    for i in 0..n_way {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    order.truncate(n_way);
    let chosen: Vec<u32> = order.iter().map(|&i| eligible[i].0).collect();

    let mut used = std::collections::HashSet::new();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query_blocks: Vec<(usize, u32)> = Vec::with_capacity(n_way);
    for (slot, &class) in chosen.iter().enumerate() {
        let all = &eligible[order[slot]].1;
        let mut avail: Vec<usize> = all.iter().copied().filter(|b| !used.contains(b)).collect();
        if avail.len() < needed {
            return Err(DataError::InsufficientBlocks {
                class_id: class,
                found: avail.len(),
                needed,
                k_shot,
            });
        }
        for i in 0..needed {
            let j = rng.random_range(i..avail.len());
            avail.swap(i, j);
        }
        for (shot, &block_id) in avail[..k_shot].iter().enumerate() {
            used.insert(block_id);
            let cloud = prepared_cloud(corpus, block_id, class, options, seed, &mut rng)?;
            let mask = BinaryMask::for_class(&cloud, class);
            support.push(SupportEntry {
                class_id: class,
                shot,
                block_id,
                cloud,
                mask,
            });
        }
        let qb = avail[k_shot];
        used.insert(qb);
        query_blocks.push((qb, class));
    }

    let mut query = Vec::with_capacity(n_way);
    for &(block_id, class) in &query_blocks {
        let cloud = prepared_cloud(corpus, block_id, class, options, seed, &mut rng)?;
        let truth = cloud.labels.mapv(|l| {
            chosen
                .iter()
                .position(|&c| c as i32 == l)
                .map(|i| (i + 1) as i32)
                .unwrap_or(0)
        });
        query.push(QueryEntry {
            block_id,
            cloud,
            truth,
        });
    }

    Ok(Episode {
        n_way,
        k_shot,
        support,
        query,
        class_remap: chosen,
    })
}

fn prepared_cloud(
    corpus: &[LabeledPointCloud],
    block_id: usize,
    class: u32,
    options: &EpisodeOptions,
    seed: u64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<LabeledPointCloud, DataError> {
    match options.episode_points {
        None => Ok(corpus[block_id].clone()),
        Some(t) => {
            let sub = rng.random_range(0..u64::MAX);
            resample_keeping(&corpus[block_id], t, class, seeds::mix(&[seed, sub]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GeneratorConfig};

    fn tiny_cloud(n: usize, label: i32) -> LabeledPointCloud {
        let coords = Array2::from_shape_fn((n, 3), |(r, c)| (r * 3 + c) as f32 * 0.1);
        let extras = Array2::from_shape_fn((n, 3), |(r, c)| ((r + c) % 7) as f32 * 0.1);
        let labels = Array1::from_elem(n, label);
        LabeledPointCloud::new(coords, extras, labels)
    }

    fn test_corpus(blocks: usize, t: usize) -> (Vec<LabeledPointCloud>, usize) {
        let mut cfg = GeneratorConfig::default_indoor();
        cfg.density_scale = 0.15;
        cfg.background_points = [150, 250];
        cfg.min_points_per_instance = 200;
        let corpus: Vec<LabeledPointCloud> = (0..blocks)
            .map(|b| {
                let scene = generate_scene(seeds::mix(&[11, b as u64]), &cfg).unwrap();
                sample_block(&scene, t, seeds::mix(&[12, b as u64])).unwrap()
            })
            .collect();
        (corpus, cfg.num_classes())
    }

    #[test]
    fn sampling_all_points_is_a_permutation() {
        let cloud = tiny_cloud(5, 1);
        let out = sample_block(&cloud, 5, 9).unwrap();
        let mut rows: Vec<Vec<i32>> = (0..5)
            .map(|r| {
                out.coords
                    .row(r)
                    .iter()
                    .map(|&v| (v * 10.0).round() as i32)
                    .collect()
            })
            .collect();
        rows.sort();
        let mut expect: Vec<Vec<i32>> = (0..5)
            .map(|r| {
                cloud
                    .coords
                    .row(r)
                    .iter()
                    .map(|&v| (v * 10.0).round() as i32)
                    .collect()
            })
            .collect();
        expect.sort();
        assert_eq!(rows, expect);
    }

    #[test]
    fn without_replacement_yields_unique_sources() {
        let cloud = tiny_cloud(4096, 1);
        let out = sample_block(&cloud, 2048, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for r in 0..out.len() {
            let key = (
                (out.coords[[r, 0]] * 1000.0).round() as i64,
                (out.coords[[r, 1]] * 1000.0).round() as i64,
                (out.coords[[r, 2]] * 1000.0).round() as i64,
            );
            assert!(seen.insert(key), "duplicate source row in sample");
        }
    }

    #[test]
    fn empty_cloud_rejected() {
        let cloud = tiny_cloud(0, 1);
        assert!(matches!(
            sample_block(&cloud, 4, 0),
            Err(DataError::EmptyCloud)
        ));
    }

    #[test]
    fn output_length_is_exactly_t() {
        let cloud = tiny_cloud(37, 2);
        for &t in &[1usize, 5, 36, 37, 38, 100] {
            assert_eq!(sample_block(&cloud, t, 1).unwrap().len(), t);
        }
    }

    #[test]
    fn with_replacement_covers_small_clouds_like_oracle() {
        // Monte-Carlo oracle: independent simulation of uniform draws,
        // compared on the mean number of distinct source points.
        let cloud = tiny_cloud(100, 1);
        let trials = 1000;
        let mut sampler_unique = 0usize;
        for s in 0..trials {
            let out = sample_block(&cloud, 2048, s).unwrap();
            let mut seen = std::collections::HashSet::new();
            for r in 0..out.len() {
                seen.insert((out.coords[[r, 0]] * 1000.0).round() as i64);
            }
            sampler_unique += seen.len();
        }
        let mut rng = seeds::rng(&[99, 1234]);
        let mut oracle_unique = 0usize;
        for _ in 0..trials {
            let mut seen = std::collections::HashSet::new();
            for _ in 0..2048 {
                seen.insert(rng.random_range(0..100usize));
            }
            oracle_unique += seen.len();
        }
        let a = sampler_unique as f64 / trials as f64;
        let b = oracle_unique as f64 / trials as f64;
        assert!(
            (a - b).abs() < 0.05,
            "sampler coverage {a} deviates from oracle {b}"
        );
        // with t >> n, every source index should essentially always appear
        assert!(a > 99.9);
    }

    #[test]
    fn episode_counting_and_disjointness() {
        let (corpus, n_fg) = test_corpus(24, 256);
        let split = ClassSplit::two_fold(n_fg, 0);
        let ep = sample_episode(
            &corpus,
            &split,
            Phase::Train,
            2,
            1,
            5,
            &EpisodeOptions::default(),
        )
        .unwrap();
        assert_eq!(ep.support.len(), 2);
        assert_eq!(ep.query.len(), 2);
        assert_eq!(ep.class_remap.len(), 2);
        let mut blocks: Vec<usize> = ep
            .support
            .iter()
            .map(|s| s.block_id)
            .chain(ep.query.iter().map(|q| q.block_id))
            .collect();
        blocks.sort_unstable();
        blocks.dedup();
        assert_eq!(blocks.len(), 4, "support/query blocks must be disjoint");
        // support classes come from the training (seen) side
        for s in &ep.support {
            assert!(split.seen.contains(&s.class_id));
        }
        // masks mark exactly the class points
        for s in &ep.support {
            for (i, &m) in s.mask.values.iter().enumerate() {
                assert_eq!(m == 1, s.cloud.labels[i] == s.class_id as i32);
            }
            assert!(s.mask.ones_count() >= 1);
        }
    }

    #[test]
    fn query_truth_remaps_outside_classes_to_background() {
        let (corpus, n_fg) = test_corpus(24, 256);
        let split = ClassSplit::two_fold(n_fg, 0);
        let ep = sample_episode(
            &corpus,
            &split,
            Phase::Test,
            2,
            1,
            7,
            &EpisodeOptions::default(),
        )
        .unwrap();
        for q in &ep.query {
            for (i, &t) in q.truth.iter().enumerate() {
                assert!((0..=2).contains(&t));
                let orig = q.cloud.labels[i];
                if t > 0 {
                    assert_eq!(ep.class_remap[(t - 1) as usize] as i32, orig);
                } else {
                    assert!(!ep.class_remap.contains(&(orig as u32)) || orig == 0);
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_episode() {
        let (corpus, n_fg) = test_corpus(24, 256);
        let split = ClassSplit::two_fold(n_fg, 1);
        let opts = EpisodeOptions {
            episode_points: Some(128),
            ..Default::default()
        };
        let a = sample_episode(&corpus, &split, Phase::Train, 2, 2, 42, &opts).unwrap();
        let b = sample_episode(&corpus, &split, Phase::Train, 2, 2, 42, &opts).unwrap();
        assert_eq!(a.class_remap, b.class_remap);
        for (x, y) in a.support.iter().zip(&b.support) {
            assert_eq!(x.block_id, y.block_id);
            assert_eq!(x.cloud, y.cloud);
            assert_eq!(x.mask, y.mask);
        }
        for (x, y) in a.query.iter().zip(&b.query) {
            assert_eq!(x.block_id, y.block_id);
            assert_eq!(x.cloud, y.cloud);
            assert_eq!(x.truth, y.truth);
        }
    }

    #[test]
    fn insufficient_blocks_error() {
        let (corpus, n_fg) = test_corpus(3, 256);
        let split = ClassSplit::two_fold(n_fg, 0);
        // 3 blocks cannot host 5-shot support plus a disjoint query
        let err = sample_episode(
            &corpus,
            &split,
            Phase::Train,
            2,
            5,
            0,
            &EpisodeOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DataError::InsufficientClasses { .. } | DataError::InsufficientBlocks { .. }
        ));
    }
}
