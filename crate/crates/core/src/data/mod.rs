//! Episodic few-shot data: labeled point clouds, binary masks, N-way K-shot
//! episodes, class splits, and the synthetic corpus that backs them.

mod corpus;
mod generator;
mod sampler;

pub use corpus::{build_corpus, read_corpus, write_corpus, CorpusManifest};
pub use generator::{
    generate_scene, plan_scene, ClassSpec, GeneratorConfig, PlacedPrimitive, PrimitiveKind,
    SceneLayout,
};
pub use sampler::{sample_block, sample_episode, EpisodeOptions, Phase};

use ndarray::{Array1, Array2};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty input cloud")]
    EmptyCloud,
    #[error("generator config declares {got} foreground classes, at least {needed} required")]
    TooFewClasses { got: usize, needed: usize },
    #[error("primitive class '{class}' cannot fit the scene extent")]
    PrimitiveTooLarge { class: String },
    #[error("invalid generator config: {0}")]
    BadGeneratorConfig(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i32, num_classes: usize },
    #[error(
        "class {class_id} has only {found} eligible blocks, {needed} needed for a {k_shot}-shot episode"
    )]
    InsufficientBlocks {
        class_id: u32,
        found: usize,
        needed: usize,
        k_shot: usize,
    },
    #[error("only {available} classes are eligible in this phase, {requested}-way requested")]
    InsufficientClasses { available: usize, requested: usize },
    #[error("query count {queries} does not match n_way {n_way}")]
    QueryCountMismatch { queries: usize, n_way: usize },
    #[error("corpus integrity: {0}")]
    CorpusIntegrity(String),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
}

/// A point cloud with per-point labels. Label 0 is reserved for
/// background/clutter; foreground classes are 1-based corpus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub coords: Array2<f32>,
    pub extras: Array2<f32>,
    pub labels: Array1<i32>,
}

impl LabeledPointCloud {
    pub fn new(coords: Array2<f32>, extras: Array2<f32>, labels: Array1<i32>) -> Self {
        assert_eq!(coords.nrows(), extras.nrows(), "coords/extras length differ");
        assert_eq!(coords.nrows(), labels.len(), "coords/labels length differ");
        assert_eq!(coords.ncols(), 3, "coords must be T x 3");
        Self {
            coords,
            extras,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extra_dim(&self) -> usize {
        self.extras.ncols()
    }

    /// Check all labels against the class count declared by the manifest
    /// (foreground classes + background).
    pub fn validate_labels(&self, num_classes: usize) -> Result<(), DataError> {
        for &l in self.labels.iter() {
            if l < 0 || l as usize >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    label: l,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    /// Fraction of points carrying the given label.
    pub fn label_fraction(&self, label: i32) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.labels.iter().filter(|&&l| l == label).count();
        hits as f64 / self.len() as f64
    }
}

/// Per-point 0/1 mask paired with a cloud of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Array1<u8>,
}

impl BinaryMask {
    pub fn new(values: Array1<u8>) -> Self {
        assert!(values.iter().all(|&v| v <= 1), "mask entries must be 0/1");
        Self { values }
    }

    /// Mask marking the points of `class_id` in `cloud`.
    pub fn for_class(cloud: &LabeledPointCloud, class_id: u32) -> Self {
        Self {
            values: cloud
                .labels
                .mapv(|l| if l == class_id as i32 { 1u8 } else { 0u8 }),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ones_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// Disjoint seen/unseen foreground class partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub seen: BTreeSet<u32>,
    pub unseen: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn new(seen: BTreeSet<u32>, unseen: BTreeSet<u32>) -> Self {
        assert!(
            seen.is_disjoint(&unseen),
            "seen and unseen class sets overlap"
        );
        Self { seen, unseen }
    }

    /// Two-fold split over foreground ids `1..=n`: alternate ids between the
    /// folds, `fold` selecting which half is tested (unseen).
    pub fn two_fold(n_foreground: usize, fold: u8) -> Self {
        let mut a = BTreeSet::new();
        let mut b = BTreeSet::new();
        for (i, id) in (1..=n_foreground as u32).enumerate() {
            if i % 2 == 0 {
                a.insert(id);
            } else {
                b.insert(id);
            }
        }
        match fold {
            0 => Self::new(b, a),
            _ => Self::new(a, b),
        }
    }
}

/// One support entry: a cloud with the binary mask of its assigned class.
#[derive(Debug, Clone)]
pub struct SupportEntry {
    /// Original corpus class id.
    pub class_id: u32,
    /// Shot index within the class, `0..k_shot`.
    pub shot: usize,
    /// Corpus block the cloud came from.
    pub block_id: usize,
    pub cloud: LabeledPointCloud,
    pub mask: BinaryMask,
}

/// One query entry with episode-local ground truth in `{0..N}`.
#[derive(Debug, Clone)]
pub struct QueryEntry {
    pub block_id: usize,
    pub cloud: LabeledPointCloud,
    pub truth: Array1<i32>,
}

/// An N-way K-shot task: the unit of meta-training and meta-testing.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<SupportEntry>,
    pub query: Vec<QueryEntry>,
    /// `class_remap[i]` is the original corpus id of episode-local class `i+1`.
    pub class_remap: Vec<u32>,
}

impl Episode {
    /// Episode-local id (1-based) of an original corpus class, if present.
    pub fn local_id(&self, original: u32) -> Option<usize> {
        self.class_remap.iter().position(|&c| c == original).map(|i| i + 1)
    }

    /// Support entries for episode-local class `local` (1-based), ordered by shot.
    pub fn support_for(&self, local: usize) -> Vec<&SupportEntry> {
        let original = self.class_remap[local - 1];
        let mut entries: Vec<&SupportEntry> = self
            .support
            .iter()
            .filter(|e| e.class_id == original)
            .collect();
        entries.sort_by_key(|e| e.shot);
        entries
    }
}
