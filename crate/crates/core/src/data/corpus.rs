//! Corpus construction and the on-disk corpus container.

use super::{sample_block, generate_scene, DataError, GeneratorConfig, LabeledPointCloud};
use crate::container::{
    read_container, write_container, ArrayData, NamedArray, CORPUS_MAGIC,
};
use crate::seeds;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Corpus-level bookkeeping stored in the container header. Class ids are
/// 1-based over `class_names`; 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub class_names: Vec<String>,
    pub blocks: usize,
    pub points_per_block: usize,
    pub extra_dim: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl CorpusManifest {
    /// Foreground classes plus background.
    pub fn num_classes(&self) -> usize {
        self.class_names.len() + 1
    }

    pub fn foreground_ids(&self) -> Vec<u32> {
        (1..=self.class_names.len() as u32).collect()
    }

    pub fn class_name(&self, id: u32) -> &str {
        if id == 0 {
            "background"
        } else {
            &self.class_names[(id - 1) as usize]
        }
    }
}

/// Generate `blocks` scenes and down-sample each to `points_per_block`.
pub fn build_corpus(
    blocks: usize,
    points_per_block: usize,
    seed: u64,
    generator: &GeneratorConfig,
) -> Result<(CorpusManifest, Vec<LabeledPointCloud>), DataError> {
    generator.validate()?;
    let mut clouds = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let scene = generate_scene(seeds::mix(&[seed, 0xa11ce, b as u64]), generator)?;
        let block = sample_block(
            &scene,
            points_per_block,
            seeds::mix(&[seed, 0xb10c4, b as u64]),
        )?;
        clouds.push(block);
    }
    let manifest = CorpusManifest {
        class_names: generator.class_names(),
        blocks,
        points_per_block,
        extra_dim: generator.extra_dim,
        seed,
        generator: generator.clone(),
    };
    Ok((manifest, clouds))
}

/// Write a corpus to the container format (f32 coords/extras, i32 labels).
pub fn write_corpus(
    path: &Path,
    manifest: &CorpusManifest,
    clouds: &[LabeledPointCloud],
) -> Result<(), DataError> {
    assert_eq!(manifest.blocks, clouds.len(), "manifest block count mismatch");
    let mut arrays = Vec::with_capacity(clouds.len() * 3);
    for (i, cloud) in clouds.iter().enumerate() {
        arrays.push(NamedArray::new(
            format!("block_{i}/coords"),
            vec![cloud.len(), 3],
            ArrayData::F32(cloud.coords.iter().copied().collect()),
        ));
        arrays.push(NamedArray::new(
            format!("block_{i}/extras"),
            vec![cloud.len(), cloud.extra_dim()],
            ArrayData::F32(cloud.extras.iter().copied().collect()),
        ));
        arrays.push(NamedArray::new(
            format!("block_{i}/labels"),
            vec![cloud.len()],
            ArrayData::I32(cloud.labels.iter().copied().collect()),
        ));
    }
    write_container(path, &CORPUS_MAGIC, manifest, &arrays)?;
    Ok(())
}

/// Read a corpus back; validates structure and label ranges before returning.
pub fn read_corpus(path: &Path) -> Result<(CorpusManifest, Vec<LabeledPointCloud>), DataError> {
    let (manifest, arrays): (CorpusManifest, Vec<NamedArray>) =
        read_container(path, &CORPUS_MAGIC)?;
    let mut by_name: std::collections::HashMap<String, NamedArray> =
        arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
    let mut clouds = Vec::with_capacity(manifest.blocks);
    for i in 0..manifest.blocks {
        let coords = take_f32(&mut by_name, &format!("block_{i}/coords"))?;
        let extras = take_f32(&mut by_name, &format!("block_{i}/extras"))?;
        let labels = take_i32(&mut by_name, &format!("block_{i}/labels"))?;
        let t = labels.len();
        let coords = Array2::from_shape_vec((t, 3), coords)
            .map_err(|e| DataError::CorpusIntegrity(format!("block {i} coords: {e}")))?;
        let extras = Array2::from_shape_vec((t, manifest.extra_dim), extras)
            .map_err(|e| DataError::CorpusIntegrity(format!("block {i} extras: {e}")))?;
        let labels = Array1::from_vec(labels);
        let cloud = LabeledPointCloud::new(coords, extras, labels);
        cloud.validate_labels(manifest.num_classes())?;
        clouds.push(cloud);
    }
    Ok((manifest, clouds))
}

fn take_f32(
    map: &mut std::collections::HashMap<String, NamedArray>,
    name: &str,
) -> Result<Vec<f32>, DataError> {
    let arr = map
        .remove(name)
        .ok_or_else(|| DataError::CorpusIntegrity(format!("missing array {name}")))?;
    match arr.data {
        ArrayData::F32(v) => Ok(v),
        _ => Err(DataError::CorpusIntegrity(format!(
            "array {name} has the wrong dtype"
        ))),
    }
}

fn take_i32(
    map: &mut std::collections::HashMap<String, NamedArray>,
    name: &str,
) -> Result<Vec<i32>, DataError> {
    let arr = map
        .remove(name)
        .ok_or_else(|| DataError::CorpusIntegrity(format!("missing array {name}")))?;
    match arr.data {
        ArrayData::I32(v) => Ok(v),
        _ => Err(DataError::CorpusIntegrity(format!(
            "array {name} has the wrong dtype"
        ))),
    }
}
