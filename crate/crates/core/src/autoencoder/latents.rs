//! Latent code files (`DLAT1`): magic, u32 T, u32 D, `T·D` f32 LE values,
//! then the 32-byte skeleton layout hash.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::PoseAutoencoder;
use super::{LatentLayout, LatentSequence};
use crate::corpus::{read_f32_matrix_file, write_f32_matrix_file};
use crate::error::{Error, Result};
use crate::skeleton::PoseSequence;

pub const LATENT_MAGIC: &[u8; 5] = b"DLAT1";
const LATENT_INDEX: &str = "latents.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct LatentEntry {
    pub id: String,
    pub latents: LatentSequence,
}

/// Per-sample latent codes extracted under one skeleton layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub layout_hash: String,
    pub entries: Vec<LatentEntry>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &LatentSequence> {
        self.entries.iter().map(|e| &e.latents)
    }

    pub fn get(&self, id: &str) -> Option<&LatentSequence> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.latents)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: String,
    latent_file: String,
    length: usize,
}

fn hash_bytes(hash_hex: &str) -> Result<Vec<u8>> {
    let bytes = hex::decode(hash_hex)
        .map_err(|e| Error::InvalidArgument(format!("layout hash is not hex: {e}")))?;
    if bytes.len() != 32 {
        return Err(Error::InvalidArgument("layout hash must be 32 bytes".into()));
    }
    Ok(bytes)
}

pub fn write_latent_file(path: &Path, lat: &LatentSequence, layout_hash: &str) -> Result<()> {
    let (t, d) = lat.codes.dim();
    write_f32_matrix_file(
        path,
        LATENT_MAGIC,
        &[t, d],
        lat.codes.iter().copied(),
        &hash_bytes(layout_hash)?,
    )
}

/// Reads a latent file and returns it with its stored layout hash (hex).
pub fn read_latent_file(path: &Path, layout: LatentLayout) -> Result<(LatentSequence, String)> {
    let (dims, values, trailer) = read_f32_matrix_file(path, LATENT_MAGIC, 2, 32)?;
    if dims[1] != layout.total() {
        return Err(Error::format(
            path,
            9,
            format!("latent width {} != {}", dims[1], layout.total()),
        ));
    }
    let codes = Array2::from_shape_vec((dims[0], dims[1]), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((LatentSequence::new(codes, layout)?, hex::encode(trailer)))
}

/// Encodes every `(id, normalized pose)` pair.
pub fn extract_latents(model: &PoseAutoencoder, items: &[(String, PoseSequence)]) -> Result<LatentDataset> {
    let entries = items
        .iter()
        .map(|(id, pose)| {
            Ok(LatentEntry {
                id: id.clone(),
                latents: model.encode(pose)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentDataset {
        layout_hash: model.layout().layout_hash().to_string(),
        entries,
    })
}

pub fn save_latent_dataset(ds: &LatentDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for (i, e) in ds.entries.iter().enumerate() {
        let file = format!("{i:06}.lat");
        write_latent_file(&dir.join(&file), &e.latents, &ds.layout_hash)?;
        serde_json::to_writer(
            &mut index,
            &IndexLine {
                id: e.id.clone(),
                latent_file: file,
                length: e.latents.len(),
            },
        )?;
        index.push(b'\n');
    }
    let path = dir.join(LATENT_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Loads a latent directory, refusing files written under another layout.
pub fn load_latent_dataset(dir: &Path, layout: LatentLayout, layout_hash: &str) -> Result<LatentDataset> {
    let path = dir.join(LATENT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let item: IndexLine = serde_json::from_str(line.trim())
                .map_err(|e| Error::format(&path, offset, e.to_string()))?;
            let (latents, found) = read_latent_file(&dir.join(&item.latent_file), layout)?;
            if found != layout_hash {
                return Err(Error::HashMismatch {
                    expected: layout_hash.to_string(),
                    found,
                });
            }
            entries.push(LatentEntry {
                id: item.id,
                latents,
            });
        }
        offset += line.len() as u64;
    }
    Ok(LatentDataset {
        layout_hash: layout_hash.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonLayout;

    fn dataset() -> LatentDataset {
        let layout = LatentLayout::default();
        let codes = Array2::from_shape_fn((4, 80), |(t, c)| (t * 80 + c) as f32 as f64 * 0.01);
        LatentDataset {
            layout_hash: SkeletonLayout::default().layout_hash().to_string(),
            entries: vec![LatentEntry {
                id: "a".into(),
                latents: LatentSequence::new(codes, layout).unwrap(),
            }],
        }
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = dataset();
        for v in ds.entries[0].latents.codes.iter_mut() {
            *v = *v as f32 as f64;
        }
        save_latent_dataset(&ds, dir.path()).unwrap();
        let back = load_latent_dataset(dir.path(), LatentLayout::default(), &ds.layout_hash).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn foreign_hash_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        save_latent_dataset(&ds, dir.path()).unwrap();
        let other = "00".repeat(32);
        assert!(matches!(
            load_latent_dataset(dir.path(), LatentLayout::default(), &other),
            Err(Error::HashMismatch { .. })
        ));
    }
}
