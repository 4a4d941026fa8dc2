//! Corpus samples and their on-disk formats.
//!
//! A split directory holds `index.jsonl`, a `layout.json` describing the
//! skeleton layout the poses were written under, and the binary pose
//! (`DPSE1`) and embedding (`DEMB1`) payload files referenced by the index.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{LayoutConfig, PoseSequence, SkeletonLayout, COORDS, TOTAL_JOINTS};

pub const EMBED_DIM: usize = 768;
pub const POSE_MAGIC: &[u8; 5] = b"DPSE1";
pub const EMB_MAGIC: &[u8; 5] = b"DEMB1";
pub const INDEX_FILE: &str = "index.jsonl";
pub const LAYOUT_FILE: &str = "layout.json";

/// One text/pose pair with its precomputed token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    pub tokens: Vec<String>,
    /// `L × 768`, one row per token.
    pub embedding: Array2<f64>,
    pub pose: PoseSequence,
}

impl CorpusSample {
    pub fn validate(&self) -> Result<()> {
        let (rows, dim) = self.embedding.dim();
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {} has no tokens",
                self.id
            )));
        }
        if rows != self.tokens.len() || dim != EMBED_DIM {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: embedding is {rows}x{dim}, expected {}x{EMBED_DIM}",
                self.id,
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_file: Option<String>,
    pub emb_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

fn write_f32_payload(buf: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader {
            path,
            bytes,
            offset: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.offset as u64, msg)
    }

    fn magic(&mut self, magic: &[u8]) -> Result<()> {
        let end = self.offset + magic.len();
        if self.bytes.len() < end || &self.bytes[self.offset..end] != magic {
            return Err(self.err(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.offset = end;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        if self.bytes.len() < end {
            return Err(self.err("truncated header"));
        }
        let v = u32::from_le_bytes(self.bytes[self.offset..end].try_into().expect("4 bytes"));
        self.offset = end;
        Ok(v)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 4;
        let available = self.bytes.len() - self.offset;
        if available < need {
            return Err(self.err(format!(
                "truncated payload: need {need} bytes, {available} available"
            )));
        }
        let out = self.bytes[self.offset..self.offset + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        self.offset += need;
        Ok(out)
    }

    fn raw(&mut self, count: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < count {
            return Err(self.err(format!("truncated: need {count} more bytes")));
        }
        let out = &self.bytes[self.offset..self.offset + count];
        self.offset += count;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(self.err(format!(
                "{} trailing bytes",
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

/// Shared reader for the small fixed-header binary formats (`DPSE1`, `DEMB1`, `DLAT1`).
pub(crate) fn read_f32_matrix_file(
    path: &Path,
    magic: &[u8],
    header_dims: usize,
    trailer_len: usize,
) -> Result<(Vec<usize>, Vec<f64>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &bytes);
    r.magic(magic)?;
    let mut dims = Vec::with_capacity(header_dims);
    for _ in 0..header_dims {
        dims.push(r.u32()? as usize);
    }
    let count = dims.iter().product();
    let values = r.f32s(count)?;
    let trailer = r.raw(trailer_len)?.to_vec();
    r.finish()?;
    Ok((dims, values, trailer))
}

pub(crate) fn write_f32_matrix_file(
    path: &Path,
    magic: &[u8],
    dims: &[usize],
    values: impl Iterator<Item = f64>,
    trailer: &[u8],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    for d in dims {
        let d = u32::try_from(*d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    write_f32_payload(&mut buf, values);
    buf.extend_from_slice(trailer);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pose_file(path: &Path, pose: &PoseSequence) -> Result<()> {
    write_f32_matrix_file(
        path,
        POSE_MAGIC,
        &[pose.len(), TOTAL_JOINTS, COORDS],
        pose.frames().iter().copied(),
        &[],
    )
}

pub fn read_pose_file(path: &Path) -> Result<PoseSequence> {
    let (dims, values, _) = read_f32_matrix_file(path, POSE_MAGIC, 3, 0)?;
    if dims[1] != TOTAL_JOINTS || dims[2] != COORDS {
        return Err(Error::format(
            path,
            9,
            format!(
                "pose header declares K={} C={}, expected {TOTAL_JOINTS}x{COORDS}",
                dims[1], dims[2]
            ),
        ));
    }
    if dims[0] == 0 {
        return Err(Error::format(path, 5, "pose file has zero frames"));
    }
    let frames = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    PoseSequence::new(frames)
}

pub fn write_embedding_file(path: &Path, emb: &Array2<f64>) -> Result<()> {
    let (l, d) = emb.dim();
    write_f32_matrix_file(path, EMB_MAGIC, &[l, d], emb.iter().copied(), &[])
}

pub fn read_embedding_file(path: &Path) -> Result<Array2<f64>> {
    let (dims, values, _) = read_f32_matrix_file(path, EMB_MAGIC, 2, 0)?;
    if dims[1] != EMBED_DIM {
        return Err(Error::format(
            path,
            9,
            format!("embedding dimension {} != {EMBED_DIM}", dims[1]),
        ));
    }
    Array2::from_shape_vec((dims[0], dims[1]), values)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let entry: IndexEntry = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, offset, e.to_string()))?;
            entries.push(entry);
        }
        offset += len;
    }
    Ok(entries)
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_layout_file(dir: &Path) -> Result<Option<SkeletonLayout>> {
    let path = dir.join(LAYOUT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: LayoutConfig = serde_json::from_str(&text)?;
    SkeletonLayout::from_config(cfg).map(Some)
}

/// Loads one split directory.
///
/// Rejects sequences longer than `t_max`, and layouts whose hash differs from
/// `layout` when the directory carries a `layout.json`.
pub fn load_corpus(dir: &Path, layout: &SkeletonLayout, t_max: usize) -> Result<Vec<CorpusSample>> {
    if let Some(found) = read_layout_file(dir)? {
        layout.check_hash(found.layout_hash())?;
    }
    let index_path = dir.join(INDEX_FILE);
    let entries = read_index(&index_path)?;
    let mut samples = Vec::with_capacity(entries.len());
    for entry in entries {
        let pose_rel = entry.pose_file.as_deref().ok_or_else(|| {
            Error::format(&index_path, 0, format!("sample {} has no pose_file", entry.id))
        })?;
        let pose = read_pose_file(&dir.join(pose_rel))?;
        if let Some(len) = entry.length {
            if len != pose.len() {
                return Err(Error::format(
                    dir.join(pose_rel),
                    5,
                    format!("index declares {len} frames, file holds {}", pose.len()),
                ));
            }
        }
        if pose.len() > t_max {
            return Err(Error::SequenceTooLong {
                id: entry.id,
                frames: pose.len(),
                t_max,
            });
        }
        let embedding = read_embedding_file(&dir.join(&entry.emb_file))?;
        let sample = CorpusSample {
            id: entry.id,
            tokens: entry.tokens,
            embedding,
            pose,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes one split directory. Float payloads are stored as little-endian f32.
pub fn save_corpus(samples: &[CorpusSample], dir: &Path, layout: &SkeletonLayout) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        sample.validate()?;
        let pose_file = format!("{i:06}.pose");
        let emb_file = format!("{i:06}.emb");
        write_pose_file(&dir.join(&pose_file), &sample.pose)?;
        write_embedding_file(&dir.join(&emb_file), &sample.embedding)?;
        entries.push(IndexEntry {
            id: sample.id.clone(),
            tokens: sample.tokens.clone(),
            pose_file: Some(pose_file),
            emb_file,
            length: Some(sample.pose.len()),
        });
    }
    write_index(&dir.join(INDEX_FILE), &entries)?;
    let layout_path = dir.join(LAYOUT_FILE);
    let mut f = fs::File::create(&layout_path).map_err(|e| Error::io(&layout_path, e))?;
    serde_json::to_writer_pretty(&mut f, layout.config())?;
    f.write_all(b"\n").map_err(|e| Error::io(&layout_path, e))?;
    Ok(())
}

/// Text-only input for generation: index entries whose `pose_file` may be absent.
#[derive(Clone, Debug)]
pub struct TextSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub embedding: Array2<f64>,
}

pub fn load_text_file(index_path: &Path) -> Result<Vec<TextSample>> {
    let base: PathBuf = index_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    read_index(index_path)?
        .into_iter()
        .map(|e| {
            let embedding = read_embedding_file(&base.join(&e.emb_file))?;
            if embedding.nrows() != e.tokens.len() || e.tokens.is_empty() {
                return Err(Error::ShapeMismatch(format!(
                    "sample {}: {} embedding rows for {} tokens",
                    e.id,
                    embedding.nrows(),
                    e.tokens.len()
                )));
            }
            Ok(TextSample {
                id: e.id,
                tokens: e.tokens,
                embedding,
            })
        })
        .collect()
}

impl From<&CorpusSample> for TextSample {
    fn from(s: &CorpusSample) -> Self {
        TextSample {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            embedding: s.embedding.clone(),
        }
    }
}
