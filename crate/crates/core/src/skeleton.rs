//! Skeleton layout, pose containers, per-frame normalization and region masking.
//!
//! Every pose carries 178 keypoints in a fixed region order:
//! body (8) | right hand (21) | left hand (21) | face (128).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::digest::sha256_json;
use crate::error::{Error, Result};

pub const TOTAL_JOINTS: usize = 178;
pub const COORDS: usize = 3;
/// Flattened frame width (178 × 3).
pub const FRAME_DIM: usize = TOTAL_JOINTS * COORDS;

const DEGENERATE_SHOULDER: f64 = 1e-8;

/// Articulator region. The declaration order is the storage order everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Body,
    RightHand,
    LeftHand,
    Face,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Body,
        Region::RightHand,
        Region::LeftHand,
        Region::Face,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Body => "body",
            Region::RightHand => "right_hand",
            Region::LeftHand => "left_hand",
            Region::Face => "face",
        }
    }

    pub fn joint_count(self) -> usize {
        match self {
            Region::Body => 8,
            Region::RightHand | Region::LeftHand => 21,
            Region::Face => 128,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_hand(self) -> bool {
        matches!(self, Region::RightHand | Region::LeftHand)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown region {s:?}")))
    }
}

/// One real value per region, e.g. loss weights or per-region loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionValues {
    pub body: f64,
    pub right_hand: f64,
    pub left_hand: f64,
    pub face: f64,
}

impl RegionValues {
    pub fn new(body: f64, right_hand: f64, left_hand: f64, face: f64) -> Self {
        RegionValues {
            body,
            right_hand,
            left_hand,
            face,
        }
    }

    pub fn splat(v: f64) -> Self {
        RegionValues::new(v, v, v, v)
    }

    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::Body => self.body,
            Region::RightHand => self.right_hand,
            Region::LeftHand => self.left_hand,
            Region::Face => self.face,
        }
    }

    pub fn set(&mut self, region: Region, value: f64) {
        match region {
            Region::Body => self.body = value,
            Region::RightHand => self.right_hand = value,
            Region::LeftHand => self.left_hand = value,
            Region::Face => self.face = value,
        }
    }

    pub fn sum(&self) -> f64 {
        Region::ALL.iter().map(|r| self.get(*r)).sum()
    }

    pub fn all_positive(&self) -> bool {
        Region::ALL.iter().all(|r| self.get(*r) > 0.0)
    }
}

/// Serialized form of a [`SkeletonLayout`]; this is what gets hashed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub total_joints: usize,
    /// Region name to half-open joint range `[start, end)`.
    pub regions: BTreeMap<String, [usize; 2]>,
    pub left_shoulder: usize,
    pub right_shoulder: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let mut regions = BTreeMap::new();
        let mut start = 0;
        for region in Region::ALL {
            let end = start + region.joint_count();
            regions.insert(region.name().to_string(), [start, end]);
            start = end;
        }
        // Upper-body block ordered as L/R shoulder, L/R elbow, L/R wrist, L/R hip.
        LayoutConfig {
            total_joints: TOTAL_JOINTS,
            regions,
            left_shoulder: 0,
            right_shoulder: 1,
        }
    }
}

/// Validated skeleton layout with its content digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonLayout {
    config: LayoutConfig,
    ranges: [Range<usize>; 4],
    hash: String,
}

impl Default for SkeletonLayout {
    fn default() -> Self {
        SkeletonLayout::from_config(LayoutConfig::default()).expect("default layout is valid")
    }
}

impl SkeletonLayout {
    pub fn from_config(config: LayoutConfig) -> Result<Self> {
        if config.total_joints != TOTAL_JOINTS {
            return Err(Error::LayoutMismatch(format!(
                "expected {TOTAL_JOINTS} joints, config declares {}",
                config.total_joints
            )));
        }
        if config.regions.len() != Region::ALL.len() {
            return Err(Error::LayoutMismatch(format!(
                "expected 4 regions, config declares {}",
                config.regions.len()
            )));
        }
        let mut ranges: [Range<usize>; 4] = Default::default();
        let mut cursor = 0;
        for region in Region::ALL {
            let [start, end] = *config.regions.get(region.name()).ok_or_else(|| {
                Error::LayoutMismatch(format!("region {region} missing from layout"))
            })?;
            if start != cursor || end < start || end - start != region.joint_count() {
                return Err(Error::LayoutMismatch(format!(
                    "region {region} must span {} joints starting at {cursor}, got [{start}, {end})",
                    region.joint_count()
                )));
            }
            cursor = end;
            ranges[region.index()] = start..end;
        }
        if cursor != TOTAL_JOINTS {
            return Err(Error::LayoutMismatch(format!(
                "regions cover [0, {cursor}) instead of [0, {TOTAL_JOINTS})"
            )));
        }
        let body = &ranges[Region::Body.index()];
        for (name, idx) in [
            ("left_shoulder", config.left_shoulder),
            ("right_shoulder", config.right_shoulder),
        ] {
            if !body.contains(&idx) {
                return Err(Error::LayoutMismatch(format!(
                    "{name} index {idx} lies outside the body range {body:?}"
                )));
            }
        }
        if config.left_shoulder == config.right_shoulder {
            return Err(Error::LayoutMismatch(
                "left and right shoulder share a joint index".into(),
            ));
        }
        let hash = sha256_json(&config);
        Ok(SkeletonLayout {
            config,
            ranges,
            hash,
        })
    }

    pub fn config(&self) -> &LayoutConfig {
        &self.config
    }

    /// Hex SHA-256 of the canonical JSON form of the layout.
    pub fn layout_hash(&self) -> &str {
        &self.hash
    }

    pub fn total_joints(&self) -> usize {
        TOTAL_JOINTS
    }

    pub fn joint_range(&self, region: Region) -> Range<usize> {
        self.ranges[region.index()].clone()
    }

    /// Column range of `region` in a flattened `T × 534` frame matrix.
    pub fn coord_range(&self, region: Region) -> Range<usize> {
        let r = self.joint_range(region);
        r.start * COORDS..r.end * COORDS
    }

    pub fn left_shoulder(&self) -> usize {
        self.config.left_shoulder
    }

    pub fn right_shoulder(&self) -> usize {
        self.config.right_shoulder
    }

    pub fn check_hash(&self, found: &str) -> Result<()> {
        if found != self.hash {
            return Err(Error::HashMismatch {
                expected: self.hash.clone(),
                found: found.to_string(),
            });
        }
        Ok(())
    }
}

/// A single 178 × 3 keypoint frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub coords: Array2<f64>,
}

impl PoseFrame {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.dim() != (TOTAL_JOINTS, COORDS) {
            return Err(Error::LayoutMismatch(format!(
                "frame must be {TOTAL_JOINTS}x{COORDS}, got {:?}",
                coords.dim()
            )));
        }
        Ok(PoseFrame { coords })
    }

    pub fn zeros() -> Self {
        PoseFrame {
            coords: Array2::zeros((TOTAL_JOINTS, COORDS)),
        }
    }
}

/// A `T × 178 × 3` pose sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: Array3<f64>,
    pub fps: Option<f64>,
}

impl PoseSequence {
    pub fn new(frames: Array3<f64>) -> Result<Self> {
        let (t, k, c) = frames.dim();
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        if k != TOTAL_JOINTS || c != COORDS {
            return Err(Error::LayoutMismatch(format!(
                "pose sequence must be Tx{TOTAL_JOINTS}x{COORDS}, got {t}x{k}x{c}"
            )));
        }
        Ok(PoseSequence { frames, fps: None })
    }

    /// Builds a sequence from a `T × 534` row-major matrix.
    pub fn from_flat(rows: Array2<f64>) -> Result<Self> {
        let (t, d) = rows.dim();
        if d != FRAME_DIM {
            return Err(Error::LayoutMismatch(format!(
                "flattened frames must have {FRAME_DIM} columns, got {d}"
            )));
        }
        let rows = rows.as_standard_layout().into_owned();
        let frames = rows
            .into_shape_with_order((t, TOTAL_JOINTS, COORDS))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        PoseSequence::new(frames)
    }

    pub fn from_frames(frames: &[PoseFrame]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let views: Vec<_> = frames.iter().map(|f| f.coords.view()).collect();
        let stacked = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        PoseSequence::new(stacked)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn pose_frame(&self, t: usize) -> PoseFrame {
        PoseFrame {
            coords: self.frame(t).to_owned(),
        }
    }

    /// `T × 534` view-copy of the frames, one flattened frame per row.
    pub fn to_flat(&self) -> Array2<f64> {
        let t = self.len();
        self.frames
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t, FRAME_DIM))
            .expect("contiguous reshape")
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> PoseSequence {
        PoseSequence {
            frames: self.frames.mapv(f),
            fps: self.fps,
        }
    }
}

/// Mean pose over a set of training frames; used as the masking reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalPose {
    pub coords: Array2<f64>,
}

impl CanonicalPose {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a PoseSequence>) -> Result<Self> {
        let mut sum = Array2::<f64>::zeros((TOTAL_JOINTS, COORDS));
        let mut count = 0usize;
        for seq in seqs {
            for frame in seq.frames.outer_iter() {
                sum += &frame;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyDataset { required: 1 });
        }
        let coords = sum / count as f64;
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("canonical pose".into()));
        }
        Ok(CanonicalPose { coords })
    }

    /// A sequence of `len` copies of the canonical pose.
    pub fn repeat(&self, len: usize) -> Result<PoseSequence> {
        let views: Vec<_> = (0..len).map(|_| self.coords.view()).collect();
        if views.is_empty() {
            return Err(Error::EmptySequence);
        }
        let frames =
            ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        PoseSequence::new(frames)
    }
}

/// Centers every frame on the shoulder midpoint and scales it to unit shoulder width.
pub fn normalize_pose(seq: &PoseSequence, layout: &SkeletonLayout) -> Result<PoseSequence> {
    if !seq.is_finite() {
        return Err(Error::NonFiniteInput("pose sequence".into()));
    }
    let (ls, rs) = (layout.left_shoulder(), layout.right_shoulder());
    let mut out = seq.frames.clone();
    for (t, mut frame) in out.outer_iter_mut().enumerate() {
        let left = frame.row(ls).to_owned();
        let right = frame.row(rs).to_owned();
        let distance = (&left - &right).mapv(|v| v * v).sum().sqrt();
        if !(distance >= DEGENERATE_SHOULDER) {
            return Err(Error::DegenerateFrame { frame: t, distance });
        }
        let neck = (&left + &right) * 0.5;
        for mut joint in frame.outer_iter_mut() {
            for c in 0..COORDS {
                joint[c] = (joint[c] - neck[c]) / distance;
            }
        }
    }
    Ok(PoseSequence {
        frames: out,
        fps: seq.fps,
    })
}

/// Per-region keypoint blocks of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBlocks {
    pub body: Array2<f64>,
    pub right_hand: Array2<f64>,
    pub left_hand: Array2<f64>,
    pub face: Array2<f64>,
}

impl RegionBlocks {
    pub fn get(&self, region: Region) -> &Array2<f64> {
        match region {
            Region::Body => &self.body,
            Region::RightHand => &self.right_hand,
            Region::LeftHand => &self.left_hand,
            Region::Face => &self.face,
        }
    }
}

pub fn split_regions(frame: &PoseFrame, layout: &SkeletonLayout) -> Result<RegionBlocks> {
    if frame.coords.dim() != (layout.total_joints(), COORDS) {
        return Err(Error::LayoutMismatch(format!(
            "frame shape {:?} does not match the layout",
            frame.coords.dim()
        )));
    }
    let block = |r: Region| {
        let range = layout.joint_range(r);
        frame.coords.slice(s![range, ..]).to_owned()
    };
    Ok(RegionBlocks {
        body: block(Region::Body),
        right_hand: block(Region::RightHand),
        left_hand: block(Region::LeftHand),
        face: block(Region::Face),
    })
}

pub fn merge_regions(blocks: &RegionBlocks, layout: &SkeletonLayout) -> Result<PoseFrame> {
    let mut coords = Array2::zeros((layout.total_joints(), COORDS));
    for region in Region::ALL {
        let block = blocks.get(region);
        let range = layout.joint_range(region);
        if block.dim() != (range.len(), COORDS) {
            return Err(Error::LayoutMismatch(format!(
                "{region} block is {:?}, layout expects ({}, {COORDS})",
                block.dim(),
                range.len()
            )));
        }
        coords.slice_mut(s![range, ..]).assign(block);
    }
    Ok(PoseFrame { coords })
}

/// Keeps `region` from `seq` and replaces every other keypoint with the canonical pose.
pub fn mask_to_region(
    seq: &PoseSequence,
    region: Region,
    canonical: &CanonicalPose,
    layout: &SkeletonLayout,
) -> Result<PoseSequence> {
    if canonical.coords.dim() != (layout.total_joints(), COORDS) {
        return Err(Error::LayoutMismatch(
            "canonical pose does not match the layout".into(),
        ));
    }
    let keep = layout.joint_range(region);
    let mut out = seq.frames.clone();
    for mut frame in out.outer_iter_mut() {
        for (j, mut joint) in frame.outer_iter_mut().enumerate() {
            if !keep.contains(&j) {
                joint.assign(&canonical.coords.row(j));
            }
        }
    }
    Ok(PoseSequence {
        frames: out,
        fps: seq.fps,
    })
}
