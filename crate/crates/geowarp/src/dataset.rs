//! RGB-D frame sequence ingestion and preprocessing.
//!
//! Directory layout per sequence:
//! `frame-%06d.color.png`, `frame-%06d.depth.png`, `frame-%06d.pose.txt`.
//! Color files are 8-bit RGB decoded to [0, 1]. Depth files are 16-bit PNG
//! in millimeters, with 0 and 65535 as invalid-pixel sentinels. Pose files
//! hold a 4x4 row-major homogeneous matrix; a per-dataset convention flag
//! says whether that matrix is camera-to-world (common in public corpora)
//! or world-to-camera, and the loader converts to the library's
//! world-to-camera convention.
//!
//! Depth is resized with nearest-neighbor, never bilinear: blending depths
//! across object boundaries fabricates 3-D points.

use crate::error::{Error, Result};
use crate::geometry::{rigidity_residual, Intrinsics, Mat3, Pose, Quaternion, RigidTransform, Vec3};
use crate::imaging::{bilinear_sample, DepthMap, ImageBuffer, PixelMask};
use crate::loss::{FrameData, FramePair};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Raw depth values flagged invalid by the sensor encoding.
pub const DEPTH_SENTINELS: [u16; 2] = [0, u16::MAX];
/// Orthonormality residual allowed in pose files before they are rejected.
pub const POSE_RESIDUAL_TOL: f64 = 1e-3;

/// Direction of the 4x4 matrix stored in pose files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseConvention {
    CamToWorld,
    WorldToCam,
}

impl std::str::FromStr for PoseConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam_to_world" => Ok(Self::CamToWorld),
            "world_to_cam" => Ok(Self::WorldToCam),
            other => Err(Error::Parse(format!(
                "unknown pose convention '{other}' (expected cam_to_world | world_to_cam)"
            ))),
        }
    }
}

impl std::fmt::Display for PoseConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CamToWorld => "cam_to_world",
            Self::WorldToCam => "world_to_cam",
        })
    }
}

/// One ingested frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub pose_gt: Pose,
    pub frame_id: usize,
    pub source_path: String,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn codec_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Codec { path: path.to_path_buf(), message: message.into() }
}

/// Loads one frame from its three files.
pub fn load_frame(
    rgb_path: &Path,
    depth_path: &Path,
    pose_path: &Path,
    convention: PoseConvention,
) -> Result<FrameRecord> {
    let rgb = image::open(rgb_path).map_err(|e| codec_err(rgb_path, e.to_string()))?;
    let rgb = rgb.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f64> = rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
    let image = ImageBuffer { width: w, height: h, channels: 3, data };

    let depth_img = image::open(depth_path).map_err(|e| codec_err(depth_path, e.to_string()))?;
    let depth_raw = depth_img
        .as_luma16()
        .ok_or_else(|| codec_err(depth_path, "expected 16-bit grayscale depth"))?;
    if depth_raw.width() as usize != w || depth_raw.height() as usize != h {
        return Err(Error::DimensionMismatch(format!(
            "depth {}x{} vs color {w}x{h}",
            depth_raw.width(),
            depth_raw.height()
        )));
    }
    let mut depth = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for raw in depth_raw.as_raw() {
        let is_valid = !DEPTH_SENTINELS.contains(raw);
        depth.push(*raw as f64 / 1000.0);
        valid.push(is_valid);
    }
    let depth = DepthMap::new(w, h, depth, valid)?;

    let pose_text = std::fs::read_to_string(pose_path).map_err(|e| io_err(pose_path, e))?;
    let pose_gt = parse_pose_matrix(&pose_text, convention)?;

    let frame_id = frame_id_from_path(rgb_path).unwrap_or(0);
    Ok(FrameRecord {
        image,
        depth,
        pose_gt,
        frame_id,
        source_path: rgb_path.display().to_string(),
    })
}

fn frame_id_from_path(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let digits: String = name.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

/// Parses a 4x4 row-major homogeneous matrix and converts it to the
/// world-to-camera pose convention.
pub fn parse_pose_matrix(text: &str, convention: PoseConvention) -> Result<Pose> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("pose entry '{t}': {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != 16 {
        return Err(Error::InvalidPose(format!(
            "expected 16 matrix entries, found {}",
            values.len()
        )));
    }
    let bottom = &values[12..16];
    let expected = [0.0, 0.0, 0.0, 1.0];
    if bottom
        .iter()
        .zip(&expected)
        .any(|(a, b)| (a - b).abs() > 1e-6)
    {
        return Err(Error::InvalidPose(format!(
            "bottom row {bottom:?} is not [0, 0, 0, 1]"
        )));
    }
    let rotation = Mat3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
        values[10],
    );
    let translation = Vec3::new(values[3], values[7], values[11]);
    let residual = rigidity_residual(&rotation);
    if residual > POSE_RESIDUAL_TOL {
        return Err(Error::InvalidPose(format!(
            "rotation block orthonormality residual {residual:.3e} exceeds {POSE_RESIDUAL_TOL:.0e}"
        )));
    }

    // Re-orthonormalize through the quaternion and convert conventions.
    let q = Quaternion::from_rotation_matrix(&rotation)?;
    match convention {
        PoseConvention::WorldToCam => Pose::new(translation, q),
        PoseConvention::CamToWorld => {
            let w2c = RigidTransform {
                rotation: q.to_rotation_matrix(),
                translation,
            }
            .inverse();
            Pose::from_transform(&w2c)
        }
    }
}

/// Formats a pose as the on-disk 4x4 matrix under the given convention.
pub fn format_pose_matrix(pose: &Pose, convention: PoseConvention) -> String {
    let t = match convention {
        PoseConvention::WorldToCam => pose.to_transform(),
        PoseConvention::CamToWorld => pose.to_transform().inverse(),
    };
    let mut out = String::new();
    for r in 0..3 {
        let _ = writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {:.16e}",
            t.rotation[(r, 0)],
            t.rotation[(r, 1)],
            t.rotation[(r, 2)],
            t.translation[r]
        );
    }
    out.push_str("0 0 0 1\n");
    out
}

fn frame_paths(dir: &Path, frame_id: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("frame-{frame_id:06}.color.png")),
        dir.join(format!("frame-{frame_id:06}.depth.png")),
        dir.join(format!("frame-{frame_id:06}.pose.txt")),
    )
}

/// Writes one frame in the dataset layout. Intensities are quantized to
/// 8 bits, depths to integer millimeters (invalid pixels become the 0
/// sentinel), the pose to a 4x4 text matrix under the given convention.
pub fn export_frame(
    dir: &Path,
    frame_id: usize,
    image: &ImageBuffer,
    depth: &DepthMap,
    pose: &Pose,
    convention: PoseConvention,
) -> Result<()> {
    let (rgb_path, depth_path, pose_path) = frame_paths(dir, frame_id);
    let (w, h) = (image.width as u32, image.height as u32);

    let mut rgb = Vec::with_capacity((w * h * 3) as usize);
    match image.channels {
        3 => {
            for v in &image.data {
                rgb.push((v * 255.0).round() as u8);
            }
        }
        _ => {
            for v in &image.data {
                let byte = (v * 255.0).round() as u8;
                rgb.extend_from_slice(&[byte, byte, byte]);
            }
        }
    }
    let rgb_img: image::RgbImage =
        image::ImageBuffer::from_raw(w, h, rgb).expect("buffer sized above");
    rgb_img.save(&rgb_path).map_err(|e| codec_err(&rgb_path, e.to_string()))?;

    let mut raw = Vec::with_capacity((w * h) as usize);
    for i in 0..depth.depth.len() {
        if depth.valid[i] {
            let mm = (depth.depth[i] * 1000.0).round();
            raw.push(mm.clamp(1.0, (u16::MAX - 1) as f64) as u16);
        } else {
            raw.push(0);
        }
    }
    let depth_img: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(w, h, raw).expect("buffer sized above");
    depth_img.save(&depth_path).map_err(|e| codec_err(&depth_path, e.to_string()))?;

    std::fs::write(&pose_path, format_pose_matrix(pose, convention))
        .map_err(|e| io_err(&pose_path, e))?;
    Ok(())
}

/// Loads every `frame-%06d` triple in a directory, ordered by frame id.
pub fn load_sequence(dir: &Path, convention: PoseConvention) -> Result<Vec<FrameRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("frame-") {
            if let Some(digits) = rest.strip_suffix(".color.png") {
                if let Ok(id) = digits.parse::<usize>() {
                    ids.push(id);
                }
            }
        }
    }
    ids.sort_unstable();
    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let (rgb, depth, pose) = frame_paths(dir, id);
        if !depth.exists() {
            return Err(io_err(
                &depth,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing depth file"),
            ));
        }
        let mut record = load_frame(&rgb, &depth, &pose, convention)?;
        record.frame_id = id;
        frames.push(record);
    }
    Ok(frames)
}

/// Sidecar file carrying the sequence's pinhole parameters.
pub fn save_intrinsics(dir: &Path, k: &Intrinsics) -> Result<()> {
    let path = dir.join("intrinsics.txt");
    let text = format!(
        "{:.16e} {:.16e} {:.16e} {:.16e} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    );
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn load_intrinsics(dir: &Path) -> Result<Intrinsics> {
    let path = dir.join("intrinsics.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 6 {
        return Err(Error::Parse(format!(
            "{}: expected 6 intrinsics fields, found {}",
            path.display(),
            parts.len()
        )));
    }
    let num =
        |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("intrinsics '{s}': {e}")));
    let dim =
        |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("intrinsics '{s}': {e}")));
    Intrinsics::new(
        num(parts[0])?,
        num(parts[1])?,
        num(parts[2])?,
        num(parts[3])?,
        dim(parts[4])?,
        dim(parts[5])?,
    )
}

/// Downsamples a frame to the target size and rescales the intrinsics with
/// the pixel-center convention `fx' = fx·s`, `cx' = (cx + 0.5)·s − 0.5`.
///
/// Images are bilinear-downsampled, depth nearest-neighbor. Upsampling is
/// refused: there are no super-resolution semantics here.
pub fn resize_frame(
    frame: &FrameRecord,
    k: &Intrinsics,
    target_w: usize,
    target_h: usize,
) -> Result<(FrameRecord, Intrinsics)> {
    let (w, h) = (frame.image.width, frame.image.height);
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidInput("target dimensions must be positive".into()));
    }
    if target_w > w || target_h > h {
        return Err(Error::InvalidInput(format!(
            "refusing to upsample {w}x{h} to {target_w}x{target_h}"
        )));
    }
    let sx = target_w as f64 / w as f64;
    let sy = target_h as f64 / h as f64;

    let c = frame.image.channels;
    let mut data = Vec::with_capacity(target_w * target_h * c);
    for y in 0..target_h {
        for x in 0..target_w {
            // Source position of this target pixel center, clamped so the
            // sample support stays inside the image.
            let su = ((x as f64 + 0.5) / sx - 0.5).clamp(0.0, (w - 1) as f64);
            let sv = ((y as f64 + 0.5) / sy - 0.5).clamp(0.0, (h - 1) as f64);
            let s = bilinear_sample(&frame.image, su, sv).expect("clamped in bounds");
            for ch in 0..c {
                data.push(s.value[ch].clamp(0.0, 1.0));
            }
        }
    }
    let image = ImageBuffer { width: target_w, height: target_h, channels: c, data };

    let mut depth = Vec::with_capacity(target_w * target_h);
    let mut valid = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        for x in 0..target_w {
            let su = (((x as f64 + 0.5) / sx - 0.5).round() as isize).clamp(0, w as isize - 1);
            let sv = (((y as f64 + 0.5) / sy - 0.5).round() as isize).clamp(0, h as isize - 1);
            let idx = sv as usize * w + su as usize;
            depth.push(frame.depth.depth[idx]);
            valid.push(frame.depth.valid[idx]);
        }
    }
    let depth = DepthMap::new(target_w, target_h, depth, valid)?;

    let resized = FrameRecord {
        image,
        depth,
        pose_gt: frame.pose_gt,
        frame_id: frame.frame_id,
        source_path: frame.source_path.clone(),
    };
    let k_out = Intrinsics::new(
        k.fx * sx,
        k.fy * sy,
        (k.cx + 0.5) * sx - 0.5,
        (k.cy + 0.5) * sy - 0.5,
        target_w,
        target_h,
    )?;
    Ok((resized, k_out))
}

/// Invalidates exactly `round(remove_fraction · valid_count)` valid pixels,
/// chosen by a seeded uniform shuffle. Surviving depth values are untouched,
/// so sparsity levels are deterministic and testable.
pub fn sparsify_depth(d: &DepthMap, remove_fraction: f64, seed: u64) -> DepthMap {
    assert!(
        (0.0..=1.0).contains(&remove_fraction),
        "remove_fraction must lie in [0, 1], got {remove_fraction}"
    );
    let mut out = d.clone();
    let mut valid_indices: Vec<usize> =
        (0..d.valid.len()).filter(|i| d.valid[*i]).collect();
    let remove = (remove_fraction * valid_indices.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    valid_indices.shuffle(&mut rng);
    for &i in valid_indices.iter().take(remove) {
        out.valid[i] = false;
    }
    out
}

/// Invalidates pixels at or beyond the depth cutoff.
pub fn range_filter(d: &DepthMap, max_depth: f64) -> DepthMap {
    assert!(max_depth > 0.0, "max_depth must be positive, got {max_depth}");
    let mut out = d.clone();
    for i in 0..out.valid.len() {
        if out.valid[i] && out.depth[i] >= max_depth {
            out.valid[i] = false;
        }
    }
    out
}

/// Builds consecutive pairs `(i, i + stride)`; depth rides on the earlier
/// frame only, which is all the warp consumes. Sequences shorter than
/// `stride + 1` yield an empty list.
pub fn pair_frames(seq: &[FrameRecord], stride: usize, k: &Intrinsics) -> Vec<FramePair> {
    assert!(stride >= 1, "stride must be at least 1");
    if seq.len() <= stride {
        return Vec::new();
    }
    (0..seq.len() - stride)
        .map(|i| {
            let prev = &seq[i];
            let curr = &seq[i + stride];
            FramePair {
                prev: FrameData {
                    image: prev.image.clone(),
                    depth: Some(prev.depth.clone()),
                    pose_gt: prev.pose_gt,
                },
                curr: FrameData {
                    image: curr.image.clone(),
                    depth: None,
                    pose_gt: curr.pose_gt,
                },
                intrinsics: *k,
                ext_mask: None,
            }
        })
        .collect()
}

/// Reuses [`PixelMask`] as a moving-object style keep mask loaded from an
/// 8-bit grayscale PNG: zero pixels are discarded.
pub fn load_mask(path: &Path) -> Result<PixelMask> {
    let img = image::open(path).map_err(|e| codec_err(path, e.to_string()))?;
    let gray = img.to_luma8();
    let keep = gray.as_raw().iter().map(|v| *v != 0).collect();
    PixelMask::new(gray.width() as usize, gray.height() as usize, keep)
}
