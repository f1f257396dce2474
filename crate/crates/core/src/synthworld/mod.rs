//! Procedural articulated-figure renderer.
//!
//! Scenes are capsule figures (8 limbs, 9 joints) composited over shaded
//! backgrounds. Every sample carries mutually consistent modalities by
//! construction: depth comes from per-limb camera offsets, normals from the
//! capsule cross-section geometry, and RGB is Lambertian-shaded from those
//! same normals under a fixed light. All trigonometry goes through `libm`
//! so renders are bit-reproducible across platforms.

mod dataset;

pub use dataset::{
    assign_splits, sample_seed,
    generate_dataset, load_bundle_from_row, read_manifest, DatasetError, ManifestRow,
};

use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 9;
pub const LIMB_COUNT: usize = 8;
/// Reference canvas side; `SceneParams` lengths are pixels at this size.
pub const REF_RES: f64 = 48.0;

pub const COLOR_VOCAB: usize = 6;
pub const POSE_VOCAB: usize = 8;
pub const BACKGROUND_VOCAB: usize = 4;

/// Joint order: head, neck, pelvis, l_elbow, r_elbow, l_hand, r_hand,
/// l_knee, r_knee.
pub const JOINT_NAMES: [&str; JOINT_COUNT] =
    ["head", "neck", "pelvis", "l_elbow", "r_elbow", "l_hand", "r_hand", "l_knee", "r_knee"];

/// Limb endpoints as joint indices (the head limb renders as a disc at its
/// far endpoint).
pub const LIMB_JOINTS: [(usize, usize); LIMB_COUNT] =
    [(1, 2), (1, 0), (1, 3), (3, 5), (1, 4), (4, 6), (2, 7), (2, 8)];

/// Capsule radii in pixels at `REF_RES`, per limb.
const LIMB_RADII: [f64; LIMB_COUNT] = [3.2, 3.0, 1.7, 1.5, 1.7, 1.5, 2.0, 2.0];

/// Canonical limb lengths in pixels at `REF_RES`.
const LIMB_CANON_LEN: [f64; LIMB_COUNT] = [9.0, 4.5, 5.5, 5.0, 5.5, 5.0, 8.0, 8.0];

/// Fixed per-limb camera depths; all distinct, background sits at 1.0.
pub const LIMB_DEPTHS: [f64; LIMB_COUNT] = [0.55, 0.50, 0.44, 0.38, 0.62, 0.68, 0.47, 0.59];

const DEPTH_NEAR: f64 = 0.3;
const DEPTH_BG: f64 = 1.0;

/// Directional light used for Lambertian shading (y points down);
/// normalize((0.4, -0.6, 1.0)).
pub const LIGHT_DIR: [f64; 3] =
    [0.324_442_842_261_525_1, -0.486_664_263_392_287_6, 0.811_107_105_653_812_7];

/// Background sentinel normal.
pub const SENTINEL_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

const FIGURE_ALBEDO: [[f64; 3]; COLOR_VOCAB] = [
    [0.85, 0.25, 0.25],
    [0.25, 0.80, 0.30],
    [0.25, 0.40, 0.85],
    [0.85, 0.80, 0.25],
    [0.80, 0.30, 0.80],
    [0.30, 0.80, 0.80],
];

/// Distinct hue per limb for the skeleton raster, values in [0, 1].
pub const BONE_COLORS: [[f64; 3]; LIMB_COUNT] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.3, 1.0],
    [0.6, 0.0, 1.0],
    [1.0, 0.0, 0.6],
];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("resolution {0} below minimum 16")]
    ResolutionTooSmall(usize),
    #[error("limb {limb} exceeds canvas: extent [{lo:.1}, {hi:.1}] outside [0, {res}]")]
    LimbOutOfCanvas { limb: usize, lo: f64, hi: f64, res: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    pub color_id: usize,
    pub pose_id: usize,
    pub background_id: usize,
}

impl Attrs {
    pub fn as_ids(&self) -> [usize; 3] {
        [self.color_id, self.pose_id, self.background_id]
    }

    pub fn vocab_sizes() -> [usize; 3] {
        [COLOR_VOCAB, POSE_VOCAB, BACKGROUND_VOCAB]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Spatially aligned modalities for one sample. RGB and normal are 3-channel
/// in [-1, 1], depth is single-channel in [-1, 1] (affine from normalized
/// inverse depth), keypoints are in pixels at `resolution`.
#[derive(Clone, Debug)]
pub struct ModalityBundle {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub normal: Tensor,
    pub keypoints: Vec<Keypoint>,
    pub attrs: Attrs,
    pub resolution: usize,
}

/// Scene description. Angles are radians (y-down screen convention);
/// lengths and positions are pixels at `REF_RES` and get scaled at render
/// time. Limb angle order: torso, l_upper_arm, l_forearm, r_upper_arm,
/// r_forearm, l_leg, r_leg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub pelvis: (f64, f64),
    pub joint_angles: [f64; 7],
    pub limb_lengths: [f64; LIMB_COUNT],
    pub color_id: usize,
    pub pose_id: usize,
    pub background_id: usize,
    pub depth_offsets: [f64; LIMB_COUNT],
}

/// Canonical per-pose-class angles, as (torso, l_ua, l_fa, r_ua, r_fa,
/// l_leg, r_leg) in units of pi.
const POSE_PRESETS: [[f64; 7]; POSE_VOCAB] = [
    [-0.50, 0.80, 0.65, 0.20, 0.35, 0.60, 0.40],
    [-0.50, -0.85, -0.70, -0.15, -0.30, 0.56, 0.44],
    [-0.50, 1.00, 1.00, 0.00, 0.00, 0.60, 0.40],
    [-0.46, -0.75, -0.55, 0.25, 0.40, 0.62, 0.42],
    [-0.54, 0.75, 0.55, -0.25, -0.40, 0.58, 0.38],
    [-0.50, 0.95, 0.60, 0.05, 0.40, 0.64, 0.36],
    [-0.50, 0.65, 0.50, 0.35, 0.50, 0.55, 0.45],
    [-0.50, -0.95, -0.90, -0.05, -0.10, 0.58, 0.42],
];

/// Deterministic scene draw: pose class plus bounded jitter, per-limb length
/// scales in [0.85, 1.15], fixed canonical depth ordering.
pub fn sample_scene_params(rng_seed: u64) -> SceneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5ce9_ea3e_17ab_42d7);
    let pose_id = rng.gen_range(0..POSE_VOCAB);
    let color_id = rng.gen_range(0..COLOR_VOCAB);
    let background_id = rng.gen_range(0..BACKGROUND_VOCAB);
    let preset = POSE_PRESETS[pose_id];
    let mut joint_angles = [0.0; 7];
    for (i, a) in joint_angles.iter_mut().enumerate() {
        let raw = preset[i] * core::f64::consts::PI + rng.gen_range(-0.06..0.06);
        // Wrap into [-pi, pi]; same direction modulo 2*pi.
        *a = libm::atan2(libm::sin(raw), libm::cos(raw));
    }
    let mut limb_lengths = [0.0; LIMB_COUNT];
    for (i, l) in limb_lengths.iter_mut().enumerate() {
        *l = LIMB_CANON_LEN[i] * rng.gen_range(0.85..1.15);
    }
    let pelvis = (
        REF_RES * 0.5 + rng.gen_range(-1.5..1.5),
        REF_RES * 0.625 + rng.gen_range(-1.5..1.5),
    );
    SceneParams {
        pelvis,
        joint_angles,
        limb_lengths,
        color_id,
        pose_id,
        background_id,
        depth_offsets: LIMB_DEPTHS,
    }
}

/// Joint positions in pixels at resolution `res`, in `JOINT_NAMES` order.
pub fn joint_positions(p: &SceneParams, res: usize) -> [(f64, f64); JOINT_COUNT] {
    let s = res as f64 / REF_RES;
    let dir = |a: f64| (libm::cos(a), libm::sin(a));
    let (px, py) = (p.pelvis.0 * s, p.pelvis.1 * s);
    let [a_torso, a_lua, a_lfa, a_rua, a_rfa, a_lleg, a_rleg] = p.joint_angles;
    let l = |i: usize| p.limb_lengths[i] * s;

    let (tdx, tdy) = dir(a_torso);
    let neck = (px + tdx * l(0), py + tdy * l(0));
    let head = (neck.0 + tdx * l(1), neck.1 + tdy * l(1));
    let (d, e) = dir(a_lua);
    let l_elbow = (neck.0 + d * l(2), neck.1 + e * l(2));
    let (d, e) = dir(a_lfa);
    let l_hand = (l_elbow.0 + d * l(3), l_elbow.1 + e * l(3));
    let (d, e) = dir(a_rua);
    let r_elbow = (neck.0 + d * l(4), neck.1 + e * l(4));
    let (d, e) = dir(a_rfa);
    let r_hand = (r_elbow.0 + d * l(5), r_elbow.1 + e * l(5));
    let (d, e) = dir(a_lleg);
    let l_knee = (px + d * l(6), py + e * l(6));
    let (d, e) = dir(a_rleg);
    let r_knee = (px + d * l(7), py + e * l(7));
    [head, neck, (px, py), l_elbow, r_elbow, l_hand, r_hand, l_knee, r_knee]
}

/// Effective capsule radius: the base radius scales with how far the limb's
/// length deviates from canonical, so zero-length limbs vanish entirely.
fn limb_radius(p: &SceneParams, limb: usize, res: usize) -> f64 {
    let s = res as f64 / REF_RES;
    LIMB_RADII[limb] * s * (p.limb_lengths[limb] / LIMB_CANON_LEN[limb])
}

fn limb_segment(
    joints: &[(f64, f64); JOINT_COUNT],
    limb: usize,
) -> ((f64, f64), (f64, f64)) {
    let (a, b) = LIMB_JOINTS[limb];
    // The head limb is a disc at its far endpoint.
    if limb == 1 {
        (joints[b], joints[b])
    } else {
        (joints[a], joints[b])
    }
}

/// Distance from point to segment plus the closest point.
fn point_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    let (ex, ey) = (px - cx, py - cy);
    (ex * ex + ey * ey).sqrt()
}

/// Normalized inverse depth, mapped to [-1, 1]; background (z = 1) lands on
/// exactly -1.
pub fn encode_depth(z: f64) -> f64 {
    let u = ((1.0 / z) - (1.0 / DEPTH_BG)) / ((1.0 / DEPTH_NEAR) - (1.0 / DEPTH_BG));
    2.0 * u - 1.0
}

/// Lambertian shading used by the renderer; exposed so tests can relight
/// RGB from the stored normals.
pub fn shade(normal: [f64; 3], albedo: [f64; 3]) -> [f64; 3] {
    let lam = (normal[0] * LIGHT_DIR[0] + normal[1] * LIGHT_DIR[1] + normal[2] * LIGHT_DIR[2])
        .max(0.0);
    let v = 0.30 + 0.68 * lam;
    [albedo[0] * v, albedo[1] * v, albedo[2] * v]
}

pub fn figure_albedo(color_id: usize) -> [f64; 3] {
    FIGURE_ALBEDO[color_id % COLOR_VOCAB]
}

/// Background shade in [0, 1] RGB for pixel center (x, y).
pub fn background_shade(background_id: usize, x: f64, y: f64, res: usize) -> [f64; 3] {
    let r = res as f64;
    match background_id % BACKGROUND_VOCAB {
        0 => [0.32, 0.34, 0.37],
        1 => {
            let v = 0.22 + 0.30 * (y / r);
            [v * 1.08, v, v * 0.88]
        }
        2 => {
            let v = 0.52 - 0.30 * (x / r);
            [v * 0.88, v * 0.98, v * 1.10]
        }
        _ => {
            let v = 0.23 + 0.15 * ((x + y) / r);
            [v, v * 1.06, v * 0.96]
        }
    }
}

/// Which limb covers pixel center (x, y), if any: the covering limb with the
/// smallest camera depth wins.
pub fn topmost_limb(p: &SceneParams, joints: &[(f64, f64); JOINT_COUNT], x: f64, y: f64, res: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for limb in 0..LIMB_COUNT {
        let r = limb_radius(p, limb, res);
        if r <= 0.0 {
            continue;
        }
        let (a, b) = limb_segment(joints, limb);
        if point_segment(x, y, a, b) <= r {
            let z = p.depth_offsets[limb];
            if best.map_or(true, |(_, bz)| z < bz) {
                best = Some((limb, z));
            }
        }
    }
    best.map(|(l, _)| l)
}

/// Render a scene at resolution `res >= 16`.
pub fn render_scene(p: &SceneParams, res: usize) -> Result<ModalityBundle, RenderError> {
    if res < 16 {
        return Err(RenderError::ResolutionTooSmall(res));
    }
    for (i, &l) in p.limb_lengths.iter().enumerate() {
        if l < 0.0 {
            return Err(RenderError::InvalidScene(format!("negative length on limb {}", i)));
        }
    }
    let joints = joint_positions(p, res);
    // Canvas bounds check for every rendered capsule.
    for limb in 0..LIMB_COUNT {
        let r = limb_radius(p, limb, res);
        if r <= 0.0 {
            continue;
        }
        let (a, b) = limb_segment(&joints, limb);
        for (lo, hi) in [
            (a.0.min(b.0) - r, a.0.max(b.0) + r),
            (a.1.min(b.1) - r, a.1.max(b.1) + r),
        ] {
            if lo < 0.0 || hi > res as f64 {
                return Err(RenderError::LimbOutOfCanvas { limb, lo, hi, res });
            }
        }
    }

    let albedo = figure_albedo(p.color_id);
    let mut rgb = Tensor::zeros(&[3, res, res]);
    let mut depth = Tensor::zeros(&[1, res, res]);
    let mut normal = Tensor::zeros(&[3, res, res]);
    let plane = res * res;
    for yi in 0..res {
        for xi in 0..res {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let idx = yi * res + xi;
            let (rgb01, d, n) = match topmost_limb(p, &joints, x, y, res) {
                Some(limb) => {
                    let r = limb_radius(p, limb, res);
                    let (a, b) = limb_segment(&joints, limb);
                    let n = capsule_normal(x, y, a, b, r);
                    (shade(n, albedo), encode_depth(p.depth_offsets[limb]), n)
                }
                None => (
                    background_shade(p.background_id, x, y, res),
                    encode_depth(DEPTH_BG),
                    SENTINEL_NORMAL,
                ),
            };
            for c in 0..3 {
                rgb.data_mut()[c * plane + idx] = 2.0 * rgb01[c] - 1.0;
                normal.data_mut()[c * plane + idx] = n[c];
            }
            depth.data_mut()[idx] = d;
        }
    }

    let keypoints = joints
        .iter()
        .map(|&(x, y)| Keypoint { x, y, visible: x >= 0.0 && y >= 0.0 && x < res as f64 && y < res as f64 })
        .collect();
    Ok(ModalityBundle {
        rgb,
        depth,
        normal,
        keypoints,
        attrs: Attrs { color_id: p.color_id, pose_id: p.pose_id, background_id: p.background_id },
        resolution: res,
    })
}

/// Surface normal of a capsule cross-section at pixel (x, y); unit length.
fn capsule_normal(x: f64, y: f64, a: (f64, f64), b: (f64, f64), r: f64) -> [f64; 3] {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    let (ex, ey) = (x - cx, y - cy);
    let dist = (ex * ex + ey * ey).sqrt();
    if dist <= f64::EPSILON {
        return [0.0, 0.0, 1.0];
    }
    let s = (dist / r).min(1.0);
    let nz = (1.0 - s * s).max(0.0).sqrt();
    [ex / dist * s, ey / dist * s, nz]
}

/// Rasterize limb segments with hard edges (no anti-aliasing) into a
/// 3-channel image in [0, 1]; zeros outside bones. `src_res` is the
/// resolution the keypoints are expressed in, `out_res` the raster size.
pub fn rasterize_skeleton(keypoints: &[Keypoint], src_res: usize, out_res: usize) -> Tensor {
    let mut out = Tensor::zeros(&[3, out_res, out_res]);
    let scale = out_res as f64 / src_res as f64;
    let r_bone = (0.85 * out_res as f64 / REF_RES).max(0.75);
    let plane = out_res * out_res;
    for (limb, &(a, b)) in LIMB_JOINTS.iter().enumerate() {
        if a >= keypoints.len() || b >= keypoints.len() {
            continue;
        }
        let (ka, kb) = (keypoints[a], keypoints[b]);
        if !ka.visible || !kb.visible {
            continue;
        }
        let pa = (ka.x * scale, ka.y * scale);
        let pb = (kb.x * scale, kb.y * scale);
        let x_lo = ((pa.0.min(pb.0) - r_bone).floor().max(0.0)) as usize;
        let x_hi = ((pa.0.max(pb.0) + r_bone).ceil().min(out_res as f64)) as usize;
        let y_lo = ((pa.1.min(pb.1) - r_bone).floor().max(0.0)) as usize;
        let y_hi = ((pa.1.max(pb.1) + r_bone).ceil().min(out_res as f64)) as usize;
        for yi in y_lo..y_hi {
            for xi in x_lo..x_hi {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                if point_segment(x, y, pa, pb) <= r_bone {
                    for c in 0..3 {
                        out.data_mut()[c * plane + yi * out_res + xi] = BONE_COLORS[limb][c];
                    }
                }
            }
        }
    }
    out
}

/// Full invariant sweep over one bundle; returns a description of the first
/// violated invariant, if any.
pub fn validate_bundle(b: &ModalityBundle) -> Result<(), String> {
    let res = b.resolution;
    let plane = res * res;
    if b.rgb.shape() != [3, res, res] || b.depth.shape() != [1, res, res] || b.normal.shape() != [3, res, res] {
        return Err("modality shapes disagree".into());
    }
    for (i, &d) in b.depth.data().iter().enumerate() {
        if !(-1.0..=1.0).contains(&d) {
            return Err(format!("depth out of range at {}: {}", i, d));
        }
    }
    for i in 0..plane {
        let n = [
            b.normal.data()[i],
            b.normal.data()[plane + i],
            b.normal.data()[2 * plane + i],
        ];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(format!("normal not unit at {}: {}", i, norm));
        }
        let is_bg = b.depth.data()[i] <= -1.0 + 1e-9;
        if is_bg && (n[0] != 0.0 || n[1] != 0.0 || n[2] != 1.0) {
            return Err(format!("background normal not sentinel at {}", i));
        }
    }
    for (j, kp) in b.keypoints.iter().enumerate() {
        if kp.visible && (kp.x < 0.0 || kp.y < 0.0 || kp.x >= res as f64 || kp.y >= res as f64) {
            return Err(format!("visible keypoint {} outside bounds", j));
        }
    }
    Ok(())
}
