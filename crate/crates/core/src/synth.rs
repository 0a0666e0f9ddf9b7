//! Deterministic synthetic scenes with exact ground truth.
//!
//! A scene is a set of rigid bodies seen by a static pinhole camera: boxes
//! that make up the foreground (one box, a two-link arm or a swarm of small
//! boxes), static background props, and opaque rectangles parallel to the
//! image plane acting as occluders. Tracks are points sampled on the body
//! surfaces; a point is visible when its face looks at the camera, it
//! projects inside the image and no other body blocks the line of sight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{self, Pose};
use crate::losses::Gradients;
use crate::scene::{build_knn_graph, KnnGraph, MotionBases, MotionCoeffs, SceneModel, Splat};
use crate::visibility::{Camera, InvisibilityScores};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    RigidBox,
    TwoLinkArm,
    ClusterSwarm,
}

/// Angle `offset + rate·t + amp·sin(2π·freq·t)` about `axis`, plus a linear drift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartMotion {
    pub axis: [f64; 3],
    pub offset: f64,
    pub rate: f64,
    pub amp: f64,
    pub freq: f64,
    pub velocity: [f64; 3],
}

impl Default for PartMotion {
    fn default() -> Self {
        PartMotion {
            axis: [0.0, 0.0, 1.0],
            offset: 0.0,
            rate: 0.0,
            amp: 0.0,
            freq: 0.0,
            velocity: [0.0; 3],
        }
    }
}

impl PartMotion {
    pub fn angle(&self, t: usize) -> f64 {
        let t = t as f64;
        self.offset + self.rate * t + self.amp * (2.0 * std::f64::consts::PI * self.freq * t).sin()
    }

    fn drift(&self, t: usize) -> [f64; 3] {
        self.velocity.map(|v| v * t as f64)
    }
}

/// One motion per part: the box for `rigid_box`, the two joints for `two_link_arm`,
/// one per cluster for `cluster_swarm`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionScript {
    pub parts: Vec<PartMotion>,
}

/// Opaque rectangle parallel to the image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccluderSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 2],
    pub velocity: [f64; 3],
}

impl Default for OccluderSpec {
    fn default() -> Self {
        OccluderSpec {
            center: [0.0, 0.0, -2.0],
            half_extents: [0.5, 0.5],
            velocity: [0.0; 3],
        }
    }
}

/// Static background box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

impl Default for PropSpec {
    fn default() -> Self {
        PropSpec {
            center: [1.5, -1.0, 0.0],
            half_extents: [0.2, 0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// Foreground surface points.
    pub num_points: usize,
    pub frames: usize,
    pub motion: MotionScript,
    pub occluders: Vec<OccluderSpec>,
    pub props: Vec<PropSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub camera: Camera,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            kind: SceneKind::TwoLinkArm,
            num_points: 400,
            frames: 24,
            motion: arm_motion(0.0, 0.02, 0.03),
            occluders: Vec::new(),
            props: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
            camera: scene_camera(),
        }
    }
}

/// Default camera: 96×96 pinhole six units in front of the world origin, looking at it.
pub fn scene_camera() -> Camera {
    Camera {
        pose: Pose::from_translation([0.0, 0.0, CAMERA_DISTANCE]),
        ..Camera::default()
    }
}

pub const CAMERA_DISTANCE: f64 = 6.0;

/// Arm joints starting at 0.35 and −0.5 rad, turning at the given rates with a gentle wobble.
pub fn arm_motion(wobble: f64, rate1: f64, rate2: f64) -> MotionScript {
    MotionScript {
        parts: vec![
            PartMotion {
                offset: 0.35,
                rate: rate1,
                amp: wobble,
                freq: 0.05,
                ..PartMotion::default()
            },
            PartMotion {
                offset: -0.5,
                rate: rate2,
                amp: wobble,
                freq: 0.08,
                ..PartMotion::default()
            },
        ],
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic scenes need at least one point and one frame".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        let parts = self.part_count();
        if self.motion.parts.len() != parts {
            return Err(Error::Config(format!(
                "{:?} needs {parts} part motions, script has {}",
                self.kind,
                self.motion.parts.len()
            )));
        }
        if self.motion.parts.iter().any(|p| geom::norm3(&p.axis) == 0.0) {
            return Err(Error::Config("part motion axis must be nonzero".into()));
        }
        self.camera.validate()
    }

    pub fn part_count(&self) -> usize {
        match self.kind {
            SceneKind::RigidBox => 1,
            SceneKind::TwoLinkArm => 2,
            SceneKind::ClusterSwarm => self.motion.parts.len().max(1),
        }
    }
}

// ---------------------------------------------------------------------------
// Bodies

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Box { half: [f64; 3] },
    Rect { half: [f64; 2] },
}

#[derive(Clone, Debug)]
struct Body {
    shape: Shape,
    points: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
    foreground: bool,
    part: Option<usize>,
    color: [f32; 3],
}

const ARM_PIVOT: [f64; 3] = [-1.1, 0.1, 0.0];
const LINK_LENGTHS: [f64; 2] = [1.3, 1.1];
const LINK_HALF: [[f64; 3]; 2] = [[0.65, 0.16, 0.16], [0.55, 0.13, 0.13]];
const BOX_CENTER: [f64; 3] = [0.0, 0.0, 0.0];
const BOX_HALF: [f64; 3] = [0.6, 0.4, 0.3];
const SWARM_HALF: [f64; 3] = [0.25, 0.25, 0.25];

fn swarm_center(c: usize, count: usize) -> [f64; 3] {
    let a = 2.0 * std::f64::consts::PI * c as f64 / count as f64;
    [1.1 * a.cos(), 0.8 * a.sin(), 0.3 * (c % 2) as f64]
}

fn box_area(h: &[f64; 3]) -> f64 {
    8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
}

/// Uniform random samples on the surface of a box centered at the origin.
fn sample_box(h: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let faces = [
        (2usize, 0usize, 1usize, h[0] * h[1]),
        (0, 1, 2, h[1] * h[2]),
        (1, 0, 2, h[0] * h[2]),
    ];
    let total: f64 = faces.iter().map(|f| f.3).sum();
    let mut pts = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = rng.random_range(0.0..total);
        let mut face = faces[2];
        for f in faces {
            if r < f.3 {
                face = f;
                break;
            }
            r -= f.3;
        }
        let (axis, a, b, _) = face;
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        p[axis] = side * h[axis];
        p[a] = rng.random_range(-h[a]..h[a]);
        p[b] = rng.random_range(-h[b]..h[b]);
        let mut nrm = [0.0; 3];
        nrm[axis] = side;
        pts.push(p);
        normals.push(nrm);
    }
    (pts, normals)
}

/// Regular grid on a rectangle facing the camera (`−z` normal).
fn sample_rect(half: [f64; 2], spacing: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let nx = ((2.0 * half[0] / spacing).round() as usize).max(1);
    let ny = ((2.0 * half[1] / spacing).round() as usize).max(1);
    let mut pts = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            pts.push([
                -half[0] + (ix as f64 + 0.5) * 2.0 * half[0] / nx as f64,
                -half[1] + (iy as f64 + 0.5) * 2.0 * half[1] / ny as f64,
                0.0,
            ]);
        }
    }
    let normals = vec![[0.0, 0.0, -1.0]; pts.len()];
    (pts, normals)
}

/// Regular grid over all six faces of a box.
fn grid_box(h: [f64; 3], spacing: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let na = ((2.0 * h[a] / spacing).round() as usize).max(1);
        let nb = ((2.0 * h[b] / spacing).round() as usize).max(1);
        for side in [-1.0, 1.0] {
            for ia in 0..na {
                for ib in 0..nb {
                    let mut p = [0.0; 3];
                    p[axis] = side * h[axis];
                    p[a] = -h[a] + (ia as f64 + 0.5) * 2.0 * h[a] / na as f64;
                    p[b] = -h[b] + (ib as f64 + 0.5) * 2.0 * h[b] / nb as f64;
                    let mut n = [0.0; 3];
                    n[axis] = side;
                    pts.push(p);
                    normals.push(n);
                }
            }
        }
    }
    (pts, normals)
}

const PART_COLORS: [[f32; 3]; 6] = [
    [0.85, 0.3, 0.2],
    [0.2, 0.55, 0.85],
    [0.3, 0.75, 0.35],
    [0.9, 0.75, 0.2],
    [0.6, 0.35, 0.75],
    [0.2, 0.75, 0.75],
];

struct Layout {
    bodies: Vec<Body>,
    /// Mean spacing between foreground samples.
    spacing: f64,
}

fn layout(spec: &SceneSpec) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let halves: Vec<[f64; 3]> = match spec.kind {
        SceneKind::RigidBox => vec![BOX_HALF],
        SceneKind::TwoLinkArm => LINK_HALF.to_vec(),
        SceneKind::ClusterSwarm => vec![SWARM_HALF; spec.part_count()],
    };
    let areas: Vec<f64> = halves.iter().map(box_area).collect();
    let total_area: f64 = areas.iter().sum();
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| (spec.num_points as f64 * a / total_area).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    for c in counts.iter_mut().take(spec.num_points - assigned) {
        *c += 1;
    }
    let mut bodies = Vec::new();
    for (p, (&h, &n)) in halves.iter().zip(&counts).enumerate() {
        let (points, normals) = sample_box(h, n, &mut rng);
        bodies.push(Body {
            shape: Shape::Box { half: h },
            points,
            normals,
            foreground: true,
            part: Some(p),
            color: PART_COLORS[p % PART_COLORS.len()],
        });
    }
    let spacing = (total_area / spec.num_points as f64).sqrt();
    for prop in &spec.props {
        let (points, normals) = grid_box(prop.half_extents, spacing);
        bodies.push(Body {
            shape: Shape::Box { half: prop.half_extents },
            points,
            normals,
            foreground: false,
            part: None,
            color: [0.5, 0.5, 0.5],
        });
    }
    for occ in &spec.occluders {
        let (points, normals) = sample_rect(occ.half_extents, spacing);
        bodies.push(Body {
            shape: Shape::Rect { half: occ.half_extents },
            points,
            normals,
            foreground: false,
            part: None,
            color: [0.3, 0.3, 0.3],
        });
    }
    Layout { bodies, spacing }
}

fn axis_angle(axis: [f64; 3], angle: f64) -> Pose {
    Pose::from_axis_angle(axis, angle, [0.0; 3])
}

/// World-from-local pose of every foreground part at frame `t`.
fn part_poses(spec: &SceneSpec, script: &MotionScript, t: usize) -> Vec<Pose> {
    match spec.kind {
        SceneKind::RigidBox => {
            let m = &script.parts[0];
            let d = m.drift(t);
            let c = [BOX_CENTER[0] + d[0], BOX_CENTER[1] + d[1], BOX_CENTER[2] + d[2]];
            vec![Pose::from_translation(c).compose(&axis_angle(m.axis, m.angle(t)))]
        }
        SceneKind::TwoLinkArm => {
            let (j1, j2) = (&script.parts[0], &script.parts[1]);
            let d = j1.drift(t);
            let pivot = [ARM_PIVOT[0] + d[0], ARM_PIVOT[1] + d[1], ARM_PIVOT[2] + d[2]];
            let shoulder = Pose::from_translation(pivot).compose(&axis_angle(j1.axis, j1.angle(t)));
            let link1 = shoulder.compose(&Pose::from_translation([LINK_LENGTHS[0] / 2.0, 0.0, 0.0]));
            let elbow = shoulder
                .compose(&Pose::from_translation([LINK_LENGTHS[0], 0.0, 0.0]))
                .compose(&axis_angle(j2.axis, j2.angle(t)));
            let link2 = elbow.compose(&Pose::from_translation([LINK_LENGTHS[1] / 2.0, 0.0, 0.0]));
            vec![link1, link2]
        }
        SceneKind::ClusterSwarm => {
            let count = script.parts.len();
            script
                .parts
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    let base = swarm_center(c, count);
                    let d = m.drift(t);
                    Pose::from_translation([base[0] + d[0], base[1] + d[1], base[2] + d[2]])
                        .compose(&axis_angle(m.axis, m.angle(t)))
                })
                .collect()
        }
    }
}

/// Poses of every body (parts, props, occluders) for every frame, `[t][body]`.
fn body_poses(spec: &SceneSpec, script: &MotionScript) -> Vec<Vec<Pose>> {
    (0..spec.frames)
        .map(|t| {
            let mut poses = part_poses(spec, script, t);
            for prop in &spec.props {
                poses.push(Pose::from_translation(prop.center));
            }
            for occ in &spec.occluders {
                let d = occ.velocity.map(|v| v * t as f64);
                poses.push(Pose::from_translation([
                    occ.center[0] + d[0],
                    occ.center[1] + d[1],
                    occ.center[2] + d[2],
                ]));
            }
            poses
        })
        .collect()
}

/// Whether the open segment `from → to` (world) passes through `shape` posed at `pose`.
fn blocks(shape: &Shape, pose: &Pose, from: [f64; 3], to: [f64; 3]) -> bool {
    let inv = pose.inverse();
    let a = inv.apply_array(from);
    let b = inv.apply_array(to);
    let d = geom::sub3(&b, &a);
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Rect { half } => {
            if d[2].abs() < 1e-15 {
                return false;
            }
            let s = -a[2] / d[2];
            if s <= EPS || s >= 1.0 - EPS {
                return false;
            }
            let x = a[0] + s * d[0];
            let y = a[1] + s * d[1];
            x.abs() <= half[0] && y.abs() <= half[1]
        }
        Shape::Box { half } => {
            let (mut lo, mut hi) = (EPS, 1.0 - EPS);
            for c in 0..3 {
                if d[c].abs() < 1e-15 {
                    if a[c].abs() > half[c] {
                        return false;
                    }
                    continue;
                }
                let s1 = (-half[c] - a[c]) / d[c];
                let s2 = (half[c] - a[c]) / d[c];
                let (s1, s2) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
                lo = lo.max(s1);
                hi = hi.min(s2);
                if lo > hi {
                    return false;
                }
            }
            true
        }
    }
}

struct Rendered {
    positions: Vec<[f64; 3]>,
    visible: Vec<bool>,
}

/// Positions and analytic visibility of every sample at every frame, frame-major.
fn render(layout: &Layout, poses: &[Vec<Pose>], camera: &Camera) -> Rendered {
    let n: usize = layout.bodies.iter().map(|b| b.points.len()).sum();
    let frames = poses.len();
    let eye = camera.pose.inverse().translation_array();
    let mut positions = Vec::with_capacity(n * frames);
    let mut visible = Vec::with_capacity(n * frames);
    for frame in poses {
        for (bi, body) in layout.bodies.iter().enumerate() {
            let pose = &frame[bi];
            for (p, nrm) in body.points.iter().zip(&body.normals) {
                let x = pose.apply_array(*p);
                let normal = geom::quat_rotate(&pose.wxyz(), nrm);
                let facing = geom::dot3(&normal, &geom::sub3(&eye, &x)) > 0.0;
                let in_image = camera.project(x).and_then(|(u, v, _)| camera.pixel(u, v)).is_some();
                let clear = facing
                    && in_image
                    && layout
                        .bodies
                        .iter()
                        .enumerate()
                        .all(|(oi, other)| oi == bi || !blocks(&other.shape, &frame[oi], eye, x));
                positions.push(x);
                visible.push(clear);
            }
        }
    }
    Rendered { positions, visible }
}

/// Corruptions injected into a driving sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Artifact {
    /// A static prop follows a foreground part's motion.
    Attach { prop: usize, part: usize },
    /// From `frame` on, part `a` moves with part `b`'s motion increments.
    Swap { a: usize, b: usize, frame: usize },
    /// From `frame` on, a part is displaced by `offset`.
    Offset { part: usize, offset: [f64; 3], frame: usize },
}

/// Exact answers for a generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: usize,
    pub num_tracks: usize,
    /// True positions, frame-major.
    pub tracks: Vec<[f64; 3]>,
    /// Visibility under the true motion.
    pub visibility: Vec<bool>,
    /// Foreground part of each track; `None` for background.
    pub labels: Vec<Option<usize>>,
    /// Positions at frame 0.
    pub canonical: Vec<[f64; 3]>,
    /// World-from-local pose of each foreground part, `[t][part]`.
    pub part_poses: Vec<Vec<Pose>>,
    /// Occluder centers per frame, `[t][occluder]`.
    pub occluders: Vec<Vec<[f64; 3]>>,
    pub occluder_half_extents: Vec<[f64; 2]>,
    /// Tracks whose observed trajectories were corrupted.
    pub corrupted: Vec<usize>,
    pub artifacts: Vec<Artifact>,
}

impl GroundTruth {
    pub fn position(&self, i: usize, t: usize) -> [f64; 3] {
        self.tracks[t * self.num_tracks + i]
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visibility[t * self.num_tracks + i]
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.labels[i].is_some()
    }

    pub fn part_count(&self) -> usize {
        self.part_poses.first().map_or(0, Vec::len)
    }

    /// Ground truth restricted to frames `range` (same tracks).
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> GroundTruth {
        let n = self.num_tracks;
        GroundTruth {
            frames: range.len(),
            num_tracks: n,
            tracks: self.tracks[range.start * n..range.end * n].to_vec(),
            visibility: self.visibility[range.start * n..range.end * n].to_vec(),
            labels: self.labels.clone(),
            canonical: self.canonical.clone(),
            part_poses: self.part_poses[range.clone()].to_vec(),
            occluders: self.occluders[range].to_vec(),
            occluder_half_extents: self.occluder_half_extents.clone(),
            corrupted: self.corrupted.clone(),
            artifacts: self.artifacts.clone(),
        }
    }

    /// A model reproducing the true motion exactly: one basis per part, one splat per track.
    ///
    /// Bases are `P_k(t)·P_k(t_cano)⁻¹`; each foreground splat saturates its part's basis.
    pub fn to_scene_model(&self, t_cano: usize, scale: f64) -> Result<SceneModel> {
        if t_cano >= self.frames {
            return Err(Error::Domain(format!("canonical frame {t_cano} out of range")));
        }
        let k = self.part_count().max(1);
        let bases = MotionBases::from_fn(k, self.frames, |kk, t| {
            self.part_poses[t][kk].compose(&self.part_poses[t_cano][kk].inverse())
        });
        let mut splats = Vec::with_capacity(self.num_tracks);
        let mut rows = Vec::new();
        for i in 0..self.num_tracks {
            let mut s = Splat::new(self.position(i, t_cano), scale, self.is_foreground(i));
            s.track = Some(i);
            if let Some(part) = self.labels[i] {
                let mut row = vec![0.0; k];
                row[part] = SATURATED;
                rows.push(row);
            }
            splats.push(s);
        }
        SceneModel::new(splats, MotionCoeffs::new(k, rows)?, bases, t_cano)
    }
}

/// Coefficient making a softmax weight equal to 1 up to `e^-60`.
const SATURATED: f64 = 60.0;

fn noise_rng(seed: u64, segment: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Frame 0 is shared by every segment generated from the same spec.
    rng.set_stream(if t == 0 { 0 } else { (segment << 32) | t as u64 });
    rng
}

fn assemble(
    spec: &SceneSpec,
    layout: &Layout,
    observed: &Rendered,
    truth: &Rendered,
    poses: &[Vec<Pose>],
    foreground: Vec<bool>,
    segment: u64,
) -> Result<(SequenceBundle, GroundTruth)> {
    let n: usize = layout.bodies.iter().map(|b| b.points.len()).sum();
    let frames = spec.frames;
    let mut tracks = Vec::with_capacity(n * frames);
    for t in 0..frames {
        let mut rng = noise_rng(spec.seed, segment, t);
        let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        for i in 0..n {
            let p = observed.positions[t * n + i];
            let noisy = if spec.noise_sigma > 0.0 {
                [
                    p[0] + normal.sample(&mut rng),
                    p[1] + normal.sample(&mut rng),
                    p[2] + normal.sample(&mut rng),
                ]
            } else {
                p
            };
            tracks.push(noisy.map(|c| c as f32));
        }
    }
    let labels: Vec<Option<usize>> = layout
        .bodies
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.part, b.points.len()))
        .collect();
    let colors: Vec<[f32; 3]> = layout
        .bodies
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.color, b.points.len()))
        .collect();
    let parts = spec.part_count();
    let bundle = SequenceBundle::new(
        vec![spec.camera; frames],
        tracks,
        observed.visible.clone(),
        foreground,
        Some(colors),
    )?;
    let truth = GroundTruth {
        frames,
        num_tracks: n,
        tracks: truth.positions.clone(),
        visibility: truth.visible.clone(),
        labels,
        canonical: truth.positions[..n].to_vec(),
        part_poses: poses.iter().map(|p| p[..parts].to_vec()).collect(),
        occluders: poses
            .iter()
            .map(|p| p[parts + spec.props.len()..].iter().map(|o| o.translation_array()).collect())
            .collect(),
        occluder_half_extents: spec.occluders.iter().map(|o| o.half_extents).collect(),
        corrupted: Vec::new(),
        artifacts: Vec::new(),
    };
    Ok((bundle, truth))
}

fn foreground_flags(layout: &Layout) -> Vec<bool> {
    layout
        .bodies
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.foreground, b.points.len()))
        .collect()
}

/// Generates one sequence and its ground truth.
pub fn gen_scene(spec: &SceneSpec) -> Result<(SequenceBundle, GroundTruth)> {
    spec.validate()?;
    let layout = layout(spec);
    let poses = body_poses(spec, &spec.motion);
    let rendered = render(&layout, &poses, &spec.camera);
    assemble(spec, &layout, &rendered, &rendered, &poses, foreground_flags(&layout), 1)
}

/// Base and driving sequences sharing frame 0, with their ground truths.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub base: SequenceBundle,
    pub driving: SequenceBundle,
    pub base_truth: GroundTruth,
    pub driving_truth: GroundTruth,
}

/// Generates a base sequence from `spec.motion` and a driving sequence from `driving`.
///
/// Artifacts corrupt only the observed driving tracks; the driving ground truth
/// keeps the clean motion and lists the corrupted tracks.
pub fn gen_pair(spec: &SceneSpec, driving: &MotionScript, artifacts: &[Artifact]) -> Result<ScenePair> {
    spec.validate()?;
    let driving_spec = SceneSpec {
        motion: driving.clone(),
        ..spec.clone()
    };
    driving_spec.validate()?;
    let base_start = part_poses(spec, &spec.motion, 0);
    let driving_start = part_poses(spec, driving, 0);
    if base_start != driving_start {
        return Err(Error::Config(
            "base and driving motion scripts must start from the same pose".into(),
        ));
    }
    let layout = layout(spec);
    let base_poses = body_poses(spec, &spec.motion);
    let base_render = render(&layout, &base_poses, &spec.camera);
    let (base, base_truth) = assemble(spec, &layout, &base_render, &base_render, &base_poses, foreground_flags(&layout), 1)?;

    let clean_poses = body_poses(&driving_spec, driving);
    let mut observed_poses = clean_poses.clone();
    let mut foreground = foreground_flags(&layout);
    let mut corrupted = Vec::new();
    let parts = spec.part_count();
    let offsets: Vec<usize> = layout
        .bodies
        .iter()
        .scan(0, |acc, b| {
            let start = *acc;
            *acc += b.points.len();
            Some(start)
        })
        .collect();
    let body_tracks = |b: usize| offsets[b]..offsets[b] + layout.bodies[b].points.len();
    for artifact in artifacts {
        match *artifact {
            Artifact::Attach { prop, part } => {
                if prop >= spec.props.len() || part >= parts {
                    return Err(Error::Config(format!("attach artifact references prop {prop} / part {part}")));
                }
                let body = parts + prop;
                let start = clean_poses[0][part];
                for (t, frame) in observed_poses.iter_mut().enumerate() {
                    let follow = clean_poses[t][part].compose(&start.inverse());
                    frame[body] = follow.compose(&clean_poses[t][body]);
                }
                for i in body_tracks(body) {
                    foreground[i] = true;
                    corrupted.push(i);
                }
            }
            Artifact::Swap { a, b, frame } => {
                if a >= parts || b >= parts || frame >= spec.frames {
                    return Err(Error::Config("swap artifact out of range".into()));
                }
                for t in frame..spec.frames {
                    let increment = clean_poses[t][b].compose(&clean_poses[frame][b].inverse());
                    observed_poses[t][a] = increment.compose(&clean_poses[frame][a]);
                }
                corrupted.extend(body_tracks(a));
            }
            Artifact::Offset { part, offset, frame } => {
                if part >= parts || frame >= spec.frames {
                    return Err(Error::Config("offset artifact out of range".into()));
                }
                for pose in observed_poses.iter_mut().skip(frame) {
                    pose[part] = Pose::from_translation(offset).compose(&pose[part]);
                }
                corrupted.extend(body_tracks(part));
            }
        }
    }
    corrupted.sort_unstable();
    corrupted.dedup();
    let clean_render = render(&layout, &clean_poses, &spec.camera);
    let observed_render = if artifacts.is_empty() {
        clean_render.clone_shallow()
    } else {
        render(&layout, &observed_poses, &spec.camera)
    };
    let (driving_bundle, mut driving_truth) =
        assemble(&driving_spec, &layout, &observed_render, &clean_render, &clean_poses, foreground, 2)?;
    driving_truth.corrupted = corrupted;
    driving_truth.artifacts = artifacts.to_vec();
    Ok(ScenePair {
        base,
        driving: driving_bundle,
        base_truth,
        driving_truth,
    })
}

impl Rendered {
    fn clone_shallow(&self) -> Rendered {
        Rendered {
            positions: self.positions.clone(),
            visible: self.visible.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Benchmarks

/// Frames per segment in the benchmark pairs.
pub const BENCH_FRAMES: usize = 12;
/// Number of artifact benchmark scenes.
pub const ATTACH_SCENES: usize = 3;

/// The occluded two-link arm: the base turns slowly behind two occluders, the
/// driving sequence swings the arm the other way and uncovers the link tip and
/// most of the lower link, both hidden at frame 0.
pub fn occluded_arm_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        frames: BENCH_FRAMES,
        num_points: 400,
        seed,
        noise_sigma: 0.005,
        motion: arm_motion(0.0, 0.01, 0.01),
        occluders: vec![
            OccluderSpec {
                center: [0.78, 0.3, -2.0],
                half_extents: [0.16, 0.2],
                velocity: [0.0; 3],
            },
            OccluderSpec {
                center: [-0.2, -0.45, -2.0],
                half_extents: [0.35, 0.25],
                velocity: [0.0; 3],
            },
        ],
        ..SceneSpec::default()
    }
}

pub fn occluded_arm_driving() -> MotionScript {
    arm_motion(0.0, -0.06, 0.07)
}

pub fn occluded_arm_pair(seed: u64) -> Result<ScenePair> {
    gen_pair(&occluded_arm_spec(seed), &occluded_arm_driving(), &[])
}

/// Artifact benchmark `scene` (arm, box or swarm), each with a background prop
/// next to the foreground that the corrupted driving sequence glues to a moving part.
pub fn attach_benchmark(scene: usize, seed: u64) -> Result<ScenePair> {
    let (spec, driving, part) = match scene {
        0 => (
            SceneSpec {
                props: vec![PropSpec {
                    center: [1.2, -0.6, 0.0],
                    half_extents: [0.2, 0.2, 0.2],
                }],
                ..occluded_arm_spec(seed)
            },
            occluded_arm_driving(),
            1,
        ),
        1 => {
            let turn = |rate: f64, velocity: [f64; 3]| MotionScript {
                parts: vec![PartMotion {
                    axis: [0.3, 1.0, 0.2],
                    rate,
                    velocity,
                    ..PartMotion::default()
                }],
            };
            (
                SceneSpec {
                    kind: SceneKind::RigidBox,
                    frames: BENCH_FRAMES,
                    seed,
                    noise_sigma: 0.005,
                    motion: turn(0.01, [0.005, 0.0, 0.0]),
                    props: vec![PropSpec {
                        center: [1.0, 0.2, 0.2],
                        half_extents: [0.2, 0.25, 0.2],
                    }],
                    ..SceneSpec::default()
                },
                turn(0.05, [-0.03, 0.02, 0.0]),
                0,
            )
        }
        2 => {
            let swarm = |rates: [f64; 3]| MotionScript {
                parts: rates
                    .iter()
                    .enumerate()
                    .map(|(c, &rate)| PartMotion {
                        axis: [0.0, 1.0, 0.3 * c as f64],
                        rate,
                        velocity: [0.0, 0.01 * rate.signum(), 0.0],
                        ..PartMotion::default()
                    })
                    .collect(),
            };
            (
                SceneSpec {
                    kind: SceneKind::ClusterSwarm,
                    frames: BENCH_FRAMES,
                    seed,
                    noise_sigma: 0.005,
                    motion: swarm([0.01, -0.01, 0.01]),
                    props: vec![PropSpec {
                        center: [0.0, -0.2, 0.3],
                        half_extents: [0.2, 0.2, 0.2],
                    }],
                    ..SceneSpec::default()
                },
                swarm([0.06, -0.05, 0.07]),
                0,
            )
        }
        _ => return Err(Error::Config(format!("attach benchmark scene {scene} out of range 0..{ATTACH_SCENES}"))),
    };
    gen_pair(&spec, &driving, &[Artifact::Attach { prop: 0, part }])
}

/// Mean spacing between foreground samples of a spec, a natural splat scale.
pub fn sample_spacing(spec: &SceneSpec) -> f64 {
    layout(spec).spacing
}

// ---------------------------------------------------------------------------
// Gradient-check fixtures

/// A small random instance for gradient checking.
///
/// Track offsets and rest lengths are arranged so every L1 residual and edge
/// deviation stays at least 1e-2 away from zero, and basis quaternions within
/// a frame are close enough that sign alignment never flips.
pub struct GradientFixture {
    pub model: SceneModel,
    pub bundle: SequenceBundle,
    pub graph: KnnGraph,
    pub zeta: Vec<InvisibilityScores>,
}

pub fn gradient_fixture(seed: u64, n: usize, frames: usize, k: usize) -> Result<GradientFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let splats: Vec<Splat> = (0..n)
        .map(|i| {
            let mut s = Splat::new(unit(&mut rng), 0.05, true);
            s.track = Some(i);
            s
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let centers: Vec<Pose> = (0..frames)
        .map(|_| Pose::from_axis_angle(unit(&mut rng), rng.random_range(-1.5..1.5), unit(&mut rng)))
        .collect();
    let mut cells = Vec::with_capacity(frames * k);
    for center in &centers {
        for _ in 0..k {
            let jitter = Pose::from_axis_angle(unit(&mut rng), rng.random_range(-0.4..0.4), unit(&mut rng).map(|c| 0.3 * c));
            cells.push(center.compose(&jitter));
        }
    }
    let bases = MotionBases::from_fn(k, frames, |kk, t| cells[t * k + kk]);
    let model = SceneModel::new(splats, MotionCoeffs::new(k, rows)?, bases, 0)?;
    let mut tracks = Vec::with_capacity(n * frames);
    for t in 0..frames {
        for i in 0..n {
            let x = model.deform(i, t)?;
            tracks.push([0, 1, 2].map(|c| {
                let off = rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (x[c] + off) as f32
            }));
        }
    }
    let visibility: Vec<bool> = (0..n * frames).map(|_| rng.random_bool(0.8)).collect();
    let bundle = SequenceBundle::new(vec![Camera::default(); frames], tracks, visibility, vec![true; n], None)?;
    let mut graph = build_knn_graph(&model, 3.min(n - 1))?;
    for (e, edge) in graph.edges.iter_mut().enumerate() {
        // Push rest lengths away from every deformed length.
        let span = (0..frames)
            .map(|t| {
                let a = model.deform(model.foreground_indices()[edge.i], t).unwrap();
                let b = model.deform(model.foreground_indices()[edge.j], t).unwrap();
                geom::norm3(&geom::sub3(&a, &b))
            })
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
        edge.rest_length = if e % 2 == 0 { span.1 + 0.05 } else { (span.0 - 0.05).max(0.0) };
        if span.0 < 0.06 {
            edge.rest_length = span.1 + 0.05;
        }
    }
    let zeta = (0..frames)
        .map(|_| InvisibilityScores {
            zeta: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    Ok(GradientFixture { model, bundle, graph, zeta })
}

/// Number of parameters a fixture exposes to the checker.
pub fn fixture_parameter_count(f: &GradientFixture) -> usize {
    let g = Gradients::zeros(&f.model);
    g.beta.len() + g.mu.len() * 3 + g.rotation.len() * 4 + g.translation.len() * 3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;

    fn arm(frames: usize) -> SceneSpec {
        SceneSpec {
            frames,
            num_points: 300,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec {
            noise_sigma: 0.01,
            ..arm(6)
        };
        let (a, ta) = gen_scene(&spec).unwrap();
        let (b, tb) = gen_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn arm_has_two_parts() {
        let (_, truth) = gen_scene(&arm(3)).unwrap();
        let mut parts: Vec<usize> = truth.labels.iter().flatten().copied().collect();
        parts.sort_unstable();
        parts.dedup();
        assert_eq!(parts, vec![0, 1]);
    }

    #[test]
    fn rigid_box_has_zero_rigidity() {
        let spec = SceneSpec {
            kind: SceneKind::RigidBox,
            motion: MotionScript {
                parts: vec![PartMotion {
                    axis: [0.3, 1.0, 0.2],
                    rate: 0.05,
                    velocity: [0.01, 0.0, 0.02],
                    ..PartMotion::default()
                }],
            },
            ..arm(8)
        };
        let (_, truth) = gen_scene(&spec).unwrap();
        let model = truth.to_scene_model(0, 0.05).unwrap();
        let graph = build_knn_graph(&model, 6).unwrap();
        assert!(losses::rigidity_init(&model, &graph).unwrap().value < 1e-9);
    }

    #[test]
    fn truth_model_fits_noise_free_tracks() {
        let (bundle, truth) = gen_scene(&arm(10)).unwrap();
        for t_cano in [0, 4] {
            let model = truth.to_scene_model(t_cano, 0.05).unwrap();
            let loss = losses::track_loss(&model, &bundle).unwrap().value;
            assert!(loss < 1e-5, "track loss {loss}");
        }
    }

    /// Independent line-of-sight oracle for an axis-aligned rectangle at constant depth,
    /// with the eye at `(0, 0, −CAMERA_DISTANCE)`.
    fn behind_rect(p: [f64; 3], center: [f64; 3], half: [f64; 2]) -> bool {
        let (pz, cz) = (p[2] + CAMERA_DISTANCE, center[2] + CAMERA_DISTANCE);
        if pz <= cz {
            return false;
        }
        let s = cz / pz;
        (s * p[0] - center[0]).abs() <= half[0] && (s * p[1] - center[1]).abs() <= half[1]
    }

    #[test]
    fn sweeping_occluder_matches_ray_oracle() {
        let spec = SceneSpec {
            kind: SceneKind::RigidBox,
            motion: MotionScript {
                parts: vec![PartMotion::default()],
            },
            occluders: vec![OccluderSpec {
                center: [-2.0, 0.0, -2.0],
                half_extents: [0.4, 1.0],
                velocity: [0.25, 0.0, 0.0],
            }],
            ..arm(16)
        };
        let (bundle, truth) = gen_scene(&spec).unwrap();
        let mut saw_hidden = false;
        for t in 0..spec.frames {
            let center = truth.occluders[t][0];
            let mut hidden = 0;
            let mut expected = 0;
            for i in 0..bundle.track_count() {
                if !truth.is_foreground(i) {
                    continue;
                }
                let p = truth.position(i, t);
                // Points on the front face can only be hidden by the occluder.
                if truth.canonical[i][2] > BOX_CENTER[2] - BOX_HALF[2] + 1e-12 {
                    continue;
                }
                if !bundle.visible(i, t) {
                    hidden += 1;
                }
                if behind_rect(p, center, [0.4, 1.0]) {
                    expected += 1;
                }
            }
            assert_eq!(hidden, expected, "frame {t}");
            saw_hidden |= hidden > 0;
        }
        assert!(saw_hidden);
    }

    #[test]
    fn pair_shares_first_frame() {
        let spec = arm(6);
        let driving = arm_motion(0.0, -0.03, 0.06);
        let pair = gen_pair(&spec, &driving, &[]).unwrap();
        let n = pair.base.track_count();
        assert_eq!(pair.base.tracks()[..n], pair.driving.tracks()[..n]);
        assert_eq!(pair.base.visibility()[..n], pair.driving.visibility()[..n]);
        let bad = arm_motion(0.0, 0.0, 0.0);
        let mut shifted = bad.clone();
        shifted.parts[0].offset += 0.1;
        assert!(gen_pair(&spec, &shifted, &[]).is_err());
    }

    #[test]
    fn attach_artifact_follows_part_motion() {
        let spec = SceneSpec {
            props: vec![PropSpec::default()],
            ..arm(6)
        };
        let driving = arm_motion(0.0, -0.03, 0.06);
        let pair = gen_pair(&spec, &driving, &[Artifact::Attach { prop: 0, part: 1 }]).unwrap();
        let truth = &pair.driving_truth;
        assert!(!truth.corrupted.is_empty());
        for &i in &truth.corrupted {
            assert!(pair.driving.is_foreground(i));
            assert!(!pair.base.is_foreground(i));
            for t in 0..6 {
                // Oracle: rigid motion of part 1 relative to frame 0 applied to the static prop point.
                let rel = truth.part_poses[t][1].compose(&truth.part_poses[0][1].inverse());
                let expected = rel.apply_array(truth.canonical[i]);
                let got = pair.driving.position(i, t);
                for c in 0..3 {
                    assert!((got[c] - expected[c]).abs() < 1e-5);
                }
                // The truth keeps the prop static.
                assert_eq!(truth.position(i, t), truth.canonical[i]);
            }
        }
    }

    #[test]
    fn fixture_keeps_residuals_away_from_kinks() {
        let f = gradient_fixture(1, 10, 3, 3).unwrap();
        for e in &f.graph.edges {
            for t in 0..3 {
                let a = f.model.deform(e.i, t).unwrap();
                let b = f.model.deform(e.j, t).unwrap();
                let dev = geom::norm3(&geom::sub3(&a, &b)) - e.rest_length;
                assert!(dev.abs() >= 1e-2);
            }
        }
        assert!(fixture_parameter_count(&f) > 0);
    }
}
