//! Depth-only splat rasterization, invisibility scores and disocclusion sets.
//!
//! Splats are drawn as screen-space disks of uniform opacity and composited
//! front to back: `D = Σ d_i α_i T_i` with `T_i = Π_{j<i} (1 − α_j)`. The
//! buffer is unnormalized, so a partially transparent frontmost splat reads
//! shallower than its own depth.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{Pose, Smoothstep};
use crate::scene::SceneModel;

/// Splats at or in front of this camera depth are skipped.
pub const NEAR_PLANE: f64 = 1e-4;
/// Pixels with less accumulated opacity read as empty (`+∞`).
pub const MIN_ALPHA: f64 = 1e-3;
pub const MIN_RADIUS_PX: f64 = 0.5;
pub const MAX_RADIUS_PX: f64 = 32.0;

/// Pinhole camera; `pose` maps world to camera coordinates (camera looks down `+z`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            fx: 80.0,
            fy: 80.0,
            cx: 48.0,
            cy: 48.0,
            width: 96,
            height: 96,
            pose: Pose::identity(),
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Domain("camera focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("camera image must be at least 1×1".into()));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Domain("camera principal point is not finite".into()));
        }
        Ok(())
    }

    /// Camera-space position of a world point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        self.pose.apply_array(p)
    }

    /// Sub-pixel image coordinates and camera depth, or `None` behind the near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= NEAR_PLANE {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// The pixel containing image point `(u, v)`, if inside the image.
    pub fn pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.floor(), v.floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Rendered depth `D̂` and accumulated opacity, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Splats skipped because they were at or behind the near plane.
    pub skipped_behind: usize,
}

impl DepthBuffer {
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    /// ASCII PGM (`P2`) with depths quantized linearly over `[near, far]`; empty pixels map to 65535.
    pub fn to_pgm(&self, near: f64, far: f64) -> String {
        let mut out = format!("P2\n{} {}\n65535\n", self.width, self.height);
        let span = (far - near).max(f64::MIN_POSITIVE);
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|x| {
                    let d = self.depth_at(x, y);
                    let q = if d.is_finite() {
                        (((d - near) / span).clamp(0.0, 1.0) * 65535.0).round() as u32
                    } else {
                        65535
                    };
                    q.to_string()
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Smallest and largest finite depth, if any pixel is covered.
    pub fn depth_bounds(&self) -> Option<(f64, f64)> {
        let finite = self.depth.iter().copied().filter(|d| d.is_finite());
        finite.fold(None, |acc, d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
    }
}

/// A splat ready for compositing.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScreenDisk {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub radius: f64,
    pub alpha: f64,
}

fn disk_radius(mean_scale: f64, fx: f64, z: f64) -> f64 {
    (mean_scale * fx / z).clamp(MIN_RADIUS_PX, MAX_RADIUS_PX)
}

/// Projects and sorts splats front to back by `(z, index)`.
fn screen_disks(positions: &[[f64; 3]], mean_scales: &[f64], opacities: &[f64], camera: &Camera) -> (Vec<ScreenDisk>, usize) {
    let mut disks = Vec::with_capacity(positions.len());
    let mut order = Vec::with_capacity(positions.len());
    let mut skipped = 0;
    for (i, p) in positions.iter().enumerate() {
        match camera.project(*p) {
            Some((u, v, z)) => {
                order.push((z, i, disks.len()));
                disks.push(ScreenDisk {
                    u,
                    v,
                    z,
                    radius: disk_radius(mean_scales[i], camera.fx, z),
                    alpha: opacities[i],
                });
            }
            None => skipped += 1,
        }
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (order.iter().map(|&(_, _, d)| disks[d]).collect(), skipped)
}

/// Pixel span `[lo, hi)` along one axis whose centers may fall inside the disk.
fn span(center: f64, radius: f64, limit: usize) -> (usize, usize) {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor() + 1.0;
    let hi = hi.min(limit as f64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

const BAND_ROWS: usize = 8;

/// Composites sorted disks into a depth buffer.
pub(crate) fn composite(disks: &[ScreenDisk], width: usize, height: usize, skipped_behind: usize) -> DepthBuffer {
    let mut depth = vec![0.0; width * height];
    let mut trans = vec![1.0; width * height];
    depth
        .par_chunks_mut(BAND_ROWS * width)
        .zip(trans.par_chunks_mut(BAND_ROWS * width))
        .enumerate()
        .for_each(|(band, (depth, trans))| {
            let y0 = band * BAND_ROWS;
            let rows = depth.len() / width;
            for d in disks {
                let (ya, yb) = span(d.v, d.radius, height);
                let (ya, yb) = (ya.max(y0), yb.min(y0 + rows));
                if ya >= yb {
                    continue;
                }
                let (xa, xb) = span(d.u, d.radius, width);
                let r2 = d.radius * d.radius;
                for y in ya..yb {
                    let dy = y as f64 + 0.5 - d.v;
                    let row = (y - y0) * width;
                    for x in xa..xb {
                        let dx = x as f64 + 0.5 - d.u;
                        if dx * dx + dy * dy > r2 {
                            continue;
                        }
                        let p = row + x;
                        depth[p] += d.z * d.alpha * trans[p];
                        trans[p] *= 1.0 - d.alpha;
                    }
                }
            }
        });
    let mut alpha = vec![0.0; width * height];
    for p in 0..width * height {
        alpha[p] = 1.0 - trans[p];
        if alpha[p] < MIN_ALPHA {
            depth[p] = f64::INFINITY;
        }
    }
    DepthBuffer {
        width,
        height,
        depth,
        alpha,
        skipped_behind,
    }
}

/// Renders splats given directly by world position, mean scale and opacity.
pub fn render_points(positions: &[[f64; 3]], mean_scales: &[f64], opacities: &[f64], camera: &Camera) -> Result<DepthBuffer> {
    camera.validate()?;
    if mean_scales.len() != positions.len() || opacities.len() != positions.len() {
        return Err(Error::Domain("position, scale and opacity arrays differ in length".into()));
    }
    let (disks, skipped) = screen_disks(positions, mean_scales, opacities, camera);
    Ok(composite(&disks, camera.width as usize, camera.height as usize, skipped))
}

/// Renders every splat of `model` deformed to frame `t`.
pub fn render_depth(model: &SceneModel, camera: &Camera, t: usize) -> Result<DepthBuffer> {
    let positions = model.positions_at(t)?;
    render_frame(model, &positions, camera)
}

fn render_frame(model: &SceneModel, positions: &[[f64; 3]], camera: &Camera) -> Result<DepthBuffer> {
    let scales: Vec<f64> = model.splats().iter().map(|s| s.mean_scale()).collect();
    let opacities: Vec<f64> = model.splats().iter().map(|s| s.opacity).collect();
    render_points(positions, &scales, &opacities, camera)
}

/// Per-foreground-splat `ζ` at one frame, in coefficient-row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvisibilityScores {
    pub zeta: Vec<f64>,
}

fn scores_from_buffer(model: &SceneModel, positions: &[[f64; 3]], buffer: &DepthBuffer, camera: &Camera, ramp: &Smoothstep) -> InvisibilityScores {
    let zeta = model
        .foreground_indices()
        .iter()
        .map(|&i| {
            let Some((u, v, z)) = camera.project(positions[i]) else {
                return 0.0;
            };
            let Some((x, y)) = camera.pixel(u, v) else {
                return 0.0;
            };
            let d = buffer.depth_at(x, y);
            if !d.is_finite() {
                return 0.0;
            }
            ramp.eval(z - d)
        })
        .collect();
    InvisibilityScores { zeta }
}

/// `ζ_i = smoothstep(z_i − D̂(pixel_i), τ0, τ1)` for every foreground splat.
pub fn invisibility(model: &SceneModel, camera: &Camera, t: usize, tau0: f64, tau1: f64) -> Result<InvisibilityScores> {
    let ramp = Smoothstep::new(tau0, tau1)?;
    let positions = model.positions_at(t)?;
    let buffer = render_frame(model, &positions, camera)?;
    Ok(scores_from_buffer(model, &positions, &buffer, camera, &ramp))
}

/// Scores for every frame of the model, one camera per frame.
pub fn invisibility_all(model: &SceneModel, cameras: &[Camera], ramp: &Smoothstep) -> Result<Vec<InvisibilityScores>> {
    if cameras.len() != model.frame_count() {
        return Err(Error::Domain(format!(
            "{} cameras for {} model frames",
            cameras.len(),
            model.frame_count()
        )));
    }
    (0..model.frame_count())
        .into_par_iter()
        .map(|t| {
            let positions = model.positions_at(t)?;
            let buffer = render_frame(model, &positions, &cameras[t])?;
            Ok(scores_from_buffer(model, &positions, &buffer, &cameras[t], ramp))
        })
        .collect()
}

/// `τ0, τ1` either as absolute depths or as fractions of the canonical depth range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Thresholds {
    Absolute { tau0: f64, tau1: f64 },
    Relative { tau0: f64, tau1: f64 },
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Relative { tau0: 0.01, tau1: 0.05 }
    }
}

impl Thresholds {
    /// Resolves to a concrete ramp for `model` seen through `camera` at its canonical frame.
    pub fn resolve(&self, model: &SceneModel, camera: &Camera) -> Result<Smoothstep> {
        match *self {
            Thresholds::Absolute { tau0, tau1 } => Smoothstep::new(tau0, tau1),
            Thresholds::Relative { tau0, tau1 } => {
                let range = depth_range(model, camera, model.t_cano())?;
                if !(range > 0.0) {
                    return Err(Error::Config(
                        "scene depth range is zero; use absolute invisibility thresholds".into(),
                    ));
                }
                Smoothstep::new(tau0 * range, tau1 * range)
            }
        }
    }
}

/// Spread of camera depths of all splats in front of the camera at frame `t`.
pub fn depth_range(model: &SceneModel, camera: &Camera, t: usize) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in model.positions_at(t)? {
        let z = camera.to_camera(p)[2];
        if z > NEAR_PLANE {
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    Ok(if hi >= lo { hi - lo } else { 0.0 })
}

/// Tracks that are visible at a frame but were hidden at the canonical frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisocclusionSet {
    pub frames: BTreeMap<usize, Vec<usize>>,
}

impl DisocclusionSet {
    pub fn at(&self, t: usize) -> &[usize] {
        self.frames.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.frames.values().all(Vec::is_empty)
    }

    /// Each disoccluded track paired with its earliest disocclusion frame, sorted by track.
    pub fn first_appearances(&self) -> Vec<(usize, usize)> {
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        for (&t, tracks) in &self.frames {
            for &i in tracks {
                first.entry(i).or_insert(t);
            }
        }
        first.into_iter().collect()
    }
}

/// `𝒟(t) = { i : v_i(t) ∧ ¬v_i(t_cano) }` over foreground tracks, for `t` in `driving`.
pub fn detect_disocclusion(bundle: &SequenceBundle, t_cano: usize, driving: Range<usize>) -> Result<DisocclusionSet> {
    if t_cano >= bundle.frame_count() || driving.end > bundle.frame_count() {
        return Err(Error::Domain(format!(
            "frames out of range for a bundle of {} frames",
            bundle.frame_count()
        )));
    }
    let hidden: Vec<usize> = (0..bundle.track_count())
        .filter(|&i| bundle.is_foreground(i) && !bundle.visible(i, t_cano))
        .collect();
    let mut frames = BTreeMap::new();
    for t in driving {
        let found: Vec<usize> = hidden.iter().copied().filter(|&i| bundle.visible(i, t)).collect();
        if !found.is_empty() {
            frames.insert(t, found);
        }
    }
    Ok(DisocclusionSet { frames })
}
