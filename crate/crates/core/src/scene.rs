//! The canonical scene model and its forward and inverse deformation maps.
//!
//! A foreground splat `i` moves as `x_i(t) = T_i(t)·μ_i`, where `T_i(t)` blends
//! the `K` motion bases of frame `t` with the softmax of its coefficients
//! `β_i`. Background splats are static.

use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{self, BlendWeights, Pose};

/// One Gaussian splat in canonical space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub mu: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion, `w, x, y, z`.
    pub orientation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    pub is_foreground: bool,
    /// Index of the track this splat was created from, if any.
    #[serde(default)]
    pub track: Option<usize>,
}

impl Splat {
    pub fn new(mu: [f64; 3], scale: f64, is_foreground: bool) -> Self {
        Splat {
            mu,
            scale: [scale; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
            opacity: 1.0,
            color: [0.5; 3],
            is_foreground,
            track: None,
        }
    }

    pub fn mean_scale(&self) -> f64 {
        (self.scale[0] + self.scale[1] + self.scale[2]) / 3.0
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if self.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("splat {idx} has a non-positive scale")));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Domain(format!(
                "splat {idx} opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.mu.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("splat {idx} has a non-finite position")));
        }
        let n = geom::dot4(&self.orientation, &self.orientation).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("splat {idx} orientation is not unit-norm")));
        }
        Ok(())
    }
}

/// Per-foreground-splat coefficient vectors `β_i ∈ ℝ^K`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionCoeffs {
    num_bases: usize,
    data: Vec<f64>,
}

impl MotionCoeffs {
    pub fn new(num_bases: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if num_bases == 0 {
            return Err(Error::Config("motion basis count must be at least 1".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * num_bases);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != num_bases {
                return Err(Error::Domain(format!(
                    "coefficient row {i} has length {}, expected {num_bases}",
                    row.len()
                )));
            }
            if row.iter().any(|b| !b.is_finite()) {
                return Err(Error::Domain(format!("coefficient row {i} is not finite")));
            }
            data.extend_from_slice(row);
        }
        Ok(MotionCoeffs { num_bases, data })
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.num_bases
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.data[f * self.num_bases..(f + 1) * self.num_bases]
    }

    pub fn row_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.data[f * self.num_bases..(f + 1) * self.num_bases]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.num_bases);
        self.data.extend_from_slice(row);
    }
}

/// The `K × T` grid of motion bases, stored frame-major (`t * K + k`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionBases {
    num_bases: usize,
    num_frames: usize,
    grid: Vec<Pose>,
}

impl MotionBases {
    pub fn identity(num_bases: usize, num_frames: usize) -> Self {
        MotionBases {
            num_bases,
            num_frames,
            grid: vec![Pose::identity(); num_bases * num_frames],
        }
    }

    /// Builds the grid from `f(k, t)`.
    pub fn from_fn(num_bases: usize, num_frames: usize, mut f: impl FnMut(usize, usize) -> Pose) -> Self {
        let mut grid = Vec::with_capacity(num_bases * num_frames);
        for t in 0..num_frames {
            for k in 0..num_bases {
                grid.push(f(k, t));
            }
        }
        MotionBases {
            num_bases,
            num_frames,
            grid,
        }
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn get(&self, k: usize, t: usize) -> &Pose {
        &self.grid[t * self.num_bases + k]
    }

    pub fn set(&mut self, k: usize, t: usize, pose: Pose) {
        self.grid[t * self.num_bases + k] = pose;
    }

    /// All `K` bases of frame `t`.
    pub fn frame(&self, t: usize) -> &[Pose] {
        &self.grid[t * self.num_bases..(t + 1) * self.num_bases]
    }

    /// Bases restricted to frames `[start, end)`, reindexed from 0.
    pub fn frames(&self, start: usize, end: usize) -> MotionBases {
        MotionBases {
            num_bases: self.num_bases,
            num_frames: end - start,
            grid: self.grid[start * self.num_bases..end * self.num_bases].to_vec(),
        }
    }
}

/// Softmax of the coefficient vector: the convex weights fed to the blend.
pub fn blend_weights(beta: &[f64]) -> BlendWeights {
    BlendWeights::from_raw_unchecked(softmax(beta))
}

pub(crate) fn softmax(beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; beta.len()];
    softmax_into(beta, &mut out);
    out
}

pub(crate) fn softmax_into(beta: &[f64], out: &mut [f64]) {
    let max = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &b) in out.iter_mut().zip(beta) {
        *o = (b - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Canonical splats, motion coefficients and motion bases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneModelRepr", into = "SceneModelRepr")]
pub struct SceneModel {
    splats: Vec<Splat>,
    coeffs: MotionCoeffs,
    bases: MotionBases,
    t_cano: usize,
    // foreground ordinal of each splat
    ordinal: Vec<Option<usize>>,
    foreground: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneModelRepr {
    t_cano: usize,
    splats: Vec<Splat>,
    coeffs: MotionCoeffs,
    bases: MotionBases,
}

impl TryFrom<SceneModelRepr> for SceneModel {
    type Error = Error;
    fn try_from(r: SceneModelRepr) -> Result<Self> {
        SceneModel::new(r.splats, r.coeffs, r.bases, r.t_cano)
    }
}

impl From<SceneModel> for SceneModelRepr {
    fn from(m: SceneModel) -> Self {
        SceneModelRepr {
            t_cano: m.t_cano,
            splats: m.splats,
            coeffs: m.coeffs,
            bases: m.bases,
        }
    }
}

impl SceneModel {
    /// `coeffs` rows follow the order of the foreground splats in `splats`.
    pub fn new(splats: Vec<Splat>, coeffs: MotionCoeffs, bases: MotionBases, t_cano: usize) -> Result<Self> {
        for (i, s) in splats.iter().enumerate() {
            s.validate(i)?;
        }
        let mut ordinal = Vec::with_capacity(splats.len());
        let mut foreground = Vec::new();
        for (i, s) in splats.iter().enumerate() {
            if s.is_foreground {
                ordinal.push(Some(foreground.len()));
                foreground.push(i);
            } else {
                ordinal.push(None);
            }
        }
        if coeffs.len() != foreground.len() {
            return Err(Error::Domain(format!(
                "{} coefficient rows for {} foreground splats",
                coeffs.len(),
                foreground.len()
            )));
        }
        if coeffs.num_bases() != bases.num_bases() {
            return Err(Error::Domain(format!(
                "coefficients have K = {}, bases have K = {}",
                coeffs.num_bases(),
                bases.num_bases()
            )));
        }
        if bases.num_frames() == 0 {
            return Err(Error::Domain("motion bases need at least one frame".into()));
        }
        if t_cano >= bases.num_frames() {
            return Err(Error::Domain(format!(
                "canonical frame {t_cano} outside 0..{}",
                bases.num_frames()
            )));
        }
        Ok(SceneModel {
            splats,
            coeffs,
            bases,
            t_cano,
            ordinal,
            foreground,
        })
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn splat(&self, i: usize) -> &Splat {
        &self.splats[i]
    }

    pub fn coeffs(&self) -> &MotionCoeffs {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut MotionCoeffs {
        &mut self.coeffs
    }

    pub fn bases(&self) -> &MotionBases {
        &self.bases
    }

    pub fn bases_mut(&mut self) -> &mut MotionBases {
        &mut self.bases
    }

    pub fn t_cano(&self) -> usize {
        self.t_cano
    }

    pub fn frame_count(&self) -> usize {
        self.bases.num_frames()
    }

    pub fn num_bases(&self) -> usize {
        self.bases.num_bases()
    }

    /// Splat indices of the foreground set, in coefficient-row order.
    pub fn foreground_indices(&self) -> &[usize] {
        &self.foreground
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.len()
    }

    /// Foreground ordinal (coefficient row) of splat `i`.
    pub fn ordinal(&self, i: usize) -> Option<usize> {
        self.ordinal[i]
    }

    pub fn beta(&self, i: usize) -> Result<&[f64]> {
        let f = self.ordinal[i]
            .ok_or_else(|| Error::Domain(format!("splat {i} is background and has no coefficients")))?;
        Ok(self.coeffs.row(f))
    }

    pub fn set_mu(&mut self, i: usize, mu: [f64; 3]) {
        self.splats[i].mu = mu;
    }

    pub fn set_opacity(&mut self, i: usize, opacity: f64) {
        self.splats[i].opacity = opacity.clamp(0.0, 1.0);
    }

    pub fn set_color(&mut self, i: usize, color: [f64; 3]) {
        self.splats[i].color = color;
    }

    /// Appends a foreground splat with coefficients `beta`.
    pub fn push_foreground(&mut self, mut splat: Splat, beta: &[f64]) -> Result<usize> {
        if beta.len() != self.num_bases() {
            return Err(Error::Domain(format!(
                "coefficient vector has length {}, expected {}",
                beta.len(),
                self.num_bases()
            )));
        }
        splat.is_foreground = true;
        splat.validate(self.splats.len())?;
        let idx = self.splats.len();
        self.ordinal.push(Some(self.foreground.len()));
        self.foreground.push(idx);
        self.splats.push(splat);
        self.coeffs.push(beta);
        Ok(idx)
    }

    pub fn push_background(&mut self, mut splat: Splat) -> Result<usize> {
        splat.is_foreground = false;
        splat.validate(self.splats.len())?;
        let idx = self.splats.len();
        self.ordinal.push(None);
        self.splats.push(splat);
        Ok(idx)
    }

    /// Replaces the bases and canonical frame (same `K`).
    pub fn with_bases(mut self, bases: MotionBases, t_cano: usize) -> Result<Self> {
        if bases.num_bases() != self.num_bases() {
            return Err(Error::Domain("basis count changed".into()));
        }
        if t_cano >= bases.num_frames() {
            return Err(Error::Domain(format!("canonical frame {t_cano} out of range")));
        }
        self.bases = bases;
        self.t_cano = t_cano;
        Ok(self)
    }

    fn check_frame(&self, t: usize) -> Result<()> {
        if t >= self.frame_count() {
            return Err(Error::Domain(format!(
                "frame {t} outside 0..{}",
                self.frame_count()
            )));
        }
        Ok(())
    }

    /// The blended transform `T_i(t)` of foreground splat `i`.
    pub fn point_transform(&self, i: usize, t: usize) -> Result<Pose> {
        self.check_frame(t)?;
        let beta = self.beta(i)?;
        geom::blend(&blend_weights(beta), self.bases.frame(t))
    }

    /// Position of splat `i` at frame `t`; background splats never move.
    pub fn deform(&self, i: usize, t: usize) -> Result<[f64; 3]> {
        self.check_frame(t)?;
        if i >= self.splats.len() {
            return Err(Error::Domain(format!("splat index {i} out of range")));
        }
        let s = &self.splats[i];
        if !s.is_foreground {
            return Ok(s.mu);
        }
        Ok(self.point_transform(i, t)?.apply_array(s.mu))
    }

    /// Positions of every splat at frame `t`.
    pub fn positions_at(&self, t: usize) -> Result<Vec<[f64; 3]>> {
        (0..self.splats.len()).map(|i| self.deform(i, t)).collect()
    }

    /// Maps an observed point `x` at frame `t` back to canonical space under coefficients `beta`.
    pub fn backtrace_to_canonical(&self, x: [f64; 3], beta: &[f64], t: usize) -> Result<[f64; 3]> {
        self.check_frame(t)?;
        if beta.len() != self.num_bases() {
            return Err(Error::Domain(format!(
                "coefficient vector has length {}, expected {}",
                beta.len(),
                self.num_bases()
            )));
        }
        let transform = geom::blend(&blend_weights(beta), self.bases.frame(t))?;
        Ok(transform.inverse().apply_array(x))
    }
}

/// A directed foreground edge `i → j` (foreground ordinals) with its canonical rest length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
}

/// k-nearest-neighbor graph over canonical foreground positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub k: usize,
    pub edges: Vec<Edge>,
    /// Motion similarity `s_ij` per edge.
    pub similarity: Vec<f64>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Recomputes every `s_ij` from the model's current coefficients.
    pub fn refresh_similarity(&mut self, model: &SceneModel) {
        let weights: Vec<Vec<f64>> = (0..model.foreground_count())
            .map(|f| softmax(model.coeffs().row(f)))
            .collect();
        for (s, e) in self.similarity.iter_mut().zip(&self.edges) {
            *s = crate::losses::cosine(&weights[e.i], &weights[e.j]);
        }
    }
}

/// Links each foreground splat to its `k` nearest canonical neighbors (ties: lowest index).
pub fn build_knn_graph(model: &SceneModel, k: usize) -> Result<KnnGraph> {
    let points: Vec<[f64; 3]> = model
        .foreground_indices()
        .iter()
        .map(|&i| model.splat(i).mu)
        .collect();
    if k == 0 {
        return Err(Error::Config("kNN neighbor count must be at least 1".into()));
    }
    if points.len() < k + 1 {
        return Err(Error::Config(format!(
            "kNN graph with k = {k} needs at least {} foreground splats, model has {}",
            k + 1,
            points.len()
        )));
    }
    let mut edges = Vec::with_capacity(points.len() * k);
    for (i, neighbors) in knn_lists(&points, k).into_iter().enumerate() {
        for (j, d) in neighbors {
            edges.push(Edge { i, j, rest_length: d });
        }
    }
    let mut graph = KnnGraph {
        k,
        similarity: vec![0.0; edges.len()],
        edges,
    };
    graph.refresh_similarity(model);
    Ok(graph)
}

/// For every point, its `k` nearest other points as `(index, distance)`,
/// sorted by distance then index.
pub(crate) fn knn_lists(points: &[[f64; 3]], k: usize) -> Vec<Vec<(usize, f64)>> {
    use rayon::prelude::*;
    (0..points.len())
        .into_par_iter()
        .map(|i| nearest_to(points, &points[i], k, Some(i)))
        .collect()
}

/// The `k` points nearest to `query`, optionally skipping one index.
pub(crate) fn nearest_to(points: &[[f64; 3]], query: &[f64; 3], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    // Keep a sorted buffer of the best k by (squared distance, index).
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, p) in points.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let d2 = geom::dot3(&geom::sub3(p, query), &geom::sub3(p, query));
        if best.len() == k && d2 >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, bj)| bd < d2 || (bd == d2 && bj < j));
        best.insert(pos, (d2, j));
        best.truncate(k);
    }
    best.into_iter().map(|(d2, j)| (j, d2.sqrt())).collect()
}

/// The frame with the most visible foreground tracks (ties: earliest frame).
pub fn select_canonical_frame(bundle: &SequenceBundle) -> usize {
    select_canonical_frame_in(bundle, 0..bundle.frame_count())
}

/// [`select_canonical_frame`] restricted to `frames` (clamped to the bundle, never empty).
pub fn select_canonical_frame_in(bundle: &SequenceBundle, frames: std::ops::Range<usize>) -> usize {
    let end = frames.end.min(bundle.frame_count()).max(1);
    let start = frames.start.min(end - 1);
    let mut best = start;
    let mut best_count = bundle.visible_foreground_count(start);
    for t in start + 1..end {
        let c = bundle.visible_foreground_count(t);
        if c > best_count {
            best = t;
            best_count = c;
        }
    }
    best
}
