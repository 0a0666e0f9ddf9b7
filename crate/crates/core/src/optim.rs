//! Two-stage fitting: motion initialization and refinement, driven by Adam.
//!
//! Initialization clusters foreground tracks by their displacement profile,
//! fits one rigid motion per cluster and frame, seeds the coefficients from
//! soft cluster memberships and then optimizes bases and coefficients.
//! Refinement additionally moves canonical positions and opacities under
//! the occlusion-aware rigidity loss.

use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{self, Pose, Smoothstep};
use crate::losses::{self, Gradients, LossBreakdown, LossValues, LossWeights, Stage};
use crate::scene::{self, build_knn_graph, KnnGraph, MotionBases, MotionCoeffs, SceneModel, Splat};
use crate::visibility::{self, InvisibilityScores};

/// Step multipliers per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSteps {
    pub bases: f64,
    pub beta: f64,
    pub mu: f64,
    pub opacity: f64,
}

impl Default for GroupSteps {
    fn default() -> Self {
        GroupSteps {
            bases: 1.0,
            beta: 1.0,
            mu: 0.1,
            opacity: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub init_epochs: usize,
    pub refine_epochs: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub group_steps: GroupSteps,
    pub seed: u64,
    /// Return the iterate with the lowest total loss instead of the last one.
    pub keep_best: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            init_epochs: 500,
            refine_epochs: 500,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            group_steps: GroupSteps::default(),
            seed: 0,
            keep_best: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }

        let g = self.group_steps;
        for (name, v) in [("bases", g.bases), ("beta", g.beta), ("mu", g.mu), ("opacity", g.opacity)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("group step for {name} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Parameter groups of a [`SceneModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Bases,
    Beta,
    Mu,
    Opacity,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Bases => "bases",
            Group::Beta => "beta",
            Group::Mu => "mu",
            Group::Opacity => "opacity",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &OptimConfig, t: i32) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Adaptive-moment optimizer over the groups of a scene model.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimConfig,
    steps: i32,
    bases: Moments,
    beta: Moments,
    mu: Moments,
    opacity: Moments,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Self {
        Adam {
            config,
            steps: 0,
            bases: Moments::default(),
            beta: Moments::default(),
            mu: Moments::default(),
            opacity: Moments::default(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// First and second moments of a group (empty before its first step).
    pub fn moments(&self, group: Group) -> (&[f64], &[f64]) {
        let m = match group {
            Group::Bases => &self.bases,
            Group::Beta => &self.beta,
            Group::Mu => &self.mu,
            Group::Opacity => &self.opacity,
        };
        (&m.m, &m.v)
    }

    /// One update of the listed groups; basis quaternions are renormalized afterwards.
    pub fn step(&mut self, model: &mut SceneModel, grads: &Gradients, groups: &[Group]) -> Result<()> {
        grads.check_finite()?;
        self.steps += 1;
        let t = self.steps;
        let cfg = self.config;
        let lr = cfg.step_size;
        for &group in groups {
            match group {
                Group::Bases => {
                    let mut flat = bases_flat(model.bases());
                    let g = bases_grad_flat(grads);
                    self.bases.update(&mut flat, &g, lr * cfg.group_steps.bases, &cfg, t);
                    write_bases(model.bases_mut(), &flat);
                }
                Group::Beta => {
                    self.beta
                        .update(model.coeffs_mut().as_flat_mut(), &grads.beta, lr * cfg.group_steps.beta, &cfg, t);
                }
                Group::Mu => {
                    let mut flat: Vec<f64> = model.splats().iter().flat_map(|s| s.mu).collect();
                    let g: Vec<f64> = grads.mu.iter().flatten().copied().collect();
                    self.mu.update(&mut flat, &g, lr * cfg.group_steps.mu, &cfg, t);
                    for (i, c) in flat.chunks(3).enumerate() {
                        model.set_mu(i, [c[0], c[1], c[2]]);
                    }
                }
                Group::Opacity => {
                    let mut flat: Vec<f64> = model.splats().iter().map(|s| s.opacity).collect();
                    self.opacity.update(&mut flat, &grads.opacity, lr * cfg.group_steps.opacity, &cfg, t);
                    for (i, &o) in flat.iter().enumerate() {
                        model.set_opacity(i, o);
                    }
                }
            }
        }
        Ok(())
    }
}

fn bases_flat(bases: &MotionBases) -> Vec<f64> {
    let mut out = Vec::with_capacity(bases.num_bases() * bases.num_frames() * 7);
    for t in 0..bases.num_frames() {
        for p in bases.frame(t) {
            out.extend_from_slice(&p.wxyz());
            out.extend_from_slice(&p.translation_array());
        }
    }
    out
}

fn bases_grad_flat(g: &Gradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.rotation.len() * 7);
    for (r, t) in g.rotation.iter().zip(&g.translation) {
        out.extend_from_slice(r);
        out.extend_from_slice(t);
    }
    out
}

fn write_bases(bases: &mut MotionBases, flat: &[f64]) {
    let k = bases.num_bases();
    for (cell, c) in flat.chunks(7).enumerate() {
        let pose = Pose::new([c[0], c[1], c[2], c[3]], [c[4], c[5], c[6]]);
        bases.set(cell % k, cell / k, pose);
    }
}

/// Summary of one optimization stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: usize,
    /// Loss values before each step.
    pub history: Vec<LossValues>,
    /// Loss values of the returned model.
    #[serde(rename = "final")]
    pub final_values: LossValues,
    pub best_epoch: usize,
}

/// Everything recorded about a fit. Wall time is kept out of the serialized form
/// so that reports of identical runs are byte-identical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub t_cano: usize,
    pub splats: usize,
    pub foreground_splats: usize,
    pub stages: Vec<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gradient_check: Option<GradCheckReport>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl FitReport {
    pub fn final_values(&self) -> Option<LossValues> {
        self.stages.last().map(|s| s.final_values)
    }
}

/// Loss is considered diverged after this many consecutive epochs above `factor ×` the initial loss.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;

/// Runs `epochs` Adam steps on `groups`, evaluating with `eval` before each step.
fn run_stage(
    name: &str,
    model: &mut SceneModel,
    config: &OptimConfig,
    epochs: usize,
    groups: &[Group],
    mut eval: impl FnMut(&SceneModel) -> Result<LossBreakdown>,
) -> Result<StageReport> {
    let mut adam = Adam::new(*config);
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, SceneModel)> = None;
    let mut initial = None;
    let mut above = 0;
    for epoch in 0..=epochs {
        let loss = eval(model)?;
        let total = loss.values.total;
        if !total.is_finite() {
            return Err(Error::NonFinite { group: "loss".into() });
        }
        let first = *initial.get_or_insert(total);
        if total > DIVERGENCE_FACTOR * first && first > 0.0 {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged(format!(
                    "{name} loss {total:.6e} stayed above {DIVERGENCE_FACTOR}× the initial {first:.6e} for {DIVERGENCE_PATIENCE} epochs (epoch {epoch}); lower step_size"
                )));
            }
        } else {
            above = 0;
        }
        if config.keep_best && best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, epoch, model.clone()));
        }
        if epoch == epochs {
            let (final_values, best_epoch) = match best {
                Some((_, e, m)) if e != epochs => {
                    *model = m;
                    (eval(model)?.values, e)
                }
                _ => (loss.values, epochs),
            };
            return Ok(StageReport {
                stage: name.into(),
                epochs,
                history,
                final_values,
                best_epoch,
            });
        }
        history.push(loss.values);
        adam.step(model, &loss.gradients, groups)?;
    }
    unreachable!()
}

// ---------------------------------------------------------------------------
// Initialization

/// Closed-form least-squares rigid motion taking `src` onto `dst`.
pub fn rigid_fit(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Option<Pose> {
    if src.len() != dst.len() || src.len() < 3 {
        return None;
    }
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let (cs, cd) = (mean(src), mean(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = cd - rotation * cs;
    Some(Pose { rotation, translation })
}

/// Masked squared distance between a track's displacement profile and a centroid.
fn profile_distance(feat: &[[f64; 3]], mask: &[bool], centroid: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((f, &m), c) in feat.iter().zip(mask).zip(centroid) {
        if m {
            let d = geom::sub3(f, c);
            acc += geom::dot3(&d, &d);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

struct Clustering {
    labels: Vec<usize>,
    distances: Vec<Vec<f64>>,
}

/// k-means++ seeded Lloyd iterations on masked displacement profiles.
fn cluster_profiles(features: &[Vec<[f64; 3]>], masks: &[Vec<bool>], k: usize, rng: &mut ChaCha8Rng) -> Clustering {
    let n = features.len();
    let frames = features[0].len();
    let filled = |i: usize| -> Vec<[f64; 3]> {
        // Hold the last observed displacement across hidden frames.
        let mut last = [0.0; 3];
        (0..frames)
            .map(|t| {
                if masks[i][t] {
                    last = features[i][t];
                }
                last
            })
            .collect()
    };
    let mut centroids: Vec<Vec<[f64; 3]>> = vec![filled(rng.random_range(0..n))];
    let mut chosen = vec![false; n];
    while centroids.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                centroids
                    .iter()
                    .map(|c| profile_distance(&features[i], &masks[i], c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            if free.is_empty() {
                rng.random_range(0..n)
            } else {
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[pick] = true;
        centroids.push(filled(pick));
    }
    let mut labels = vec![usize::MAX; n];
    let mut distances = vec![vec![0.0; k]; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            for c in 0..k {
                distances[i][c] = profile_distance(&features[i], &masks[i], &centroids[c]);
                if distances[i][c] < distances[i][best] {
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            for (t, ct) in centroid.iter_mut().enumerate() {
                let mut acc = [0.0; 3];
                let mut cnt = 0usize;
                for i in 0..n {
                    if labels[i] == c && masks[i][t] {
                        for j in 0..3 {
                            acc[j] += features[i][t][j];
                        }
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    *ct = acc.map(|a| a / cnt as f64);
                }
            }
        }
    }
    Clustering { labels, distances }
}

/// Uniform mixing floor applied to soft memberships before taking logs.
const MEMBERSHIP_FLOOR: f64 = 0.05;

/// Per-cluster per-frame rigid fits with temporal and global fallbacks.
fn fit_bases(
    bundle: &SequenceBundle,
    tracks: &[usize],
    labels: &[usize],
    k: usize,
    t_cano: usize,
) -> MotionBases {
    let frames = bundle.frame_count();
    let canonical: Vec<[f64; 3]> = tracks.iter().map(|&i| bundle.position(i, t_cano)).collect();
    let fit_on = |set: &[usize], t: usize| -> Option<Pose> {
        let src: Vec<[f64; 3]> = set.iter().map(|&n| canonical[n]).collect();
        let dst: Vec<[f64; 3]> = set.iter().map(|&n| bundle.position(tracks[n], t)).collect();
        rigid_fit(&src, &dst)
    };
    let fill = |fits: Vec<Option<Pose>>| -> Option<Vec<Pose>> {
        let fitted: Vec<usize> = (0..frames).filter(|&t| fits[t].is_some()).collect();
        if fitted.is_empty() {
            return None;
        }
        Some(
            (0..frames)
                .map(|t| {
                    let nearest = *fitted
                        .iter()
                        .min_by_key(|&&s| (s.abs_diff(t), s))
                        .expect("nonempty");
                    fits[nearest].unwrap()
                })
                .collect(),
        )
    };
    let visible_at: Vec<Vec<usize>> = (0..frames)
        .map(|t| (0..tracks.len()).filter(|&n| bundle.visible(tracks[n], t)).collect())
        .collect();
    let global = fill((0..frames).map(|t| fit_on(&visible_at[t], t)).collect())
        .unwrap_or_else(|| vec![Pose::identity(); frames]);
    let mut columns = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..tracks.len()).filter(|&n| labels[n] == c).collect();
        if members.is_empty() {
            columns.push(global.clone());
            continue;
        }
        let mut centroid = [0.0; 3];
        for &n in &members {
            for d in 0..3 {
                centroid[d] += canonical[n][d] / members.len() as f64;
            }
        }
        let fits: Vec<Option<Pose>> = (0..frames)
            .map(|t| {
                let mut set: Vec<usize> = members.iter().copied().filter(|&n| bundle.visible(tracks[n], t)).collect();
                if set.len() < MIN_FIT_POINTS {
                    // Borrow the closest visible tracks so hidden parts follow their surroundings.
                    let mut others: Vec<(f64, usize)> = visible_at[t]
                        .iter()
                        .filter(|&&n| labels[n] != c)
                        .map(|&n| (geom::norm3(&geom::sub3(&canonical[n], &centroid)), n))
                        .collect();
                    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let missing = MIN_FIT_POINTS - set.len();
                    set.extend(others.iter().take(missing).map(|o| o.1));
                }
                fit_on(&set, t)
            })
            .collect();
        columns.push(fill(fits).unwrap_or_else(|| global.clone()));
    }
    MotionBases::from_fn(k, frames, |kk, t| columns[kk][t])
}

fn mean_neighbor_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    if points.len() < 2 {
        return vec![0.05; points.len()];
    }
    let k = k.min(points.len() - 1);
    scene::knn_lists(points, k)
        .into_iter()
        .map(|nb| nb.iter().map(|&(_, d)| d).sum::<f64>() / nb.len() as f64)
        .collect()
}

/// Fewest points a per-frame basis fit uses.
const MIN_FIT_POINTS: usize = 6;

/// Splat footprint relative to the mean distance to the 3 nearest neighbors.
const SCALE_FACTOR: f64 = 0.75;

/// Canonical model seeded from the tracks, before any gradient step.
pub fn seed_model(bundle: &SequenceBundle, weights: &LossWeights, seed: u64) -> Result<SceneModel> {
    seed_model_at(bundle, weights, seed, scene::select_canonical_frame(bundle))
}

/// [`seed_model`] with a caller-chosen canonical frame.
pub fn seed_model_at(bundle: &SequenceBundle, weights: &LossWeights, seed: u64, t_cano: usize) -> Result<SceneModel> {
    weights.validate()?;
    let k = weights.num_bases;
    if t_cano >= bundle.frame_count() {
        return Err(Error::Domain(format!("canonical frame {t_cano} out of range")));
    }
    let tracks: Vec<usize> = (0..bundle.track_count())
        .filter(|&i| bundle.is_foreground(i) && bundle.visible(i, t_cano))
        .collect();
    if tracks.len() < k {
        return Err(Error::Config(format!(
            "only {} foreground tracks are visible at the canonical frame {t_cano}, fewer than num_bases = {k}; reduce num_bases",
            tracks.len()
        )));
    }
    let frames = bundle.frame_count();
    let features: Vec<Vec<[f64; 3]>> = tracks
        .iter()
        .map(|&i| {
            let c = bundle.position(i, t_cano);
            (0..frames).map(|t| geom::sub3(&bundle.position(i, t), &c)).collect()
        })
        .collect();
    let masks: Vec<Vec<bool>> = tracks
        .iter()
        .map(|&i| (0..frames).map(|t| bundle.visible(i, t)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clustering = cluster_profiles(&features, &masks, k, &mut rng);
    let bases = fit_bases(bundle, &tracks, &clustering.labels, k, t_cano);

    // Soft memberships: softmax of −distance / temperature, mixed with a uniform floor.
    let assigned: Vec<f64> = clustering
        .labels
        .iter()
        .zip(&clustering.distances)
        .map(|(&l, d)| d[l])
        .collect();
    let temperature = (assigned.iter().sum::<f64>() / assigned.len() as f64).max(1e-12);
    let rows: Vec<Vec<f64>> = clustering
        .distances
        .iter()
        .map(|d| {
            let logits: Vec<f64> = d.iter().map(|&x| -x / temperature).collect();
            scene::softmax(&logits)
                .iter()
                .map(|&r| ((1.0 - MEMBERSHIP_FLOOR) * r + MEMBERSHIP_FLOOR / k as f64).ln())
                .collect()
        })
        .collect();

    let fg_points: Vec<[f64; 3]> = tracks.iter().map(|&i| bundle.position(i, t_cano)).collect();
    let fg_scale = mean_neighbor_distance(&fg_points, 3);
    let mut splats = Vec::with_capacity(bundle.track_count());
    for (n, &i) in tracks.iter().enumerate() {
        let mut s = Splat::new(fg_points[n], (SCALE_FACTOR * fg_scale[n]).max(1e-6), true);
        s.track = Some(i);
        if let Some(c) = bundle.color(i) {
            s.color = c.map(|x| x as f64);
        }
        splats.push(s);
    }
    let bg: Vec<(usize, [f64; 3])> = (0..bundle.track_count())
        .filter(|&i| !bundle.is_foreground(i))
        .filter_map(|i| (0..frames).find(|&t| bundle.visible(i, t)).map(|t| (i, bundle.position(i, t))))
        .collect();
    let bg_points: Vec<[f64; 3]> = bg.iter().map(|b| b.1).collect();
    let bg_scale = mean_neighbor_distance(&bg_points, 3);
    for (n, &(i, p)) in bg.iter().enumerate() {
        let mut s = Splat::new(p, (SCALE_FACTOR * bg_scale[n]).max(1e-6), false);
        s.track = Some(i);
        if let Some(c) = bundle.color(i) {
            s.color = c.map(|x| x as f64);
        }
        splats.push(s);
    }
    SceneModel::new(splats, MotionCoeffs::new(k, rows)?, bases, t_cano)
}

/// Seeds the model from the tracks and runs the initialization stage.
pub fn init_motion(bundle: &SequenceBundle, weights: &LossWeights, config: &OptimConfig) -> Result<(SceneModel, KnnGraph, StageReport)> {
    init_motion_at(bundle, weights, config, scene::select_canonical_frame(bundle))
}

/// [`init_motion`] with a caller-chosen canonical frame.
pub fn init_motion_at(
    bundle: &SequenceBundle,
    weights: &LossWeights,
    config: &OptimConfig,
    t_cano: usize,
) -> Result<(SceneModel, KnnGraph, StageReport)> {
    config.validate()?;
    let mut model = seed_model_at(bundle, weights, config.seed, t_cano)?;
    let mut graph = build_knn_graph(&model, weights.knn_k)?;
    let report = optimize_init(&mut model, &mut graph, bundle, weights, config, config.init_epochs)?;
    Ok((model, graph, report))
}

/// Initialization-stage optimization of bases and coefficients.
pub fn optimize_init(
    model: &mut SceneModel,
    graph: &mut KnnGraph,
    bundle: &SequenceBundle,
    weights: &LossWeights,
    config: &OptimConfig,
    epochs: usize,
) -> Result<StageReport> {
    let report = run_stage("init", model, config, epochs, &[Group::Bases, Group::Beta], |m| {
        graph.refresh_similarity(m);
        losses::total_loss(Stage::Init, m, bundle, graph, weights, None)
    })?;
    graph.refresh_similarity(model);
    Ok(report)
}

/// Refinement: bases, coefficients, canonical positions and opacities under the refine objective.
///
/// Invisibility scores and motion similarities are recomputed before every step.
pub fn refine(
    model: &mut SceneModel,
    graph: &mut KnnGraph,
    bundle: &SequenceBundle,
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<StageReport> {
    config.validate()?;
    if bundle.frame_count() != model.frame_count() {
        return Err(Error::Domain("bundle and model frame counts differ".into()));
    }
    let ramp = weights.thresholds.resolve(model, bundle.camera(model.t_cano()))?;
    let groups = [Group::Bases, Group::Beta, Group::Mu, Group::Opacity];
    let report = run_stage("refine", model, config, config.refine_epochs, &groups, |m| {
        graph.refresh_similarity(m);
        let zeta = if weights.lambda_rigid > 0.0 {
            visibility::invisibility_all(m, bundle.cameras(), &ramp)?
        } else {
            Vec::new()
        };
        losses::total_loss(Stage::Refine, m, bundle, graph, weights, Some(&zeta))
    })?;
    graph.refresh_similarity(model);
    Ok(report)
}

/// Both stages back to back.
pub fn fit(bundle: &SequenceBundle, weights: &LossWeights, config: &OptimConfig) -> Result<(SceneModel, KnnGraph, FitReport)> {
    let start = Instant::now();
    let (mut model, mut graph, init) = init_motion(bundle, weights, config)?;
    let refine = refine(&mut model, &mut graph, bundle, weights, config)?;
    let report = FitReport {
        t_cano: model.t_cano(),
        splats: model.splats().len(),
        foreground_splats: model.foreground_count(),
        stages: vec![init, refine],
        gradient_check: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, graph, report))
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Loss terms covered by the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Track,
    RigidityInit,
    RigidityRefine,
    Smoothness,
    Total,
}

/// Flat parameter slots checked by finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Beta,
    Mu,
    Rotation,
    Translation,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Beta, Slot::Mu, Slot::Rotation, Slot::Translation];

    fn len(self, model: &SceneModel) -> usize {
        let cells = model.num_bases() * model.frame_count();
        match self {
            Slot::Beta => model.coeffs().as_flat().len(),
            Slot::Mu => model.splats().len() * 3,
            Slot::Rotation => cells * 4,
            Slot::Translation => cells * 3,
        }
    }

    fn get(self, model: &SceneModel, idx: usize) -> f64 {
        let k = model.num_bases();
        match self {
            Slot::Beta => model.coeffs().as_flat()[idx],
            Slot::Mu => model.splat(idx / 3).mu[idx % 3],
            Slot::Rotation => {
                let cell = idx / 4;
                model.bases().get(cell % k, cell / k).wxyz()[idx % 4]
            }
            Slot::Translation => {
                let cell = idx / 3;
                model.bases().get(cell % k, cell / k).translation_array()[idx % 3]
            }
        }
    }

    /// Sets one scalar; quaternions are renormalized by the pose constructor.
    fn set(self, model: &mut SceneModel, idx: usize, value: f64) {
        let k = model.num_bases();
        match self {
            Slot::Beta => model.coeffs_mut().as_flat_mut()[idx] = value,
            Slot::Mu => {
                let mut mu = model.splat(idx / 3).mu;
                mu[idx % 3] = value;
                model.set_mu(idx / 3, mu);
            }
            Slot::Rotation => {
                let cell = idx / 4;
                let p = *model.bases().get(cell % k, cell / k);
                let mut q = p.wxyz();
                q[idx % 4] = value;
                model.bases_mut().set(cell % k, cell / k, Pose::new(q, p.translation_array()));
            }
            Slot::Translation => {
                let cell = idx / 3;
                let p = *model.bases().get(cell % k, cell / k);
                let mut t = p.translation_array();
                t[idx % 3] = value;
                model.bases_mut().set(cell % k, cell / k, Pose::new(p.wxyz(), t));
            }
        }
    }

    fn analytic(self, g: &Gradients) -> Vec<f64> {
        match self {
            Slot::Beta => g.beta.clone(),
            Slot::Mu => g.mu.iter().flatten().copied().collect(),
            Slot::Rotation => g.rotation.iter().flatten().copied().collect(),
            Slot::Translation => g.translation.iter().flatten().copied().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub term: TermKind,
    pub slot: Slot,
    /// Zero when both gradients are below `noise_floor`.
    pub max_rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Roundoff bound of the central differences for this slot.
    pub noise_floor: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_for(&self, term: TermKind) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.term == term)
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Norm below which a central-difference gradient of `len` entries is indistinguishable from zero.
pub fn noise_floor(value: f64, eps: f64, len: usize) -> f64 {
    64.0 * f64::EPSILON * value.abs().max(1.0) / eps * (len as f64).sqrt()
}

/// Compares analytic gradients of each term against central differences with step `eps`.
///
/// `zeta` is needed for the occlusion-aware term; it is held fixed, as in training.
pub fn gradient_check(
    model: &SceneModel,
    bundle: &SequenceBundle,
    graph: &KnnGraph,
    weights: &LossWeights,
    zeta: Option<&[InvisibilityScores]>,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut terms = vec![TermKind::Track, TermKind::RigidityInit, TermKind::Smoothness, TermKind::Total];
    if zeta.is_some() {
        terms.insert(2, TermKind::RigidityRefine);
    }
    let eval = |term: TermKind, m: &SceneModel| -> Result<(f64, Gradients)> {
        Ok(match term {
            TermKind::Track => {
                let t = losses::track_loss(m, bundle)?;
                (t.value, t.gradients)
            }
            TermKind::RigidityInit => {
                let t = losses::rigidity_init(m, graph)?;
                (t.value, t.gradients)
            }
            TermKind::RigidityRefine => {
                let t = losses::rigidity_refine(m, graph, zeta.expect("checked"))?;
                (t.value, t.gradients)
            }
            TermKind::Smoothness => {
                let t = losses::smoothness(m);
                (t.value, t.gradients)
            }
            TermKind::Total => {
                let stage = if zeta.is_some() { Stage::Refine } else { Stage::Init };
                let b = losses::total_loss(stage, m, bundle, graph, weights, zeta)?;
                (b.values.total, b.gradients)
            }
        })
    };
    let mut entries = Vec::new();
    for term in terms {
        let (value, grads) = eval(term, model)?;
        for slot in Slot::ALL {
            let analytic = slot.analytic(&grads);
            let mut numeric = vec![0.0; slot.len(model)];
            let mut probe = model.clone();
            for (idx, out) in numeric.iter_mut().enumerate() {
                let x0 = slot.get(model, idx);
                slot.set(&mut probe, idx, x0 + eps);
                let plus = eval(term, &probe)?.0;
                // Restore exactly, including the untouched quaternion components.
                probe = restore(probe, model, slot, idx);
                slot.set(&mut probe, idx, x0 - eps);
                let minus = eval(term, &probe)?.0;
                *out = (plus - minus) / (2.0 * eps);
                probe = restore(probe, model, slot, idx);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (analytic_norm, numeric_norm) = (norm(&analytic), norm(&numeric));
            let noise_floor = noise_floor(value, eps, numeric.len());
            // A gradient that is zero up to roundoff has no meaningful relative error.
            let max_rel_error = if analytic_norm.max(numeric_norm) <= noise_floor {
                0.0
            } else {
                relative_error(&analytic, &numeric)
            };
            entries.push(GradCheckEntry {
                term,
                slot,
                max_rel_error,
                analytic_norm,
                numeric_norm,
                noise_floor,
            });
        }
    }
    Ok(GradCheckReport { eps, entries })
}

fn restore(mut probe: SceneModel, model: &SceneModel, slot: Slot, idx: usize) -> SceneModel {
    let k = model.num_bases();
    match slot {
        Slot::Beta => probe.coeffs_mut().as_flat_mut()[idx] = model.coeffs().as_flat()[idx],
        Slot::Mu => probe.set_mu(idx / 3, model.splat(idx / 3).mu),
        Slot::Rotation | Slot::Translation => {
            let per = if slot == Slot::Rotation { 4 } else { 3 };
            let cell = idx / per;
            probe.bases_mut().set(cell % k, cell / k, *model.bases().get(cell % k, cell / k));
        }
    }
    probe
}

/// Invisibility scores for every frame of `model` under `ramp`.
pub fn invisibility_for(model: &SceneModel, bundle: &SequenceBundle, ramp: &Smoothstep) -> Result<Vec<InvisibilityScores>> {
    visibility::invisibility_all(model, bundle.cameras(), ramp)
}


#[cfg(test)]
mod gradcheck_tests {
    use super::*;
    use crate::synth::gradient_fixture;

    #[test]
    fn analytic_gradients_match_central_differences() {
        for seed in 0..3 {
            let f = gradient_fixture(seed, 12, 4, 3).unwrap();
            let weights = LossWeights::default();
            let report = gradient_check(&f.model, &f.bundle, &f.graph, &weights, Some(&f.zeta), 1e-6).unwrap();
            for e in &report.entries {
                assert!(e.max_rel_error < 1e-4, "{:?} {:?} {}", e.term, e.slot, e.max_rel_error);
            }
        }
    }

    #[test]
    fn single_basis_rigidity_is_zero_up_to_roundoff() {
        // With one basis every splat moves rigidly, so rigidity has no basis gradient.
        let f = gradient_fixture(6, 10, 3, 1).unwrap();
        let report = gradient_check(&f.model, &f.bundle, &f.graph, &LossWeights::default(), Some(&f.zeta), 1e-6).unwrap();
        let e = report
            .entries
            .iter()
            .find(|e| e.term == TermKind::RigidityInit && e.slot == Slot::Translation)
            .unwrap();
        assert!(e.analytic_norm < 1e-12);
        assert!(e.numeric_norm <= e.noise_floor);
        assert_eq!(e.max_rel_error, 0.0);
    }

    #[test]
    fn noise_floor_scales_with_value_and_step() {
        let base = noise_floor(0.5, 1e-6, 4);
        assert_eq!(base, 64.0 * f64::EPSILON / 1e-6 * 2.0);
        assert_eq!(noise_floor(10.0, 1e-6, 4), 10.0 * base);
        assert_eq!(noise_floor(0.5, 1e-3, 4), base * 1e-3);
    }
}
