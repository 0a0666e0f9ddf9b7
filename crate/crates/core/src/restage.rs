//! Joint training on a rewound base sequence followed by a driving sequence.
//!
//! The base is played backward so that its first frame, which the driving
//! sequence shares, sits at the boundary `t1 − 1`. Fitting the concatenation lets
//! the supervised base constrain the bases that the driving frames reuse.

use std::collections::BTreeSet;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{self, Pose};
use crate::losses::LossWeights;
use crate::optim::{self, OptimConfig, StageReport};
use crate::scene::{self, build_knn_graph, KnnGraph, SceneModel, Splat};
use crate::visibility::{self, DisocclusionSet};

/// Largest distance allowed between a track's base and driving positions at the shared frame.
pub const SHARED_FRAME_EPS: f64 = 1e-4;
/// Neighbors used to interpolate the coefficients of an inserted splat.
pub const INSERT_NEIGHBORS: usize = 8;
/// Distance floor of the inverse-distance weights.
pub const IDW_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    /// Frame of the base sequence, played backward.
    RewoundBase(usize),
    Driving(usize),
}

/// Reversed base followed by the driving sequence, sharing one frame at `t1 − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedBundle {
    pub bundle: SequenceBundle,
    /// Length of the base sequence; driving frame `d ≥ 1` sits at `t1 − 1 + d`.
    pub t1: usize,
    pub sources: Vec<FrameSource>,
    driving_foreground: Vec<bool>,
}

impl CombinedBundle {
    pub fn frame_count(&self) -> usize {
        self.bundle.frame_count()
    }

    /// Frames of the driving sequence, shared frame included.
    pub fn driving_range(&self) -> Range<usize> {
        self.t1 - 1..self.frame_count()
    }

    /// The base sequence recovered by reversing `[0, t1)`.
    pub fn base_segment(&self) -> SequenceBundle {
        let frames: Vec<usize> = (0..self.t1).rev().collect();
        self.bundle.select_frames(&frames)
    }

    /// The driving sequence, with its own foreground labels.
    pub fn driving_segment(&self) -> Result<SequenceBundle> {
        self.bundle
            .slice_frames(self.driving_range())?
            .with_foreground(self.driving_foreground.clone())
    }
}

/// Concatenates the reversed base with the driving sequence, dropping the driving copy of the shared frame.
///
/// Foreground labels come from the base sequence.
pub fn rewind_concat(base: &SequenceBundle, driving: &SequenceBundle) -> Result<CombinedBundle> {
    let n = base.track_count();
    if driving.track_count() != n {
        return Err(Error::Mismatch(format!(
            "base has {n} tracks, driving has {}",
            driving.track_count()
        )));
    }
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..n {
        if base.visible(i, 0) && driving.visible(i, 0) {
            let d = geom::norm3(&geom::sub3(&base.position(i, 0), &driving.position(i, 0)));
            if !(d <= SHARED_FRAME_EPS) && worst.is_none_or(|w| d > w.1) {
                worst = Some((i, d));
            }
        }
    }
    if let Some((i, d)) = worst {
        return Err(Error::Mismatch(format!(
            "shared first frame differs: track {i} is {d:.3e} apart (limit {SHARED_FRAME_EPS:e})"
        )));
    }
    let tb = base.frame_count();
    let td = driving.frame_count();
    let mut sources: Vec<FrameSource> = (0..tb).rev().map(FrameSource::RewoundBase).collect();
    sources.extend((1..td).map(FrameSource::Driving));
    let mut cameras = Vec::with_capacity(sources.len());
    let mut tracks = Vec::with_capacity(sources.len() * n);
    let mut visibility = Vec::with_capacity(sources.len() * n);
    for s in &sources {
        let (src, t) = match *s {
            FrameSource::RewoundBase(t) => (base, t),
            FrameSource::Driving(t) => (driving, t),
        };
        cameras.push(*src.camera(t));
        tracks.extend_from_slice(&src.tracks()[t * n..(t + 1) * n]);
        visibility.extend_from_slice(&src.visibility()[t * n..(t + 1) * n]);
    }
    let colors = base.colors().or(driving.colors()).map(<[_]>::to_vec);
    let bundle = SequenceBundle::new(cameras, tracks, visibility, base.foreground().to_vec(), colors)?;
    Ok(CombinedBundle {
        bundle,
        t1: tb,
        sources,
        driving_foreground: driving.foreground().to_vec(),
    })
}

/// Coefficients interpolated from the nearest foreground splats at frame `t`, by inverse distance.
///
/// `positions` are the deformed foreground positions at `t`, indexed by ordinal.
pub fn interpolate_coefficients(model: &SceneModel, positions: &[[f64; 3]], x: [f64; 3]) -> Result<Vec<f64>> {
    if positions.is_empty() {
        return Err(Error::Domain("no foreground splats to interpolate from".into()));
    }
    let k = model.num_bases();
    let mut beta = vec![0.0; k];
    let mut total = 0.0;
    for (ordinal, d) in scene::nearest_to(positions, &x, INSERT_NEIGHBORS, None) {
        let w = 1.0 / d.max(IDW_FLOOR);
        total += w;
        let row = model.coeffs().row(ordinal);
        for (b, r) in beta.iter_mut().zip(row) {
            *b += w * r;
        }
    }
    for b in &mut beta {
        *b /= total;
    }
    Ok(beta)
}

fn foreground_positions(model: &SceneModel, t: usize) -> Result<Vec<[f64; 3]>> {
    model.foreground_indices().iter().map(|&i| model.deform(i, t)).collect()
}

/// Adds one splat per disoccluded track that has none yet, at its earliest disocclusion frame.
///
/// Coefficients are interpolated from the existing foreground splats; the canonical
/// position is the observation traced back through the interpolated transform.
/// Existing splats are left untouched; the caller rebuilds the neighbor graph.
pub fn insert_disoccluded(model: &SceneModel, bundle: &SequenceBundle, dis: &DisocclusionSet) -> Result<SceneModel> {
    let mut out = model.clone();
    if dis.is_empty() {
        return Ok(out);
    }
    if model.foreground_count() == 0 {
        return Err(Error::Domain("cannot insert splats into a model without foreground splats".into()));
    }
    let known: BTreeSet<usize> = model.splats().iter().filter_map(|s| s.track).collect();
    let mut cache: Option<(usize, Vec<[f64; 3]>)> = None;
    let mut firsts = dis.first_appearances();
    firsts.sort_by_key(|&(i, t)| (t, i));
    for (track, t) in firsts {
        if known.contains(&track) {
            continue;
        }
        if track >= bundle.track_count() || t >= model.frame_count() {
            return Err(Error::Domain(format!("disoccluded track {track} at frame {t} is out of range")));
        }
        if cache.as_ref().is_none_or(|c| c.0 != t) {
            cache = Some((t, foreground_positions(model, t)?));
        }
        let positions = &cache.as_ref().expect("filled above").1;
        let x = bundle.position(track, t);
        let beta = interpolate_coefficients(model, positions, x)?;
        let mu = model.backtrace_to_canonical(x, &beta, t)?;
        let neighbors = scene::nearest_to(positions, &x, INSERT_NEIGHBORS, None);
        let scale = neighbors
            .iter()
            .map(|&(o, _)| model.splat(model.foreground_indices()[o]).mean_scale())
            .sum::<f64>()
            / neighbors.len() as f64;
        let mut splat = Splat::new(mu, scale, true);
        splat.track = Some(track);
        if let Some(c) = bundle.color(track) {
            splat.color = c.map(f64::from);
        }
        out.push_foreground(splat, &beta)?;
    }
    Ok(out)
}

/// Keeps frames `[t1 − 1, T)` so the shared frame becomes frame 0.
pub fn truncate(model: &SceneModel, t1: usize) -> Result<SceneModel> {
    let frames = model.frame_count();
    if t1 == 0 || t1 > frames {
        return Err(Error::Domain(format!("t1 = {t1} outside 1..={frames}")));
    }
    let start = t1 - 1;
    let t_cano = model.t_cano().saturating_sub(start);
    model.clone().with_bases(model.bases().frames(start, frames), t_cano)
}

/// Components switched off for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub rigidity: bool,
    pub backtracing: bool,
    pub joint: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.rigidity {
            v.push("rigidity");
        }
        if self.backtracing {
            v.push("backtracing");
        }
        if self.joint {
            v.push("joint");
        }
        v
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma-separated component names.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "rigidity" => a.rigidity = true,
                "backtracing" => a.backtracing = true,
                "joint" => a.joint = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation `{other}` (expected rigidity, backtracing or joint)"
                    )))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestageReport {
    pub ablation: Vec<String>,
    pub t1: usize,
    pub combined_frames: usize,
    pub t_cano: usize,
    pub inserted: usize,
    pub splats: usize,
    pub foreground_splats: usize,
    pub stages: Vec<StageReport>,
}

#[derive(Clone, Debug)]
pub struct Restaged {
    /// Model over the driving frames, shared frame first.
    pub model: SceneModel,
    pub graph: KnnGraph,
    pub report: RestageReport,
}

/// Rewind, initialize, insert disoccluded splats, refine and truncate to the driving frames.
///
/// The canonical frame is chosen within the base segment. With `joint` ablated the
/// driving sequence is fitted on its own.
pub fn restage(
    base: &SequenceBundle,
    driving: &SequenceBundle,
    weights: &LossWeights,
    config: &OptimConfig,
    ablation: Ablation,
) -> Result<Restaged> {
    let mut weights = *weights;
    if ablation.rigidity {
        weights.lambda_rigid = 0.0;
    }
    let (bundle, t1, canonical_window) = if ablation.joint {
        (driving.clone(), 1, 0..driving.frame_count())
    } else {
        let combined = rewind_concat(base, driving)?;
        let t1 = combined.t1;
        (combined.bundle, t1, 0..t1)
    };
    let t_cano = scene::select_canonical_frame_in(&bundle, canonical_window);
    let (mut model, mut graph, init) = optim::init_motion_at(&bundle, &weights, config, t_cano)?;
    let before = model.splats().len();
    if !ablation.backtracing {
        let dis = visibility::detect_disocclusion(&bundle, t_cano, t1 - 1..bundle.frame_count())?;
        model = insert_disoccluded(&model, &bundle, &dis)?;
        if model.splats().len() != before {
            graph = build_knn_graph(&model, weights.knn_k)?;
            graph.refresh_similarity(&model);
        }
    }
    let inserted = model.splats().len() - before;
    let refine = optim::refine(&mut model, &mut graph, &bundle, &weights, config)?;
    let model = truncate(&model, t1)?;
    let report = RestageReport {
        ablation: ablation.names().into_iter().map(String::from).collect(),
        t1,
        combined_frames: bundle.frame_count(),
        t_cano,
        inserted,
        splats: model.splats().len(),
        foreground_splats: model.foreground_count(),
        stages: vec![init, refine],
    };
    Ok(Restaged { model, graph, report })
}

// ---------------------------------------------------------------------------
// Variance experiment

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaConfig {
    pub num_pairs: usize,
    /// Spread of the random start of every unsupervised basis: rotation angle (rad) and translation.
    pub init_noise: f64,
    pub epochs: usize,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        LemmaConfig {
            num_pairs: 30,
            init_noise: 0.05,
            epochs: 300,
        }
    }
}

/// Distance variance over the driving frames for one sampled pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVariance {
    pub a: usize,
    pub b: usize,
    pub joint: f64,
    pub solo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub pairs: Vec<PairVariance>,
    /// Mean variance under joint training.
    pub sigma2: f64,
    /// Mean variance under driving-only training.
    pub sigma0: f64,
    /// `sigma2 / sigma0`, both floored at [`VARIANCE_FLOOR`].
    pub ratio: f64,
    pub pair_count: usize,
    pub seed: u64,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

pub(crate) fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn perturb_frames(model: &mut SceneModel, frames: Range<usize>, noise: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0f1e44a);
    let k = model.num_bases();
    for t in frames {
        for kk in 0..k {
            let axis = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let angle = rng.random_range(-noise..noise);
            let shift = [
                rng.random_range(-noise..noise),
                rng.random_range(-noise..noise),
                rng.random_range(-noise..noise),
            ];
            let p = *model.bases().get(kk, t);
            model
                .bases_mut()
                .set(kk, t, Pose::from_axis_angle(axis, angle, shift).compose(&p));
        }
    }
}

/// Trains the same seeded start jointly (base supervised, driving unsupervised) and on the
/// unsupervised driving frames alone, then compares pair-distance variance over the driving frames.
///
/// Both conditions start from the model seeded on the base segment, with the bases of every
/// unsupervised frame perturbed by the same seeded noise, and run the initialization stage
/// for the same number of epochs. Only tracking and smoothness can be active: the joint run has
/// track supervision on the base frames and temporal smoothness, the solo run has neither.
/// Rigidity is off in both.
pub fn lemma_variance_experiment(
    base: &SequenceBundle,
    driving: &SequenceBundle,
    weights: &LossWeights,
    config: &OptimConfig,
    lemma: &LemmaConfig,
    seed: u64,
) -> Result<VarianceReport> {
    if !(weights.lambda_smooth > 0.0) {
        return Err(Error::Config(
            "the variance experiment needs lambda_smooth > 0".into(),
        ));
    }
    if lemma.num_pairs < 30 {
        return Err(Error::Config(format!("num_pairs must be at least 30, got {}", lemma.num_pairs)));
    }
    if !(lemma.init_noise >= 0.0) {
        return Err(Error::Config("init_noise must be ≥ 0".into()));
    }
    let combined = rewind_concat(base, driving)?;
    let t1 = combined.t1;
    let frames = combined.frame_count();
    let joint_bundle = combined.bundle.without_supervision(t1..frames);
    let t_cano = scene::select_canonical_frame_in(&joint_bundle, 0..t1);
    let mut start = optim::seed_model_at(&joint_bundle, weights, seed, t_cano)?;
    if lemma.init_noise > 0.0 {
        perturb_frames(&mut start, t1..frames, lemma.init_noise, seed);
    }
    let fg = start.foreground_count();
    if fg < 2 {
        return Err(Error::Domain("need at least two foreground splats".into()));
    }
    let solo_bundle = driving.without_supervision(0..driving.frame_count());
    let joint_weights = LossWeights {
        lambda_rigid: 0.0,
        ..*weights
    };
    let solo_weights = LossWeights {
        lambda_track: 0.0,
        lambda_smooth: 0.0,
        ..joint_weights
    };
    let solo_start = start.clone().with_bases(start.bases().frames(t1 - 1, frames), 0)?;

    let run = |mut model: SceneModel, bundle: &SequenceBundle, w: &LossWeights| -> Result<SceneModel> {
        let mut graph = build_knn_graph(&model, w.knn_k)?;
        optim::optimize_init(&mut model, &mut graph, bundle, w, config, lemma.epochs)?;
        Ok(model)
    };
    let (joint, solo) = rayon::join(
        || run(start.clone(), &joint_bundle, &joint_weights),
        || run(solo_start, &solo_bundle, &solo_weights),
    );
    let (joint, solo) = (joint?, solo?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1f_5eed);
    let total_pairs = fg * (fg - 1) / 2;
    let count = lemma.num_pairs.min(total_pairs);
    let picks = index::sample(&mut rng, total_pairs, count).into_vec();
    let mut pairs = Vec::with_capacity(count);
    let driving_frames = frames - (t1 - 1);
    for p in picks {
        let (a, b) = unrank_pair(p, fg);
        let (ia, ib) = (joint.foreground_indices()[a], joint.foreground_indices()[b]);
        let dist = |m: &SceneModel, t: usize| -> Result<f64> {
            Ok(geom::norm3(&geom::sub3(&m.deform(ia, t)?, &m.deform(ib, t)?)))
        };
        let dj: Vec<f64> = (0..driving_frames).map(|d| dist(&joint, t1 - 1 + d)).collect::<Result<_>>()?;
        let ds: Vec<f64> = (0..driving_frames).map(|d| dist(&solo, d)).collect::<Result<_>>()?;
        pairs.push(PairVariance {
            a: ia,
            b: ib,
            joint: population_variance(&dj),
            solo: population_variance(&ds),
        });
    }
    let n = pairs.len() as f64;
    let sigma2 = pairs.iter().map(|p| p.joint).sum::<f64>() / n;
    let sigma0 = pairs.iter().map(|p| p.solo).sum::<f64>() / n;
    Ok(VarianceReport {
        ratio: sigma2.max(VARIANCE_FLOOR) / sigma0.max(VARIANCE_FLOOR),
        pair_count: pairs.len(),
        pairs,
        sigma2,
        sigma0,
        seed,
    })
}

/// The `p`-th pair `(a, b)`, `a < b`, in row-major order over `n` items.
fn unrank_pair(mut p: usize, n: usize) -> (usize, usize) {
    let mut a = 0;
    loop {
        let row = n - 1 - a;
        if p < row {
            return (a, a + 1 + p);
        }
        p -= row;
        a += 1;
    }
}
