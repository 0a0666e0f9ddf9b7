//! Geometry-consistency and tracking metrics.

use std::collections::{BTreeSet, HashSet};
use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom;
use crate::restage::{interpolate_coefficients, population_variance};
use crate::scene::{KnnGraph, SceneModel};
use crate::synth::GroundTruth;

pub const DEFAULT_GAMMA: f64 = 1.5;
pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub gamma: f64,
    pub floor: f64,
    /// Voxel edge as a fraction of the canonical foreground bounding-box diagonal.
    pub voxel_fraction: f64,
    pub edge_sample: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            gamma: DEFAULT_GAMMA,
            floor: DEFAULT_FLOOR,
            voxel_fraction: 0.01,
            edge_sample: 1000,
            seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be ≥ 0, got {}", self.gamma)));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config(format!("floor must be > 0, got {}", self.floor)));
        }
        if !(self.voxel_fraction > 0.0) {
            return Err(Error::Config(format!("voxel_fraction must be > 0, got {}", self.voxel_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volume_consistency: f64,
    pub edge_consistency: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tracking_l1: Option<f64>,
    pub volumes: Vec<f64>,
    pub voxel_size: f64,
    pub sample_seed: u64,
}

/// Occupied voxels of edge `voxel` on a grid anchored at `origin`, times `voxel³`.
pub fn voxel_volume(points: &[[f64; 3]], voxel: f64, origin: [f64; 3]) -> Result<f64> {
    if !(voxel > 0.0) {
        return Err(Error::Config(format!("voxel size must be > 0, got {voxel}")));
    }
    let cells: HashSet<[i64; 3]> = points
        .iter()
        .map(|p| [0, 1, 2].map(|c| ((p[c] - origin[c]) / voxel).floor() as i64))
        .collect();
    Ok(cells.len() as f64 * voxel.powi(3))
}

/// `(−ln m)^γ` with `m` floored, keeping the sign of `−ln m` when `m > 1`.
fn log_score(m: f64, gamma: f64, floor: f64) -> f64 {
    let l = -m.max(floor).ln();
    l.signum() * l.abs().powf(gamma)
}

/// `(−ln msd)^γ` of the mean squared deviation of `volumes` from their mean.
pub fn volume_consistency(volumes: &[f64], gamma: f64, floor: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("gamma must be ≥ 0, got {gamma}")));
    }
    if volumes.len() < 2 {
        return Err(Error::Domain("volume consistency needs at least two frames".into()));
    }
    Ok(log_score(population_variance(volumes), gamma, floor))
}

/// Bounding-box minimum and diagonal of the canonical foreground positions.
fn canonical_box(model: &SceneModel) -> Option<([f64; 3], f64)> {
    let fg = model.foreground_indices();
    if fg.is_empty() {
        return None;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in fg {
        let mu = model.splat(i).mu;
        for c in 0..3 {
            lo[c] = lo[c].min(mu[c]);
            hi[c] = hi[c].max(mu[c]);
        }
    }
    Some((lo, geom::norm3(&geom::sub3(&hi, &lo))))
}

/// Foreground volume at every frame of `frames`.
pub fn frame_volumes(model: &SceneModel, frames: Range<usize>, voxel: f64) -> Result<Vec<f64>> {
    let origin = canonical_box(model).map_or([0.0; 3], |b| b.0);
    frames
        .into_par_iter()
        .map(|t| {
            let pts: Vec<[f64; 3]> = model
                .foreground_indices()
                .iter()
                .map(|&i| model.deform(i, t))
                .collect::<Result<_>>()?;
            voxel_volume(&pts, voxel, origin)
        })
        .collect()
}

/// Edge-length stability over `frames` for the edges leaving a seeded sample of foreground splats.
///
/// The mean temporal variance of the edge lengths goes through the same
/// `(−ln ·)^γ` map as the volume score.
pub fn edge_consistency(
    model: &SceneModel,
    graph: &KnnGraph,
    frames: Range<usize>,
    sample: usize,
    seed: u64,
    gamma: f64,
    floor: f64,
) -> Result<f64> {
    if graph.is_empty() {
        return Err(Error::Domain("edge consistency needs a nonempty graph".into()));
    }
    if frames.is_empty() || frames.end > model.frame_count() {
        return Err(Error::Domain("edge consistency frame range is empty or out of bounds".into()));
    }
    let fg = model.foreground_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, fg, sample.min(fg)).into_iter().collect();
    let fgi = model.foreground_indices();
    let variances: Vec<f64> = graph
        .edges
        .par_iter()
        .filter(|e| chosen.contains(&e.i))
        .map(|e| {
            let lengths: Vec<f64> = frames
                .clone()
                .map(|t| {
                    let a = model.deform(fgi[e.i], t)?;
                    let b = model.deform(fgi[e.j], t)?;
                    Ok(geom::norm3(&geom::sub3(&a, &b)))
                })
                .collect::<Result<_>>()?;
            Ok(population_variance(&lengths))
        })
        .collect::<Result<_>>()?;
    if variances.is_empty() {
        return Err(Error::Domain("no sampled splat has an outgoing edge".into()));
    }
    let mean = variances.iter().sum::<f64>() / variances.len() as f64;
    Ok(log_score(mean, gamma, floor))
}

fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Mean L1 distance between deformed splats and their true tracks, over every frame.
///
/// Only splats linked to a track count; occluded frames are included.
pub fn tracking_l1(model: &SceneModel, truth: &GroundTruth) -> Result<f64> {
    check_frames(model, truth)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, s) in model.splats().iter().enumerate() {
        let Some(track) = s.track.filter(|&k| k < truth.num_tracks) else {
            continue;
        };
        for t in 0..truth.frames {
            sum += l1(&model.deform(i, t)?, &truth.position(track, t));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no splat corresponds to a ground-truth track".into()));
    }
    Ok(sum / count as f64)
}

fn check_frames(model: &SceneModel, truth: &GroundTruth) -> Result<()> {
    if model.frame_count() != truth.frames {
        return Err(Error::Mismatch(format!(
            "model has {} frames, ground truth {}",
            model.frame_count(),
            truth.frames
        )));
    }
    Ok(())
}

/// Predicted trajectory of a query point observed at `x` in frame `t`.
///
/// Coefficients are interpolated from the nearest foreground splats at `t` and the
/// point is traced back to canonical space, as for an inserted splat.
pub fn query_trajectory(model: &SceneModel, x: [f64; 3], t: usize) -> Result<Vec<[f64; 3]>> {
    let positions: Vec<[f64; 3]> = model
        .foreground_indices()
        .iter()
        .map(|&i| model.deform(i, t))
        .collect::<Result<_>>()?;
    let beta = interpolate_coefficients(model, &positions, x)?;
    let mu = model.backtrace_to_canonical(x, &beta, t)?;
    let weights = crate::scene::blend_weights(&beta);
    (0..model.frame_count())
        .map(|f| Ok(geom::blend(&weights, model.bases().frame(f))?.apply_array(mu)))
        .collect()
}

/// Tracking error over a set of ground-truth tracks, answering tracks without a splat by query.
///
/// `tracks` defaults to every foreground track of the truth. A track linked to a
/// splat uses that splat; otherwise its first visible observation in `queries`
/// is the query point. Tracks never observed are skipped.
pub fn tracking_l1_queried(
    model: &SceneModel,
    truth: &GroundTruth,
    queries: &SequenceBundle,
    tracks: Option<&[usize]>,
) -> Result<f64> {
    check_frames(model, truth)?;
    let mut by_track = vec![None; truth.num_tracks];
    for (i, s) in model.splats().iter().enumerate() {
        if let Some(k) = s.track.filter(|&k| k < truth.num_tracks) {
            by_track[k].get_or_insert(i);
        }
    }
    let selected: Vec<usize> = match tracks {
        Some(t) => t.to_vec(),
        None => (0..truth.num_tracks).filter(|&i| truth.is_foreground(i)).collect(),
    };
    let per_track: Vec<Option<f64>> = selected
        .par_iter()
        .map(|&k| -> Result<Option<f64>> {
            if k >= truth.num_tracks {
                return Err(Error::Domain(format!("track {k} has no ground truth")));
            }
            let predicted: Vec<[f64; 3]> = match by_track[k] {
                Some(i) => (0..truth.frames).map(|t| model.deform(i, t)).collect::<Result<_>>()?,
                None => match (0..queries.frame_count().min(truth.frames)).find(|&t| queries.visible(k, t)) {
                    Some(t) => query_trajectory(model, queries.position(k, t), t)?,
                    None => return Ok(None),
                },
            };
            Ok(Some(
                predicted.iter().enumerate().map(|(t, p)| l1(p, &truth.position(k, t))).sum::<f64>(),
            ))
        })
        .collect::<Result<_>>()?;
    let answered: Vec<f64> = per_track.into_iter().flatten().collect();
    if answered.is_empty() {
        return Err(Error::Domain("no ground-truth track could be evaluated".into()));
    }
    Ok(answered.iter().sum::<f64>() / (answered.len() * truth.frames) as f64)
}

/// Voxel size, volumes and both consistency scores over `frames`.
pub fn evaluate(model: &SceneModel, graph: &KnnGraph, frames: Range<usize>, config: &MetricsConfig) -> Result<MetricsReport> {
    config.validate()?;
    let diag = canonical_box(model)
        .map(|b| b.1)
        .ok_or_else(|| Error::Domain("model has no foreground splats".into()))?;
    let voxel = if diag > 0.0 { config.voxel_fraction * diag } else { config.voxel_fraction };
    let volumes = frame_volumes(model, frames.clone(), voxel)?;
    Ok(MetricsReport {
        volume_consistency: volume_consistency(&volumes, config.gamma, config.floor)?,
        edge_consistency: edge_consistency(model, graph, frames, config.edge_sample, config.seed, config.gamma, config.floor)?,
        tracking_l1: None,
        volumes,
        voxel_size: voxel,
        sample_seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::scene::{build_knn_graph, Edge, MotionBases, MotionCoeffs, Splat};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn voxel_examples() {
        assert_eq!(voxel_volume(&[[0.3, 0.2, 0.1]], 0.5, [0.0; 3]).unwrap(), 0.125);
        assert_eq!(voxel_volume(&[[0.1; 3], [0.2; 3]], 0.5, [0.0; 3]).unwrap(), 0.125);
        assert_eq!(voxel_volume(&[], 0.5, [0.0; 3]).unwrap(), 0.0);
        assert!(voxel_volume(&[[0.0; 3]], 0.0, [0.0; 3]).is_err());
        // 10×10×10 lattice spanning the unit cube: 2×2×2 voxels of edge 0.5.
        let lattice: Vec<[f64; 3]> = (0..1000)
            .map(|n| [(n % 10) as f64 / 10.0, (n / 10 % 10) as f64 / 10.0, (n / 100) as f64 / 10.0])
            .collect();
        let mut occupied = BTreeSet::new();
        for p in &lattice {
            occupied.insert([(p[0] * 2.0) as i64, (p[1] * 2.0) as i64, (p[2] * 2.0) as i64]);
        }
        assert_eq!(occupied.len(), 8);
        assert_eq!(voxel_volume(&lattice, 0.5, [0.0; 3]).unwrap(), 1.0);
    }

    #[test]
    fn volume_consistency_examples() {
        // Volumes 0 and 2e⁻² deviate by ±e⁻² from their mean: msd = e⁻⁴.
        let d = (-2.0f64).exp();
        assert_eq!(volume_consistency(&[0.0, 2.0 * d], 1.5, 1e-12).unwrap(), 8.0);
        let c = volume_consistency(&[1.0 - d, 1.0 + d], 1.5, 1e-12).unwrap();
        assert!((c - 8.0).abs() < 1e-9, "{c}");
        let flat = volume_consistency(&[2.0, 2.0, 2.0], 1.5, 1e-12).unwrap();
        assert_eq!(flat, (-(1e-12f64).ln()).powf(1.5));
        assert!(volume_consistency(&[1.0], 1.5, 1e-12).is_err());
        assert!(volume_consistency(&[1.0, 2.0], -1.0, 1e-12).is_err());
    }

    #[test]
    fn log_score_hits_eight_exactly() {
        assert_eq!(log_score((-4.0f64).exp(), 1.5, 1e-12), 8.0);
    }

    fn two_splat_model(lengths: &[f64]) -> (SceneModel, KnnGraph) {
        let splats = vec![Splat::new([0.0; 3], 0.1, true), Splat::new([1.0, 0.0, 0.0], 0.1, true)];
        let frames = lengths.len();
        // Basis 1 stretches the second splat along x.
        let bases = MotionBases::from_fn(2, frames, |k, t| {
            if k == 0 {
                Pose::identity()
            } else {
                Pose::from_translation([lengths[t] - 1.0, 0.0, 0.0])
            }
        });
        let coeffs = MotionCoeffs::new(2, vec![vec![60.0, 0.0], vec![0.0, 60.0]]).unwrap();
        let model = SceneModel::new(splats, coeffs, bases, 0).unwrap();
        let graph = KnnGraph {
            k: 1,
            edges: vec![Edge { i: 0, j: 1, rest_length: 1.0 }],
            similarity: vec![1.0],
        };
        (model, graph)
    }

    #[test]
    fn edge_consistency_examples() {
        let (model, graph) = two_splat_model(&[1.0, 2.0]);
        let c = edge_consistency(&model, &graph, 0..2, 1000, 0, 1.5, 1e-12).unwrap();
        let expected = (-(0.25f64).ln()).powf(1.5);
        assert!((c - expected).abs() < 1e-9);
        assert!((c - 1.632).abs() < 1e-3);
        let (rigid, g) = two_splat_model(&[1.0, 1.0, 1.0]);
        let c = edge_consistency(&rigid, &g, 0..3, 1000, 0, 1.5, 1e-12).unwrap();
        assert_eq!(c, (-(1e-12f64).ln()).powf(1.5));
        let empty = KnnGraph { k: 1, edges: vec![], similarity: vec![] };
        assert!(edge_consistency(&rigid, &empty, 0..3, 10, 0, 1.5, 1e-12).is_err());
    }

    #[test]
    fn tracking_examples() {
        let spec = crate::synth::SceneSpec {
            frames: 4,
            num_points: 60,
            ..Default::default()
        };
        let (bundle, truth) = crate::synth::gen_scene(&spec).unwrap();
        let model = truth.to_scene_model(0, 0.05).unwrap();
        assert!(tracking_l1(&model, &truth).unwrap() < 1e-12);
        // Shift every basis and every static splat by (0.1, 0, 0) in world space.
        let offset = Pose::from_translation([0.1, 0.0, 0.0]);
        let mut shifted = model.clone();
        for t in 0..4 {
            for k in 0..shifted.num_bases() {
                let p = *shifted.bases().get(k, t);
                shifted.bases_mut().set(k, t, offset.compose(&p));
            }
        }
        for i in 0..shifted.splats().len() {
            if !shifted.splat(i).is_foreground {
                let mut mu = shifted.splat(i).mu;
                mu[0] += 0.1;
                shifted.set_mu(i, mu);
            }
        }
        assert!((tracking_l1(&shifted, &truth).unwrap() - 0.1).abs() < 1e-9);
        // Queries reproduce the exact trajectory of a dropped splat.
        let q = tracking_l1_queried(&model, &truth, &bundle, None).unwrap();
        assert!(q < 1e-6, "{q}");
    }

    #[test]
    fn evaluate_rigid_truth_saturates() {
        let spec = crate::synth::SceneSpec {
            frames: 5,
            num_points: 150,
            ..Default::default()
        };
        let (_, truth) = crate::synth::gen_scene(&spec).unwrap();
        let model = truth.to_scene_model(0, 0.05).unwrap();
        let graph = build_knn_graph(&model, 6).unwrap();
        let r = evaluate(&model, &graph, 0..5, &MetricsConfig::default()).unwrap();
        assert_eq!(r.volumes.len(), 5);
        assert!(r.voxel_size > 0.0);
        // Edges inside each link are rigid; only edges across the joint vary.
        assert!(r.edge_consistency > 10.0);
    }

    fn brute_force(model: &SceneModel, truth: &GroundTruth) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..model.splats().len() {
            if let Some(k) = model.splat(i).track {
                for t in 0..truth.frames {
                    let p = model.deform(i, t).unwrap();
                    let q = truth.position(k, t);
                    for c in 0..3 {
                        s += (p[c] - q[c]).abs();
                    }
                    n += 1.0;
                }
            }
        }
        s / n
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn volume_permutation_and_shift_invariant(seed in 0u64..1000, shift in -3i64..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..40).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)]).collect();
            let v = voxel_volume(&pts, 0.25, [0.0; 3]).unwrap();
            let mut rev = pts.clone();
            rev.reverse();
            prop_assert_eq!(voxel_volume(&rev, 0.25, [0.0; 3]).unwrap(), v);
            let moved: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 0.25 * shift as f64, p[1], p[2]]).collect();
            prop_assert_eq!(voxel_volume(&moved, 0.25, [0.25 * shift as f64, 0.0, 0.0]).unwrap(), v);
        }

        #[test]
        fn volume_score_decreases(a in 1e-9f64..0.5, b in 1e-9f64..0.5) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(log_score(lo, 1.5, 1e-12) > log_score(hi, 1.5, 1e-12));
        }

        #[test]
        fn tracking_matches_brute_force(seed in 0u64..50, dx in -0.3f64..0.3) {
            let spec = crate::synth::SceneSpec { frames: 3, num_points: 30, seed, ..Default::default() };
            let (_, truth) = crate::synth::gen_scene(&spec).unwrap();
            let mut model = truth.to_scene_model(1, 0.05).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..model.splats().len() {
                let mut mu = model.splat(i).mu;
                mu[0] += dx * rng.random_range(0.0..1.0);
                model.set_mu(i, mu);
            }
            let fast = tracking_l1(&model, &truth).unwrap();
            prop_assert!((fast - brute_force(&model, &truth)).abs() < 1e-12);
        }

        #[test]
        fn edge_consistency_is_deterministic(seed in 0u64..100) {
            let spec = crate::synth::SceneSpec { frames: 4, num_points: 80, ..Default::default() };
            let (_, truth) = crate::synth::gen_scene(&spec).unwrap();
            let model = truth.to_scene_model(0, 0.05).unwrap();
            let graph = build_knn_graph(&model, 4).unwrap();
            let a = edge_consistency(&model, &graph, 0..4, 20, seed, 1.5, 1e-12).unwrap();
            let b = edge_consistency(&model, &graph, 0..4, 20, seed, 1.5, 1e-12).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
