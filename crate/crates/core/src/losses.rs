//! Training objectives and their analytic gradients.
//!
//! Every term reduces to a gradient on deformed positions `x_i(t)` (plus a
//! direct gradient on the bases for smoothness); one shared backward pass
//! then pushes position gradients through the blend to `β`, the bases and `μ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::SequenceBundle;
use crate::error::{Error, Result};
use crate::geom::{self, dot3, dot4, quat_rotate, quat_rotate_vjp, normalize_vjp};
use crate::scene::{softmax, KnnGraph, MotionBases, SceneModel};
use crate::visibility::{InvisibilityScores, Thresholds};

/// Term weights and the structural settings they depend on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_track: f64,
    pub lambda_rigid: f64,
    pub lambda_smooth: f64,
    pub thresholds: Thresholds,
    pub knn_k: usize,
    pub num_bases: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_track: 1.0,
            lambda_rigid: 1e-3,
            lambda_smooth: 1e-2,
            thresholds: Thresholds::default(),
            knn_k: 8,
            num_bases: 20,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_track", self.lambda_track),
            ("lambda_rigid", self.lambda_rigid),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if self.num_bases == 0 {
            return Err(Error::Config("num_bases must be at least 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        let (a, b) = match self.thresholds {
            Thresholds::Absolute { tau0, tau1 } | Thresholds::Relative { tau0, tau1 } => (tau0, tau1),
        };
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!("invisibility thresholds need tau0 < tau1, got {a} and {b}")));
        }
        Ok(())
    }
}

/// Which objective to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Track fit + global rigidity + smoothness.
    Init,
    /// Track fit + occlusion-aware rigidity + smoothness.
    Refine,
}

/// Gradients keyed by parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Coefficient rows, `f * K + k`.
    pub beta: Vec<f64>,
    /// Canonical position of every splat.
    pub mu: Vec<[f64; 3]>,
    /// Basis quaternions, `t * K + k`, in `w, x, y, z` order.
    pub rotation: Vec<[f64; 4]>,
    /// Basis translations, `t * K + k`.
    pub translation: Vec<[f64; 3]>,
    /// Always zero: opacity only reaches the losses through the stop-gradient `ζ`.
    pub opacity: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &SceneModel) -> Self {
        let cells = model.num_bases() * model.frame_count();
        Gradients {
            beta: vec![0.0; model.coeffs().as_flat().len()],
            mu: vec![[0.0; 3]; model.splats().len()],
            rotation: vec![[0.0; 4]; cells],
            translation: vec![[0.0; 3]; cells],
            opacity: vec![0.0; model.splats().len()],
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += s * b;
        }
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            for c in 0..3 {
                a[c] += s * b[c];
            }
        }
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for c in 0..4 {
                a[c] += s * b[c];
            }
        }
        for (a, b) in self.translation.iter_mut().zip(&other.translation) {
            for c in 0..3 {
                a[c] += s * b[c];
            }
        }
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += s * b;
        }
    }

    /// Errors naming the first group holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let bad = |group: &str| Err(Error::NonFinite { group: group.into() });
        if self.beta.iter().any(|v| !v.is_finite()) {
            return bad("beta");
        }
        if self.mu.iter().flatten().any(|v| !v.is_finite()) {
            return bad("mu");
        }
        if self.rotation.iter().flatten().any(|v| !v.is_finite()) {
            return bad("bases");
        }
        if self.translation.iter().flatten().any(|v| !v.is_finite()) {
            return bad("bases");
        }
        if self.opacity.iter().any(|v| !v.is_finite()) {
            return bad("opacity");
        }
        Ok(())
    }
}

/// Value of a single term with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub gradients: Gradients,
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub track: f64,
    pub rigidity: f64,
    pub smoothness: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub values: LossValues,
    /// Gradient of `total`.
    pub gradients: Gradients,
}

/// Cosine similarity of two nonnegative weight vectors.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Motion similarity `s_ij`: cosine of the two softmax weight vectors.
pub fn similarity(beta_i: &[f64], beta_j: &[f64]) -> f64 {
    cosine(&softmax(beta_i), &softmax(beta_j))
}

const CHUNK: usize = 64;

/// Deformed positions of every splat at every frame, splat-major (`i * T + t`).
pub(crate) struct Forward {
    pub frames: usize,
    pub positions: Vec<[f64; 3]>,
    weights: Vec<f64>,
    qhat: Vec<[f64; 4]>,
    tau: Vec<[f64; 3]>,
}

impl Forward {
    pub fn position(&self, i: usize, t: usize) -> [f64; 3] {
        self.positions[i * self.frames + t]
    }
}

struct BlendState {
    q: [f64; 4],
    n: [f64; 4],
    signs_ref: [f64; 4],
}

#[inline]
fn blend_quat(w: &[f64], qhat: &[[f64; 4]]) -> BlendState {
    let reference = qhat[geom::dominant_index(w)];
    let mut q = [0.0; 4];
    for (&wk, qk) in w.iter().zip(qhat) {
        let s = if dot4(qk, &reference) >= 0.0 { wk } else { -wk };
        for c in 0..4 {
            q[c] += s * qk[c];
        }
    }
    let norm = dot4(&q, &q).sqrt();
    BlendState {
        q,
        n: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
        signs_ref: reference,
    }
}

pub(crate) fn forward(model: &SceneModel) -> Result<Forward> {
    let k = model.num_bases();
    let frames = model.frame_count();
    let bases = model.bases();
    let mut qhat = Vec::with_capacity(k * frames);
    let mut tau = Vec::with_capacity(k * frames);
    for t in 0..frames {
        for pose in bases.frame(t) {
            qhat.push(geom::normalize4(&pose.wxyz()));
            tau.push(pose.translation_array());
        }
    }
    let nf = model.foreground_count();
    let mut weights = vec![0.0; nf * k];
    for f in 0..nf {
        crate::scene::softmax_into(model.coeffs().row(f), &mut weights[f * k..(f + 1) * k]);
    }
    let n = model.splats().len();
    let mut positions = vec![[0.0; 3]; n * frames];
    positions
        .par_chunks_mut(CHUNK * frames)
        .enumerate()
        .try_for_each(|(c, out)| -> Result<()> {
            for (local, row) in out.chunks_mut(frames).enumerate() {
                let i = c * CHUNK + local;
                let splat = model.splat(i);
                let Some(f) = model.ordinal(i) else {
                    row.fill(splat.mu);
                    continue;
                };
                let w = &weights[f * k..(f + 1) * k];
                for (t, x) in row.iter_mut().enumerate() {
                    let qs = &qhat[t * k..(t + 1) * k];
                    let b = blend_quat(w, qs);
                    let norm = dot4(&b.q, &b.q).sqrt();
                    if !(norm >= geom::DEGENERATE_BLEND_NORM) {
                        return Err(Error::DegenerateBlend { norm });
                    }
                    let r = quat_rotate(&b.n, &splat.mu);
                    let mut p = r;
                    for (wk, tk) in w.iter().zip(&tau[t * k..(t + 1) * k]) {
                        for cc in 0..3 {
                            p[cc] += wk * tk[cc];
                        }
                    }
                    *x = p;
                }
            }
            Ok(())
        })?;
    Ok(Forward {
        frames,
        positions,
        weights,
        qhat,
        tau,
    })
}

/// Pushes position gradients `gx` (splat-major) through the blend.
pub(crate) fn backward(model: &SceneModel, fwd: &Forward, gx: &[[f64; 3]]) -> Gradients {
    let k = model.num_bases();
    let frames = fwd.frames;
    let cells = k * frames;
    let n = model.splats().len();
    let mut grads = Gradients::zeros(model);

    // Each chunk owns its splats' μ and β rows and keeps a private basis accumulator.
    struct Partial {
        rot: Vec<[f64; 4]>,
        trans: Vec<[f64; 3]>,
        mu: Vec<[f64; 3]>,
        beta: Vec<(usize, Vec<f64>)>,
    }
    let chunks: Vec<Partial> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut part = Partial {
                rot: vec![[0.0; 4]; cells],
                trans: vec![[0.0; 3]; cells],
                mu: Vec::with_capacity(CHUNK),
                beta: Vec::new(),
            };
            let mut dw = vec![0.0; k];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let splat = model.splat(i);
                let g_row = &gx[i * frames..(i + 1) * frames];
                let Some(f) = model.ordinal(i) else {
                    let mut acc = [0.0; 3];
                    for g in g_row {
                        for cc in 0..3 {
                            acc[cc] += g[cc];
                        }
                    }
                    part.mu.push(acc);
                    continue;
                };
                let w = &fwd.weights[f * k..(f + 1) * k];
                let mut dmu = [0.0; 3];
                let mut dbeta = vec![0.0; k];
                for (t, g) in g_row.iter().enumerate() {
                    if g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0 {
                        continue;
                    }
                    let qs = &fwd.qhat[t * k..(t + 1) * k];
                    let ts = &fwd.tau[t * k..(t + 1) * k];
                    let b = blend_quat(w, qs);
                    let (dn, dv) = quat_rotate_vjp(&b.n, &splat.mu, g);
                    for cc in 0..3 {
                        dmu[cc] += dv[cc];
                    }
                    let dq = normalize_vjp(&b.q, &dn);
                    for kk in 0..k {
                        let s = if dot4(&qs[kk], &b.signs_ref) >= 0.0 { 1.0 } else { -1.0 };
                        let cell = t * k + kk;
                        let ws = w[kk] * s;
                        for cc in 0..4 {
                            part.rot[cell][cc] += ws * dq[cc];
                        }
                        for cc in 0..3 {
                            part.trans[cell][cc] += w[kk] * g[cc];
                        }
                        dw[kk] = s * dot4(&qs[kk], &dq) + dot3(&ts[kk], g);
                    }
                    let wdw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    for kk in 0..k {
                        dbeta[kk] += w[kk] * (dw[kk] - wdw);
                    }
                }
                part.mu.push(dmu);
                part.beta.push((f, dbeta));
            }
            part
        })
        .collect();

    for (c, part) in chunks.into_iter().enumerate() {
        for (cell, r) in part.rot.iter().enumerate() {
            for cc in 0..4 {
                grads.rotation[cell][cc] += r[cc];
            }
        }
        for (cell, tr) in part.trans.iter().enumerate() {
            for cc in 0..3 {
                grads.translation[cell][cc] += tr[cc];
            }
        }
        for (local, m) in part.mu.into_iter().enumerate() {
            grads.mu[c * CHUNK + local] = m;
        }
        for (f, row) in part.beta {
            grads.beta[f * k..(f + 1) * k].copy_from_slice(&row);
        }
    }
    // Gradients so far are with respect to the normalized quaternions.
    let bases = model.bases();
    for t in 0..frames {
        for kk in 0..k {
            let cell = t * k + kk;
            grads.rotation[cell] = normalize_vjp(&bases.get(kk, t).wxyz(), &grads.rotation[cell]);
        }
    }
    grads
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_frames(model: &SceneModel, bundle: &SequenceBundle) -> Result<()> {
    if model.frame_count() != bundle.frame_count() {
        return Err(Error::Domain(format!(
            "model has {} frames, bundle has {}",
            model.frame_count(),
            bundle.frame_count()
        )));
    }
    Ok(())
}

/// Number of visible `(splat, frame)` observations supervising the model.
pub(crate) fn observation_count(model: &SceneModel, bundle: &SequenceBundle) -> Result<usize> {
    check_frames(model, bundle)?;
    let mut count = 0;
    for s in model.splats() {
        if let Some(i) = s.track {
            if i >= bundle.track_count() {
                return Err(Error::Domain(format!(
                    "splat references track {i}, bundle has {}",
                    bundle.track_count()
                )));
            }
            count += (0..bundle.frame_count()).filter(|&t| bundle.visible(i, t)).count();
        }
    }
    Ok(count)
}

fn track_term(model: &SceneModel, bundle: &SequenceBundle, fwd: &Forward, gx: &mut [[f64; 3]], scale: f64) -> Result<f64> {
    let count = observation_count(model, bundle)?;
    if count == 0 {
        return Err(Error::Unconstrained("track loss has no visible observations".into()));
    }
    let inv = 1.0 / count as f64;
    let frames = fwd.frames;
    let mut total = 0.0;
    for (s, splat) in model.splats().iter().enumerate() {
        let Some(i) = splat.track else { continue };
        let mut acc = 0.0;
        for t in 0..frames {
            if !bundle.visible(i, t) {
                continue;
            }
            let x = fwd.position(s, t);
            let p = bundle.position(i, t);
            let g = &mut gx[s * frames + t];
            for c in 0..3 {
                let d = x[c] - p[c];
                acc += d.abs();
                g[c] += scale * inv * sign(d);
            }
        }
        total += acc;
    }
    Ok(total * inv)
}

fn edge_positions(model: &SceneModel, fwd: &Forward, e: &crate::scene::Edge, t: usize) -> (usize, usize, [f64; 3]) {
    let fg = model.foreground_indices();
    let (a, b) = (fg[e.i], fg[e.j]);
    (a, b, geom::sub3(&fwd.position(a, t), &fwd.position(b, t)))
}

/// Shared body of both rigidity terms; `gate(e, t)` multiplies `s_ij`.
fn rigidity_term(
    model: &SceneModel,
    graph: &KnnGraph,
    fwd: &Forward,
    gx: &mut [[f64; 3]],
    scale: f64,
    gate: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    if graph.is_empty() {
        return Err(Error::Unconstrained("rigidity loss over an empty graph".into()));
    }
    let frames = fwd.frames;
    let mut total = 0.0;
    for t in 0..frames {
        for (e_idx, e) in graph.edges.iter().enumerate() {
            let weight = graph.similarity[e_idx] * gate(e_idx, t);
            if weight == 0.0 {
                continue;
            }
            let (a, b, d) = edge_positions(model, fwd, e, t);
            let len = geom::norm3(&d);
            let dev = len - e.rest_length;
            total += weight * dev.abs();
            if len > 0.0 {
                let k = scale * weight * sign(dev) / len;
                for c in 0..3 {
                    gx[a * frames + t][c] += k * d[c];
                    gx[b * frames + t][c] -= k * d[c];
                }
            }
        }
    }
    Ok(total)
}

fn check_zeta(model: &SceneModel, zeta: &[InvisibilityScores]) -> Result<()> {
    if zeta.len() != model.frame_count() {
        return Err(Error::Domain(format!(
            "{} invisibility frames for {} model frames",
            zeta.len(),
            model.frame_count()
        )));
    }
    if let Some(z) = zeta.iter().find(|z| z.zeta.len() != model.foreground_count()) {
        return Err(Error::Domain(format!(
            "{} invisibility scores for {} foreground splats",
            z.zeta.len(),
            model.foreground_count()
        )));
    }
    Ok(())
}

fn refine_term(model: &SceneModel, graph: &KnnGraph, zeta: &[InvisibilityScores], fwd: &Forward, gx: &mut [[f64; 3]], scale: f64) -> Result<f64> {
    check_zeta(model, zeta)?;
    rigidity_term(model, graph, fwd, gx, scale, |e, t| {
        let edge = &graph.edges[e];
        zeta[t].zeta[edge.i] * zeta[t].zeta[edge.j]
    })
}

fn pose_rows(q: &[f64; 4], t: &[f64; 3]) -> [[f64; 4]; 3] {
    let r = geom::quat_matrix(q);
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
    ]
}

fn smoothness_term(bases: &MotionBases, grads: Option<(&mut Gradients, f64)>) -> f64 {
    let k = bases.num_bases();
    let frames = bases.num_frames();
    if frames < 2 {
        return 0.0;
    }
    let mats: Vec<[[f64; 4]; 3]> = (0..frames)
        .flat_map(|t| (0..k).map(move |kk| (t, kk)))
        .map(|(t, kk)| {
            let p = bases.get(kk, t);
            pose_rows(&geom::normalize4(&p.wxyz()), &p.translation_array())
        })
        .collect();
    let mut total = 0.0;
    let mut dmat = vec![[[0.0; 4]; 3]; mats.len()];
    for t in 0..frames - 1 {
        for kk in 0..k {
            let (a, b) = (t * k + kk, (t + 1) * k + kk);
            for r in 0..3 {
                for c in 0..4 {
                    let d = mats[b][r][c] - mats[a][r][c];
                    total += d * d;
                    dmat[b][r][c] += 2.0 * d;
                    dmat[a][r][c] -= 2.0 * d;
                }
            }
        }
    }
    if let Some((g, scale)) = grads {
        for t in 0..frames {
            for kk in 0..k {
                let cell = t * k + kk;
                let raw = bases.get(kk, t).wxyz();
                let q = geom::normalize4(&raw);
                let mut dq = [0.0; 4];
                for c in 0..3 {
                    let mut e = [0.0; 3];
                    e[c] = 1.0;
                    let col = [dmat[cell][0][c], dmat[cell][1][c], dmat[cell][2][c]];
                    let (d, _) = quat_rotate_vjp(&q, &e, &col);
                    for j in 0..4 {
                        dq[j] += d[j];
                    }
                }
                let draw = normalize_vjp(&raw, &dq);
                for j in 0..4 {
                    g.rotation[cell][j] += scale * draw[j];
                }
                for r in 0..3 {
                    g.translation[cell][r] += scale * dmat[cell][r][3];
                }
            }
        }
    }
    total
}

fn term_from_gx(model: &SceneModel, fwd: &Forward, gx: &[[f64; 3]], value: f64) -> Term {
    Term {
        value,
        gradients: backward(model, fwd, gx),
    }
}

/// Mean over visible observations of the L1 distance between each splat and its source track.
pub fn track_loss(model: &SceneModel, bundle: &SequenceBundle) -> Result<Term> {
    let fwd = forward(model)?;
    let mut gx = vec![[0.0; 3]; fwd.positions.len()];
    let value = track_term(model, bundle, &fwd, &mut gx, 1.0)?;
    Ok(term_from_gx(model, &fwd, &gx, value))
}

/// Global rigidity: `Σ_t Σ_edges s_ij |d_ij(t) − rest_ij|`.
pub fn rigidity_init(model: &SceneModel, graph: &KnnGraph) -> Result<Term> {
    let fwd = forward(model)?;
    let mut gx = vec![[0.0; 3]; fwd.positions.len()];
    let value = rigidity_term(model, graph, &fwd, &mut gx, 1.0, |_, _| 1.0)?;
    Ok(term_from_gx(model, &fwd, &gx, value))
}

/// Occlusion-aware rigidity: as [`rigidity_init`] with each edge gated by `ζ_i ζ_j`.
///
/// The deviation is a scalar, so its L2 norm is its absolute value.
pub fn rigidity_refine(model: &SceneModel, graph: &KnnGraph, zeta: &[InvisibilityScores]) -> Result<Term> {
    let fwd = forward(model)?;
    let mut gx = vec![[0.0; 3]; fwd.positions.len()];
    let value = refine_term(model, graph, zeta, &fwd, &mut gx, 1.0)?;
    Ok(term_from_gx(model, &fwd, &gx, value))
}

/// `Σ_k Σ_t ‖[R|t]_k(t+1) − [R|t]_k(t)‖²_F`; zero for a single frame.
///
/// The returned gradients only populate the basis groups.
pub fn smoothness(model: &SceneModel) -> Term {
    let mut g = Gradients::zeros(model);
    let value = smoothness_term(model.bases(), Some((&mut g, 1.0)));
    Term { value, gradients: g }
}

/// Smoothness value alone.
pub fn smoothness_value(bases: &MotionBases) -> f64 {
    smoothness_term(bases, None)
}

/// Weighted objective for `stage`. Terms with a zero weight are skipped and report 0.
pub fn total_loss(
    stage: Stage,
    model: &SceneModel,
    bundle: &SequenceBundle,
    graph: &KnnGraph,
    weights: &LossWeights,
    zeta: Option<&[InvisibilityScores]>,
) -> Result<LossBreakdown> {
    let fwd = forward(model)?;
    let mut gx = vec![[0.0; 3]; fwd.positions.len()];
    let mut values = LossValues::default();
    if weights.lambda_track > 0.0 {
        values.track = track_term(model, bundle, &fwd, &mut gx, weights.lambda_track)?;
    } else {
        check_frames(model, bundle)?;
    }
    if weights.lambda_rigid > 0.0 {
        values.rigidity = match stage {
            Stage::Init => rigidity_term(model, graph, &fwd, &mut gx, weights.lambda_rigid, |_, _| 1.0)?,
            Stage::Refine => {
                let zeta = zeta.ok_or_else(|| Error::Config("refine stage needs invisibility scores".into()))?;
                refine_term(model, graph, zeta, &fwd, &mut gx, weights.lambda_rigid)?
            }
        };
    }
    let mut gradients = backward(model, &fwd, &gx);
    if weights.lambda_smooth > 0.0 {
        values.smoothness = smoothness_term(model.bases(), Some((&mut gradients, weights.lambda_smooth)));
    }
    values.total = weights.lambda_track * values.track + weights.lambda_rigid * values.rigidity + weights.lambda_smooth * values.smoothness;
    Ok(LossBreakdown { values, gradients })
}
