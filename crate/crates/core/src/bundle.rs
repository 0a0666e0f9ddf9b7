//! Per-frame cameras plus `N × T` point tracks: the supervision for every fit.
//!
//! Positions are stored as `f32`, frame-major (`index = t * N + i`), which is
//! also the on-disk layout.

use crate::error::{Error, Result};
use crate::visibility::Camera;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBundle {
    cameras: Vec<Camera>,
    num_tracks: usize,
    tracks: Vec<[f32; 3]>,
    visibility: Vec<bool>,
    foreground: Vec<bool>,
    colors: Option<Vec<[f32; 3]>>,
}

impl SequenceBundle {
    /// Assembles a bundle, checking that every array matches `cameras.len() × foreground.len()`.
    pub fn new(
        cameras: Vec<Camera>,
        tracks: Vec<[f32; 3]>,
        visibility: Vec<bool>,
        foreground: Vec<bool>,
        colors: Option<Vec<[f32; 3]>>,
    ) -> Result<Self> {
        let frames = cameras.len();
        let n = foreground.len();
        if frames == 0 {
            return Err(Error::Domain("bundle needs at least one frame".into()));
        }
        if tracks.len() != frames * n {
            return Err(Error::Domain(format!(
                "track array holds {} positions, expected {} frames × {} tracks",
                tracks.len(),
                frames,
                n
            )));
        }
        if visibility.len() != frames * n {
            return Err(Error::Domain(format!(
                "visibility array holds {} flags, expected {}",
                visibility.len(),
                frames * n
            )));
        }
        if let Some(c) = &colors {
            if c.len() != n {
                return Err(Error::Domain(format!("{} colors for {} tracks", c.len(), n)));
            }
        }
        if let Some((idx, _)) = tracks
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Domain(format!(
                "non-finite position for track {} at frame {}",
                idx % n.max(1),
                idx / n.max(1)
            )));
        }
        Ok(SequenceBundle {
            cameras,
            num_tracks: n,
            tracks,
            visibility,
            foreground,
            colors,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn track_count(&self) -> usize {
        self.num_tracks
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, t: usize) -> &Camera {
        &self.cameras[t]
    }

    /// Frame-major positions, `t * N + i`.
    pub fn tracks(&self) -> &[[f32; 3]] {
        &self.tracks
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn foreground(&self) -> &[bool] {
        &self.foreground
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.foreground[i]
    }

    pub fn position(&self, i: usize, t: usize) -> [f64; 3] {
        let p = self.tracks[t * self.num_tracks + i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn raw_position(&self, i: usize, t: usize) -> [f32; 3] {
        self.tracks[t * self.num_tracks + i]
    }

    pub fn visible(&self, i: usize, t: usize) -> bool {
        self.visibility[t * self.num_tracks + i]
    }

    pub fn color(&self, i: usize) -> Option<[f32; 3]> {
        self.colors.as_ref().map(|c| c[i])
    }

    /// Number of visible foreground tracks in frame `t`.
    pub fn visible_foreground_count(&self, t: usize) -> usize {
        (0..self.num_tracks)
            .filter(|&i| self.foreground[i] && self.visible(i, t))
            .count()
    }

    /// Frames `range` as a new bundle (same tracks).
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Result<SequenceBundle> {
        if range.start >= range.end || range.end > self.frame_count() {
            return Err(Error::Domain(format!(
                "frame range {:?} outside 0..{}",
                range,
                self.frame_count()
            )));
        }
        let frames: Vec<usize> = range.collect();
        Ok(self.select_frames(&frames))
    }

    /// Bundle made of the listed frames, in the listed order.
    pub fn select_frames(&self, frames: &[usize]) -> SequenceBundle {
        let n = self.num_tracks;
        let mut tracks = Vec::with_capacity(frames.len() * n);
        let mut visibility = Vec::with_capacity(frames.len() * n);
        let mut cameras = Vec::with_capacity(frames.len());
        for &t in frames {
            tracks.extend_from_slice(&self.tracks[t * n..(t + 1) * n]);
            visibility.extend_from_slice(&self.visibility[t * n..(t + 1) * n]);
            cameras.push(self.cameras[t]);
        }
        SequenceBundle {
            cameras,
            num_tracks: n,
            tracks,
            visibility,
            foreground: self.foreground.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Copy with every observation in `frames` marked invisible.
    pub fn without_supervision(&self, frames: std::ops::Range<usize>) -> SequenceBundle {
        let mut out = self.clone();
        let n = self.num_tracks;
        for t in frames {
            for v in &mut out.visibility[t * n..(t + 1) * n] {
                *v = false;
            }
        }
        out
    }

    /// Replaces the foreground labels (same track count).
    pub fn with_foreground(mut self, foreground: Vec<bool>) -> Result<SequenceBundle> {
        if foreground.len() != self.num_tracks {
            return Err(Error::Domain(format!(
                "{} labels for {} tracks",
                foreground.len(),
                self.num_tracks
            )));
        }
        self.foreground = foreground;
        Ok(self)
    }
}
