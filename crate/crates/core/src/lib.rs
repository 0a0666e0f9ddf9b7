pub mod bundle;
pub mod error;
pub mod geom;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod restage;
pub mod scene;
pub mod synth;
pub mod visibility;

pub use bundle::SequenceBundle;
pub use error::{Error, Result};
pub use geom::{BlendWeights, Pose, Smoothstep};
pub use scene::{KnnGraph, MotionBases, MotionCoeffs, SceneModel, Splat};
pub use visibility::Camera;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/motion.md")]
    mod motion {}
    #[doc = include_str!("../../../book/src/visibility.md")]
    mod visibility {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/restaging.md")]
    mod restaging {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
