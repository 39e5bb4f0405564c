//! Equilibrium crystal shapes from lattice models.
//!
//! The crate covers the path from microscopic Ising configurations to
//! macroscopic shapes: exact small-volume oracles, Monte Carlo samplers,
//! surface-tension and wall free-energy estimators, Wulff and Winterbottom
//! constructions, contour skeletons and mesoscopic phase labels.

pub mod coarse;
pub mod contour;
pub mod exact;
pub mod experiments;
pub mod geometry;
pub mod lattice;
pub mod rng;
pub mod samplers;
pub mod stats;
pub mod tension;
pub mod unionfind;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lattice.md")]
    mod lattice {}
    #[doc = include_str!("../../../book/src/exact.md")]
    mod exact {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/tension.md")]
    mod tension {}
    #[doc = include_str!("../../../book/src/shapes.md")]
    mod shapes {}
    #[doc = include_str!("../../../book/src/contours.md")]
    mod contours {}
    #[doc = include_str!("../../../book/src/labels.md")]
    mod labels {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
