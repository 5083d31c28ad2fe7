//! Cooperative content placement for networks of overlapping caches.
//!
//! Users sit uniformly in the region covered by a set of caches and may
//! fetch a file from any cache whose disc contains them. Each cache holds
//! `K` files out of a catalog of `J`. Choosing what every cache stores so
//! that the miss probability is minimal is a potential game: a single cache
//! changing its contents changes its own local miss by exactly the change of
//! the global miss. This crate provides
//!
//! * coverage-cell estimation for synthetic and imported networks
//!   ([`topology`]),
//! * popularity laws and file sizes ([`catalog`]),
//! * the objective and its local decomposition ([`placement`]),
//! * best-response dynamics and Nash checks ([`game`]),
//! * stochastic and deterministic annealing ([`annealing`]),
//! * comparison policies ([`baselines`]),
//! * a seeded, parallel experiment runner ([`harness`]).

pub mod annealing;
pub mod baselines;
pub mod catalog;
pub mod error;
pub mod game;
pub mod harness;
pub mod placement;
pub mod seed;
pub mod topology;

pub use catalog::{FileSizes, Popularity};
pub use error::{Error, Result};
pub use placement::{evaluate_miss, exposure, local_miss, Placement, RelaxedPlacement};
pub use topology::{CacheSite, CellTable, Geometry, Point, Topology, Window};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cells.md")]
    mod cells {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/annealing.md")]
    mod annealing {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
