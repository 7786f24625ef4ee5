//! Interactive computational steering for 2D incompressible flow.
//!
//! The crate bundles a D2Q9 lattice-Boltzmann solver ([`lattice`]) driven
//! coarse-to-fine under a time budget ([`hierarchy`]), a binary
//! space-partitioning decomposition ([`partition`]) executed by a
//! master/trader/slave work-stealing scheduler ([`scheduler`]), visualization
//! primitives ([`viz`]) composed bottom-up over the partition tree
//! ([`compositor`]), a steering session and wire protocol ([`steering`]) and a
//! thermal-comfort coupling loop ([`thermal`]).

pub mod analytic;
pub mod bench;
pub mod compositor;
pub mod hierarchy;
pub mod lattice;
pub mod partition;
pub mod scene;
pub mod scheduler;
pub mod steering;
pub mod thermal;
pub mod viz;
