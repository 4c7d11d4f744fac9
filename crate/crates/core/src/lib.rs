//! Skeleton-based gait recognition from multiple depth cameras.
//!
//! Joints tracked by three devices are aligned into one frame and fused,
//! reduced to a 16-joint skeleton plus a pseudo skeleton of bone vectors,
//! and embedded by a siamese spatio-temporal graph network with a joint
//! pyramid head. Identities are matched by nearest neighbor in embedding
//! space.

pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod jrpm;
pub mod loss;
pub mod net;
pub mod pipeline;
pub mod protocol;
pub mod skeleton;
pub mod synth;
