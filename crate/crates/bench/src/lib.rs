//! Criterion benchmarks of the scale convolutions against plain 2D
//! convolutions with matching extents; see `benches/layers.rs`.
