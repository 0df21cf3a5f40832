//! Criterion benchmarks for the activations, objectives and tape; see
//! `benches/`. Run with `cargo bench -p era-bench`.
