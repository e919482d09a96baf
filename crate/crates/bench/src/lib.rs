//! Holds the criterion benchmarks in `benches/`. Run with `cargo bench -p atms-bench`.
