//! Benchmarks for `simlab-core`; see `benches/`.
