//! Criterion benchmarks for `crlb-core`; see `benches/`.
