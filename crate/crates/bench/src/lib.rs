//! Criterion benchmarks for the ranking metrics, text similarity and the
//! synthetic pipeline. Run with `cargo bench -p hallucheck-bench`.
