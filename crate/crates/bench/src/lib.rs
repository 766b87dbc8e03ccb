//! Criterion benchmarks for the SOH pipeline hot paths; see `benches/`.
