//! Criterion benchmarks for the coupling, CPF kernel and increment hot paths.
//! Run with `cargo bench -p ccpf-hessian-bench`.
