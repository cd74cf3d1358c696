// Microbenchmarks live in benches/; see crates/bench/benches/kernels.rs.
