//! The positional-encoding identity check, the runtime-scaling benchmark and
//! the embedding export.

mod bench;
mod embeddings;
mod pe;

pub use bench::{
    host_load, is_linear_ratio, scaling_bench, time_encoder, time_model, width_bench, write_bench_csv,
    BenchOptions, BenchRow, BenchTarget, MAX_WAIT_SHARE,
};
pub use embeddings::{collect_embeddings, write_embeddings, EmbeddingRow};
pub use pe::{frequencies, pe_dot_invariance, pe_random_trials, positional_encoding, PeCheck, PeSummary, PE_TOLERANCE};
