//! Seed derivation. Every randomized component draws from a ChaCha stream
//! identified by `(seed, stream)` so output never depends on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Offsets applied to a master seed to obtain component seeds. A model's
/// initialization and training share one seed on disjoint streams; teacher
/// `i` of an ensemble uses `TEACHER + i`.
pub mod offsets {
    pub const WEAK_ANNOTATION: u64 = 1;
    pub const SUPERVISED_ANNOTATION: u64 = 2;
    pub const TEACHER: u64 = 100;
    pub const PARTITION: u64 = 300;
    pub const STUDENT_ANNOTATION: u64 = 400;
    pub const STUDENT: u64 = 500;
    pub const NOISE: u64 = 700;
    pub const EVAL_NOISE: u64 = 800;

    pub const ALL: [(&str, u64); 8] = [
        ("weak_annotation", WEAK_ANNOTATION),
        ("supervised_annotation", SUPERVISED_ANNOTATION),
        ("teacher", TEACHER),
        ("partition", PARTITION),
        ("student_annotation", STUDENT_ANNOTATION),
        ("student", STUDENT),
        ("noise", NOISE),
        ("eval_noise", EVAL_NOISE),
    ];
}
