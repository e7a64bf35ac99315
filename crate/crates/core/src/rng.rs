use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator on an independent stream. Every random consumer in the
/// crate takes its own `stream` so adding draws in one stage never shifts
/// another stage's sequence.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const DATA: u64 = 1;
    pub const TEACHER_POOL: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const CORPUS: u64 = 10;
    pub const TEACHER_TRAIN: u64 = 20;
    pub const STUDENT_INIT: u64 = 40;
    pub const SGLD: u64 = 50;
    pub const BASELINE: u64 = 60;
}
