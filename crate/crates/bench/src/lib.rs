//! Shared fixtures for the benchmark targets.

use emoter_core::model::{random_input, EmoTer, EmoTerConfig, ModelInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_values(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Desk-profile model over a 200-token vocabulary with one full-length input.
pub fn desk_model() -> (EmoTer, ModelInput) {
    let config = EmoTerConfig::desk(200, 50, 50);
    let model = EmoTer::new(config.clone(), 0).expect("valid config");
    let input = random_input(&config, &mut ChaCha8Rng::seed_from_u64(1));
    (model, input)
}
