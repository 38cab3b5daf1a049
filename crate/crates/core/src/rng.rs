//! Salted ChaCha streams. Independent concerns draw from separate salts so
//! that changing one never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(GOLDEN));
    rng.set_stream(index);
    rng
}
