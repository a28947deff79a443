//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Batch order and crops.
    Data = 1,
    Mask = 2,
    Init = 3,
    Quantizer = 4,
    Synth = 5,
    Split = 6,
}

/// Independent generator for `(root, stream, index)`. Changing one stream's
/// consumption never shifts another's draws.
pub fn substream(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
