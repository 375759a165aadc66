use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream identified by `(seed, stream id)`.
///
/// Every sample of every epoch draws from its own stream, so results do not
/// depend on how work is split across threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Stream id derived from a path of integers, e.g. `[purpose, epoch, index]`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let stream = path.iter().fold(0x5EED_u64, |acc, p| splitmix(acc ^ splitmix(*p)));
        RngStream { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn same_stream_same_draws() {
        let a: Vec<u64> = RngStream::new(7, 3).rng().random_iter().take(8).collect();
        let b: Vec<u64> = RngStream::new(7, 3).rng().random_iter().take(8).collect();
        let c: Vec<u64> = RngStream::new(7, 4).rng().random_iter().take(8).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(RngStream::derive(1, &[0, 1]), RngStream::derive(1, &[1, 0]));
    }
}
