use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;

/// Seeded random stream: ChaCha8 keyed by `seed`, with `stream_id` selecting
/// the ChaCha stream. Gaussians come from the Box–Muller
/// transform on 53-bit uniforms, pairs cached in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

/// Well-known stream labels derived from one master seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TEACHER: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const PROBE: u64 = 5;
    /// Client `i` samples from stream `CLIENT_BASE + i`.
    pub const CLIENT_BASE: u64 = 1 << 32;
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.gen_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Matrix with i.i.d. `N(0, std²)` entries, filled in row-major order.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
    assert!(std >= 0.0, "std must be nonnegative");
    let data = (0..rows * cols).map(|_| std * rng.gaussian()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}
