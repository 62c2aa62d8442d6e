//! Shared workload builders for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mos_core::ssm_kernel::discretize_sequence;
use mos_core::{DenseArray, DiscretizedParams};

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DenseArray::from_vec(shape, data)
}

/// A ready-to-scan instance: discretized transition factors, inputs `x`
/// and readout projections `C`, all seeded.
pub fn scan_instance(
    rows: usize,
    channels: usize,
    n_state: usize,
    seed: u64,
) -> (DiscretizedParams, DenseArray, DenseArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_array(&mut rng, &[channels, n_state], -2.0, -0.1);
    let b_seq = random_array(&mut rng, &[rows, n_state], -1.0, 1.0);
    let delta = random_array(&mut rng, &[rows, channels], 1e-3, 0.1);
    let disc = discretize_sequence(&a, &b_seq, &delta).expect("shapes are consistent");
    let x = random_array(&mut rng, &[rows, channels], -1.0, 1.0);
    let c_seq = random_array(&mut rng, &[rows, n_state], -1.0, 1.0);
    (disc, x, c_seq)
}

/// Random voxel coordinates within a `bits`-wide non-negative cube.
pub fn random_coords(n: usize, bits: u32, seed: u64) -> Vec<[u64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = 1u64 << bits;
    (0..n)
        .map(|_| {
            [
                rng.random_range(0..limit),
                rng.random_range(0..limit),
                rng.random_range(0..limit),
            ]
        })
        .collect()
}

/// The same coordinates as signed values for the serializer entry point.
pub fn signed_coords(coords: &[[u64; 3]]) -> Vec<[i64; 3]> {
    coords
        .iter()
        .map(|c| [c[0] as i64, c[1] as i64, c[2] as i64])
        .collect()
}
