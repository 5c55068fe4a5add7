//! Fixtures shared by the kernel benchmarks in `benches/`.

use specfield::field::{EncodingConfig, FieldConfig, SpectralField};
use specfield::fusion::{SaUnet, SaUnetConfig};
use specfield::SpectrumMapStack;

/// The small field used for desk-scale training runs.
pub fn desk_field(s_num: usize) -> SpectralField {
    let cfg = FieldConfig {
        encoding: EncodingConfig { num_freqs_position: 6, num_freqs_direction: 2, include_identity: true },
        depth: 3,
        width: 32,
        skip_layer: 0,
        bottleneck_width: 16,
        s_num,
    };
    SpectralField::new(cfg, 0).expect("valid field config")
}

/// `n` points along a line through the scene, all looking down +z.
pub fn sample_points(n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let pts = (0..n).map(|i| [i as f64 / n as f64 - 0.5, 0.3, -0.2]).collect();
    (pts, vec![[0.0, 0.0, 1.0]; n])
}

/// Deterministic pseudo-random values in `[0, 1)`.
pub fn hash_values(n: usize, salt: u64) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let x = (i ^ salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub fn stack(side: usize, s_num: usize) -> SpectrumMapStack {
    SpectrumMapStack::from_data(side, side, s_num, hash_values(side * side * s_num * 3, 1)).expect("valid stack")
}

pub fn saunet(s_num: usize) -> SaUnet {
    SaUnet::new(SaUnetConfig { s_num, ..SaUnetConfig::default() }, 0).expect("valid net config")
}
