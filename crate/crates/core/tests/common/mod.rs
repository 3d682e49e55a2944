#![allow(dead_code)]

use pgcr::metrics::ImageU8;

/// Byte stream of a 64-bit LCG, top byte of each state.
pub fn lcg_image(w: usize, h: usize, seed: u64) -> ImageU8 {
    let mut s = seed;
    ImageU8::from_fn(w, h, |_, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 56) as u8
    })
}
