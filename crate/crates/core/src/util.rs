use rand::Rng;

/// Uniform index in `0..n`; 0 for an empty range.
pub fn index(rng: &mut impl Rng, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        rng.gen_range(0..n)
    }
}
