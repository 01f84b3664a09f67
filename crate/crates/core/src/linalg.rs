//! Vector kernels with a fixed reduction order.
//!
//! Reductions split the input into fixed-size chunks, sum each chunk
//! serially and then add the partial sums left to right, so results do not
//! depend on the number of threads.

use rayon::prelude::*;

const CHUNK: usize = 1 << 13;

fn dot_serial(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= CHUNK {
        return dot_serial(a, b);
    }
    let parts: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| dot_serial(x, y))
        .collect();
    parts.iter().sum()
}

/// Σ a_i b_i c_i, used for volume-weighted pairings.
pub fn dot3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    debug_assert!(a.len() == b.len() && b.len() == c.len());
    let serial = |x: &[f64], y: &[f64], z: &[f64]| -> f64 {
        x.iter().zip(y).zip(z).map(|((p, q), r)| p * q * r).sum()
    };
    if a.len() <= CHUNK {
        return serial(a, b, c);
    }
    let parts: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .zip(c.par_chunks(CHUNK))
        .map(|((x, y), z)| serial(x, y, z))
        .collect();
    parts.iter().sum()
}

pub fn sum(a: &[f64]) -> f64 {
    if a.len() <= CHUNK {
        return a.iter().sum();
    }
    let parts: Vec<f64> = a.par_chunks(CHUNK).map(|x| x.iter().sum::<f64>()).collect();
    parts.iter().sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y ← y + alpha·x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut()
        .zip(x.par_iter())
        .for_each(|(yi, xi)| *yi += alpha * xi);
}

/// y ← x + beta·y
pub fn xpby(x: &[f64], beta: f64, y: &mut [f64]) {
    y.par_iter_mut()
        .zip(x.par_iter())
        .for_each(|(yi, xi)| *yi = xi + beta * *yi);
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.par_iter_mut().for_each(|v| *v *= alpha);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_do_not_depend_on_the_pool_size() {
        let a: Vec<f64> = (0..100_000u64)
            .map(|i| ((i * 7919) % 1013) as f64 * 1e-3 - 0.4)
            .collect();
        let b: Vec<f64> = (0..100_000u64)
            .map(|i| ((i * 104_729) % 997) as f64 * 1e-2)
            .collect();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let d1 = one.install(|| dot(&a, &b));
        let d4 = four.install(|| dot(&a, &b));
        assert_eq!(d1.to_bits(), d4.to_bits());
        let s1 = one.install(|| sum(&a));
        let s4 = four.install(|| sum(&a));
        assert_eq!(s1.to_bits(), s4.to_bits());
    }
}
