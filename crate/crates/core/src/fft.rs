//! Mixed-radix complex FFT for arbitrary lengths.
//!
//! Recursive decimation in time over the prime factorization of `n` with a generic radix-p
//! butterfly. The STFT only needs one fixed size per configuration, so a plan precomputes the
//! factorization and the twiddle table once.

use alloc::vec;
use alloc::vec::Vec;

use crate::C64;

#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    factors: Vec<(usize, usize)>,
    twiddles: Vec<C64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let twiddles = (0..n)
            .map(|j| {
                let phase = -2.0 * core::f64::consts::PI * j as f64 / n as f64;
                C64::new(libm::cos(phase), libm::sin(phase))
            })
            .collect();
        Self { n, factors: factorize(n), twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward transform, `X_k = Σ x_n e^{-j2πkn/N}`.
    pub fn forward(&self, input: &[C64]) -> Vec<C64> {
        assert_eq!(input.len(), self.n);
        let mut out = vec![C64::new(0.0, 0.0); self.n];
        let mut scratch = vec![C64::new(0.0, 0.0); self.factors.iter().map(|f| f.0).max().unwrap_or(1)];
        self.work(&mut out, input, 0, 1, &self.factors, &mut scratch);
        out
    }

    /// Unnormalized inverse transform (no 1/N).
    pub fn inverse(&self, input: &[C64]) -> Vec<C64> {
        let conj: Vec<C64> = input.iter().map(|z| z.conj()).collect();
        self.forward(&conj).into_iter().map(|z| z.conj()).collect()
    }

    fn work(
        &self,
        out: &mut [C64],
        input: &[C64],
        offset: usize,
        stride: usize,
        factors: &[(usize, usize)],
        scratch: &mut [C64],
    ) {
        let (p, m) = factors[0];
        if m == 1 {
            for (q, o) in out.iter_mut().take(p).enumerate() {
                *o = input[offset + q * stride];
            }
        } else {
            for q in 0..p {
                self.work(&mut out[q * m..(q + 1) * m], input, offset + q * stride, stride * p, &factors[1..], scratch);
            }
        }
        // radix-p butterflies over the p interleaved sub-transforms of length m
        for u in 0..m {
            for q in 0..p {
                scratch[q] = out[q * m + u];
            }
            for q1 in 0..p {
                let k = q1 * m + u;
                let mut acc = scratch[0];
                let mut tw = 0usize;
                for s in scratch.iter().take(p).skip(1) {
                    tw += stride * k;
                    tw %= self.n;
                    acc += s * self.twiddles[tw];
                }
                out[k] = acc;
            }
        }
    }
}

/// `(radix, remaining length)` pairs, largest powers of small primes first.
fn factorize(mut n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let total = n;
    let mut divided = 1;
    let mut p = 4;
    while n > 1 {
        while n % p != 0 {
            p = match p {
                4 => 2,
                2 => 3,
                _ => p + 2,
            };
            if p * p > n {
                p = n;
            }
        }
        n /= p;
        divided *= p;
        out.push((p, total / divided));
    }
    if out.is_empty() {
        out.push((1, 1));
    }
    out
}
