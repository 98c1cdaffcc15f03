//! Brute-force reference sampler for tiny fields.
//!
//! Assembles the full space-by-mode covariance `Ã(x - x') = L diag(ρ_k(x - x')) Lᵀ`
//! as one dense matrix and samples it through its Cholesky factor. The cost is
//! cubic in `H·W·(N-1)`, so this only exists to check the FFT sampler.

use super::{FieldSampler, ZernikeField};
use crate::correlation::CorrelationSpec;
use crate::error::{invalid, Error, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Row/column `p·(N-1) + (m-2)` holds mode `m` at pixel `p`.
pub fn assemble_covariance(spec: &CorrelationSpec, height: usize, width: usize) -> Result<DMatrix<f64>> {
    if height > spec.grid.rows / 2 || width > spec.grid.cols / 2 {
        return invalid("field exceeds the kernel lag extent");
    }
    let n = spec.num_modes;
    let nm = n - 1;
    let px = height * width;
    let l = |a: usize, b: usize| spec.noll.l(a - 1, b - 1);
    let mut cov = DMatrix::zeros(px * nm, px * nm);
    for p in 0..px {
        let (py, pxx) = ((p / width) as isize, (p % width) as isize);
        for q in 0..px {
            let (qy, qx) = ((q / width) as isize, (q % width) as isize);
            let rho: Vec<f64> = spec.kernels.iter().map(|k| k.at(qy - py, qx - pxx).unwrap()).collect();
            for a in 2..=n {
                for b in 2..=n {
                    let v: f64 = (2..=a.min(b)).map(|k| l(a, k) * l(b, k) * rho[k - 2]).sum();
                    cov[(p * nm + a - 2, q * nm + b - 2)] = v;
                }
            }
        }
    }
    Ok(cov)
}

pub struct DenseSampler {
    pub height: usize,
    pub width: usize,
    pub num_modes: usize,
    pub covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl DenseSampler {
    pub fn new(spec: &CorrelationSpec, height: usize, width: usize) -> Result<Self> {
        let covariance = assemble_covariance(spec, height, width)?;
        let dim = covariance.nrows();
        let jitter = 1e-10 * covariance.trace() / dim as f64;
        let factor = (&covariance + DMatrix::identity(dim, dim) * jitter)
            .cholesky()
            .ok_or_else(|| Error::Numeric("assembled covariance is not positive definite".into()))?
            .unpack();
        Ok(Self { height, width, num_modes: spec.num_modes, covariance, factor })
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// `count` samples as columns.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(self.dim(), count, |_, _| StandardNormal.sample(&mut rng));
        &self.factor * z
    }
}

/// Stacks the non-piston coefficients of a field into the dense ordering.
pub fn stack(field: &ZernikeField) -> Vec<f64> {
    let n = field.num_modes;
    field.data.chunks_exact(n).flat_map(|c| c[1..].iter().copied()).collect()
}

/// Zero-mean sample covariance `X Xᵀ / count` accumulated in batches of columns.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    sum: DMatrix<f64>,
    batch: Vec<f64>,
    batch_cols: usize,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { sum: DMatrix::zeros(dim, dim), batch: Vec::new(), batch_cols: 0, count: 0 }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.sum.nrows());
        self.batch.extend_from_slice(x);
        self.batch_cols += 1;
        if self.batch_cols == 256 {
            self.flush();
        }
    }

    pub fn push_columns(&mut self, m: &DMatrix<f64>) {
        for c in m.column_iter() {
            self.push(c.as_slice());
        }
    }

    fn flush(&mut self) {
        if self.batch_cols == 0 {
            return;
        }
        let x = DMatrix::from_column_slice(self.sum.nrows(), self.batch_cols, &self.batch);
        self.sum.gemm(1.0, &x, &x.transpose(), 1.0);
        self.count += self.batch_cols;
        self.batch.clear();
        self.batch_cols = 0;
    }

    pub fn finish(mut self) -> DMatrix<f64> {
        self.flush();
        self.sum / self.count.max(1) as f64
    }
}

pub fn frobenius_relative(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (estimate - reference).norm() / reference.norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub samples: usize,
    /// FFT sampler covariance against the sampled dense oracle.
    pub sampler_vs_dense: f64,
    pub sampler_vs_exact: f64,
    pub dense_vs_exact: f64,
    /// `tr(C)² / ‖C‖²_F`; sampling noise of the Frobenius error scales like `√(rank / samples)`.
    pub effective_rank: f64,
}

/// Compares `samples` FFT-sampler fields with as many dense Cholesky draws.
pub fn oracle_check(spec: &CorrelationSpec, height: usize, width: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    let dense = DenseSampler::new(spec, height, width)?;
    let mut fft = FieldSampler::new(spec, height, width, seed)?;
    let mut acc_fft = CovarianceAccumulator::new(dense.dim());
    for k in 0..samples {
        let f = super::mix_fields(&fft.sample(k as u64), &spec.noll)?;
        acc_fft.push(&stack(&f));
    }
    let mut acc_dense = CovarianceAccumulator::new(dense.dim());
    let mut done = 0;
    while done < samples {
        let b = (samples - done).min(1024);
        acc_dense.push_columns(&dense.sample(b, seed ^ (0x5eed_0000 + done as u64)));
        done += b;
    }
    let c_fft = acc_fft.finish();
    let c_dense = acc_dense.finish();
    let exact = &dense.covariance;
    Ok(OracleReport {
        samples,
        sampler_vs_dense: frobenius_relative(&c_fft, &c_dense),
        sampler_vs_exact: frobenius_relative(&c_fft, exact),
        dense_vs_exact: frobenius_relative(&c_dense, exact),
        effective_rank: exact.trace().powi(2) / exact.norm_squared(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::KernelOptions;

    #[test]
    fn assembled_covariance_blocks() {
        let spec = CorrelationSpec::build_raw(4, 1.0, 3, 3, 0.2, KernelOptions { cache_dir: None, ..Default::default() })
            .unwrap();
        let c = assemble_covariance(&spec, 3, 3).unwrap();
        assert_eq!(c.nrows(), 27);
        assert!((&c - c.transpose()).amax() < 1e-12);
        // Diagonal pixel blocks reproduce the Noll matrix.
        for a in 0..3 {
            for b in 0..3 {
                assert!((c[(12 + a, 12 + b)] - spec.noll.get(a + 1, b + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulator_matches_direct_sum() {
        let xs = [[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let mut acc = CovarianceAccumulator::new(2);
        xs.iter().for_each(|x| acc.push(x));
        let c = acc.finish();
        let want = |i: usize, j: usize| xs.iter().map(|x| x[i] * x[j]).sum::<f64>() / 3.0;
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[(i, j)] - want(i, j)).abs() < 1e-14);
            }
        }
    }
}
