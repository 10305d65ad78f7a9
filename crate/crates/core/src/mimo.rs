//! Narrowband MIMO block-fading link: channel draws, SVD precoding and
//! detection, pilot-based least-squares estimation.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CoreError, Result};

/// Singular values below this fraction of the largest are clamped in detection.
pub const DEGENERATE_RATIO: f64 = 1e-6;

const JACOBI_SWEEPS: usize = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::Shape {
                op: "ComplexMatrix::from_vec",
                expected: format!("{} entries", rows * cols),
                actual: data.len().to_string(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn diag(values: &[Complex64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(CoreError::Shape {
                op: "ComplexMatrix::matmul",
                expected: format!("{} rows on the right", self.cols),
                actual: rhs.rows.to_string(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (rhs.rows, rhs.cols) {
            return Err(CoreError::Shape {
                op: "ComplexMatrix::sub",
                expected: format!("{}x{}", self.rows, self.cols),
                actual: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn mean_power(&self) -> f64 {
        self.norm_sqr() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Real planes `[re..., im...]`, each row-major.
    pub fn to_planes(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.re).chain(self.data.iter().map(|v| v.im)).collect()
    }

    pub fn from_planes(rows: usize, cols: usize, planes: &[f64]) -> Result<Self> {
        let n = rows * cols;
        if planes.len() != 2 * n {
            return Err(CoreError::Shape {
                op: "ComplexMatrix::from_planes",
                expected: format!("{} reals", 2 * n),
                actual: planes.len().to_string(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: (0..n).map(|k| Complex64::new(planes[k], planes[n + k])).collect(),
        })
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(invalid("ComplexMatrix::inverse", "matrix is not square"));
        }
        let n = self.rows;
        let scale = self.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].norm().total_cmp(&a[(j, col)].norm()))
                .unwrap();
            if a[(pivot, col)].norm() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(invalid("ComplexMatrix::inverse", "matrix is singular"));
            }
            for j in 0..n {
                a.data.swap(col * n + j, pivot * n + j);
                inv.data.swap(col * n + j, pivot * n + j);
            }
            let p = a[(col, col)].inv();
            for j in 0..n {
                a[(col, j)] *= p;
                inv[(col, j)] *= p;
            }
            for i in 0..n {
                if i != col {
                    let f = a[(i, col)];
                    for j in 0..n {
                        let (aj, vj) = (a[(col, j)], inv[(col, j)]);
                        a[(i, j)] -= f * aj;
                        inv[(i, j)] -= f * vj;
                    }
                }
            }
        }
        Ok(inv)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `h = U · diag(singular) · Vᴴ` with `U` of size rows×cols.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: ComplexMatrix,
    pub singular: Vec<f64>,
    pub v: ComplexMatrix,
}

impl Svd {
    /// True when the smallest singular value falls under the clamp threshold.
    pub fn is_degenerate(&self) -> bool {
        let max = self.singular[0];
        self.singular.iter().any(|&s| s < DEGENERATE_RATIO * max)
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        let s: Vec<Complex64> = self.singular.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.u
            .matmul(&ComplexMatrix::diag(&s))
            .and_then(|us| us.matmul(&self.v.adjoint()))
            .expect("factor shapes conform")
    }
}

/// One-sided (Hestenes) Jacobi SVD for `rows >= cols`.
pub fn svd(h: &ComplexMatrix) -> Result<Svd> {
    let (m, n) = (h.rows, h.cols);
    if m < n {
        return Err(invalid("svd", format!("needs rows >= cols, got {m}x{n}")));
    }
    if !h.is_finite() {
        return Err(invalid("svd", "matrix has non-finite entries"));
    }
    let mut a = h.clone();
    let mut v = ComplexMatrix::identity(n);
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta) = (0.0, 0.0);
                let mut gamma = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    alpha += a[(i, p)].norm_sqr();
                    beta += a[(i, q)].norm_sqr();
                    gamma += a[(i, p)].conj() * a[(i, q)];
                }
                let g = gamma.norm();
                if g <= 1e-15 * (alpha * beta).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let rotate = |mat: &mut ComplexMatrix, rows: usize| {
                    for i in 0..rows {
                        let xp = mat[(i, p)];
                        let xq = mat[(i, q)] * phase.conj();
                        mat[(i, p)] = xp * c - xq * s;
                        mat[(i, q)] = xp * s + xq * c;
                    }
                };
                rotate(&mut a, m);
                rotate(&mut v, n);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a[(i, j)].norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let singular: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v_sorted = ComplexMatrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    let tiny = singular[0] * f64::EPSILON * 4.0;
    let mut u = ComplexMatrix::zeros(m, n);
    for (k, &j) in order.iter().enumerate() {
        if norms[j] > tiny {
            for i in 0..m {
                u[(i, k)] = a[(i, j)] / norms[j];
            }
        } else {
            complete_column(&mut u, k);
        }
    }
    Ok(Svd {
        u,
        singular,
        v: v_sorted,
    })
}

/// Fills column `k` with a unit vector orthogonal to columns `0..k`.
fn complete_column(u: &mut ComplexMatrix, k: usize) {
    let m = u.rows;
    for e in 0..m {
        let mut cand: Vec<Complex64> = (0..m).map(|i| Complex64::new(if i == e { 1.0 } else { 0.0 }, 0.0)).collect();
        for j in 0..k {
            let dot: Complex64 = (0..m).map(|i| u[(i, j)].conj() * cand[i]).sum();
            for (i, c) in cand.iter_mut().enumerate() {
                *c -= dot * u[(i, j)];
            }
        }
        let norm = cand.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for (i, c) in cand.into_iter().enumerate() {
                u[(i, k)] = c / norm;
            }
            return;
        }
    }
}

/// One block-fading draw. `noise_std` is per real dimension.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    pub h: ComplexMatrix,
    pub noise_std: f64,
    pub block: u64,
}

/// Total complex noise variance for unit transmit symbol power.
pub fn snr_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Noise standard deviation per real dimension.
pub fn snr_to_noise_std(snr_db: f64) -> f64 {
    (snr_to_noise_var(snr_db) / 2.0).sqrt()
}

/// Circularly-symmetric complex Gaussian matrix with per-real std `std`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> ComplexMatrix {
    if std == 0.0 {
        return ComplexMatrix::zeros(rows, cols);
    }
    let d = Normal::new(0.0, std).expect("finite std");
    ComplexMatrix::from_fn(rows, cols, |_, _| {
        let re = d.sample(rng);
        Complex64::new(re, d.sample(rng))
    })
}

/// i.i.d. CN(0, 1) entries.
pub fn draw_channel<R: Rng + ?Sized>(rng: &mut R, n_r: usize, n_t: usize, snr_db: f64, block: u64) -> ChannelRealization {
    ChannelRealization {
        h: complex_gaussian(rng, n_r, n_t, 0.5f64.sqrt()),
        noise_std: snr_to_noise_std(snr_db),
        block,
    }
}

/// Antenna-major symbol block with the power scale removed at packing.
#[derive(Clone, Debug)]
pub struct SymbolBlock {
    pub symbols: ComplexMatrix,
    pub scale: f64,
}

/// Position of real index `i` of a codeword inside the `n_t × L` block:
/// `(antenna, column, is_imag)`.
pub fn symbol_slot(i: usize, n_t: usize) -> (usize, usize, bool) {
    let k = i / 2;
    (k % n_t, k / n_t, i % 2 == 1)
}

/// Pairs consecutive reals into complex symbols, deals them round-robin over
/// the transmit antennas and scales the block to unit mean power.
pub fn pack_and_normalize(y: &[f64], n_t: usize) -> Result<SymbolBlock> {
    if n_t == 0 || y.is_empty() || y.len() % (2 * n_t) != 0 {
        return Err(invalid(
            "pack_and_normalize",
            format!("codeword length {} is not a positive multiple of {}", y.len(), 2 * n_t),
        ));
    }
    let cols = y.len() / (2 * n_t);
    let power = y.iter().map(|v| v * v).sum::<f64>() / (y.len() / 2) as f64;
    let scale = if power > 0.0 { power.sqrt() } else { 1.0 };
    let mut symbols = ComplexMatrix::zeros(n_t, cols);
    for k in 0..y.len() / 2 {
        symbols[(k % n_t, k / n_t)] = Complex64::new(y[2 * k], y[2 * k + 1]) / scale;
    }
    Ok(SymbolBlock { symbols, scale })
}

/// Inverse of [`pack_and_normalize`].
pub fn unpack(block: &SymbolBlock) -> Vec<f64> {
    let n_t = block.symbols.rows();
    let n = block.symbols.as_slice().len();
    let mut y = vec![0.0; 2 * n];
    for k in 0..n {
        let s = block.symbols[(k % n_t, k / n_t)] * block.scale;
        y[2 * k] = s.re;
        y[2 * k + 1] = s.im;
    }
    y
}

pub fn precode(x: &ComplexMatrix, v: &ComplexMatrix) -> Result<ComplexMatrix> {
    v.matmul(x)
}

/// `h·z + n` with fresh noise at the realization's level.
pub fn channel_apply<R: Rng + ?Sized>(z: &ComplexMatrix, ch: &ChannelRealization, rng: &mut R) -> Result<ComplexMatrix> {
    let hz = ch.h.matmul(z)?;
    let n = complex_gaussian(rng, hz.rows(), hz.cols(), ch.noise_std);
    Ok(ComplexMatrix {
        rows: hz.rows,
        cols: hz.cols,
        data: hz.data.iter().zip(&n.data).map(|(a, b)| a + b).collect(),
    })
}

/// Singular values with the small ones clamped to the degeneracy floor.
pub fn regularized_singular(singular: &[f64]) -> Result<Vec<f64>> {
    let max = singular.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(invalid("detect", "all singular values are zero"));
    }
    Ok(singular.iter().map(|&s| s.max(DEGENERATE_RATIO * max)).collect())
}

/// `Λ⁻¹ Uᴴ ẑ` with clamped singular values.
pub fn detect(z_hat: &ComplexMatrix, u: &ComplexMatrix, singular: &[f64]) -> Result<ComplexMatrix> {
    let lam = regularized_singular(singular)?;
    let mut y = u.adjoint().matmul(z_hat)?;
    if y.rows != lam.len() {
        return Err(CoreError::Shape {
            op: "detect",
            expected: format!("{} singular values", y.rows),
            actual: lam.len().to_string(),
        });
    }
    for i in 0..y.rows {
        for j in 0..y.cols {
            y[(i, j)] /= lam[i];
        }
    }
    Ok(y)
}

/// Effective linear map from transmitted to detected symbols for a given
/// true channel and the SVD factors used at both ends.
pub fn effective_map(h: &ComplexMatrix, f: &Svd) -> Result<ComplexMatrix> {
    let lam = regularized_singular(&f.singular)?;
    let mut m = f.u.adjoint().matmul(h)?.matmul(&f.v)?;
    for i in 0..m.rows {
        for j in 0..m.cols {
            m[(i, j)] /= lam[i];
        }
    }
    Ok(m)
}

/// Codeword through pack, precode, channel, detect and unpack. `csi` holds
/// the SVD of the channel estimate shared by transmitter and receiver.
pub fn transmit<R: Rng + ?Sized>(y: &[f64], ch: &ChannelRealization, csi: &Svd, rng: &mut R) -> Result<Vec<f64>> {
    let block = pack_and_normalize(y, ch.h.cols())?;
    let z = precode(&block.symbols, &csi.v)?;
    let z_hat = channel_apply(&z, ch, rng)?;
    let symbols = detect(&z_hat, &csi.u, &csi.singular)?;
    Ok(unpack(&SymbolBlock {
        symbols,
        scale: block.scale,
    }))
}

/// Known invertible pilot matrix.
#[derive(Clone, Debug)]
pub struct Pilot {
    gamma: ComplexMatrix,
    gamma_inv: ComplexMatrix,
}

impl Pilot {
    pub fn new(gamma: ComplexMatrix) -> Result<Self> {
        let gamma_inv = gamma.inverse()?;
        Ok(Self { gamma, gamma_inv })
    }

    /// `√ρ · I`.
    pub fn scaled_identity(n_t: usize, power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(invalid("Pilot::scaled_identity", "pilot power must be positive"));
        }
        Self::new(ComplexMatrix::identity(n_t).scale(power.sqrt()))
    }

    pub fn gamma(&self) -> &ComplexMatrix {
        &self.gamma
    }
}

/// `(hΓ + n)Γ⁻¹`.
pub fn pilot_ls_estimate<R: Rng + ?Sized>(ch: &ChannelRealization, pilot: &Pilot, rng: &mut R) -> Result<ComplexMatrix> {
    let received = channel_apply(&pilot.gamma, ch, rng)?;
    received.matmul(&pilot.gamma_inv)
}

/// `‖est − truth‖² / ‖truth‖²`.
pub fn nmse(est: &ComplexMatrix, truth: &ComplexMatrix) -> Result<f64> {
    Ok(est.sub(truth)?.norm_sqr() / truth.norm_sqr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unitary_error(m: &ComplexMatrix) -> f64 {
        m.adjoint()
            .matmul(m)
            .unwrap()
            .sub(&ComplexMatrix::identity(m.cols()))
            .unwrap()
            .frobenius()
    }

    #[test]
    fn noise_levels() {
        assert_eq!(snr_to_noise_var(0.0), 1.0);
        assert!((snr_to_noise_var(3.0) - 0.5012).abs() < 1e-4);
        assert!((snr_to_noise_var(10.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_noise_std(0.0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn svd_of_diagonal() {
        let h = ComplexMatrix::diag(&[c(2.0, 0.0), c(1.0, 0.0)]);
        let f = svd(&h).unwrap();
        assert_eq!(f.singular, vec![2.0, 1.0]);
        for i in 0..2 {
            assert!((f.u[(i, i)].norm() - 1.0).abs() < 1e-12);
            assert!((f.v[(i, i)].norm() - 1.0).abs() < 1e-12);
        }
        let swapped = ComplexMatrix::diag(&[c(1.0, 0.0), c(0.0, 3.0)]);
        let f = svd(&swapped).unwrap();
        assert_eq!(f.singular, vec![3.0, 1.0]);
        assert!(f.reconstruct().sub(&swapped).unwrap().frobenius() < 1e-12);
    }

    #[test]
    fn svd_random_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let h = draw_channel(&mut rng, 2, 2, 10.0, 0).h;
            let f = svd(&h).unwrap();
            assert!(f.reconstruct().sub(&h).unwrap().frobenius() < 1e-9);
            assert!(unitary_error(&f.u) < 1e-9);
            assert!(unitary_error(&f.v) < 1e-9);
            assert!(f.singular[0] >= f.singular[1] && f.singular[1] >= 0.0);
        }
    }

    #[test]
    fn svd_rank_deficient_and_tall() {
        let h = ComplexMatrix::from_vec(2, 2, vec![c(1.0, 1.0), c(2.0, 2.0), c(0.5, 0.0), c(1.0, 0.0)]).unwrap();
        let f = svd(&h).unwrap();
        assert!(f.is_degenerate());
        assert!(unitary_error(&f.u) < 1e-9);
        assert!(f.reconstruct().sub(&h).unwrap().frobenius() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tall = complex_gaussian(&mut rng, 4, 3, 1.0);
        let f = svd(&tall).unwrap();
        assert!(f.reconstruct().sub(&tall).unwrap().frobenius() < 1e-9);
        assert!(svd(&ComplexMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn packing_layout() {
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let b = pack_and_normalize(&y, 2).unwrap();
        assert_eq!(b.scale, 1.0);
        assert_eq!(b.symbols[(0, 0)], c(1.0, 0.0));
        assert_eq!(b.symbols[(1, 0)], c(0.0, 1.0));
        assert_eq!(b.symbols[(0, 1)], c(1.0, 0.0));
        assert_eq!(b.symbols[(1, 1)], c(0.0, 1.0));
        assert_eq!(unpack(&b), y);
        assert_eq!(symbol_slot(3, 2), (1, 0, true));
        assert!(pack_and_normalize(&[1.0; 6], 2).is_err());

        let zero = pack_and_normalize(&[0.0; 4], 2).unwrap();
        assert_eq!(zero.scale, 1.0);
    }

    #[test]
    fn packing_normalizes_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..124).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = pack_and_normalize(&y, 2).unwrap();
        assert!((b.symbols.mean_power() - 1.0).abs() < 1e-9);
        let back = unpack(&b);
        for (a, b) in back.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn precode_preserves_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = svd(&draw_channel(&mut rng, 2, 2, 0.0, 0).h).unwrap().v;
        let x = complex_gaussian(&mut rng, 2, 16, 1.0);
        let z = precode(&x, &v).unwrap();
        assert!((z.norm_sqr() - x.norm_sqr()).abs() < 1e-9 * x.norm_sqr());
        assert_eq!(precode(&x, &ComplexMatrix::identity(2)).unwrap(), x);
        // naive oracle
        for i in 0..2 {
            for j in 0..16 {
                let want = v[(i, 0)] * x[(0, j)] + v[(i, 1)] * x[(1, j)];
                assert!((z[(i, j)] - want).norm() < 1e-14);
            }
        }
        assert!(precode(&ComplexMatrix::zeros(3, 4), &v).is_err());
    }

    #[test]
    fn noiseless_channel_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = complex_gaussian(&mut rng, 2, 5, 1.0);
        let ch = ChannelRealization {
            h: ComplexMatrix::identity(2),
            noise_std: 0.0,
            block: 0,
        };
        assert_eq!(channel_apply(&z, &ch, &mut rng).unwrap(), z);
        let ch = ChannelRealization {
            h: ComplexMatrix::diag(&[c(2.0, 0.0), c(1.0, 0.0)]),
            ..ch
        };
        let out = channel_apply(&z, &ch, &mut rng).unwrap();
        for j in 0..5 {
            assert_eq!(out[(0, j)], z[(0, j)] * 2.0);
            assert_eq!(out[(1, j)], z[(1, j)]);
        }
    }

    #[test]
    fn exact_csi_recovers_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mut ch = draw_channel(&mut rng, 2, 2, 0.0, 0);
            ch.noise_std = 0.0;
            let f = svd(&ch.h).unwrap();
            let y: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = transmit(&y, &ch, &f, &mut rng).unwrap();
            let err = y.iter().zip(&out).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                / y.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn detect_rejects_zero_spectrum() {
        let z = ComplexMatrix::zeros(2, 2);
        assert!(detect(&z, &ComplexMatrix::identity(2), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ls_is_exact_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ch = draw_channel(&mut rng, 2, 2, 5.0, 0);
        ch.noise_std = 0.0;
        let pilot = Pilot::scaled_identity(2, 1.0).unwrap();
        assert_eq!(pilot_ls_estimate(&ch, &pilot, &mut rng).unwrap(), ch.h);
        let general = Pilot::new(ComplexMatrix::from_vec(2, 2, vec![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0)]).unwrap()).unwrap();
        let est = pilot_ls_estimate(&ch, &general, &mut rng).unwrap();
        assert!(est.sub(&ch.h).unwrap().frobenius() < 1e-12);
        assert!(Pilot::new(ComplexMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = complex_gaussian(&mut rng, 3, 3, 1.0);
        let p = m.matmul(&m.inverse().unwrap()).unwrap();
        assert!(p.sub(&ComplexMatrix::identity(3)).unwrap().frobenius() < 1e-10);
    }

    #[test]
    fn planes_round_trip() {
        let m = ComplexMatrix::from_vec(2, 2, vec![c(1.0, 5.0), c(2.0, 6.0), c(3.0, 7.0), c(4.0, 8.0)]).unwrap();
        let p = m.to_planes();
        assert_eq!(p, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(ComplexMatrix::from_planes(2, 2, &p).unwrap(), m);
    }
}
