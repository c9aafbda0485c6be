//! Exponential-map parameterizations of the orthogonal, symmetric positive
//! definite and antisymmetric matrices that define a forward process.
//!
//! An orthogonal matrix is `Q = exp(H)` with `H` antisymmetric, stored as the
//! strictly-upper-triangular entries of `H` in row-major order. SPD metrics
//! are `Q diag(exp(l)) Qᵀ` and antisymmetric drifts are `Q blockdiag(J(λ)) Qᵀ`
//! with `J(λ) = [[0, λ], [-λ, 0]]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Symmetry tolerance accepted by [`spd_sqrt`].
pub const SYMMETRY_TOL: f64 = 1e-10;

// Padé degrees and the 1-norm bounds below which each degree reaches unit
// roundoff (Higham 2005).
const PADE_THETA: [(usize, f64); 4] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
];
const THETA_13: f64 = 5.371_920_351_148_152;

fn pade_coefficients(degree: usize) -> &'static [f64] {
    match degree {
        3 => &[120.0, 60.0, 12.0, 1.0],
        5 => &[30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0],
        7 => &[
            17_297_280.0,
            8_648_640.0,
            1_995_840.0,
            277_200.0,
            25_200.0,
            1_512.0,
            56.0,
            1.0,
        ],
        9 => &[
            17_643_225_600.0,
            8_821_612_800.0,
            2_075_673_600.0,
            302_702_400.0,
            30_270_240.0,
            2_162_160.0,
            110_880.0,
            3_960.0,
            90.0,
            1.0,
        ],
        _ => &[
            64_764_752_532_480_000.0,
            32_382_376_266_240_000.0,
            7_771_770_303_897_600.0,
            1_187_353_796_428_800.0,
            129_060_195_264_000.0,
            10_559_470_521_600.0,
            670_442_572_800.0,
            33_522_128_640.0,
            1_323_241_920.0,
            40_840_800.0,
            960_960.0,
            16_380.0,
            182.0,
            1.0,
        ],
    }
}

fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Matrix exponential by scaling and squaring with a diagonal Padé approximant.
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("matrix_exp (square)", m.nrows(), m.ncols())?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix_exp input"));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let norm = norm_1(m);
    let ident = DMatrix::<f64>::identity(n, n);

    for &(degree, theta) in &PADE_THETA {
        if norm <= theta {
            return pade_low(m, degree, &ident);
        }
    }

    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = m * 2f64.powi(-squarings);
    let mut r = pade_13(&scaled, &ident)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(a: &DMatrix<f64>, degree: usize, ident: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = pade_coefficients(degree);
    let a2 = a * a;
    // Even powers A^0, A^2, A^4, ...
    let mut powers = vec![ident.clone(), a2.clone()];
    while powers.len() < degree.div_ceil(2) {
        let next = powers.last().unwrap() * &a2;
        powers.push(next);
    }
    let mut u = DMatrix::zeros(a.nrows(), a.ncols());
    let mut v = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, p) in powers.iter().enumerate() {
        u += p * b[2 * k + 1];
        v += p * b[2 * k];
    }
    let u = a * u;
    solve_pade(&u, &v)
}

fn pade_13(a: &DMatrix<f64>, ident: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = pade_coefficients(13);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).ok_or(Error::NonFinite("matrix_exp Padé denominator"))
}

/// Number of free generator entries of an `n×n` antisymmetric matrix.
pub fn generator_len(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

/// Antisymmetric matrix whose strictly-upper-triangular entries (row-major)
/// are `upper`.
pub fn antisym_from_upper(dim: usize, upper: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("antisymmetric generator", generator_len(dim), upper.len())?;
    let mut h = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in (i + 1)..dim {
            h[(i, j)] = upper[k];
            h[(j, i)] = -upper[k];
            k += 1;
        }
    }
    Ok(h)
}

/// Strictly-upper-triangular entries of `m` in row-major order.
pub fn upper_entries(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(generator_len(n));
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn antisymmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

/// Element of SO(n) given by the exponential of an antisymmetric generator.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalParam {
    pub dim: usize,
    pub generator: Vec<f64>,
}

impl OrthogonalParam {
    pub fn new(dim: usize, generator: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("orthogonal parameter needs dim >= 1".into()));
        }
        check_dim("orthogonal generator", generator_len(dim), generator.len())?;
        Ok(Self { dim, generator })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            generator: vec![0.0; generator_len(dim)],
        }
    }

    pub fn generator_matrix(&self) -> Result<DMatrix<f64>> {
        antisym_from_upper(self.dim, &self.generator)
    }
}

pub fn realize_orthogonal(p: &OrthogonalParam) -> Result<DMatrix<f64>> {
    matrix_exp(&p.generator_matrix()?)
}

/// `Q diag(exp(log_eigs)) Qᵀ`; positivity holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdParam {
    pub orth: OrthogonalParam,
    pub log_eigs: Vec<f64>,
}

impl SpdParam {
    pub fn new(orth: OrthogonalParam, log_eigs: Vec<f64>) -> Result<Self> {
        check_dim("SPD log-eigenvalues", orth.dim, log_eigs.len())?;
        Ok(Self { orth, log_eigs })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            orth: OrthogonalParam::identity(dim),
            log_eigs: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.orth.dim
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.log_eigs.iter().map(|l| l.exp()).collect()
    }

    /// Flat layout: generator entries followed by log-eigenvalues.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.orth.generator.clone();
        v.extend_from_slice(&self.log_eigs);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        let g = generator_len(dim);
        check_dim("SPD flat parameters", g + dim, flat.len())?;
        Self::new(OrthogonalParam::new(dim, flat[..g].to_vec())?, flat[g..].to_vec())
    }
}

pub fn realize_spd(p: &SpdParam) -> Result<DMatrix<f64>> {
    let q = realize_orthogonal(&p.orth)?;
    let lambda = DVector::from_iterator(p.dim(), p.log_eigs.iter().map(|l| l.exp()));
    let m = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    Ok(symmetrize(&m))
}

/// `Q blockdiag([[0, λᵢ], [-λᵢ, 0]]) Qᵀ`. Odd dimensions carry a trailing
/// zero row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct AntisymParam {
    pub orth: OrthogonalParam,
    pub block_eigs: Vec<f64>,
}

impl AntisymParam {
    pub fn new(orth: OrthogonalParam, block_eigs: Vec<f64>) -> Result<Self> {
        check_dim("antisymmetric block eigenvalues", orth.dim / 2, block_eigs.len())?;
        Ok(Self { orth, block_eigs })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            orth: OrthogonalParam::identity(dim),
            block_eigs: vec![0.0; dim / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.orth.dim
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.orth.generator.clone();
        v.extend_from_slice(&self.block_eigs);
        v
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        let g = generator_len(dim);
        check_dim("antisymmetric flat parameters", g + dim / 2, flat.len())?;
        Self::new(OrthogonalParam::new(dim, flat[..g].to_vec())?, flat[g..].to_vec())
    }

    fn canonical(&self, block: impl Fn(f64) -> [[f64; 2]; 2], tail: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut c = DMatrix::zeros(n, n);
        for (k, &l) in self.block_eigs.iter().enumerate() {
            let b = block(l);
            let i = 2 * k;
            c[(i, i)] = b[0][0];
            c[(i, i + 1)] = b[0][1];
            c[(i + 1, i)] = b[1][0];
            c[(i + 1, i + 1)] = b[1][1];
        }
        if n % 2 == 1 {
            c[(n - 1, n - 1)] = tail;
        }
        c
    }

    /// `(I + ω)⁻¹` from the block form: each 2×2 block inverts to
    /// `[[1, -λ], [λ, 1]] / (1 + λ²)`.
    pub fn shift_inverse(&self) -> Result<DMatrix<f64>> {
        let q = realize_orthogonal(&self.orth)?;
        let c = self.canonical(
            |l| {
                let s = 1.0 / (1.0 + l * l);
                [[s, -l * s], [l * s, s]]
            },
            1.0,
        );
        Ok(&q * c * q.transpose())
    }
}

pub fn realize_antisym(p: &AntisymParam) -> Result<DMatrix<f64>> {
    let q = realize_orthogonal(&p.orth)?;
    let c = p.canonical(|l| [[0.0, l], [-l, 0.0]], 0.0);
    Ok(antisymmetrize(&(&q * c * q.transpose())))
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0))
}

fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}

fn sqrt_with_floor(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    check_dim("matrix square root (square)", m.nrows(), m.ncols())?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix square root input"));
    }
    let defect = symmetry_defect(m);
    if defect > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric(defect));
    }
    if is_diagonal(m) {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            let v = m[(i, i)];
            if v <= floor {
                return Err(Error::NotPositiveDefinite { min_eigenvalue: v });
            }
            out[(i, i)] = v.max(0.0).sqrt();
        }
        return Ok(out);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.min();
    if min <= floor {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok(symmetrize(&s))
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(r_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sqrt_with_floor(r_inv, 0.0)
}

/// Symmetric square root of a positive semi-definite matrix. Eigenvalues down
/// to `-1e-12·max(1, ‖m‖)` are treated as zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let floor = -1e-12 * max_abs(m).max(1.0);
    sqrt_with_floor(m, floor - f64::MIN_POSITIVE)
}

/// `(I + B)⁻¹` for antisymmetric `B`.
///
/// Uses `(I + B)⁻¹ = (I - B)(I + BᵀB)⁻¹`, the basis-free form of the 2×2
/// block inversion; `I + BᵀB` is SPD with eigenvalues `1 + λᵢ²`.
pub fn antisym_shift_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("antisym_shift_inverse (square)", b.nrows(), b.ncols())?;
    let n = b.nrows();
    let defect = max_abs(&(b + b.transpose()));
    if defect > SYMMETRY_TOL * max_abs(b).max(1.0) {
        return Err(Error::Invalid(format!(
            "matrix is not antisymmetric (defect {defect:e})"
        )));
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let gram = &ident + b.transpose() * b;
    let eig = SymmetricEigen::new(symmetrize(&gram));
    let inv_eigs = eig.eigenvalues.map(|v| 1.0 / v);
    let gram_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_eigs) * eig.eigenvectors.transpose();
    Ok((ident - b) * gram_inv)
}

/// Diagonal blocks `A = diag(a)`, `B = diag(b)` of the degenerate
/// (phase-space) construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedBlocks {
    pub a_eigs: Vec<f64>,
    pub b_eigs: Vec<f64>,
}

impl DampedBlocks {
    pub fn new(a_eigs: Vec<f64>, b_eigs: Vec<f64>) -> Result<Self> {
        check_dim("damped blocks", a_eigs.len(), b_eigs.len())?;
        if a_eigs.is_empty() {
            return Err(Error::Invalid("damped blocks need d >= 1".into()));
        }
        if let Some(v) = a_eigs
            .iter()
            .chain(b_eigs.iter())
            .find(|v| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Invalid(format!(
                "damped block eigenvalues must be strictly positive, got {v}"
            )));
        }
        Ok(Self { a_eigs, b_eigs })
    }

    /// Half of the phase-space dimension.
    pub fn half_dim(&self) -> usize {
        self.a_eigs.len()
    }
}

/// `(ω, R⁻¹) = ([[0, A], [-A, 0]], [[0, 0], [0, B]])`.
pub fn assemble_damped(blocks: &DampedBlocks) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let blocks = DampedBlocks::new(blocks.a_eigs.clone(), blocks.b_eigs.clone())?;
    let d = blocks.half_dim();
    let mut omega = DMatrix::zeros(2 * d, 2 * d);
    let mut r_inv = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        omega[(i, d + i)] = blocks.a_eigs[i];
        omega[(d + i, i)] = -blocks.a_eigs[i];
        r_inv[(d + i, d + i)] = blocks.b_eigs[i];
    }
    Ok((omega, r_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, FRAC_PI_2};

    fn series_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
        // Taylor series with squaring, independent of the Padé path.
        let n = m.nrows();
        let s = 10;
        let a = m / 2f64.powi(s);
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..40 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    fn lcg_matrix(n: usize, seed: u64, scale: f64) -> DMatrix<f64> {
        let mut state = seed;
        DMatrix::from_fn(n, n, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        })
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = matrix_exp(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn exp_planar_rotation() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, FRAC_PI_2, -FRAC_PI_2, 0.0]);
        let e = matrix_exp(&m).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(max_abs(&(e - want)) < 1e-14);
    }

    #[test]
    fn exp_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let e = matrix_exp(&m).unwrap();
        assert!((e[(0, 0)] - E).abs() < 1e-14 * E);
        assert!((e[(1, 1)] - E * E).abs() < 1e-14 * E * E);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_matches_series_oracle() {
        for (k, scale) in [0.001, 0.1, 0.5, 1.0, 3.0, 10.0].iter().enumerate() {
            let m = lcg_matrix(4, 17 + k as u64, *scale / 2.0);
            let a = matrix_exp(&m).unwrap();
            let b = series_exp(&m);
            let rel = max_abs(&(&a - &b)) / max_abs(&b);
            assert!(rel < 1e-12, "scale {scale}: rel {rel:e}");
        }
    }

    #[test]
    fn exp_rejects_bad_input() {
        assert!(matches!(
            matrix_exp(&DMatrix::zeros(2, 3)),
            Err(Error::Dimension { .. })
        ));
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(matrix_exp(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn orthogonal_examples() {
        let q = realize_orthogonal(&OrthogonalParam::new(2, vec![0.0]).unwrap()).unwrap();
        assert_eq!(q, DMatrix::identity(2, 2));
        let q = realize_orthogonal(&OrthogonalParam::new(2, vec![FRAC_PI_2]).unwrap()).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(max_abs(&(q - want)) < 1e-14);
        assert!(matches!(
            OrthogonalParam::new(3, vec![0.0; 2]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn spd_examples() {
        let p = SpdParam::new(OrthogonalParam::new(3, vec![0.3, -1.2, 0.7]).unwrap(), vec![0.0; 3]).unwrap();
        assert!(max_abs(&(realize_spd(&p).unwrap() - DMatrix::identity(3, 3))) < 1e-14);
        let p = SpdParam::new(OrthogonalParam::identity(2), vec![2f64.ln(), 3f64.ln()]).unwrap();
        let r = realize_spd(&p).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14 && (r[(1, 1)] - 3.0).abs() < 1e-14);
        assert_eq!(r[(0, 1)], 0.0);
    }

    #[test]
    fn antisym_examples() {
        let z = realize_antisym(&AntisymParam::zero(4)).unwrap();
        assert_eq!(z, DMatrix::zeros(4, 4));
        let p = AntisymParam::new(OrthogonalParam::identity(2), vec![1.0]).unwrap();
        let w = realize_antisym(&p).unwrap();
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let odd = AntisymParam::new(OrthogonalParam::new(3, vec![0.2, 0.1, -0.4]).unwrap(), vec![1.5]).unwrap();
        let w = realize_antisym(&odd).unwrap();
        assert_eq!(max_abs(&(&w + w.transpose())), 0.0);
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(spd_sqrt(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let s = spd_sqrt(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_sqrt(&bad), Err(Error::NotPositiveDefinite { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(spd_sqrt(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn psd_sqrt_allows_zero_eigenvalues() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 2.0]));
        let s = psd_sqrt(&m).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(s[(1, 1)], 2f64.sqrt());
        assert!(spd_sqrt(&m).is_err());
    }

    #[test]
    fn shift_inverse_examples() {
        assert_eq!(
            antisym_shift_inverse(&DMatrix::zeros(3, 3)).unwrap(),
            DMatrix::identity(3, 3)
        );
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let got = antisym_shift_inverse(&b).unwrap();
        // Direct 2×2 inversion of [[1, 1], [-1, 1]]: adjugate over det 2.
        let want = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 0.5, 0.5]);
        assert!(max_abs(&(got - want)) < 1e-15);
        let not_antisym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(antisym_shift_inverse(&not_antisym).is_err());
    }

    #[test]
    fn shift_inverse_routes_agree() {
        let p = AntisymParam::new(
            OrthogonalParam::new(4, vec![0.3, -0.2, 0.9, 0.4, -1.1, 0.25]).unwrap(),
            vec![0.7, -2.5],
        )
        .unwrap();
        let b = realize_antisym(&p).unwrap();
        let spectral = antisym_shift_inverse(&b).unwrap();
        let blocks = p.shift_inverse().unwrap();
        assert!(max_abs(&(&spectral - &blocks)) < 1e-12);
        let ident = DMatrix::<f64>::identity(4, 4);
        assert!(max_abs(&((&ident + &b) * &spectral - &ident)) < 1e-10);
    }

    #[test]
    fn damped_assembly() {
        let (w, r) = assemble_damped(&DampedBlocks::new(vec![1.0], vec![2.0]).unwrap()).unwrap();
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]));
        assert!(DampedBlocks::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(DampedBlocks::new(vec![1.0], vec![-1.0]).is_err());
    }

    #[test]
    fn damped_blocks_with_cld_sign_convention() {
        // The CLD decomposition with M = 1, Γ = 1 writes ω = [[0, -I], [I, 0]]
        // and R⁻¹ = [[0, 0], [0, 2Γ]]; under the [[0, A], [-A, 0]] layout
        // that corresponds to A = -I, i.e. the transpose of the A = I build.
        let (w, r) = assemble_damped(&DampedBlocks::new(vec![1.0], vec![2.0]).unwrap()).unwrap();
        let cld_omega = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(w.transpose(), cld_omega);
        assert_eq!(r[(1, 1)], 2.0);
    }

    #[test]
    fn damped_zero_spectrum() {
        let blocks = DampedBlocks::new(vec![0.5, 1.2, 2.0], vec![0.3, 4.0, 1.7]).unwrap();
        let (w, r) = assemble_damped(&blocks).unwrap();
        assert_eq!(max_abs(&(&w + w.transpose())), 0.0);
        let eig = SymmetricEigen::new(r.clone());
        let zeros = eig.eigenvalues.iter().filter(|v| v.abs() < 1e-12).count();
        assert_eq!(zeros, 3);
        assert!(eig.eigenvalues.iter().all(|v| *v > -1e-12));
        for i in 0..3 {
            for j in 0..6 {
                assert_eq!(r[(i, j)].to_bits(), 0);
                assert_eq!(w[(i, i)].to_bits(), 0);
            }
        }
    }
}
