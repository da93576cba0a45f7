//! Grid-sampled kernels on `[0, T]²` acting as Hilbert–Schmidt operators.
//!
//! A kernel `ψ` is stored as the `N × N` matrix of samples `ψ(t_i, t_j)` at the
//! left endpoints `t_0..t_{N-1}`; entry `(i, j)` stands for the cell
//! `[t_i, t_{i+1}) × [t_j, t_{j+1})`. Every integral uses the left-endpoint
//! rule, so the operator `φ ↦ ∫ ψ(·, s) φ(s) ds` is the matrix `step · values`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::timegrid::TimeGrid;

/// Eigenvalues of an operator in the admissible class must stay below `1 - SPECTRAL_MARGIN`.
pub const SPECTRAL_MARGIN: f64 = 1e-6;

/// Relative tolerance of the symmetry check.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    grid: TimeGrid,
    values: DMatrix<f64>,
    symmetric: bool,
    volterra: bool,
}

impl Kernel {
    /// Unflagged kernel from an `N × N` sample matrix.
    pub fn new(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let n = grid.n_steps();
        if values.nrows() != n || values.ncols() != n {
            return Err(Error::Shape(format!(
                "kernel on a grid with N={n} needs {n}x{n} values, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Kernel {
            grid,
            values,
            symmetric: false,
            volterra: false,
        })
    }

    /// Kernel flagged symmetric; fails if the samples are not symmetric within tolerance.
    pub fn symmetric(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let mut k = Self::new(grid, values)?;
        let (asym, tol) = (k.max_asymmetry(), k.symmetry_tolerance());
        if asym > tol {
            return Err(Error::NotSymmetric {
                max_asymmetry: asym,
                tolerance: tol,
            });
        }
        k.symmetric = true;
        Ok(k)
    }

    /// Kernel flagged Volterra (zero strictly above the diagonal).
    pub fn volterra(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let mut k = Self::new(grid, values)?;
        let n = grid.n_steps();
        for j in 0..n {
            for i in 0..j {
                if k.values[(i, j)] != 0.0 {
                    return Err(Error::Shape(format!(
                        "Volterra kernel has nonzero entry above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        k.volterra = true;
        Ok(k)
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.n_steps();
        Kernel {
            grid,
            values: DMatrix::zeros(n, n),
            symmetric: true,
            volterra: true,
        }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        let n = grid.n_steps();
        Kernel {
            grid,
            values: DMatrix::from_element(n, n, value),
            symmetric: true,
            volterra: value == 0.0,
        }
    }

    /// Samples `psi(t_i, t_j)`.
    pub fn from_fn(grid: TimeGrid, psi: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n_steps();
        let values = DMatrix::from_fn(n, n, |i, j| psi(grid.node(i), grid.node(j)));
        Kernel {
            grid,
            values,
            symmetric: false,
            volterra: false,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_volterra(&self) -> bool {
        self.volterra
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in j + 1..n {
                worst = worst.max((self.values[(i, j)] - self.values[(j, i)]).abs());
            }
        }
        worst
    }

    fn symmetry_tolerance(&self) -> f64 {
        SYMMETRY_TOLERANCE * self.max_abs()
    }

    /// The matrix of the discretized operator, `step · values`.
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        &self.values * self.grid.step()
    }

    /// `(Kφ)(t_i) = step · Σ_k K(i, k) φ(k)`.
    pub fn apply(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.n() {
            return Err(Error::Shape(format!(
                "grid function of length {} applied to a kernel with N={}",
                phi.len(),
                self.n()
            )));
        }
        let v = &self.values * DVector::from_column_slice(phi) * self.grid.step();
        Ok(v.as_slice().to_vec())
    }

    /// Operator product: `(K1 ∘ K2)(t, s) = ∫ K1(t, u) K2(u, s) du`.
    pub fn compose(&self, other: &Kernel) -> Result<Kernel> {
        self.grid.check_same(&other.grid)?;
        let values = (&self.values * &other.values) * self.grid.step();
        Kernel::new(self.grid, values)
    }

    /// `step · sqrt(Σ values²)`, the `L²([0,T]²)` norm of the piecewise-constant kernel.
    pub fn l2_norm(&self) -> f64 {
        self.grid.step() * self.values.norm()
    }

    fn require_symmetric(&self) -> Result<()> {
        if self.symmetric {
            return Ok(());
        }
        let (asym, tol) = (self.max_asymmetry(), self.symmetry_tolerance());
        if asym > tol {
            return Err(Error::NotSymmetric {
                max_asymmetry: asym,
                tolerance: tol,
            });
        }
        Ok(())
    }

    /// Eigenvalues of the induced operator, sorted in descending order.
    pub fn eigenvalues_sym(&self) -> Result<Vec<f64>> {
        self.require_symmetric()?;
        let mut op = self.operator_matrix();
        symmetrize(&mut op);
        let mut eigs: Vec<f64> = op.symmetric_eigenvalues().iter().copied().collect();
        eigs.sort_by(|a, b| b.total_cmp(a));
        Ok(eigs)
    }

    /// Checks that the operator spectrum lies below `1 - SPECTRAL_MARGIN`.
    pub fn check_spectrum(&self, context: &str) -> Result<()> {
        self.require_symmetric()?;
        let mut op = self.operator_matrix();
        symmetrize(&mut op);
        check_spectrum_below_one(op, context)
    }

    /// Solves the windowed second-kind equation
    /// `x(i) - step · Σ_{k ∈ [lo, hi)} K(i, k) x(k) = rhs(i)`, `i ∈ [lo, hi)`.
    ///
    /// `rhs` holds the `hi - lo` window values. The window block must be symmetric
    /// with operator spectrum below one; a dense Cholesky factorization of
    /// `I - step · K_window` is used, followed by one step of iterative refinement.
    pub fn solve_shifted(&self, rhs: &[f64], lo: usize, hi: usize) -> Result<Vec<f64>> {
        self.solve_shifted_ordered(rhs, lo, hi, false)
    }

    /// Same system as [`Kernel::solve_shifted`], eliminated in reversed index order.
    pub fn solve_shifted_reversed(&self, rhs: &[f64], lo: usize, hi: usize) -> Result<Vec<f64>> {
        self.solve_shifted_ordered(rhs, lo, hi, true)
    }

    fn solve_shifted_ordered(&self, rhs: &[f64], lo: usize, hi: usize, reversed: bool) -> Result<Vec<f64>> {
        if lo > hi || hi > self.n() {
            return Err(Error::Shape(format!(
                "window [{lo}, {hi}) is not inside [0, {})",
                self.n()
            )));
        }
        let len = hi - lo;
        if rhs.len() != len {
            return Err(Error::Shape(format!(
                "window of length {len} with right-hand side of length {}",
                rhs.len()
            )));
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        let h = self.grid.step();
        let idx = |a: usize| if reversed { hi - 1 - a } else { lo + a };
        let block = DMatrix::from_fn(len, len, |a, b| self.values[(idx(a), idx(b))]);
        let asym = max_asymmetry(&block);
        if asym > SYMMETRY_TOLERANCE * block.amax() {
            return Err(Error::NotSymmetric {
                max_asymmetry: asym,
                tolerance: SYMMETRY_TOLERANCE * block.amax(),
            });
        }
        let mut op = block * h;
        symmetrize(&mut op);
        let system = DMatrix::identity(len, len) - &op;
        let margin = &system - DMatrix::identity(len, len) * SPECTRAL_MARGIN;
        if margin.cholesky().is_none() {
            return Err(spectrum_violation(op, &format!("Fredholm window [{lo}, {hi})")));
        }
        let chol = system
            .clone()
            .cholesky()
            .expect("shifted system is positive definite after the margin check");
        let b = DVector::from_fn(len, |a, _| rhs[idx(a) - lo]);
        let mut x = chol.solve(&b);
        let r = &b - &system * &x;
        x += chol.solve(&r);
        let mut out = vec![0.0; len];
        for a in 0..len {
            out[idx(a) - lo] = x[a];
        }
        Ok(out)
    }

    /// Residual `max_i |x(i) - step Σ K(i,k) x(k) - rhs(i)|` of a windowed solve.
    pub fn shifted_residual(&self, x: &[f64], rhs: &[f64], lo: usize) -> f64 {
        let h = self.grid.step();
        let len = x.len();
        (0..len)
            .map(|a| {
                let row: f64 = (0..len).map(|b| self.values[(lo + a, lo + b)] * x[b]).sum();
                (x[a] - h * row - rhs[a]).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.n() {
            w.write_record(self.values.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `N` rows of `N` comma-separated values; row index is the first argument.
    pub fn read_csv<R: Read>(reader: R, grid: TimeGrid) -> Result<Self> {
        let rows = read_csv_rows(reader)?;
        let n = grid.n_steps();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "kernel CSV must be {n}x{n}, got {} rows",
                rows.len()
            )));
        }
        Kernel::new(grid, DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

/// Reads a grid function stored as one row or one column of numbers.
pub fn read_vector_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let rows = read_csv_rows(reader)?;
    match rows.as_slice() {
        [single] => Ok(single.clone()),
        _ if rows.iter().all(|r| r.len() == 1) => Ok(rows.into_iter().map(|r| r[0]).collect()),
        _ => Err(Error::Shape(format!(
            "vector CSV must be a single row or column, got {} rows",
            rows.len()
        ))),
    }
}

/// Writes a grid function as one column.
pub fn write_vector_csv<W: Write>(values: &[f64], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for v in values {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_csv_rows<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Shape(format!("bad number {f:?} in CSV: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in j + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn spectrum_violation(op: DMatrix<f64>, context: &str) -> Error {
    let top = op
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Error::SpectrumViolation {
        context: context.to_string(),
        eigenvalue: top,
        bound: 1.0 - SPECTRAL_MARGIN,
    }
}

/// `λ_max(op) < 1 - SPECTRAL_MARGIN`, certified by a Cholesky factorization of
/// `(1 - SPECTRAL_MARGIN) I - op`. `op` must be symmetric.
pub(crate) fn check_spectrum_below_one(op: DMatrix<f64>, context: &str) -> Result<()> {
    let n = op.nrows();
    let shifted = DMatrix::identity(n, n) * (1.0 - SPECTRAL_MARGIN) - &op;
    if shifted.cholesky().is_some() {
        Ok(())
    } else {
        Err(spectrum_violation(op, context))
    }
}

/// Cholesky factor of `I - step · K[W, W]` for a window `W = [lo, hi)` that
/// slides monotonically to the right.
///
/// Appending an index adds one row to the factor; dropping the leading index is
/// a rank-one update of the trailing factor. Both cost `O(len²)`, against
/// `O(len³)` for refactoring each window from scratch. Rows are stored in a
/// ring buffer indexed by global node index modulo the capacity.
pub struct WindowFactor<'a> {
    kernel: &'a Kernel,
    step: f64,
    cap: usize,
    lo: usize,
    hi: usize,
    factor: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> WindowFactor<'a> {
    /// `capacity` is the largest window length that will be requested.
    pub fn new(kernel: &'a Kernel, capacity: usize) -> Self {
        let cap = capacity.max(1);
        WindowFactor {
            kernel,
            step: kernel.grid.step(),
            cap,
            lo: 0,
            hi: 0,
            factor: vec![0.0; cap * cap],
            scratch: Vec::with_capacity(cap),
        }
    }

    pub fn window(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    #[inline]
    fn at(&self, a: usize, b: usize) -> usize {
        (a % self.cap) * self.cap + (b % self.cap)
    }

    /// Dot product of row `row` of the factor over columns `lo..lo + v.len()` with `v`.
    #[inline]
    fn row_dot(&self, row: usize, v: &[f64]) -> f64 {
        let base = (row % self.cap) * self.cap;
        let p0 = self.lo % self.cap;
        let first = (self.cap - p0).min(v.len());
        let head = &self.factor[base + p0..base + p0 + first];
        let mut acc: f64 = head.iter().zip(&v[..first]).map(|(a, b)| a * b).sum();
        if first < v.len() {
            let rest = v.len() - first;
            let tail = &self.factor[base..base + rest];
            acc += tail.iter().zip(&v[first..]).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    fn system_entry(&self, a: usize, b: usize) -> f64 {
        let delta = if a == b { 1.0 } else { 0.0 };
        delta - self.step * self.kernel.values[(a, b)]
    }

    fn reset(&mut self, at: usize) {
        self.lo = at;
        self.hi = at;
    }

    fn push_back(&mut self) -> Result<()> {
        let n = self.hi;
        let len = n - self.lo;
        debug_assert!(len < self.cap);
        let mut y = std::mem::take(&mut self.scratch);
        y.clear();
        for k in 0..len {
            let gk = self.lo + k;
            let b = self.system_entry(n, gk);
            let s = self.row_dot(gk, &y[..k]);
            y.push((b - s) / self.factor[self.at(gk, gk)]);
        }
        let d = self.system_entry(n, n) - y.iter().map(|v| v * v).sum::<f64>();
        if !(d > SPECTRAL_MARGIN * 1e-3) {
            self.scratch = y;
            return Err(Error::SpectrumViolation {
                context: format!("Fredholm window [{}, {}]", self.lo, n),
                eigenvalue: f64::NAN,
                bound: 1.0 - SPECTRAL_MARGIN,
            });
        }
        for (k, v) in y.iter().enumerate() {
            let idx = self.at(n, self.lo + k);
            self.factor[idx] = *v;
        }
        let idx = self.at(n, n);
        self.factor[idx] = d.sqrt();
        self.scratch = y;
        self.hi += 1;
        Ok(())
    }

    fn pop_front(&mut self) {
        let lo = self.lo;
        let hi = self.hi;
        let mut x = std::mem::take(&mut self.scratch);
        x.clear();
        x.extend((lo + 1..hi).map(|i| self.factor[self.at(i, lo)]));
        for k in 0..x.len() {
            let gk = lo + 1 + k;
            let kk = self.at(gk, gk);
            let lkk = self.factor[kk];
            let r = lkk.hypot(x[k]);
            let c = r / lkk;
            let s = x[k] / lkk;
            self.factor[kk] = r;
            for i in k + 1..x.len() {
                let ik = self.at(lo + 1 + i, gk);
                let lik = (self.factor[ik] + s * x[i]) / c;
                self.factor[ik] = lik;
                x[i] = c * x[i] - s * lik;
            }
        }
        self.scratch = x;
        self.lo += 1;
    }

    /// Moves the window to `[lo, hi)`. Windows must not move left; a window
    /// that shrinks on the right is refactored from scratch.
    pub fn advance_to(&mut self, lo: usize, hi: usize) -> Result<()> {
        if lo > hi || hi > self.kernel.n() || hi - lo > self.cap {
            return Err(Error::Shape(format!(
                "window [{lo}, {hi}) exceeds capacity {} or grid",
                self.cap
            )));
        }
        if lo < self.lo || hi < self.hi || lo >= self.hi {
            self.reset(lo);
        }
        while self.lo < lo {
            self.pop_front();
        }
        while self.hi < hi {
            self.push_back()?;
        }
        Ok(())
    }

    /// Solves `(I - step K_W) x = rhs` on the current window.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let len = self.hi - self.lo;
        assert_eq!(rhs.len(), len, "right-hand side must match the window");
        let mut y = Vec::with_capacity(len);
        for k in 0..len {
            let gk = self.lo + k;
            let s = self.row_dot(gk, &y[..k]);
            y.push((rhs[k] - s) / self.factor[self.at(gk, gk)]);
        }
        for k in (0..len).rev() {
            let gk = self.lo + k;
            let xk = y[k] / self.factor[self.at(gk, gk)];
            y[k] = xk;
            let base = (gk % self.cap) * self.cap;
            for (m, ym) in y.iter_mut().enumerate().take(k) {
                *ym -= self.factor[base + (self.lo + m) % self.cap] * xk;
            }
        }
        y
    }
}
