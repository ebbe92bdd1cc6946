//! Maximum mean discrepancy between two feature sets, as graph ops.

use crate::numerics::kernels::gemm;
use crate::numerics::{CustomOp, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    /// `(u . v + offset)^degree`
    Poly { degree: u32, offset: f64 },
    /// `exp(-|u - v|^2 / (2 bandwidth^2))`
    Gaussian { bandwidth: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), NumericsError> {
        match *self {
            KernelSpec::Poly { degree, offset } if degree < 1 || !offset.is_finite() => {
                Err(NumericsError::Precondition(format!("poly kernel needs degree >= 1, got {degree}")))
            }
            KernelSpec::Gaussian { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(NumericsError::Precondition(format!("gaussian bandwidth must be positive, got {bandwidth}")))
            }
            _ => Ok(()),
        }
    }

    /// Kernel value from the inner product and the two squared norms.
    #[inline]
    fn eval(&self, dot: f64, nx: f64, ny: f64) -> f64 {
        match *self {
            KernelSpec::Linear => dot,
            KernelSpec::Poly { degree, offset } => (dot + offset).powi(degree as i32),
            KernelSpec::Gaussian { bandwidth } => {
                let d2 = (nx + ny - 2.0 * dot).max(0.0);
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }

    /// `(a, b)` with `dk(x, y)/dx = a * y + b * x`.
    #[inline]
    fn grad_coeffs(&self, dot: f64, k: f64) -> (f64, f64) {
        match *self {
            KernelSpec::Linear => (1.0, 0.0),
            KernelSpec::Poly { degree, offset } => {
                let d = degree as f64;
                (d * (dot + offset).powi(degree as i32 - 1), 0.0)
            }
            KernelSpec::Gaussian { bandwidth } => {
                let s2 = bandwidth * bandwidth;
                (k / s2, -k / s2)
            }
        }
    }
}

fn dims(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize), NumericsError> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(NumericsError::Shape { op: "mmd", detail: format!("{sx:?} vs {sy:?}") });
    }
    if sx[0] == 0 || sy[0] == 0 {
        return Err(NumericsError::Precondition("mmd needs at least one row on each side".into()));
    }
    Ok((sx[0], sy[0], sx[1]))
}

fn sq_norms(x: &Tensor) -> Vec<f64> {
    let f = x.shape()[1];
    x.data().chunks(f).map(|r| r.iter().map(|v| v * v).sum()).collect()
}

/// Inner products `x y^T` (`n x m`).
fn dots(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let (n, m, f) = (x.shape()[0], y.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * m];
    gemm(n, f, m, x.data(), false, y.data(), true, &mut out, false);
    out
}

/// Mean kernel value over all `|x| * |y|` pairs.
fn mean_kernel(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> f64 {
    let (nx, ny) = (sq_norms(x), sq_norms(y));
    let d = dots(x, y);
    let m = y.shape()[0];
    let mut s = 0.0;
    for (i, row) in d.chunks(m).enumerate() {
        for (j, &dot) in row.iter().enumerate() {
            s += kernel.eval(dot, nx[i], ny[j]);
        }
    }
    s / (x.shape()[0] * m) as f64
}

/// `sum_j dk(x_i, y_j)/dx_i` for every row of `x`, scaled by `scale` and
/// added into `out`.
fn kernel_grad_into(x: &Tensor, y: &Tensor, kernel: &KernelSpec, scale: f64, out: &mut [f64]) {
    let (n, m, f) = (x.shape()[0], y.shape()[0], x.shape()[1]);
    let (nx, ny) = (sq_norms(x), sq_norms(y));
    let d = dots(x, y);
    let mut a = vec![0.0; n * m];
    let mut bsum = vec![0.0; n];
    for i in 0..n {
        for j in 0..m {
            let dot = d[i * m + j];
            let k = kernel.eval(dot, nx[i], ny[j]);
            let (ca, cb) = kernel.grad_coeffs(dot, k);
            a[i * m + j] = scale * ca;
            bsum[i] += scale * cb;
        }
    }
    gemm(n, m, f, &a, false, y.data(), false, out, true);
    for (i, row) in out.chunks_mut(f).enumerate() {
        for (o, xv) in row.iter_mut().zip(x.row(i)) {
            *o += bsum[i] * xv;
        }
    }
}

/// Biased MMD estimate `K_xx + K_yy - 2 K_xy` without building a graph.
pub fn mmd_value(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64, NumericsError> {
    kernel.validate()?;
    dims(x, y)?;
    let v = mean_kernel(x, x, kernel) + mean_kernel(y, y, kernel) - 2.0 * mean_kernel(x, y, kernel);
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "mmd_kernel" });
    }
    Ok(v)
}

/// Squared distance between the row means of `x` and `y`.
pub fn mmd_linear_value(x: &Tensor, y: &Tensor) -> Result<f64, NumericsError> {
    let (n, m, f) = dims(x, y)?;
    let mut diff = vec![0.0; f];
    for r in x.data().chunks(f) {
        diff.iter_mut().zip(r).for_each(|(d, v)| *d += v / n as f64);
    }
    for r in y.data().chunks(f) {
        diff.iter_mut().zip(r).for_each(|(d, v)| *d -= v / m as f64);
    }
    Ok(diff.iter().map(|d| d * d).sum())
}

struct KernelMmd {
    kernel: KernelSpec,
}

impl CustomOp for KernelMmd {
    fn name(&self) -> &'static str {
        "mmd_kernel"
    }

    fn backward(&self, inputs: &[&Tensor], out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (n, m) = (x.shape()[0] as f64, y.shape()[0] as f64);
        let g = out_grad[0];
        let side = |a: &Tensor, b: &Tensor, na: f64, nb: f64| {
            let mut out = vec![0.0; a.len()];
            kernel_grad_into(a, a, &self.kernel, g * 2.0 / (na * na), &mut out);
            kernel_grad_into(a, b, &self.kernel, -g * 2.0 / (na * nb), &mut out);
            out
        };
        vec![needs[0].then(|| side(x, y, n, m)), needs[1].then(|| side(y, x, m, n))]
    }
}

struct LinearMmd;

impl CustomOp for LinearMmd {
    fn name(&self) -> &'static str {
        "mmd_linear"
    }

    fn backward(&self, inputs: &[&Tensor], out_grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let (n, m, f) = (x.shape()[0], y.shape()[0], x.shape()[1]);
        let mut diff = vec![0.0; f];
        for r in x.data().chunks(f) {
            diff.iter_mut().zip(r).for_each(|(d, v)| *d += v / n as f64);
        }
        for r in y.data().chunks(f) {
            diff.iter_mut().zip(r).for_each(|(d, v)| *d -= v / m as f64);
        }
        let spread = |rows: usize, sign: f64| {
            let row: Vec<f64> = diff.iter().map(|d| sign * 2.0 * out_grad[0] * d / rows as f64).collect();
            row.repeat(rows)
        };
        vec![needs[0].then(|| spread(n, 1.0)), needs[1].then(|| spread(m, -1.0))]
    }
}

/// Kernel MMD node between feature rows `x` (`n x f`) and `y` (`m x f`).
pub fn mmd_kernel(g: &mut Graph, x: Var, y: Var, kernel: KernelSpec) -> Result<Var, NumericsError> {
    let v = mmd_value(g.value(x), g.value(y), &kernel)?;
    g.custom(Box::new(KernelMmd { kernel }), &[x, y], Tensor::scalar(v))
}

/// Mean-embedding distance node `|mean(x) - mean(y)|^2`.
pub fn mmd_linear(g: &mut Graph, x: Var, y: Var) -> Result<Var, NumericsError> {
    let v = mmd_linear_value(g.value(x), g.value(y))?;
    g.custom(Box::new(LinearMmd), &[x, y], Tensor::scalar(v))
}

/// Median of all pairwise Euclidean distances between rows of `x`.
pub fn median_pairwise_distance(x: &Tensor) -> Option<f64> {
    let n = x.shape()[0];
    if n < 2 {
        return None;
    }
    let nx = sq_norms(x);
    let d = dots(x, x);
    let mut dist = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dist.push((nx[i] + nx[j] - 2.0 * d[i * n + j]).max(0.0).sqrt());
        }
    }
    Some(crate::select::median(&dist))
}
