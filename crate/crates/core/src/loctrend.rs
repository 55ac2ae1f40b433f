//! Sliding-window trend extraction against a fixed bank of kernel bases.
//!
//! Each window is mean-centered; every centered row is scored against the
//! bases by cosine similarity, the scores are softmax-normalized, and the
//! weighted basis plus the window mean is that row's local trend. Local
//! trends are averaged over overlapping windows; the seasonal part is the
//! residual.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

/// Unit-norm basis vectors `[K×d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub bases: Tensor,
    pub frozen: bool,
    /// Share of centered variance along each basis; empty for the axis
    /// fallback.
    pub explained_variance_ratio: Vec<f64>,
}

impl KernelBank {
    /// The first `k` coordinate axes of `R^d`.
    pub fn axis(k: usize, d: usize) -> Result<Self> {
        check_kd(k, d)?;
        let mut bases = Tensor::zeros(&[k, d]);
        for i in 0..k {
            bases.set2(i, i, 1.0);
        }
        Ok(Self {
            bases,
            frozen: true,
            explained_variance_ratio: Vec::new(),
        })
    }

    pub fn from_bases(bases: Tensor) -> Result<Self> {
        let (k, d) = bases.dims2()?;
        check_kd(k, d)?;
        for i in 0..k {
            let n = norm(bases.row(i));
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::invalid(format!("kernel basis {i} has norm {n}")));
            }
        }
        Ok(Self {
            bases,
            frozen: true,
            explained_variance_ratio: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.bases.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.bases.shape()[1]
    }
}

fn check_kd(k: usize, d: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("kernel bank needs at least one basis"));
    }
    if k > d {
        return Err(Error::invalid(format!("{k} bases requested in dimension {d}")));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top-`k` principal directions of the rows of `windows` `[n×w×d]`, each
/// window centered on its own mean first.
pub fn init_kernels(windows: &Tensor, k: usize) -> Result<KernelBank> {
    let [n, w, d] = windows.shape()[..] else {
        return Err(Error::shape("init_kernels", format!("expected [n×w×d], got {:?}", windows.shape())));
    };
    check_kd(k, d)?;
    if n < k {
        return Err(Error::invalid(format!("{n} windows cannot determine {k} bases")));
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for win in windows.data().chunks(w * d) {
        let mut mu = vec![0.0; d];
        for row in win.chunks(d) {
            for (m, x) in mu.iter_mut().zip(row) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= w as f64);
        for row in win.chunks(d) {
            for j in 0..d {
                centered[j] = row[j] - mu[j];
            }
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let total: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("kernel initialization windows".into()));
    }
    if total <= f64::MIN_POSITIVE {
        return KernelBank::axis(k, d);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut bases = Tensor::zeros(&[k, d]);
    let mut ratio = Vec::with_capacity(k);
    for (i, &col) in order.iter().take(k).enumerate() {
        let v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let n = norm(&v);
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (j, x) in v.iter().enumerate() {
            bases.set2(i, j, sign * x / n);
        }
        ratio.push(eig.eigenvalues[col].max(0.0) / total);
    }
    Ok(KernelBank {
        bases,
        frozen: true,
        explained_variance_ratio: ratio,
    })
}

/// Window count `⌊(T − w)/s⌋ + 1` before tail handling.
pub fn n_windows(t: usize, w: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::invalid("window stride must be >= 1"));
    }
    if w == 0 || w > t {
        return Err(Error::invalid(format!("window {w} does not fit {t} steps")));
    }
    Ok((t - w) / s + 1)
}

/// Window start offsets, including a final window ending at `T − 1` when the
/// strided windows stop short of it. A stride longer than the window would
/// leave interior steps uncovered and is rejected.
pub fn window_starts(t: usize, w: usize, s: usize) -> Result<Vec<usize>> {
    let n = n_windows(t, w, s)?;
    if s > w {
        return Err(Error::invalid(format!("window stride {s} exceeds window length {w}")));
    }
    let mut starts: Vec<usize> = (0..n).map(|i| i * s).collect();
    if starts[n - 1] + w < t {
        starts.push(t - w);
    }
    Ok(starts)
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub trend: Tensor,
    pub seasonal: Tensor,
    pub source: Tensor,
}

/// Internals of one decomposition pass, kept for the adjoint and for tests.
#[derive(Clone, Debug)]
pub struct DecompositionTrace {
    pub trend: Tensor,
    pub starts: Vec<usize>,
    pub counts: Vec<usize>,
    /// Softmax weights per (window, row in window); `None` for rows that
    /// took the zero-row shortcut.
    pub betas: Vec<Option<Vec<f64>>>,
}

fn zero_row(centered_norm: f64, mu: &[f64]) -> bool {
    centered_norm <= 1e-10 * norm(mu).max(1.0)
}

/// Shared per-window quantities. Projections of rows and window means onto
/// the unit bases are precomputed so each (window, row) pair costs
/// `O(d + K)`.
struct Geometry<'a> {
    f: &'a Tensor,
    bank: &'a Tensor,
    d: usize,
    k: usize,
    w: usize,
    /// `[T×K]` row projections `F[t]·ĉ_k`.
    proj: Vec<f64>,
}

/// Scratch state of one (window, row) pair.
struct RowState {
    xc: Vec<f64>,
    n: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl<'a> Geometry<'a> {
    fn new(f: &'a Tensor, bank: &'a Tensor, w: usize) -> Result<Self> {
        let (t, d) = f.dims2()?;
        let k = bank.shape()[0];
        let mut proj = vec![0.0; t * k];
        crate::numerics::gemm(t, d, k, f.data(), false, bank.data(), true, &mut proj, 0.0);
        Ok(Self { f, bank, d, k, w, proj })
    }

    fn mean(&self, start: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        for t in start..start + self.w {
            for (m, x) in mu.iter_mut().zip(self.f.row(t)) {
                *m += x;
            }
        }
        mu.iter_mut().for_each(|m| *m /= self.w as f64);
        mu
    }

    fn mean_proj(&self, mu: &[f64]) -> Vec<f64> {
        (0..self.k).map(|j| dot(mu, self.bank.row(j))).collect()
    }

    fn scratch(&self) -> RowState {
        RowState {
            xc: vec![0.0; self.d],
            n: 0.0,
            alpha: vec![0.0; self.k],
            beta: vec![0.0; self.k],
        }
    }

    /// Fills `st` for row `t` of the window with mean `mu`; returns false
    /// for a zero centered row.
    fn weights(&self, t: usize, mu: &[f64], mu_proj: &[f64], st: &mut RowState) -> bool {
        for ((c, x), m) in st.xc.iter_mut().zip(self.f.row(t)).zip(mu) {
            *c = x - m;
        }
        st.n = norm(&st.xc);
        if zero_row(st.n, mu) {
            return false;
        }
        let p = &self.proj[t * self.k..(t + 1) * self.k];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..self.k {
            st.alpha[j] = (p[j] - mu_proj[j]) / st.n;
            mx = mx.max(st.alpha[j]);
        }
        let mut z = 0.0;
        for j in 0..self.k {
            st.beta[j] = (st.alpha[j] - mx).exp();
            z += st.beta[j];
        }
        st.beta.iter_mut().for_each(|b| *b /= z);
        true
    }
}

fn normalized_bank(bank: &KernelBank) -> Tensor {
    let mut b = bank.bases.clone();
    let (k, d) = (bank.k(), bank.dim());
    for i in 0..k {
        let n = norm(b.row(i));
        for j in 0..d {
            b.set2(i, j, b.at2(i, j) / n);
        }
    }
    b
}

pub fn decompose_trace(f: &Tensor, w: usize, s: usize, bank: &KernelBank) -> Result<DecompositionTrace> {
    let (t, d) = f.dims2()?;
    if d != bank.dim() {
        return Err(Error::shape("decompose", format!("features {d}, kernel bank {}", bank.dim())));
    }
    let starts = window_starts(t, w, s)?;
    let unit = normalized_bank(bank);
    let geo = Geometry::new(f, &unit, w)?;
    let k = geo.k;
    let mut mu_sum = vec![0.0; t * d];
    let mut beta_sum = vec![0.0; t * k];
    let mut counts = vec![0usize; t];
    let mut betas = Vec::with_capacity(starts.len() * w);
    let mut st = geo.scratch();
    for &start in &starts {
        let mu = geo.mean(start);
        let mp = geo.mean_proj(&mu);
        for r in start..start + w {
            for (o, m) in mu_sum[r * d..(r + 1) * d].iter_mut().zip(&mu) {
                *o += m;
            }
            if geo.weights(r, &mu, &mp, &mut st) {
                for (o, b) in beta_sum[r * k..(r + 1) * k].iter_mut().zip(&st.beta) {
                    *o += b;
                }
                betas.push(Some(st.beta.clone()));
            } else {
                betas.push(None);
            }
            counts[r] += 1;
        }
    }
    let mut trend = vec![0.0; t * d];
    crate::numerics::gemm(t, k, d, &beta_sum, false, unit.data(), false, &mut trend, 0.0);
    for r in 0..t {
        let c = counts[r] as f64;
        for j in 0..d {
            trend[r * d + j] = (trend[r * d + j] + mu_sum[r * d + j]) / c;
        }
    }
    Ok(DecompositionTrace {
        trend: Tensor::new(&[t, d], trend)?,
        starts,
        counts,
        betas,
    })
}

/// Splits `F [T×d]` into trend and seasonal parts with `S = F − R`.
pub fn decompose(f: &Tensor, w: usize, s: usize, bank: &KernelBank) -> Result<Decomposition> {
    let trend = decompose_trace(f, w, s, bank)?.trend;
    let seasonal = f.zip_map(&trend, |a, b| a - b)?;
    Ok(Decomposition {
        trend,
        seasonal,
        source: f.clone(),
    })
}

struct LocalTrend {
    bank: Rc<Tensor>,
    w: usize,
    s: usize,
}

impl CustomOp for LocalTrend {
    fn name(&self) -> &'static str {
        "local_trend"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let f = inputs[0];
        let (t, d) = f.dims2()?;
        let w = self.w;
        let geo = Geometry::new(f, &self.bank, w)?;
        let k = geo.k;
        let starts = window_starts(t, w, self.s)?;
        let mut counts = vec![0usize; t];
        for &st in &starts {
            for c in &mut counts[st..st + w] {
                *c += 1;
            }
        }
        // gl[t] = dL/dR[t] / C[t]; q[t,k] = gl[t]·ĉ_k
        let mut gl = grad.data().to_vec();
        for r in 0..t {
            gl[r * d..(r + 1) * d].iter_mut().for_each(|g| *g /= counts[r] as f64);
        }
        let mut q = vec![0.0; t * k];
        crate::numerics::gemm(t, d, k, &gl, false, self.bank.data(), true, &mut q, 0.0);

        let mut df = vec![0.0; t * d];
        // Coefficients on the bases, applied once per row at the end.
        let mut basis_coef = vec![0.0; t * k];
        // Difference array spreading each window's mean gradient over its rows.
        let mut spread = vec![0.0; (t + 1) * d];
        let mut row = geo.scratch();
        let mut dbeta_mean;
        for &st in &starts {
            let mu = geo.mean(st);
            let mp = geo.mean_proj(&mu);
            let mut dmu = vec![0.0; d];
            let mut dmu_coef = vec![0.0; k];
            for r in st..st + w {
                for (a, g) in dmu.iter_mut().zip(&gl[r * d..(r + 1) * d]) {
                    *a += g;
                }
                if !geo.weights(r, &mu, &mp, &mut row) {
                    continue;
                }
                let dbeta = &q[r * k..(r + 1) * k];
                dbeta_mean = 0.0;
                for j in 0..k {
                    dbeta_mean += row.beta[j] * dbeta[j];
                }
                // dα_k = β_k(dβ_k − Σβ dβ); u·du = Σ dα_k α_k
                let mut udu = 0.0;
                for j in 0..k {
                    let da = row.beta[j] * (dbeta[j] - dbeta_mean) / row.n;
                    basis_coef[r * k + j] += da;
                    dmu_coef[j] -= da;
                    udu += da * row.alpha[j];
                }
                // dx̃ = Σ dα ĉ / n − x̃ (u·du) / n²
                let s = udu / row.n;
                for j in 0..d {
                    let v = row.xc[j] * s;
                    df[r * d + j] -= v;
                    dmu[j] += v;
                }
            }
            for j in 0..k {
                let c = dmu_coef[j];
                for (a, b) in dmu.iter_mut().zip(self.bank.row(j)) {
                    *a += c * b;
                }
            }
            for j in 0..d {
                let v = dmu[j] / w as f64;
                spread[st * d + j] += v;
                spread[(st + w) * d + j] -= v;
            }
        }
        crate::numerics::gemm(t, k, d, &basis_coef, false, self.bank.data(), false, &mut df, 1.0);
        let mut run = vec![0.0; d];
        for r in 0..t {
            for j in 0..d {
                run[j] += spread[r * d + j];
                df[r * d + j] += run[j];
            }
        }
        Ok(vec![Some(Tensor::new(&[t, d], df)?)])
    }
}

impl Graph {
    /// Differentiable decomposition returning `(trend, seasonal)`; the bank
    /// receives no gradient.
    pub fn local_trend(&mut self, f: Var, w: usize, s: usize, bank: &KernelBank) -> Result<(Var, Var)> {
        let trace = decompose_trace(self.value(f), w, s, bank)?;
        let op = LocalTrend {
            bank: Rc::new(normalized_bank(bank)),
            w,
            s,
        };
        let r = self.custom(Rc::new(op), &[f], trace.trend)?;
        let s = self.sub(f, r)?;
        Ok((r, s))
    }
}
