//! Grid geometry, quadratic B-spline stencils, small dense decompositions,
//! and the area-weighted-normal algebra used by the surface energy.
//!
//! Conventions that the rest of the crate relies on:
//! - grid nodes live at cell centers: node `i` sits at `origin + (i + 0.5) dx`
//! - quadratic B-splines give a 3-node stencil per axis and the APIC second
//!   moment `sum_i w_i (x_i - x)(x_i - x)^T = (dx^2/4) I` at every position
//! - `polar_svd` returns `det(U) = det(V) = +1` with any reflection pushed
//!   into the last singular value

use crate::{Error, Result, EPS_J};
use nalgebra::{SMatrix, SVector, Vector3};

/// Uniform Cartesian grid. `dims` counts nodes per axis; node multi-index
/// `i` maps to position `origin + (i + 0.5) dx` (nodes at cell centers).
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry<const D: usize> {
    pub origin: SVector<f64, D>,
    pub dx: f64,
    pub dims: [usize; D],
}

impl<const D: usize> GridGeometry<D> {
    pub fn new(origin: SVector<f64, D>, dx: f64, dims: [usize; D]) -> Self {
        assert!(dx > 0.0, "dx must be positive");
        assert!(dims.iter().all(|&n| n >= 6), "grid needs at least 6 nodes per axis");
        Self { origin, dx, dims }
    }

    pub fn n_nodes(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear node index, x fastest.
    #[inline]
    pub fn linear(&self, idx: [usize; D]) -> usize {
        let mut lin = 0;
        for a in (0..D).rev() {
            debug_assert!(idx[a] < self.dims[a]);
            lin = lin * self.dims[a] + idx[a];
        }
        lin
    }

    #[inline]
    pub fn unlinear(&self, mut lin: usize) -> [usize; D] {
        let mut idx = [0usize; D];
        for a in 0..D {
            idx[a] = lin % self.dims[a];
            lin /= self.dims[a];
        }
        idx
    }

    #[inline]
    pub fn node_pos(&self, idx: [usize; D]) -> SVector<f64, D> {
        let mut p = self.origin;
        for a in 0..D {
            p[a] += (idx[a] as f64 + 0.5) * self.dx;
        }
        p
    }

    /// Node-relative coordinates: `u[a] = k` exactly at node `k` on axis `a`.
    #[inline]
    pub fn normalized(&self, x: &SVector<f64, D>) -> SVector<f64, D> {
        (x - self.origin) / self.dx - SVector::<f64, D>::repeat(0.5)
    }

    /// Positions whose stencil fits in the grid: base node in `[0, dims-3]`.
    #[inline]
    pub fn stencil_valid(&self, x: &SVector<f64, D>) -> bool {
        let u = self.normalized(x);
        (0..D).all(|a| {
            let b = (u[a] - 0.5).floor();
            b >= 0.0 && b <= (self.dims[a] - 3) as f64
        })
    }

    /// Interior where particles are allowed to live: 1.5 cells clear of the
    /// outermost node layer, so samples and balance particles spawned up to
    /// ~1 cell outside the material still have valid stencils.
    #[inline]
    pub fn particle_interior(&self, x: &SVector<f64, D>) -> bool {
        let u = self.normalized(x);
        (0..D).all(|a| u[a] >= 1.5 && u[a] <= (self.dims[a] - 1) as f64 - 1.5)
    }

    /// Clamp a position into the particle interior. Returns the clamped
    /// position and a mask of axes that were clamped.
    pub fn clamp_to_interior(&self, x: &SVector<f64, D>) -> (SVector<f64, D>, [bool; D]) {
        let mut out = *x;
        let mut clamped = [false; D];
        for a in 0..D {
            let lo = self.origin[a] + (0.5 + 1.5) * self.dx;
            let hi = self.origin[a] + (self.dims[a] as f64 - 0.5 - 1.5) * self.dx;
            if out[a] < lo {
                out[a] = lo;
                clamped[a] = true;
            } else if out[a] > hi {
                out[a] = hi;
                clamped[a] = true;
            }
        }
        (out, clamped)
    }

    /// APIC `D_p^{-1}` scale for quadratic splines on this grid.
    #[inline]
    pub fn apic_d_inverse(&self) -> f64 {
        4.0 / (self.dx * self.dx)
    }
}

/// Quadratic B-spline weight, `t` in cell units. Support is `|t| < 1.5`.
#[inline]
pub fn bspline_w(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        0.75 - t * t
    } else if a < 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

/// Derivative of [`bspline_w`] with respect to `t` (cell units).
#[inline]
pub fn bspline_dw(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        -2.0 * t
    } else if a < 1.5 {
        (a - 1.5) * t.signum()
    } else {
        0.0
    }
}

/// Tensor-product stencil of the 3 nodes per axis covering a position.
/// Weights are exact; gradients are premultiplied by `1/dx`.
#[derive(Debug, Clone)]
pub struct SplineStencil<const D: usize> {
    pub base: [usize; D],
    pub w: [[f64; 3]; D],
    pub dw: [[f64; 3]; D],
}

/// Builds the stencil for `x`. Errors if the stencil would touch nodes
/// outside the grid; callers attach the particle/sample identity.
pub fn spline_stencil<const D: usize>(
    geom: &GridGeometry<D>,
    x: &SVector<f64, D>,
) -> Result<SplineStencil<D>> {
    let u = geom.normalized(x);
    let mut base = [0usize; D];
    let mut w = [[0.0; 3]; D];
    let mut dw = [[0.0; 3]; D];
    let inv_dx = 1.0 / geom.dx;
    for a in 0..D {
        let b = (u[a] - 0.5).floor();
        if !(b >= 0.0 && b <= (geom.dims[a] - 3) as f64) {
            return Err(Error::OutOfDomain {
                what: "stencil".into(),
                position: x.iter().copied().collect(),
            });
        }
        base[a] = b as usize;
        for j in 0..3 {
            let t = u[a] - (b + j as f64);
            w[a][j] = bspline_w(t);
            dw[a][j] = bspline_dw(t) * inv_dx;
        }
    }
    Ok(SplineStencil { base, w, dw })
}

impl<const D: usize> SplineStencil<D> {
    /// Visits every stencil node with `(linear index, weight, gradient)`.
    #[inline]
    pub fn visit<F: FnMut(usize, f64, SVector<f64, D>)>(&self, geom: &GridGeometry<D>, mut f: F) {
        let mut offs = [0usize; D];
        let count = 3usize.pow(D as u32);
        for _ in 0..count {
            let mut weight = 1.0;
            for a in 0..D {
                weight *= self.w[a][offs[a]];
            }
            let mut grad = SVector::<f64, D>::zeros();
            for a in 0..D {
                let mut g = self.dw[a][offs[a]];
                for b in 0..D {
                    if b != a {
                        g *= self.w[b][offs[b]];
                    }
                }
                grad[a] = g;
            }
            let mut idx = [0usize; D];
            for a in 0..D {
                idx[a] = self.base[a] + offs[a];
            }
            f(geom.linear(idx), weight, grad);
            // mixed-radix increment
            for a in 0..D {
                offs[a] += 1;
                if offs[a] < 3 {
                    break;
                }
                offs[a] = 0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// small symmetric eigensolver
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix (n <= 9),
/// row-major in `a`. On return `a`'s diagonal holds eigenvalues and `q`
/// holds eigenvectors in its columns (`q[r * n + c]`, column c). Pairs are
/// sorted by descending eigenvalue. Deterministic.
pub fn jacobi_eigen(n: usize, a: &mut [f64], q: &mut [f64]) {
    debug_assert!(n <= 9 && a.len() >= n * n && q.len() >= n * n);
    for r in 0..n {
        for c in 0..n {
            q[r * n + c] = if r == c { 1.0 } else { 0.0 };
        }
    }
    let scale: f64 = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..50 {
        let mut off = 0.0;
        for p in 0..n {
            for r in p + 1..n {
                off += a[p * n + r] * a[p * n + r];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apq = a[p * n + r];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[r * n + r];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + r];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + r] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[r * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[r * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    // sort pairs by descending eigenvalue (insertion sort, n tiny)
    for i in 1..n {
        let mut j = i;
        while j > 0 && a[(j - 1) * n + (j - 1)] < a[j * n + j] {
            let (ja, jb) = ((j - 1) * n + (j - 1), j * n + j);
            a.swap(ja, jb);
            for k in 0..n {
                q.swap(k * n + j - 1, k * n + j);
            }
            j -= 1;
        }
    }
}

// ---------------------------------------------------------------------------
// polar SVD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolarSvd<const D: usize> {
    pub u: SMatrix<f64, D, D>,
    pub sigma: SVector<f64, D>,
    pub v: SMatrix<f64, D, D>,
}

/// Determinant of a small square matrix (d = 2 or 3).
#[inline]
pub fn det<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    match D {
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => unreachable!("only d = 2, 3 supported"),
    }
}

/// SVD in polar convention: `f = U diag(sigma) V^T` with
/// `det(U) = det(V) = +1`, sigma sorted descending, and at most the last
/// entry negative (it carries any reflection). Jacobi-based; robust for
/// near-singular and inverted inputs.
pub fn polar_svd<const D: usize>(f: &SMatrix<f64, D, D>) -> PolarSvd<D> {
    // eigendecompose f^T f
    let a = f.transpose() * f;
    let mut abuf = [0.0f64; 81];
    let mut qbuf = [0.0f64; 81];
    for r in 0..D {
        for c in 0..D {
            abuf[r * D + c] = a[(r, c)];
        }
    }
    jacobi_eigen(D, &mut abuf, &mut qbuf);
    let mut v = SMatrix::<f64, D, D>::zeros();
    for r in 0..D {
        for c in 0..D {
            v[(r, c)] = qbuf[r * D + c];
        }
    }
    if det(&v) < 0.0 {
        for r in 0..D {
            v[(r, D - 1)] = -v[(r, D - 1)];
        }
    }

    // singular values from the image of V (exact reconstruction even when
    // the Jacobi eigenvalues of f^T f lose half the digits near zero)
    let b = f * v;
    let mut sigma = SVector::<f64, D>::zeros();
    let mut u = SMatrix::<f64, D, D>::zeros();
    for k in 0..D {
        sigma[k] = b.column(k).norm();
    }
    // descending by magnitude; swap columns in pairs of (u-slot, v, sigma),
    // negating one column in each factor to keep determinants +1
    for i in 1..D {
        let mut j = i;
        while j > 0 && sigma[j - 1] < sigma[j] {
            sigma.swap_rows(j - 1, j);
            v.swap_columns(j - 1, j);
            for r in 0..D {
                v[(r, j)] = -v[(r, j)];
            }
            j -= 1;
        }
    }
    let b = f * v;

    // build U column by column, largest sigma first, orthonormalizing as we
    // go; collapsed columns are completed orthogonally
    let scale = sigma[0].max(1e-300);
    for k in 0..D {
        let mut col: SVector<f64, D> = b.column(k).into();
        for prev in 0..k {
            let proj = u.column(prev).dot(&col);
            col -= proj * SVector::<f64, D>::from(u.column(prev));
        }
        let norm = col.norm();
        if norm > 1e-12 * scale {
            col /= norm;
        } else {
            col = orthogonal_completion(&u, k);
        }
        u.set_column(k, &col);
    }
    if det(&u) < 0.0 {
        for r in 0..D {
            u[(r, D - 1)] = -u[(r, D - 1)];
        }
        sigma[D - 1] = -sigma[D - 1];
    }
    PolarSvd { u, sigma, v }
}

/// Unit vector orthogonal to the first `k` columns of `u`.
fn orthogonal_completion<const D: usize>(u: &SMatrix<f64, D, D>, k: usize) -> SVector<f64, D> {
    if D == 3 && k == 2 {
        let a = Vector3::new(u[(0, 0)], u[(1, 0)], u[(2, 0)]);
        let b = Vector3::new(u[(0, 1)], u[(1, 1)], u[(2, 1)]);
        let c = a.cross(&b);
        let mut out = SVector::<f64, D>::zeros();
        for r in 0..D {
            out[r] = c[r];
        }
        return out;
    }
    if D == 2 && k == 1 {
        let mut out = SVector::<f64, D>::zeros();
        out[0] = -u[(1, 0)];
        out[1] = u[(0, 0)];
        return out;
    }
    // rank-deficient beyond one column: Gram-Schmidt a coordinate axis
    for axis in 0..D {
        let mut cand = SVector::<f64, D>::zeros();
        cand[axis] = 1.0;
        for prev in 0..k {
            let proj = u.column(prev).dot(&cand);
            cand -= proj * SVector::<f64, D>::from(u.column(prev));
        }
        let norm = cand.norm();
        if norm > 0.5 {
            return cand / norm;
        }
    }
    unreachable!("no orthogonal completion found");
}

// ---------------------------------------------------------------------------
// cross products, axial vectors
// ---------------------------------------------------------------------------

/// Embeds a 2D or 3D vector in 3D (2D lives in the xy-plane).
#[inline]
pub fn embed3<const D: usize>(v: &SVector<f64, D>) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for a in 0..D {
        out[a] = v[a];
    }
    out
}

/// Cross product after embedding in 3D; 2D inputs yield a pure z component.
#[inline]
pub fn cross_embed<const D: usize>(x: &SVector<f64, D>, y: &SVector<f64, D>) -> Vector3<f64> {
    embed3(x).cross(&embed3(y))
}

/// Axial vector `axial(A)_a = eps_{abc} A_{cb}`, embedded in 3D. For a skew
/// matrix `A = [w]x` this returns `2w`; the angular momentum of an affine
/// particle is `m x cross v + m (dx^2/4) axial(A)`.
#[inline]
pub fn axial<const D: usize>(a: &SMatrix<f64, D, D>) -> Vector3<f64> {
    match D {
        2 => Vector3::new(0.0, 0.0, a[(1, 0)] - a[(0, 1)]),
        3 => Vector3::new(
            a[(2, 1)] - a[(1, 2)],
            a[(0, 2)] - a[(2, 0)],
            a[(1, 0)] - a[(0, 1)],
        ),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// area-weighted normals and derivatives
// ---------------------------------------------------------------------------

#[inline]
fn levi2(i: usize, j: usize) -> f64 {
    match (i, j) {
        (0, 1) => 1.0,
        (1, 0) => -1.0,
        _ => 0.0,
    }
}

#[inline]
fn levi3(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

/// Cofactor matrix, `cof(G) = det(G) G^{-T}` (valid for singular G too).
pub fn cofactor<const D: usize>(g: &SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    let mut c = SMatrix::<f64, D, D>::zeros();
    match D {
        2 => {
            c[(0, 0)] = g[(1, 1)];
            c[(0, 1)] = -g[(1, 0)];
            c[(1, 0)] = -g[(0, 1)];
            c[(1, 1)] = g[(0, 0)];
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                    let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                    c[(i, j)] = g[(i1, j1)] * g[(i2, j2)] - g[(i1, j2)] * g[(i2, j1)];
                }
            }
        }
        _ => unreachable!(),
    }
    c
}

/// Hessian block storage: row-major `(D*D) x (D*D)`, entry
/// `[(k*D + l) * D*D + (m*D + n)]` = d^2 value / dG_kl dG_mn. Only the
/// leading `(D*D)^2` entries are meaningful.
pub type HessBuf = [f64; 81];

/// `|cof(G) a|`: the magnitude of the push-forward of the area vector `a`
/// under G. This is the per-sample surface energy density integrand.
pub fn area_weighted_normal<const D: usize>(
    g: &SMatrix<f64, D, D>,
    a: &SVector<f64, D>,
) -> Result<f64> {
    let d = det(g);
    if d <= EPS_J {
        return Err(Error::Singular {
            what: "area-weighted normal".into(),
            det: d,
        });
    }
    Ok((cofactor(g) * a).norm())
}

/// Value, gradient, and (optionally) Hessian of `|cof(G) a|` with respect
/// to G. All derivatives are analytic: `cof` is linear in G for d = 2 and
/// quadratic for d = 3.
pub fn area_weighted_normal_derivatives<const D: usize>(
    g: &SMatrix<f64, D, D>,
    a: &SVector<f64, D>,
    want_hessian: bool,
) -> Result<(f64, SMatrix<f64, D, D>, Option<HessBuf>)> {
    let dg = det(g);
    if dg <= EPS_J {
        return Err(Error::Singular {
            what: "area-weighted normal".into(),
            det: dg,
        });
    }
    area_weighted_normal_derivatives_extended(g, a, want_hessian, 0.0)
}

/// Derivatives of the softened magnitude `sqrt(|cof(G) a|^2 + soften^2)`,
/// with the domain extended through inversion: `cof` is polynomial in G, so
/// everything stays well defined at det(G) <= 0. The implicit solver needs
/// both relaxations. Trial states pass surface elements through inversion
/// transiently, and gating those out shrinks the feasible set to a sliver
/// the line search wedges against. Worse, a skin sample whose stencil
/// reaches a nearly massless fringe node can be collapsed at almost no
/// momentum cost, so the incremental potential's minimizer sits on the
/// norm's kink at |c| = 0 and Newton stalls against it. A `soften` of
/// ~1e-3 |a| rounds that kink into a C^2 bowl while perturbing healthy
/// elements (|c| ~ |a|) by a relative (soften/|c|)^2/2 ~ 1e-6.
/// `soften = 0` recovers the exact norm; only then can the value vanish,
/// which is reported as a singular configuration.
pub fn area_weighted_normal_derivatives_extended<const D: usize>(
    g: &SMatrix<f64, D, D>,
    a: &SVector<f64, D>,
    want_hessian: bool,
    soften: f64,
) -> Result<(f64, SMatrix<f64, D, D>, Option<HessBuf>)> {
    let c = cofactor(g) * a;
    let value = (c.norm_squared() + soften * soften).sqrt();
    if value <= 1e-300 {
        return Err(Error::Singular {
            what: "area-weighted normal (degenerate area vector)".into(),
            det: value,
        });
    }
    // |n| < 1 when softened; the gradient and Hessian formulas below hold
    // verbatim for rho = sqrt(|c|^2 + s^2) with n = c/rho in place of c/|c|.
    let n = c / value;

    // P[i][k*D + l] = d c_i / d G_kl
    let dsq = D * D;
    let mut p = [[0.0f64; 9]; 3];
    match D {
        2 => {
            // d cof_ij / d G_kl = eps_ik eps_jl (constant)
            for i in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let mut s = 0.0;
                        for j in 0..2 {
                            s += levi2(i, k) * levi2(j, l) * a[j];
                        }
                        p[i][k * D + l] = s;
                    }
                }
            }
        }
        3 => {
            // d cof_ij / d G_kl = eps_ikq eps_jls G_qs
            for i in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let mut s = 0.0;
                        for j in 0..3 {
                            for q in 0..3 {
                                for r in 0..3 {
                                    s += levi3(i, k, q) * levi3(j, l, r) * g[(q, r)] * a[j];
                                }
                            }
                        }
                        p[i][k * D + l] = s;
                    }
                }
            }
        }
        _ => unreachable!(),
    }

    let mut grad = SMatrix::<f64, D, D>::zeros();
    for k in 0..D {
        for l in 0..D {
            let mut s = 0.0;
            for i in 0..D {
                s += n[i] * p[i][k * D + l];
            }
            grad[(k, l)] = s;
        }
    }

    let hess = if want_hessian {
        let mut h: HessBuf = [0.0; 81];
        // Gauss-Newton part: (I - n n^T)/|c| contracted with P x P
        for kl in 0..dsq {
            for mn in 0..dsq {
                let mut s = 0.0;
                for i in 0..D {
                    for j in 0..D {
                        let proj = (if i == j { 1.0 } else { 0.0 }) - n[i] * n[j];
                        s += proj / value * p[i][kl] * p[j][mn];
                    }
                }
                h[kl * dsq + mn] = s;
            }
        }
        // curvature of cof itself (d = 3 only; cof is linear in G for d = 2)
        if D == 3 {
            for k in 0..3 {
                for l in 0..3 {
                    for m in 0..3 {
                        for nn in 0..3 {
                            let mut s = 0.0;
                            for i in 0..3 {
                                for j in 0..3 {
                                    s += n[i] * levi3(i, k, m) * levi3(j, l, nn) * a[j];
                                }
                            }
                            h[(k * D + l) * dsq + (m * D + nn)] += s;
                        }
                    }
                }
            }
        }
        Some(h)
    } else {
        None
    };

    Ok((value, grad, hess))
}
