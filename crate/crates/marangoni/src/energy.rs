//! Potential-energy model for the implicit solve. Every force source is a
//! quadrature point that sees the moved node positions only through a
//! small deformation matrix G = sum_i y_i (x) g_i, with the kernel
//! gradients g_i premultiplied per kind so the point energy is a function
//! of G alone:
//!
//! - pressure (liquids): g_i = J^n dN_i, J = (1-d) J^n + tr G
//! - fixed corotated (solids): g_i = F^{nT} dN_i, so G is the trial F
//! - surface tension: g_i = dN_i, energy k |cof(G) a| for the reference
//!   area vector a
//!
//! Viscosity enters as a separate linear operator in the velocities.
//! Forces scatter as f_i = -P g_i with P = de/dG, and the Hessian acts
//! through per-point (d^2 e/dG^2) blocks that can be projected to PSD.

use crate::kernels::{
    area_weighted_normal_derivatives_extended, cofactor, jacobi_eigen, polar_svd, spline_stencil,
    GridGeometry, HessBuf,
};
use crate::{Result, EPS_J};
use nalgebra::{SMatrix, SVector};

/// Marks a grid node that is not part of the solve.
pub const NO_NODE: u32 = u32::MAX;

/// Relative softening of the surface-area magnitude,
/// |c| -> sqrt(|c|^2 + (rel |a|)^2). A skin sample whose stencil reaches a
/// nearly massless fringe node can be collapsed toward |c| = 0 at ~zero
/// momentum cost, which parks the implicit solve's minimizer on the norm's
/// kink; softening rounds it into a C^2 bowl. Healthy elements (|c| ~ |a|)
/// see a relative energy error of rel^2/2 ~ 5e-7.
const AREA_SOFTEN_REL: f64 = 1e-3;

#[derive(Debug, Clone)]
enum Kind<const D: usize> {
    Pressure { lambda_v0: f64, j_n: f64 },
    Corotated { mu_v0: f64, lambda_v0: f64 },
    Surface { k: f64, a: SVector<f64, D> },
}

/// Potential energy split for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyParts {
    pub surface: f64,
    pub pressure: f64,
    pub hyperelastic: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.surface + self.pressure + self.hyperelastic
    }
}

pub struct EnergyModel<const D: usize> {
    n_active: usize,
    kinds: Vec<Kind<D>>,
    g0: Vec<SMatrix<f64, D, D>>,
    offsets: Vec<u32>,
    ids: Vec<u32>,
    grads: Vec<SVector<f64, D>>,
    hess: Vec<HessBuf>,
    visc_offsets: Vec<u32>,
    visc_ids: Vec<u32>,
    visc_grads: Vec<SVector<f64, D>>,
    visc_coeff: Vec<f64>,
    /// Force components that landed on massless nodes and were discarded.
    /// Only possible when built with `drop_missing` (massless sampling).
    pub dropped_components: usize,
    drop_missing: bool,
}

impl<const D: usize> EnergyModel<D> {
    pub fn new(n_active: usize, drop_missing: bool) -> Self {
        EnergyModel {
            n_active,
            kinds: Vec::new(),
            g0: Vec::new(),
            offsets: vec![0],
            ids: Vec::new(),
            grads: Vec::new(),
            hess: Vec::new(),
            visc_offsets: vec![0],
            visc_ids: Vec::new(),
            visc_grads: Vec::new(),
            visc_coeff: Vec::new(),
            dropped_components: 0,
            drop_missing,
        }
    }

    pub fn n_points(&self) -> usize {
        self.kinds.len()
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    /// Pushes one stencil, keeping only nodes that are in the solve. The
    /// base matrix g0 is the exact full-stencil sum, so dropped nodes
    /// still deform G correctly; they just receive no force.
    fn push_stencil(
        &mut self,
        geom: &GridGeometry<D>,
        node_of: &[u32],
        x: &SVector<f64, D>,
        map: impl Fn(&SVector<f64, D>) -> SVector<f64, D>,
    ) -> Result<()> {
        let st = spline_stencil(geom, x)?;
        let mut dropped = 0usize;
        st.visit(geom, |lin, _, grad| {
            let id = node_of[lin];
            if id == NO_NODE {
                dropped += 1;
            } else {
                self.ids.push(id);
                self.grads.push(map(&grad));
            }
        });
        if dropped > 0 {
            assert!(
                self.drop_missing,
                "force stencil touches a massless node; the splat set must cover every quadrature point"
            );
            self.dropped_components += dropped;
        }
        self.offsets.push(self.ids.len() as u32);
        Ok(())
    }

    pub fn add_pressure(
        &mut self,
        geom: &GridGeometry<D>,
        node_of: &[u32],
        x: &SVector<f64, D>,
        lambda: f64,
        vol0: f64,
        j_n: f64,
    ) -> Result<()> {
        self.push_stencil(geom, node_of, x, |g| g * j_n)?;
        let lambda_v0 = lambda * vol0;
        self.kinds.push(Kind::Pressure { lambda_v0, j_n });
        self.g0.push(SMatrix::identity() * j_n);
        // constant rank-one block lambda V0 vec(I) vec(I)^T, PSD by itself
        let mut buf = [0.0; 81];
        for k in 0..D {
            for m in 0..D {
                buf[(k * D + k) * D * D + (m * D + m)] = lambda_v0;
            }
        }
        self.hess.push(buf);
        Ok(())
    }

    pub fn add_corotated(
        &mut self,
        geom: &GridGeometry<D>,
        node_of: &[u32],
        x: &SVector<f64, D>,
        mu: f64,
        lambda: f64,
        vol0: f64,
        f_n: &SMatrix<f64, D, D>,
    ) -> Result<()> {
        let ft = f_n.transpose();
        self.push_stencil(geom, node_of, x, |g| ft * g)?;
        self.kinds.push(Kind::Corotated { mu_v0: mu * vol0, lambda_v0: lambda * vol0 });
        self.g0.push(*f_n);
        self.hess.push([0.0; 81]);
        Ok(())
    }

    pub fn add_surface(
        &mut self,
        geom: &GridGeometry<D>,
        node_of: &[u32],
        s: &SVector<f64, D>,
        k: f64,
        da: &SVector<f64, D>,
    ) -> Result<()> {
        self.push_stencil(geom, node_of, s, |g| *g)?;
        self.kinds.push(Kind::Surface { k, a: *da });
        self.g0.push(SMatrix::identity());
        self.hess.push([0.0; 81]);
        Ok(())
    }

    pub fn add_viscosity(
        &mut self,
        geom: &GridGeometry<D>,
        node_of: &[u32],
        x: &SVector<f64, D>,
        mu: f64,
        vol_n: f64,
    ) -> Result<()> {
        let st = spline_stencil(geom, x)?;
        let mut dropped = 0usize;
        st.visit(geom, |lin, _, grad| {
            let id = node_of[lin];
            if id == NO_NODE {
                dropped += 1;
            } else {
                self.visc_ids.push(id);
                self.visc_grads.push(grad);
            }
        });
        if dropped > 0 {
            assert!(self.drop_missing, "viscous stencil touches a massless node");
            self.dropped_components += dropped;
        }
        self.visc_offsets.push(self.visc_ids.len() as u32);
        self.visc_coeff.push(mu * vol_n);
        Ok(())
    }

    fn entries(&self, pt: usize) -> (&[u32], &[SVector<f64, D>]) {
        let lo = self.offsets[pt] as usize;
        let hi = self.offsets[pt + 1] as usize;
        (&self.ids[lo..hi], &self.grads[lo..hi])
    }

    /// Smallest deformed-to-reference area ratio over surface points at
    /// the given displacements. Temporary diagnostic.
    pub fn min_area_ratio(&self, du: &[SVector<f64, D>]) -> f64 {
        let mut worst = f64::INFINITY;
        for pt in 0..self.kinds.len() {
            if let Kind::Surface { a, .. } = &self.kinds[pt] {
                let g = self.deformation(pt, du);
                let r = (cofactor(&g) * a).norm() / a.norm();
                if r < worst {
                    worst = r;
                }
            }
        }
        worst
    }

    /// Per-node displacement budget that keeps every covering surface
    /// element on its current side of collapse: |c| shrinks at most at rate
    /// |grad c . g_i| per unit of du_i, so a step within c_norm over that
    /// rate cannot cross |c| = 0, where the energy's slope reverses and a
    /// quadratic model built on this side stops meaning anything. Nodes no
    /// surface element touches get an infinite budget.
    pub fn surface_trust(&self, du: &[SVector<f64, D>], out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = f64::INFINITY;
        }
        for pt in 0..self.kinds.len() {
            if let Kind::Surface { a, .. } = &self.kinds[pt] {
                let g = self.deformation(pt, du);
                let Ok((rho, grad, _)) = area_weighted_normal_derivatives_extended::<D>(
                    &g,
                    a,
                    false,
                    AREA_SOFTEN_REL * a.norm(),
                ) else {
                    continue;
                };
                let (ids, grads) = self.entries(pt);
                for (id, gr) in ids.iter().zip(grads) {
                    let rate = (grad * gr).norm();
                    if rate > 0.0 {
                        let slot = &mut out[*id as usize];
                        *slot = slot.min(rho / rate);
                    }
                }
            }
        }
    }

    fn deformation(&self, pt: usize, du: &[SVector<f64, D>]) -> SMatrix<f64, D, D> {
        let (ids, grads) = self.entries(pt);
        let mut g = self.g0[pt];
        for (id, gr) in ids.iter().zip(grads) {
            g += du[*id as usize] * gr.transpose();
        }
        g
    }

    fn point_energy(&self, pt: usize, g: &SMatrix<f64, D, D>) -> Result<(usize, f64)> {
        match &self.kinds[pt] {
            Kind::Pressure { lambda_v0, j_n } => {
                let j = (1.0 - D as f64) * j_n + g.trace();
                Ok((1, 0.5 * lambda_v0 * (j - 1.0) * (j - 1.0)))
            }
            Kind::Corotated { mu_v0, lambda_v0 } => {
                let svd = polar_svd(g);
                let j: f64 = svd.sigma.iter().product();
                let stretch: f64 = svd.sigma.iter().map(|s| (s - 1.0) * (s - 1.0)).sum();
                Ok((2, mu_v0 * stretch + 0.5 * lambda_v0 * (j - 1.0) * (j - 1.0)))
            }
            Kind::Surface { k, a } => {
                let (area, _, _) = area_weighted_normal_derivatives_extended::<D>(g, a, false, AREA_SOFTEN_REL * a.norm())?;
                Ok((0, k * area))
            }
        }
    }

    fn piola(&self, pt: usize, g: &SMatrix<f64, D, D>) -> Result<SMatrix<f64, D, D>> {
        match &self.kinds[pt] {
            Kind::Pressure { lambda_v0, j_n } => {
                let j = (1.0 - D as f64) * j_n + g.trace();
                Ok(SMatrix::identity() * (lambda_v0 * (j - 1.0)))
            }
            Kind::Corotated { mu_v0, lambda_v0 } => {
                let svd = polar_svd(g);
                let r = svd.u * svd.v.transpose();
                let j: f64 = svd.sigma.iter().product();
                Ok((g - r) * (2.0 * mu_v0) + cofactor(g) * (lambda_v0 * (j - 1.0)))
            }
            Kind::Surface { k, a } => {
                let (_, grad, _) = area_weighted_normal_derivatives_extended::<D>(g, a, false, AREA_SOFTEN_REL * a.norm())?;
                Ok(grad * *k)
            }
        }
    }

    /// Total potential energy at nodal displacements `du` (length
    /// `n_active`), split by contribution.
    pub fn energy_parts(&self, du: &[SVector<f64, D>]) -> Result<EnergyParts> {
        let mut parts = EnergyParts::default();
        for pt in 0..self.kinds.len() {
            let g = self.deformation(pt, du);
            let (slot, e) = self.point_energy(pt, &g)?;
            match slot {
                0 => parts.surface += e,
                1 => parts.pressure += e,
                _ => parts.hyperelastic += e,
            }
        }
        Ok(parts)
    }

    pub fn energy(&self, du: &[SVector<f64, D>]) -> Result<f64> {
        Ok(self.energy_parts(du)?.total())
    }

    /// Accumulates elastic and surface forces at displacements `du` into
    /// `out` (not cleared): out_i -= P g_i.
    pub fn force(&self, du: &[SVector<f64, D>], out: &mut [SVector<f64, D>]) -> Result<()> {
        for pt in 0..self.kinds.len() {
            let g = self.deformation(pt, du);
            let p = self.piola(pt, &g)?;
            let (ids, grads) = self.entries(pt);
            for (id, gr) in ids.iter().zip(grads) {
                out[*id as usize] -= p * gr;
            }
        }
        Ok(())
    }

    /// Accumulates viscous forces for nodal velocities `v` into `out`:
    /// out_i -= mu V eps(v) g_i with eps the symmetrized velocity gradient.
    pub fn visc_force(&self, v: &[SVector<f64, D>], out: &mut [SVector<f64, D>]) {
        for pt in 0..self.visc_coeff.len() {
            let lo = self.visc_offsets[pt] as usize;
            let hi = self.visc_offsets[pt + 1] as usize;
            let mut grad_v = SMatrix::<f64, D, D>::zeros();
            for (id, gr) in self.visc_ids[lo..hi].iter().zip(&self.visc_grads[lo..hi]) {
                grad_v += v[*id as usize] * gr.transpose();
            }
            let eps = (grad_v + grad_v.transpose()) * (0.5 * self.visc_coeff[pt]);
            for (id, gr) in self.visc_ids[lo..hi].iter().zip(&self.visc_grads[lo..hi]) {
                out[*id as usize] -= eps * gr;
            }
        }
    }

    /// Applies the (positive semidefinite) viscous operator: out += B dv,
    /// where B dv = -visc_force(dv).
    pub fn visc_apply(&self, dv: &[SVector<f64, D>], out: &mut [SVector<f64, D>]) {
        for pt in 0..self.visc_coeff.len() {
            let lo = self.visc_offsets[pt] as usize;
            let hi = self.visc_offsets[pt + 1] as usize;
            let mut grad_v = SMatrix::<f64, D, D>::zeros();
            for (id, gr) in self.visc_ids[lo..hi].iter().zip(&self.visc_grads[lo..hi]) {
                grad_v += dv[*id as usize] * gr.transpose();
            }
            let eps = (grad_v + grad_v.transpose()) * (0.5 * self.visc_coeff[pt]);
            for (id, gr) in self.visc_ids[lo..hi].iter().zip(&self.visc_grads[lo..hi]) {
                out[*id as usize] += eps * gr;
            }
        }
    }

    /// Rebuilds every point's energy Hessian block at displacements `du`.
    /// With `project` the blocks are clamped to positive semidefinite,
    /// which the Newton solve relies on; without it they are the exact
    /// second derivatives (for verification).
    pub fn refresh_hessian(&mut self, du: &[SVector<f64, D>], project: bool) -> Result<()> {
        for pt in 0..self.kinds.len() {
            let g = self.deformation(pt, du);
            match &self.kinds[pt] {
                Kind::Pressure { .. } => {} // constant, set at add time
                Kind::Corotated { mu_v0, lambda_v0 } => {
                    self.hess[pt] = corotated_dpdf(&g, *mu_v0, *lambda_v0, project);
                }
                Kind::Surface { k, a } => {
                    let (_, _, h) = area_weighted_normal_derivatives_extended::<D>(
                        &g,
                        a,
                        true,
                        AREA_SOFTEN_REL * a.norm(),
                    )?;
                    let mut buf = h.expect("hessian requested");
                    for v in buf.iter_mut() {
                        *v *= k;
                    }
                    if project {
                        project_psd(D * D, &mut buf);
                    }
                    self.hess[pt] = buf;
                }
            }
        }
        Ok(())
    }

    /// Applies the assembled energy Hessian: out += H dv.
    pub fn hessian_apply(&self, dv: &[SVector<f64, D>], out: &mut [SVector<f64, D>]) {
        let d2 = D * D;
        for pt in 0..self.kinds.len() {
            let (ids, grads) = self.entries(pt);
            let mut dg = [0.0; 9];
            for (id, gr) in ids.iter().zip(grads) {
                let u = &dv[*id as usize];
                for a in 0..D {
                    for c in 0..D {
                        dg[a * D + c] += u[a] * gr[c];
                    }
                }
            }
            let h = &self.hess[pt];
            let mut dp = [0.0; 9];
            for k in 0..d2 {
                let row = &h[k * d2..k * d2 + d2];
                let mut acc = 0.0;
                for l in 0..d2 {
                    acc += row[l] * dg[l];
                }
                dp[k] = acc;
            }
            for (id, gr) in ids.iter().zip(grads) {
                let o = &mut out[*id as usize];
                for a in 0..D {
                    let mut acc = 0.0;
                    for c in 0..D {
                        acc += dp[a * D + c] * gr[c];
                    }
                    o[a] += acc;
                }
            }
        }
    }

    /// Adds h_scale * diag(H) + b_scale * diag(B) componentwise into `out`
    /// for the Jacobi preconditioner.
    pub fn add_diag(&self, h_scale: f64, b_scale: f64, out: &mut [SVector<f64, D>]) {
        let d2 = D * D;
        for pt in 0..self.kinds.len() {
            let (ids, grads) = self.entries(pt);
            let h = &self.hess[pt];
            for (id, gr) in ids.iter().zip(grads) {
                let o = &mut out[*id as usize];
                for a in 0..D {
                    let mut acc = 0.0;
                    for c in 0..D {
                        for e in 0..D {
                            acc += h[(a * D + c) * d2 + (a * D + e)] * gr[c] * gr[e];
                        }
                    }
                    o[a] += h_scale * acc;
                }
            }
        }
        for pt in 0..self.visc_coeff.len() {
            let lo = self.visc_offsets[pt] as usize;
            let hi = self.visc_offsets[pt + 1] as usize;
            for (id, gr) in self.visc_ids[lo..hi].iter().zip(&self.visc_grads[lo..hi]) {
                let n2 = gr.norm_squared();
                let o = &mut out[*id as usize];
                for a in 0..D {
                    o[a] += b_scale * self.visc_coeff[pt] * 0.5 * (n2 + gr[a] * gr[a]);
                }
            }
        }
    }
}

/// Clamps the eigenvalues of the leading n x n block to be nonnegative.
fn project_psd(n: usize, buf: &mut HessBuf) {
    let mut q = [0.0; 81];
    jacobi_eigen(n, &mut buf[..n * n], &mut q[..n * n]);
    let mut eig = [0.0; 9];
    for (m, e) in eig[..n].iter_mut().enumerate() {
        *e = buf[m * n + m].max(0.0);
    }
    for k in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for m in 0..n {
                acc += q[k * n + m] * eig[m] * q[l * n + m];
            }
            buf[k * n + l] = acc;
        }
    }
}

/// Exact (or PSD-projected) derivative of the fixed corotated Piola
/// stress, assembled in the singular value frame of F. The scale block is
/// the Hessian of the principal energy; each off-diagonal pair (i, j)
/// carries a symmetric mode with eigenvalue 2 mu - lambda (J-1) prod_rest
/// and a rotational mode with eigenvalue (psi_i + psi_j) / (sigma_i +
/// sigma_j).
fn corotated_dpdf<const D: usize>(
    f: &SMatrix<f64, D, D>,
    mu_v0: f64,
    lambda_v0: f64,
    project: bool,
) -> HessBuf {
    let svd = polar_svd(f);
    let s = svd.sigma;
    let j: f64 = s.iter().product();
    let prod_except = |i: usize| -> f64 {
        (0..D).filter(|&k| k != i).map(|k| s[k]).product()
    };
    let prod_except2 = |i: usize, jx: usize| -> f64 {
        (0..D).filter(|&k| k != i && k != jx).map(|k| s[k]).product()
    };
    let g: Vec<f64> = (0..D).map(prod_except).collect();

    // principal (scale) block
    let mut scale = [0.0; 9];
    for i in 0..D {
        for k in 0..D {
            scale[i * D + k] = if i == k {
                2.0 * mu_v0 + lambda_v0 * g[i] * g[i]
            } else {
                lambda_v0 * g[i] * g[k] + lambda_v0 * (j - 1.0) * prod_except2(i, k)
            };
        }
    }
    if project {
        let mut q = [0.0; 9];
        jacobi_eigen(D, &mut scale[..D * D], &mut q[..D * D]);
        let mut eig = [0.0; 3];
        for (m, e) in eig[..D].iter_mut().enumerate() {
            *e = scale[m * D + m].max(0.0);
        }
        for k in 0..D {
            for l in 0..D {
                let mut acc = 0.0;
                for m in 0..D {
                    acc += q[k * D + m] * eig[m] * q[l * D + m];
                }
                scale[k * D + l] = acc;
            }
        }
    }

    // pair modes
    let mut flip = [[0.0; 3]; 3];
    let mut twist = [[0.0; 3]; 3];
    for i in 0..D {
        for k in (i + 1)..D {
            let mut lf = 2.0 * mu_v0 - lambda_v0 * (j - 1.0) * prod_except2(i, k);
            let psi_i = 2.0 * mu_v0 * (s[i] - 1.0) + lambda_v0 * (j - 1.0) * g[i];
            let psi_k = 2.0 * mu_v0 * (s[k] - 1.0) + lambda_v0 * (j - 1.0) * g[k];
            let den = s[i] + s[k];
            let mut lt = (psi_i + psi_k) / if den.abs() > EPS_J { den } else { EPS_J };
            if project {
                lf = lf.max(0.0);
                lt = lt.max(0.0);
            }
            flip[i][k] = lf;
            twist[i][k] = lt;
        }
    }

    // assemble columns by pushing each basis matrix through the frame
    let d2 = D * D;
    let mut buf = [0.0; 81];
    for kb in 0..D {
        for lb in 0..D {
            // dF_hat = U^T (e_kb e_lb^T) V
            let mut fh = SMatrix::<f64, D, D>::zeros();
            for a in 0..D {
                for b in 0..D {
                    fh[(a, b)] = svd.u[(kb, a)] * svd.v[(lb, b)];
                }
            }
            let mut ph = SMatrix::<f64, D, D>::zeros();
            for i in 0..D {
                let mut acc = 0.0;
                for k in 0..D {
                    acc += scale[i * D + k] * fh[(k, k)];
                }
                ph[(i, i)] = acc;
            }
            for i in 0..D {
                for k in (i + 1)..D {
                    let sym = 0.5 * (fh[(i, k)] + fh[(k, i)]);
                    let asym = 0.5 * (fh[(i, k)] - fh[(k, i)]);
                    ph[(i, k)] = flip[i][k] * sym + twist[i][k] * asym;
                    ph[(k, i)] = flip[i][k] * sym - twist[i][k] * asym;
                }
            }
            let dp = svd.u * ph * svd.v.transpose();
            for a in 0..D {
                for b in 0..D {
                    buf[(a * D + b) * d2 + (kb * D + lb)] = dp[(a, b)];
                }
            }
        }
    }
    buf
}
