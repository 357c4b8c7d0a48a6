//! Grid momentum update: explicit symplectic Euler or implicit backward
//! Euler (Newton with matrix-free preconditioned CG), collision handling,
//! and CFL time-step control.

use crate::energy::EnergyModel;
use crate::kernels::GridGeometry;
use crate::{Error, Result};
use nalgebra::SVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColliderKind {
    Sticky,
    Slip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ColliderShape {
    /// Solid fills the region behind the plane: sdf = (x - point) . normal.
    HalfSpace { point: Vec<f64>, normal: Vec<f64> },
    Sphere { center: Vec<f64>, radius: f64 },
    Ellipsoid { center: Vec<f64>, semi_axes: Vec<f64> },
    Cuboid { min: Vec<f64>, max: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Collider {
    pub shape: ColliderShape,
    pub kind: ColliderKind,
    /// Coulomb friction coefficient, used by slip colliders.
    #[serde(default)]
    pub friction: f64,
}

fn fixed<const D: usize>(v: &[f64]) -> Result<SVector<f64, D>> {
    if v.len() != D {
        return Err(Error::Scene(format!("expected {D} components, got {}", v.len())));
    }
    Ok(SVector::from_fn(|a, _| v[a]))
}

impl Collider {
    /// Signed distance, negative inside the solid.
    pub fn sdf<const D: usize>(&self, x: &SVector<f64, D>) -> f64 {
        match &self.shape {
            ColliderShape::HalfSpace { point, normal } => {
                let p = fixed::<D>(point).unwrap();
                let n = fixed::<D>(normal).unwrap().normalize();
                (x - p).dot(&n)
            }
            ColliderShape::Sphere { center, radius } => {
                (x - fixed::<D>(center).unwrap()).norm() - radius
            }
            ColliderShape::Ellipsoid { center, semi_axes } => {
                let c = fixed::<D>(center).unwrap();
                let a = fixed::<D>(semi_axes).unwrap();
                let q = (x - c).component_div(&a);
                let k0 = q.norm();
                let k1 = q.component_div(&a).norm();
                if k1 <= 1e-14 {
                    return -a.min();
                }
                k0 * (k0 - 1.0) / k1
            }
            ColliderShape::Cuboid { min, max } => {
                let lo = fixed::<D>(min).unwrap();
                let hi = fixed::<D>(max).unwrap();
                let mut outside2 = 0.0;
                let mut inside = f64::NEG_INFINITY;
                for a in 0..D {
                    let d = (lo[a] - x[a]).max(x[a] - hi[a]);
                    if d > 0.0 {
                        outside2 += d * d;
                    }
                    inside = inside.max(d);
                }
                if outside2 > 0.0 {
                    outside2.sqrt()
                } else {
                    inside
                }
            }
        }
    }

    /// Outward normal (out of the solid), by central differences on the sdf;
    /// exact shapes override where cheap.
    pub fn normal<const D: usize>(&self, x: &SVector<f64, D>) -> SVector<f64, D> {
        match &self.shape {
            ColliderShape::HalfSpace { normal, .. } => fixed::<D>(normal).unwrap().normalize(),
            ColliderShape::Sphere { center, .. } => {
                let d = x - fixed::<D>(center).unwrap();
                let n = d.norm();
                if n > 1e-14 {
                    d / n
                } else {
                    SVector::from_fn(|a, _| if a == 0 { 1.0 } else { 0.0 })
                }
            }
            _ => {
                let h = 1e-6;
                let mut g = SVector::<f64, D>::zeros();
                for a in 0..D {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[a] += h;
                    xm[a] -= h;
                    g[a] = (self.sdf(&xp) - self.sdf(&xm)) / (2.0 * h);
                }
                let n = g.norm();
                if n > 1e-14 {
                    g / n
                } else {
                    SVector::from_fn(|a, _| if a == 0 { 1.0 } else { 0.0 })
                }
            }
        }
    }

    pub fn validate<const D: usize>(&self) -> Result<()> {
        match &self.shape {
            ColliderShape::HalfSpace { point, normal } => {
                fixed::<D>(point)?;
                let n = fixed::<D>(normal)?;
                if n.norm() <= 1e-14 {
                    return Err(Error::Scene("half-space normal must be nonzero".into()));
                }
            }
            ColliderShape::Sphere { center, radius } => {
                fixed::<D>(center)?;
                if *radius <= 0.0 {
                    return Err(Error::Scene("sphere radius must be positive".into()));
                }
            }
            ColliderShape::Ellipsoid { center, semi_axes } => {
                fixed::<D>(center)?;
                let a = fixed::<D>(semi_axes)?;
                if a.min() <= 0.0 {
                    return Err(Error::Scene("ellipsoid semi-axes must be positive".into()));
                }
            }
            ColliderShape::Cuboid { min, max } => {
                let lo = fixed::<D>(min)?;
                let hi = fixed::<D>(max)?;
                if (0..D).any(|a| lo[a] >= hi[a]) {
                    return Err(Error::Scene("cuboid min must be below max".into()));
                }
            }
        }
        if self.friction < 0.0 {
            return Err(Error::Scene("friction must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Projects one velocity at a point inside a collider. Sticky pins the
/// node; slip removes the inward normal component and applies Coulomb
/// friction to the tangential remainder.
pub fn resolve_collision<const D: usize>(
    collider: &Collider,
    x: &SVector<f64, D>,
    v: &SVector<f64, D>,
) -> SVector<f64, D> {
    match collider.kind {
        ColliderKind::Sticky => SVector::zeros(),
        ColliderKind::Slip => {
            let n = collider.normal(x);
            let vn = v.dot(&n);
            if vn >= 0.0 {
                return *v;
            }
            let vt = v - vn * n;
            let speed_t = vt.norm();
            if speed_t <= 1e-300 {
                return SVector::zeros();
            }
            let scale = (1.0 - collider.friction * (-vn) / speed_t).max(0.0);
            vt * scale
        }
    }
}

/// Applies all colliders to the velocity at `x`. Order follows the scene
/// list; overlapping colliders compose left to right.
pub fn apply_collisions<const D: usize>(
    colliders: &[Collider],
    x: &SVector<f64, D>,
    v: &SVector<f64, D>,
) -> SVector<f64, D> {
    let mut out = *v;
    for c in colliders {
        if c.sdf(x) <= 0.0 {
            out = resolve_collision(c, x, &out);
        }
    }
    out
}

/// Per-node constraint for the implicit solve: sticky pins all components,
/// slip pins the normal direction.
#[derive(Debug, Clone)]
pub enum NodeConstraint<const D: usize> {
    Free,
    Pinned,
    SlipPlane { n: SVector<f64, D> },
}

pub fn node_constraint<const D: usize>(
    colliders: &[Collider],
    x: &SVector<f64, D>,
) -> NodeConstraint<D> {
    let mut plane: Option<SVector<f64, D>> = None;
    for c in colliders {
        if c.sdf(x) <= 0.0 {
            match c.kind {
                ColliderKind::Sticky => return NodeConstraint::Pinned,
                ColliderKind::Slip => match plane {
                    None => plane = Some(c.normal(x)),
                    // two independent slip planes act as a pin in 2D; in 3D
                    // this over-constrains slightly, which is safe
                    Some(p) if p.dot(&c.normal(x)).abs() < 0.999 => {
                        return NodeConstraint::Pinned
                    }
                    Some(_) => {}
                },
            }
        }
    }
    match plane {
        None => NodeConstraint::Free,
        Some(n) => NodeConstraint::SlipPlane { n },
    }
}

impl<const D: usize> NodeConstraint<D> {
    /// Removes constrained components from `u` (tangent space projection).
    #[inline]
    pub fn project(&self, u: &mut SVector<f64, D>) {
        match self {
            NodeConstraint::Free => {}
            NodeConstraint::Pinned => *u = SVector::zeros(),
            NodeConstraint::SlipPlane { n } => *u -= n.dot(u) * *n,
        }
    }
}

// ---------------------------------------------------------------------------
// solver settings and time-step control
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Newton stop: residual norm relative to the initial residual.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub krylov_tol: f64,
    pub krylov_max_iters: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub cfl_number: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            newton_tol: 1e-4,
            newton_max_iters: 20,
            krylov_tol: 1e-6,
            krylov_max_iters: 500,
            dt_min: 1e-8,
            dt_max: 1e-3,
            cfl_number: 0.5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let all_pos = self.newton_tol > 0.0
            && self.newton_max_iters > 0
            && self.krylov_tol > 0.0
            && self.krylov_max_iters > 0
            && self.dt_min > 0.0
            && self.dt_max > 0.0
            && self.cfl_number > 0.0;
        if !all_pos {
            return Err(Error::Scene("solver settings must be positive".into()));
        }
        if self.dt_min > self.dt_max {
            return Err(Error::Scene("dt_min must not exceed dt_max".into()));
        }
        Ok(())
    }
}

/// CFL time step from the fastest particle: clamp(cfl dx / max(eps, vmax))
/// into [dt_min, dt_max]. Frame-boundary capping is the driver's job.
pub fn compute_cfl_dt<const D: usize>(
    max_speed: f64,
    geom: &GridGeometry<D>,
    settings: &SolverSettings,
) -> f64 {
    let eps_v = 1e-12;
    let dt = settings.cfl_number * geom.dx / max_speed.max(eps_v);
    dt.clamp(settings.dt_min, settings.dt_max)
}

// ---------------------------------------------------------------------------
// grid velocity updates
// ---------------------------------------------------------------------------

/// Counters from one implicit solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub newton_iters: usize,
    pub krylov_iters: usize,
    pub initial_residual: f64,
    pub residual: f64,
}

/// Symplectic Euler: v <- v + dt g + (dt/m) (f^e(x) + f^visc(v)), then
/// collision resolution. Forces are evaluated at the start-of-step state.
pub fn explicit_step<const D: usize>(
    model: &EnergyModel<D>,
    mass: &[f64],
    pos: &[SVector<f64, D>],
    vel: &mut [SVector<f64, D>],
    gravity: &SVector<f64, D>,
    colliders: &[Collider],
    dt: f64,
) -> Result<()> {
    let n = mass.len();
    let zero = vec![SVector::<f64, D>::zeros(); n];
    let mut f = vec![SVector::<f64, D>::zeros(); n];
    model.force(&zero, &mut f)?;
    model.visc_force(vel, &mut f);
    for i in 0..n {
        let v = vel[i] + *gravity * dt + f[i] * (dt / mass[i]);
        vel[i] = apply_collisions(colliders, &pos[i], &v);
    }
    Ok(())
}

fn dot<const D: usize>(a: &[SVector<f64, D>], b: &[SVector<f64, D>]) -> f64 {
    // sequential: the reduction order must not depend on thread count
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn norm<const D: usize>(a: &[SVector<f64, D>]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned conjugate gradients on the projected system.
/// `apply` must already handle constraint projection; `x` starts at zero.
/// Returns (iterations, final relative residual).
fn pcg<const D: usize>(
    apply: &mut dyn FnMut(&[SVector<f64, D>], &mut [SVector<f64, D>]),
    inv_diag: &[SVector<f64, D>],
    b: &[SVector<f64, D>],
    x: &mut [SVector<f64, D>],
    tol: f64,
    max_iters: usize,
) -> (usize, f64) {
    let n = b.len();
    for xi in x.iter_mut() {
        *xi = SVector::zeros();
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return (0, 0.0);
    }
    let mut r = b.to_vec();
    let mut z: Vec<SVector<f64, D>> =
        r.iter().zip(inv_diag).map(|(ri, di)| ri.component_mul(di)).collect();
    let mut p = z.clone();
    let mut rho = dot(&r, &z);
    let mut q = vec![SVector::<f64, D>::zeros(); n];
    for it in 0..max_iters {
        let r_norm = norm(&r);
        if r_norm <= tol * b_norm {
            return (it, r_norm / b_norm);
        }
        for qi in q.iter_mut() {
            *qi = SVector::zeros();
        }
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            // numerically lost positive definiteness; stop with progress so far
            return (it, r_norm / b_norm);
        }
        let alpha = rho / pq;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= q[i] * alpha;
        }
        for i in 0..n {
            z[i] = r[i].component_mul(&inv_diag[i]);
        }
        let rho_next = dot(&r, &z);
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    (max_iters, norm(&r) / b_norm)
}

/// Incremental potential whose gradient in v is the backward Euler
/// residual: 1/2 sum_i m_i |v_i - v*_i|^2 + E(dt v) + dt/2 v^T B v.
/// `None` when the elastic energy is not evaluable there (a trial state
/// inverted a surface element); the line search treats that as uphill.
fn incremental_potential<const D: usize>(
    model: &EnergyModel<D>,
    mass: &[f64],
    v_star: &[SVector<f64, D>],
    v: &[SVector<f64, D>],
    dt: f64,
    du: &mut [SVector<f64, D>],
    bv: &mut [SVector<f64, D>],
) -> Option<f64> {
    for i in 0..mass.len() {
        du[i] = v[i] * dt;
    }
    let e = model.energy(du).ok()?;
    let mut quad = 0.0;
    for i in 0..mass.len() {
        quad += mass[i] * (v[i] - v_star[i]).norm_squared();
    }
    for o in bv.iter_mut() {
        *o = SVector::zeros();
    }
    model.visc_apply(v, bv);
    let visc: f64 = v.iter().zip(bv.iter()).map(|(a, b)| a.dot(b)).sum();
    Some(0.5 * quad + e + 0.5 * dt * visc)
}

/// Backward Euler: find v with M (v - v^n - dt g) = dt [f^e(x + dt v) +
/// f^visc(v)], by Newton on the residual with the PSD-projected energy
/// Hessian and a backtracking line search on the incremental potential
/// (the residual is its gradient, and the projected system makes every
/// Newton direction a descent direction). Nodes inside colliders are
/// constrained (sticky pins, slip keeps the tangent plane); collision
/// resolution shapes the initial guess and the converged result. `time`
/// only labels errors.
pub fn implicit_step<const D: usize>(
    model: &mut EnergyModel<D>,
    mass: &[f64],
    pos: &[SVector<f64, D>],
    vel: &mut [SVector<f64, D>],
    gravity: &SVector<f64, D>,
    colliders: &[Collider],
    dt: f64,
    settings: &SolverSettings,
    time: f64,
) -> Result<SolveStats> {
    let n = mass.len();
    let constraints: Vec<NodeConstraint<D>> =
        pos.iter().map(|x| node_constraint(colliders, x)).collect();
    let v_star: Vec<SVector<f64, D>> = vel.iter().map(|v| v + gravity * dt).collect();
    let mut v: Vec<SVector<f64, D>> = v_star
        .iter()
        .zip(pos)
        .map(|(vs, x)| apply_collisions(colliders, x, vs))
        .collect();

    let mut stats = SolveStats::default();
    let mut du = vec![SVector::<f64, D>::zeros(); n];
    let mut residual = vec![SVector::<f64, D>::zeros(); n];
    let mut delta = vec![SVector::<f64, D>::zeros(); n];
    let mut scratch = vec![SVector::<f64, D>::zeros(); n];
    let mut trial = vec![SVector::<f64, D>::zeros(); n];
    let mut trust = vec![0.0f64; n];
    let mut target = 0.0;
    // Levenberg-Marquardt damping, relative to the system diagonal so it is
    // meaningful across the very uneven node masses. Raised when a step has
    // to be shortened (the local model went stale before the step ended),
    // lowered when full steps succeed; near the solution it vanishes and
    // plain Newton's quadratic tail takes over.
    let mut mu = 1e-3;

    // At large dt even the warm start can carry surface elements past
    // inversion; pull it toward rest until the energy exists (du = 0
    // always does).
    let mut phi = incremental_potential(model, mass, &v_star, &v, dt, &mut du, &mut scratch);
    for _ in 0..60 {
        if phi.is_some() {
            break;
        }
        for vi in v.iter_mut() {
            *vi *= 0.5;
        }
        phi = incremental_potential(model, mass, &v_star, &v, dt, &mut du, &mut scratch);
    }
    let Some(mut phi) = phi else {
        return Err(Error::SolveFailed {
            time,
            reason: "no evaluable starting state for the implicit solve".into(),
        });
    };

    for newton in 0..=settings.newton_max_iters {
        for i in 0..n {
            du[i] = v[i] * dt;
        }
        for r in residual.iter_mut() {
            *r = SVector::zeros();
        }
        model.force(&du, &mut residual)?;
        model.visc_force(&v, &mut residual);
        for i in 0..n {
            // residual = M (v - v*) - dt f, projected onto free directions
            residual[i] = (v[i] - v_star[i]) * mass[i] - residual[i] * dt;
            constraints[i].project(&mut residual[i]);
        }
        let r_norm = norm(&residual);
        if newton == 0 {
            stats.initial_residual = r_norm;
            target = settings.newton_tol * r_norm;
        }
        stats.residual = r_norm;
        stats.newton_iters = newton;
        if r_norm <= target || r_norm == 0.0 {
            for i in 0..n {
                vel[i] = apply_collisions(colliders, &pos[i], &v[i]);
            }
            return Ok(stats);
        }
        if newton == settings.newton_max_iters {
            break;
        }

        model.refresh_hessian(&du, true)?;
        let mut diag = vec![SVector::<f64, D>::zeros(); n];
        model.add_diag(dt * dt, dt, &mut diag);
        let inv_diag: Vec<SVector<f64, D>> = diag
            .iter()
            .zip(mass)
            .zip(&constraints)
            .map(|((d, m), c)| match c {
                NodeConstraint::Pinned => SVector::from_element(1.0),
                _ => SVector::from_fn(|a, _| 1.0 / (m + d[a])),
            })
            .collect();
        let damp: Vec<SVector<f64, D>> = diag
            .iter()
            .zip(mass)
            .map(|(d, m)| SVector::from_fn(|a, _| mu * (m + d[a])))
            .collect();
        let mut apply = |w: &[SVector<f64, D>], out: &mut [SVector<f64, D>]| {
            let mut pw = w.to_vec();
            for i in 0..n {
                constraints[i].project(&mut pw[i]);
            }
            model.hessian_apply(&pw, out);
            for o in out.iter_mut() {
                *o *= dt * dt;
            }
            let mut bw = vec![SVector::<f64, D>::zeros(); n];
            model.visc_apply(&pw, &mut bw);
            for i in 0..n {
                out[i] += bw[i] * dt + pw[i] * mass[i] + pw[i].component_mul(&damp[i]);
                constraints[i].project(&mut out[i]);
                // identity on the constrained complement keeps the system SPD
                out[i] += w[i] - pw[i];
            }
        };
        let rhs: Vec<SVector<f64, D>> = residual.iter().map(|r| -r).collect();
        let (iters, _) = pcg(
            &mut apply,
            &inv_diag,
            &rhs,
            &mut delta,
            settings.krylov_tol,
            settings.krylov_max_iters,
        );
        stats.krylov_iters += iters;
        for i in 0..n {
            constraints[i].project(&mut delta[i]);
        }
        // Cap each node's step to keep every surface element it covers on
        // its current side of collapse. Crossing flips the sign of the
        // element's restoring force, and a Newton model extrapolated across
        // the flip oscillates between the two branches instead of settling
        // into the narrow smoothed valley between them.
        model.surface_trust(&du, &mut trust);
        for i in 0..n {
            let cap = 0.9 * trust[i] / dt;
            let dn = delta[i].norm();
            if dn > cap {
                delta[i] *= cap / dn;
            }
        }
        let mut slope: f64 = residual.iter().zip(&delta).map(|(r, d)| r.dot(d)).sum();
        if slope >= 0.0 {
            // per-node capping is not a positive scaling of the whole
            // direction, so descent can be lost; preconditioned steepest
            // descent survives any per-node positive rescaling
            for i in 0..n {
                delta[i] = -residual[i].component_mul(&inv_diag[i]);
                constraints[i].project(&mut delta[i]);
                let cap = 0.9 * trust[i] / dt;
                let dn = delta[i].norm();
                if dn > cap {
                    delta[i] *= cap / dn;
                }
            }
            slope = residual.iter().zip(&delta).map(|(r, d)| r.dot(d)).sum();
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..n {
                trial[i] = v[i] + delta[i] * alpha;
            }
            if let Some(phi_trial) =
                incremental_potential(model, mass, &v_star, &trial, dt, &mut du, &mut scratch)
            {
                // slack keeps rounding noise near convergence from
                // starving a full step
                let slack = 1e-12 * (phi.abs() + phi_trial.abs());
                if phi_trial <= phi + 1e-4 * alpha * slope + slack {
                    std::mem::swap(&mut v, &mut trial);
                    phi = phi_trial;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if accepted {
            if alpha >= 0.9 {
                mu = (mu / 3.0).max(1e-10);
            } else if alpha <= 0.25 {
                mu = (mu * 4.0).min(1e10);
            }
        } else {
            mu = (mu * 16.0).min(1e10);
        }
        if std::env::var_os("MARANGONI_NEWTON_TRACE").is_some() {
            for i in 0..n {
                du[i] = v[i] * dt;
            }
            eprintln!(
                "newton={newton} r={:.3e} phi={phi:.9e} slope={slope:.3e} |d|={:.3e} alpha={:.3e} mu={mu:.1e} minA={:.3e} ok={accepted}",
                stats.residual,
                norm(&delta),
                alpha,
                model.min_area_ratio(&du)
            );
            if newton == 60 {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| residual[b].norm().total_cmp(&residual[a].norm()));
                for &i in idx.iter().take(12) {
                    eprintln!(
                        "  node {i} pos={:?} m={:.3e} |r|={:.3e} |d|={:.3e} |v|={:.3e} trust={:.3e}",
                        pos[i],
                        mass[i],
                        residual[i].norm(),
                        delta[i].norm(),
                        v[i].norm(),
                        trust[i]
                    );
                }
            }
        }
    }
    Err(Error::SolveFailed {
        time,
        reason: format!(
            "newton stalled after {} iterations, residual {:.3e} of {:.3e}",
            settings.newton_max_iters, stats.residual, stats.initial_residual
        ),
    })
}


#[cfg(test)]
mod solver_tests {
    use super::*;
    use crate::kernels::cross_embed;
    use crate::rng::stream;
    use nalgebra::{Matrix2, Vector2};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> GridGeometry<2> {
        GridGeometry::new(Vector2::zeros(), 1.0 / 24.0, [24, 24])
    }

    struct Setup {
        model: EnergyModel<2>,
        mass: Vec<f64>,
        pos: Vec<Vector2<f64>>,
        vel: Vec<Vector2<f64>>,
    }

    /// All grid nodes active with unit mass, a few random quadrature
    /// points, smooth random initial velocities.
    fn mixed_setup(rng: &mut ChaCha8Rng, with_visc: bool) -> Setup {
        let g = geom();
        let node_of: Vec<u32> = (0..g.n_nodes() as u32).collect();
        let mut model = EnergyModel::new(g.n_nodes(), false);
        let pos_rand =
            |rng: &mut ChaCha8Rng| Vector2::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        for _ in 0..6 {
            model
                .add_pressure(&g, &node_of, &pos_rand(rng), 4.0, 1.0, rng.gen_range(0.85..1.15))
                .unwrap();
            let f_n = Matrix2::identity() + Matrix2::from_fn(|_, _| rng.gen_range(-0.15..0.15));
            model.add_corotated(&g, &node_of, &pos_rand(rng), 1.0, 2.0, 1.0, &f_n).unwrap();
            let a = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 0.02;
            model.add_surface(&g, &node_of, &pos_rand(rng), 0.5, &a).unwrap();
            if with_visc {
                model.add_viscosity(&g, &node_of, &pos_rand(rng), 0.2, 1.0).unwrap();
            }
        }
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        let vel: Vec<Vector2<f64>> = pos
            .iter()
            .map(|x| {
                Vector2::new(
                    (x.x * 7.0).sin() * (x.y * 5.0).cos(),
                    (x.x * 4.0).cos() * (x.y * 6.0).sin(),
                ) * 0.3
            })
            .collect();
        Setup { model, mass: vec![1.0; g.n_nodes()], pos, vel }
    }

    #[test]
    fn no_forces_gives_free_fall_in_zero_iterations() {
        let g = geom();
        let mut model = EnergyModel::<2>::new(g.n_nodes(), false);
        let mass = vec![1.0; g.n_nodes()];
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        let v0: Vec<Vector2<f64>> = (0..g.n_nodes())
            .map(|i| Vector2::new(i as f64 * 1e-3, -(i as f64) * 2e-3))
            .collect();
        let mut vel = v0.clone();
        let gvec = Vector2::new(0.0, -9.8);
        let dt = 1e-3;
        let stats = implicit_step(
            &mut model,
            &mass,
            &pos,
            &mut vel,
            &gvec,
            &[],
            dt,
            &SolverSettings::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(stats.newton_iters, 0);
        for i in 0..vel.len() {
            assert!((vel[i] - (v0[i] + gvec * dt)).norm() < 1e-15);
        }
    }

    #[test]
    fn implicit_matches_explicit_to_second_order() {
        let mut rng = stream(501, &[]);
        let setup = mixed_setup(&mut rng, true);
        let settings = SolverSettings {
            newton_tol: 1e-10,
            krylov_tol: 1e-12,
            krylov_max_iters: 4000,
            ..Default::default()
        };
        let gvec = Vector2::new(0.0, -1.0);
        let mut errs = Vec::new();
        for &dt in &[4e-4, 2e-4, 1e-4] {
            let mut v_exp = setup.vel.clone();
            explicit_step(&setup.model, &setup.mass, &setup.pos, &mut v_exp, &gvec, &[], dt)
                .unwrap();
            let mut v_imp = setup.vel.clone();
            let mut model = mixed_setup(&mut stream(501, &[]), true).model;
            implicit_step(
                &mut model, &setup.mass, &setup.pos, &mut v_imp, &gvec, &[], dt, &settings, 0.0,
            )
            .unwrap();
            let err: f64 = v_exp
                .iter()
                .zip(&v_imp)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!(
                (slope - 2.0).abs() < 0.35,
                "implicit and explicit should differ at O(dt^2), slope {slope}, errs {errs:?}"
            );
        }
    }

    fn momenta(s: &Setup) -> (Vector2<f64>, f64) {
        let p = s.vel.iter().zip(&s.mass).map(|(v, m)| v * *m).sum();
        let l = s
            .vel
            .iter()
            .zip(&s.mass)
            .zip(&s.pos)
            .map(|((v, m), x)| *m * cross_embed(x, v).z)
            .sum();
        (p, l)
    }

    #[test]
    fn explicit_step_conserves_momentum_and_angular_momentum() {
        // internal forces at the start-of-step state have zero sum and zero
        // torque about the origin, so the explicit update is exact
        let mut rng = stream(517, &[]);
        for trial in 0..5 {
            let mut setup = mixed_setup(&mut rng, trial % 2 == 0);
            let (p0, l0) = momenta(&setup);
            explicit_step(
                &setup.model,
                &setup.mass,
                &setup.pos,
                &mut setup.vel,
                &Vector2::zeros(),
                &[],
                5e-4,
            )
            .unwrap();
            let (p1, l1) = momenta(&setup);
            let m_total: f64 = setup.mass.iter().sum();
            assert!((p1 - p0).norm() <= 1e-12 * m_total);
            assert!(
                (l1 - l0).abs() <= 1e-10 * m_total,
                "explicit forces exerted a net torque: {}",
                l1 - l0
            );
        }
    }

    #[test]
    fn implicit_momentum_exact_angular_momentum_second_order() {
        // backward Euler evaluates forces at the moved nodes, so the torque
        // about the fixed node positions is O(dt) and the angular momentum
        // error per step is O(dt^2); linear momentum stays exact
        let settings = SolverSettings {
            newton_tol: 1e-11,
            krylov_tol: 1e-13,
            krylov_max_iters: 8000,
            ..Default::default()
        };
        let mut drifts = Vec::new();
        for &dt in &[8e-4, 4e-4, 2e-4] {
            let mut setup = mixed_setup(&mut stream(531, &[]), false);
            let (p0, l0) = momenta(&setup);
            implicit_step(
                &mut setup.model,
                &setup.mass,
                &setup.pos,
                &mut setup.vel,
                &Vector2::zeros(),
                &[],
                dt,
                &settings,
                0.0,
            )
            .unwrap();
            let (p1, l1) = momenta(&setup);
            let m_total: f64 = setup.mass.iter().sum();
            assert!(
                (p1 - p0).norm() <= 1e-10 * m_total,
                "implicit solve changed linear momentum by {:?}",
                p1 - p0
            );
            drifts.push((l1 - l0).abs());
        }
        for w in drifts.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!(
                slope > 1.5,
                "angular momentum drift should vanish at O(dt^2): slope {slope}, drifts {drifts:?}"
            );
        }
    }

    #[test]
    fn gravity_adds_exactly_mdtg() {
        let mut rng = stream(523, &[]);
        let mut setup = mixed_setup(&mut rng, false);
        let gvec = Vector2::new(0.3, -9.8);
        let dt = 5e-4;
        let p0: Vector2<f64> = setup.vel.iter().zip(&setup.mass).map(|(v, m)| v * *m).sum();
        implicit_step(
            &mut setup.model,
            &setup.mass,
            &setup.pos,
            &mut setup.vel,
            &gvec,
            &[],
            dt,
            &SolverSettings { newton_tol: 1e-9, ..Default::default() },
            0.0,
        )
        .unwrap();
        let p1: Vector2<f64> = setup.vel.iter().zip(&setup.mass).map(|(v, m)| v * *m).sum();
        let m_total: f64 = setup.mass.iter().sum();
        let expect = p0 + gvec * (dt * m_total);
        assert!((p1 - expect).norm() <= 1e-10 * m_total * gvec.norm() * dt.max(1.0));
    }

    #[test]
    fn convex_pressure_solve_needs_one_newton_step() {
        // pressure energy is a convex quadratic in the displacements, so
        // Newton lands on the minimizer in a single linear solve
        let g = geom();
        let node_of: Vec<u32> = (0..g.n_nodes() as u32).collect();
        let mut model = EnergyModel::new(g.n_nodes(), false);
        let mut rng = stream(41, &[]);
        for _ in 0..10 {
            let x = Vector2::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
            model.add_pressure(&g, &node_of, &x, 50.0, 1.0, rng.gen_range(0.8..0.9)).unwrap();
        }
        let mass = vec![1.0; g.n_nodes()];
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        let mut vel = vec![Vector2::zeros(); g.n_nodes()];
        let settings = SolverSettings {
            newton_tol: 1e-6,
            krylov_tol: 1e-10,
            krylov_max_iters: 4000,
            ..Default::default()
        };
        let e0 = model.energy(&vec![Vector2::zeros(); g.n_nodes()]).unwrap();
        let dt = 1e-3;
        let stats =
            implicit_step(&mut model, &mass, &pos, &mut vel, &Vector2::zeros(), &[], dt, &settings, 0.0)
                .unwrap();
        assert!(stats.newton_iters <= 2, "quadratic problem took {} iterations", stats.newton_iters);
        // implicit Euler dissipates: kinetic energy is bounded by the
        // stored energy it released
        let ke: f64 = vel.iter().map(|v| 0.5 * v.norm_squared()).sum();
        let du: Vec<Vector2<f64>> = vel.iter().map(|v| v * dt).collect();
        let e1 = model.energy(&du).unwrap();
        assert!(ke <= (e0 - e1) * (1.0 + 1e-6) + 1e-12, "ke {ke} vs released {}", e0 - e1);
    }

    #[test]
    fn stiff_compression_stays_bounded_far_beyond_the_explicit_limit() {
        let g = geom();
        let node_of: Vec<u32> = (0..g.n_nodes() as u32).collect();
        let lambda = 1e5;
        let build = || {
            let mut m = EnergyModel::new(g.n_nodes(), false);
            for k in 0..5 {
                let x = Vector2::new(0.4 + 0.05 * k as f64, 0.5);
                m.add_pressure(&g, &node_of, &x, lambda, 1.0, 0.7).unwrap();
            }
            m
        };
        let mass = vec![1.0; g.n_nodes()];
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        // sound-speed limit for the explicit update is ~dx/c; exceed it 100x
        let c = lambda.sqrt();
        let dt = 100.0 * g.dx / c;
        let mut vel = vec![Vector2::zeros(); g.n_nodes()];
        let mut model = build();
        let settings = SolverSettings {
            newton_tol: 1e-8,
            krylov_tol: 1e-10,
            krylov_max_iters: 8000,
            dt_max: 1.0,
            ..Default::default()
        };
        let stats =
            implicit_step(&mut model, &mass, &pos, &mut vel, &Vector2::zeros(), &[], dt, &settings, 0.0)
                .unwrap();
        let vmax = vel.iter().map(|v| v.norm()).fold(0.0, f64::max);
        // energy bound: (1/2) m v^2 <= stored energy
        let e0 = 0.5 * lambda * (0.7f64 - 1.0).powi(2) * 5.0;
        let ke: f64 = vel.iter().map(|v| 0.5 * v.norm_squared()).sum();
        assert!(ke <= e0 * (1.0 + 1e-6), "implicit blow-up: ke {ke} > stored {e0}");
        assert!(vmax.is_finite());
        assert!(stats.residual <= settings.newton_tol * stats.initial_residual);

        // the same step taken explicitly overshoots: velocities exceed the
        // energy bound by a wide margin
        let model_e = build();
        let mut vel_e = vec![Vector2::zeros(); g.n_nodes()];
        explicit_step(&model_e, &mass, &pos, &mut vel_e, &Vector2::zeros(), &[], dt).unwrap();
        let ke_e: f64 = vel_e.iter().map(|v| 0.5 * v.norm_squared()).sum();
        assert!(ke_e > 10.0 * e0, "explicit step unexpectedly stable: {ke_e} vs {e0}");
    }

    #[test]
    fn sticky_and_slip_constraints_hold_in_the_solve() {
        let g = geom();
        let node_of: Vec<u32> = (0..g.n_nodes() as u32).collect();
        let floor_y = 0.2;
        let floor = Collider {
            shape: ColliderShape::HalfSpace { point: vec![0.0, floor_y], normal: vec![0.0, 1.0] },
            kind: ColliderKind::Slip,
            friction: 0.0,
        };
        let mut model = EnergyModel::new(g.n_nodes(), false);
        model.add_pressure(&g, &node_of, &Vector2::new(0.5, 0.24), 10.0, 1.0, 0.9).unwrap();
        let mass = vec![1.0; g.n_nodes()];
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        let mut vel = vec![Vector2::new(0.4, -0.3); g.n_nodes()];
        let gvec = Vector2::new(0.0, -9.8);
        let dt = 1e-3;
        implicit_step(
            &mut model,
            &mass,
            &pos,
            &mut vel,
            &gvec,
            &[floor.clone()],
            dt,
            &SolverSettings::default(),
            0.0,
        )
        .unwrap();
        for i in 0..pos.len() {
            if floor.sdf(&pos[i]) <= 0.0 {
                assert!(vel[i].y.abs() < 1e-12, "slip node kept a normal velocity");
                // outside the pressure stencil no tangential force acts
                if (pos[i].x - 0.5).abs() > 0.15 {
                    assert!((vel[i].x - 0.4).abs() < 1e-9, "tangential velocity should persist");
                }
            }
        }
        // sticky floor pins everything inside
        let sticky = Collider {
            shape: ColliderShape::HalfSpace { point: vec![0.0, floor_y], normal: vec![0.0, 1.0] },
            kind: ColliderKind::Sticky,
            friction: 0.0,
        };
        let mut model2 = EnergyModel::new(g.n_nodes(), false);
        model2.add_pressure(&g, &node_of, &Vector2::new(0.5, 0.24), 10.0, 1.0, 0.9).unwrap();
        let mut vel2 = vec![Vector2::new(0.4, -0.3); g.n_nodes()];
        implicit_step(
            &mut model2,
            &mass,
            &pos,
            &mut vel2,
            &gvec,
            &[sticky.clone()],
            dt,
            &SolverSettings::default(),
            0.0,
        )
        .unwrap();
        for i in 0..pos.len() {
            if sticky.sdf(&pos[i]) <= 0.0 {
                assert!(vel2[i].norm() < 1e-12);
            }
        }
    }

    #[test]
    fn explicit_free_fall_identity() {
        let g = geom();
        let model = EnergyModel::<2>::new(g.n_nodes(), false);
        let mass = vec![2.0; g.n_nodes()];
        let pos: Vec<Vector2<f64>> = (0..g.n_nodes()).map(|i| g.node_pos(g.unlinear(i))).collect();
        let mut vel = vec![Vector2::new(0.1, 0.2); g.n_nodes()];
        let gvec = Vector2::new(0.0, -9.8);
        explicit_step(&model, &mass, &pos, &mut vel, &gvec, &[], 1e-2).unwrap();
        for v in &vel {
            assert!((v - (Vector2::new(0.1, 0.2) + gvec * 1e-2)).norm() < 1e-15);
        }
    }
}
