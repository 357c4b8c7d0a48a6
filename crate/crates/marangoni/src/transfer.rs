//! APIC particle-grid transfers for momentum and temperature, strain
//! updates, and particle advection.

use crate::kernels::{det, spline_stencil, GridGeometry};
use crate::state::{GridState, Particle, Phase};
use crate::{Result, EPS_J};
use nalgebra::{SMatrix, SVector};

/// One splat source: an interior particle, or a surface/balance sample
/// carrying its owner's velocity state at its own position.
#[derive(Debug, Clone)]
pub struct Body<const D: usize> {
    pub x: SVector<f64, D>,
    pub v: SVector<f64, D>,
    pub affine: SMatrix<f64, D, D>,
    pub m: f64,
}

/// Scatters mass and APIC momentum; `grid.vel` holds momentum until
/// [`GridState::normalize`]. Sequential over bodies so the accumulation
/// order (and hence every bit) is fixed.
pub fn p2g_mass_momentum<const D: usize>(
    bodies: &[Body<D>],
    grid: &mut GridState<D>,
) -> Result<()> {
    for b in bodies {
        let st = spline_stencil(&grid.geom, &b.x)?;
        st.visit(&grid.geom, |lin, w, _| {
            let xi = grid.geom.node_pos(grid.geom.unlinear(lin));
            grid.mass[lin] += b.m * w;
            grid.vel[lin] += (b.v + b.affine * (xi - b.x)) * (b.m * w);
        });
    }
    Ok(())
}

/// Mass-weighted temperature transfer from interior particles only, with
/// the particle's gradient extending the field to each node:
/// T_i = sum_p m_p N_i (T_p + (x_i - x_p) . grad T_p) / sum_p m_p N_i.
pub fn p2g_temperature<const D: usize>(
    particles: &[Particle<D>],
    grid: &mut GridState<D>,
) -> Result<()> {
    for p in particles {
        let st = spline_stencil(&grid.geom, &p.x)?;
        st.visit(&grid.geom, |lin, w, _| {
            let xi = grid.geom.node_pos(grid.geom.unlinear(lin));
            grid.t_mass[lin] += p.m * w;
            grid.temp[lin] += p.m * w * (p.t + (xi - p.x).dot(&p.grad_t));
        });
    }
    for i in 0..grid.temp.len() {
        if grid.t_mass[i] > 0.0 {
            grid.temp[i] /= grid.t_mass[i];
        } else {
            grid.temp[i] = 0.0;
        }
    }
    Ok(())
}

/// Standard APIC gather at a position: v = sum N_i v_i and
/// A = (4/dx^2) sum N_i v_i (x_i - x)^T.
pub fn g2p_velocity<const D: usize>(
    grid: &GridState<D>,
    x: &SVector<f64, D>,
) -> Result<(SVector<f64, D>, SMatrix<f64, D, D>)> {
    let st = spline_stencil(&grid.geom, x)?;
    let mut v = SVector::<f64, D>::zeros();
    let mut t = SMatrix::<f64, D, D>::zeros();
    st.visit(&grid.geom, |lin, w, _| {
        let xi = grid.geom.node_pos(grid.geom.unlinear(lin));
        v += grid.vel[lin] * w;
        t += (grid.vel[lin] * w) * (xi - x).transpose();
    });
    Ok((v, t * grid.geom.apic_d_inverse()))
}

/// Temperature and gradient gather: T = sum T_i N_i, grad T = sum T_i dN_i.
pub fn g2p_temperature<const D: usize>(
    grid: &GridState<D>,
    x: &SVector<f64, D>,
) -> Result<(f64, SVector<f64, D>)> {
    let st = spline_stencil(&grid.geom, x)?;
    let mut t = 0.0;
    let mut g = SVector::<f64, D>::zeros();
    st.visit(&grid.geom, |lin, w, grad| {
        t += grid.temp[lin] * w;
        g += grad * grid.temp[lin];
    });
    Ok((t, g))
}

/// Outcome counters for one particle's strain update / advection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StrainEvents {
    pub inverted: bool,
}

/// Updates strain from the post-solve grid velocities, evaluated through
/// the moved node positions y_i = x_i + dt v_i:
/// liquids J <- (1 + dt div v) J, solids F <- (I + dt grad v) F.
pub fn update_strain<const D: usize>(
    p: &mut Particle<D>,
    grid: &GridState<D>,
    dt: f64,
) -> Result<StrainEvents> {
    let st = spline_stencil(&grid.geom, &p.x)?;
    let mut grad_v = SMatrix::<f64, D, D>::zeros();
    st.visit(&grid.geom, |lin, _, grad| {
        grad_v += grid.vel[lin] * grad.transpose();
    });
    let mut ev = StrainEvents::default();
    match p.phase {
        Phase::Liquid => {
            let mut j = (1.0 + dt * grad_v.trace()) * p.j;
            if j <= 0.0 {
                j = EPS_J;
                ev.inverted = true;
            }
            p.j = j;
        }
        Phase::Solid => {
            p.f = (SMatrix::<f64, D, D>::identity() + grad_v * dt) * p.f;
            let d = det(&p.f);
            if d <= 0.0 {
                ev.inverted = true;
                p.j = EPS_J;
            } else {
                p.j = d;
            }
        }
    }
    Ok(ev)
}

/// Advances the position; a particle that would leave the valid interior
/// is projected back with its exiting normal velocity removed.
pub fn advect<const D: usize>(p: &mut Particle<D>, geom: &GridGeometry<D>, dt: f64) -> bool {
    p.x += p.v * dt;
    if geom.particle_interior(&p.x) {
        return false;
    }
    let (clamped_x, mask) = geom.clamp_to_interior(&p.x);
    p.x = clamped_x;
    for a in 0..D {
        if mask[a] {
            p.v[a] = 0.0;
        }
    }
    true
}
