//! Conservative splitting of particles into body sets and the matching
//! merge that pulls velocities back after the grid solve.
//!
//! A particle that owns surface samples is split into 2n+1 equal-mass
//! bodies: itself, its n samples, and n balance samples mirrored through
//! the particle so the set's center of mass stays exactly at the
//! particle. All bodies carry the owner's velocity and affine state and
//! splat about their own positions, which preserves linear and angular
//! momentum (including the APIC inertia term) to rounding.

use crate::kernels::{spline_stencil, GridGeometry};
use crate::state::{BalanceSample, GridState, Particle, ParticleGroup, SurfaceSample};
use crate::transfer::Body;
use crate::{Error, Result};
use nalgebra::SMatrix;

/// Equal share of the owner's mass across its 2n+1 bodies.
pub fn tilde_mass(m: f64, n_members: usize) -> f64 {
    m / (2 * n_members + 1) as f64
}

/// Groups samples by owner, ascending by owner index. Samples must have
/// owners assigned; particles without samples get no group.
pub fn form_groups<const D: usize>(samples: &[SurfaceSample<D>]) -> Vec<ParticleGroup> {
    let mut by_owner: Vec<(usize, usize)> =
        samples.iter().enumerate().map(|(j, s)| (s.owner, j)).collect();
    by_owner.sort_unstable();
    let mut groups: Vec<ParticleGroup> = Vec::new();
    for (owner, j) in by_owner {
        match groups.last_mut() {
            Some(g) if g.owner == owner => g.members.push(j),
            _ => groups.push(ParticleGroup { owner, members: vec![j] }),
        }
    }
    groups
}

/// Mirrors each sample through its owner: b = x_p + 2 (x_p - s), twice as
/// far on the opposite side, so sample and balance average to the owner.
/// A balance position with an invalid stencil is a hard error; the domain
/// must be enlarged rather than silently breaking conservation.
pub fn spawn_balance<const D: usize>(
    samples: &[SurfaceSample<D>],
    particles: &[Particle<D>],
    geom: &GridGeometry<D>,
) -> Result<Vec<BalanceSample<D>>> {
    samples
        .iter()
        .map(|s| {
            let xp = particles[s.owner].x;
            let b = xp * 2.0 - s.s;
            if !geom.stencil_valid(&b) {
                return Err(Error::OutOfDomain {
                    what: "balance sample (enlarge the grid so liquid stays clear of the boundary)"
                        .into(),
                    position: b.iter().copied().collect(),
                });
            }
            Ok(BalanceSample { b, owner: s.owner, m_tilde: 0.0 })
        })
        .collect()
}

/// Writes the equal mass share onto every sample and balance sample.
pub fn split_mass<const D: usize>(
    groups: &[ParticleGroup],
    particles: &[Particle<D>],
    samples: &mut [SurfaceSample<D>],
    balance: &mut [BalanceSample<D>],
) {
    for g in groups {
        let mt = tilde_mass(particles[g.owner].m, g.members.len());
        for &j in &g.members {
            samples[j].m_tilde = mt;
            balance[j].m_tilde = mt;
        }
    }
}

/// Assembles the full splat set: every particle (owners at their reduced
/// share, the rest at full mass), then samples, then balance samples, all
/// in index order so the scatter order is fixed.
pub fn build_bodies<const D: usize>(
    particles: &[Particle<D>],
    samples: &[SurfaceSample<D>],
    balance: &[BalanceSample<D>],
    groups: &[ParticleGroup],
) -> Vec<Body<D>> {
    let mut owner_mass: Vec<f64> = particles.iter().map(|p| p.m).collect();
    for g in groups {
        owner_mass[g.owner] = tilde_mass(particles[g.owner].m, g.members.len());
    }
    let mut bodies = Vec::with_capacity(particles.len() + 2 * samples.len());
    for (i, p) in particles.iter().enumerate() {
        bodies.push(Body { x: p.x, v: p.v, affine: p.affine, m: owner_mass[i] });
    }
    for s in samples {
        let o = &particles[s.owner];
        bodies.push(Body { x: s.s, v: o.v, affine: o.affine, m: s.m_tilde });
    }
    for b in balance {
        let o = &particles[b.owner];
        bodies.push(Body { x: b.b, v: o.v, affine: o.affine, m: b.m_tilde });
    }
    bodies
}

/// Gathers an owner's new velocity state from all of its bodies' stencils.
/// Each body contributes the momentum share m_tilde N_i(q) v_i; the owner
/// velocity is the total share over m_p and the affine matrix comes from
/// the share-weighted first moment about the owner.
pub fn merge_groups<const D: usize>(
    groups: &[ParticleGroup],
    particles: &mut [Particle<D>],
    samples: &[SurfaceSample<D>],
    balance: &[BalanceSample<D>],
    grid: &GridState<D>,
) -> Result<()> {
    let kappa = grid.geom.apic_d_inverse();
    for g in groups {
        let xp = particles[g.owner].x;
        let mp = particles[g.owner].m;
        let mt = tilde_mass(mp, g.members.len());
        let mut p_total = nalgebra::SVector::<f64, D>::zeros();
        let mut t = SMatrix::<f64, D, D>::zeros();
        let mut gather = |q: &nalgebra::SVector<f64, D>| -> Result<()> {
            let st = spline_stencil(&grid.geom, q)?;
            st.visit(&grid.geom, |lin, w, _| {
                let share = grid.vel[lin] * (mt * w);
                let xi = grid.geom.node_pos(grid.geom.unlinear(lin));
                p_total += share;
                t += share * (xi - xp).transpose();
            });
            Ok(())
        };
        gather(&xp)?;
        for &j in &g.members {
            gather(&samples[j].s)?;
            gather(&balance[j].b)?;
        }
        particles[g.owner].v = p_total / mp;
        particles[g.owner].affine = t * (kappa / mp);
    }
    Ok(())
}
