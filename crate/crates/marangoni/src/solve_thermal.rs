//! Implicit grid temperature update with particle-sampled diffusion and
//! Robin boundary terms at the surface samples, plus phase change and
//! temperature lookup of material coefficients.

use crate::kernels::{spline_stencil, GridGeometry};
use crate::state::{Interface, MaterialParams, Particle, Phase, SurfaceSample};
use crate::Result;
use nalgebra::SMatrix;

/// Matrix-free SPD heat operator on the thermally supported nodes:
/// A = capacity/dt + sum_p K V_p (dN_i . dN_j) + sum_r h |dA_r| Nc_i Nc_j,
/// where Nc are the sample's capacity-weighted interpolation weights.
pub struct ThermalSystem<const D: usize> {
    /// Dense index -> grid linear index.
    pub node_lin: Vec<usize>,
    /// Grid linear index -> dense index, or NO_NODE.
    pub node_of: Vec<u32>,
    /// Heat capacity sum_p c_p m_p N_i, divided by dt (the diagonal part).
    pub capacity_dt: Vec<f64>,
    pub rhs: Vec<f64>,
    diff_offsets: Vec<u32>,
    diff_ids: Vec<u32>,
    diff_grads: Vec<nalgebra::SVector<f64, D>>,
    diff_coeff: Vec<f64>,
    robin_offsets: Vec<u32>,
    robin_ids: Vec<u32>,
    robin_w: Vec<f64>,
    robin_coeff: Vec<f64>,
}

pub use crate::energy::NO_NODE;

impl<const D: usize> ThermalSystem<D> {
    pub fn n(&self) -> usize {
        self.node_lin.len()
    }

    /// out = A t.
    pub fn apply(&self, t: &[f64], out: &mut [f64]) {
        for i in 0..self.n() {
            out[i] = self.capacity_dt[i] * t[i];
        }
        for pt in 0..self.diff_coeff.len() {
            let lo = self.diff_offsets[pt] as usize;
            let hi = self.diff_offsets[pt + 1] as usize;
            let mut g = nalgebra::SVector::<f64, D>::zeros();
            for (id, gr) in self.diff_ids[lo..hi].iter().zip(&self.diff_grads[lo..hi]) {
                g += gr * t[*id as usize];
            }
            g *= self.diff_coeff[pt];
            for (id, gr) in self.diff_ids[lo..hi].iter().zip(&self.diff_grads[lo..hi]) {
                out[*id as usize] += g.dot(gr);
            }
        }
        for pt in 0..self.robin_coeff.len() {
            let lo = self.robin_offsets[pt] as usize;
            let hi = self.robin_offsets[pt + 1] as usize;
            let mut s = 0.0;
            for (id, w) in self.robin_ids[lo..hi].iter().zip(&self.robin_w[lo..hi]) {
                s += w * t[*id as usize];
            }
            s *= self.robin_coeff[pt];
            for (id, w) in self.robin_ids[lo..hi].iter().zip(&self.robin_w[lo..hi]) {
                out[*id as usize] += s * w;
            }
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = self.capacity_dt.clone();
        for pt in 0..self.diff_coeff.len() {
            let lo = self.diff_offsets[pt] as usize;
            let hi = self.diff_offsets[pt + 1] as usize;
            for (id, gr) in self.diff_ids[lo..hi].iter().zip(&self.diff_grads[lo..hi]) {
                d[*id as usize] += self.diff_coeff[pt] * gr.norm_squared();
            }
        }
        for pt in 0..self.robin_coeff.len() {
            let lo = self.robin_offsets[pt] as usize;
            let hi = self.robin_offsets[pt + 1] as usize;
            for (id, w) in self.robin_ids[lo..hi].iter().zip(&self.robin_w[lo..hi]) {
                d[*id as usize] += self.robin_coeff[pt] * w * w;
            }
        }
        d
    }
}

/// External heating evaluated by the scene at sample and particle
/// positions: ambient temperature and boundary flux per sample, volumetric
/// rate per particle. Lengths must match the sample/particle lists.
pub struct HeatSources<'a> {
    pub t_bar: &'a [f64],
    pub b: &'a [f64],
    pub h_vol: &'a [f64],
}

/// Builds the backward Euler heat system. The unknowns live on nodes that
/// carry interior thermal mass; `grid_temp` supplies T^n there. With
/// `literal_source_h` the volumetric source keeps its extra convective
/// factor h (off by default).
#[allow(clippy::too_many_arguments)]
pub fn assemble_heat_system<const D: usize>(
    particles: &[Particle<D>],
    materials: &[MaterialParams],
    samples: &[SurfaceSample<D>],
    sources: &HeatSources,
    geom: &GridGeometry<D>,
    grid_temp: &[f64],
    dt: f64,
    literal_source_h: bool,
) -> Result<ThermalSystem<D>> {
    assert_eq!(sources.t_bar.len(), samples.len());
    assert_eq!(sources.b.len(), samples.len());
    assert_eq!(sources.h_vol.len(), particles.len());

    // capacity pass defines the active set
    let mut cap = vec![0.0; geom.n_nodes()];
    for p in particles {
        let cp = materials[p.material].cp;
        let st = spline_stencil(geom, &p.x)?;
        st.visit(geom, |lin, w, _| cap[lin] += cp * p.m * w);
    }
    let mut node_of = vec![NO_NODE; geom.n_nodes()];
    let mut node_lin = Vec::new();
    for (lin, c) in cap.iter().enumerate() {
        if *c > 0.0 {
            node_of[lin] = node_lin.len() as u32;
            node_lin.push(lin);
        }
    }
    let n = node_lin.len();
    let mut sys = ThermalSystem {
        node_lin,
        node_of,
        capacity_dt: Vec::with_capacity(n),
        rhs: vec![0.0; n],
        diff_offsets: vec![0],
        diff_ids: Vec::new(),
        diff_grads: Vec::new(),
        diff_coeff: Vec::new(),
        robin_offsets: vec![0],
        robin_ids: Vec::new(),
        robin_w: Vec::new(),
        robin_coeff: Vec::new(),
    };
    for &lin in &sys.node_lin {
        sys.capacity_dt.push(cap[lin] / dt);
    }
    for (i, &lin) in sys.node_lin.iter().enumerate() {
        sys.rhs[i] = sys.capacity_dt[i] * grid_temp[lin];
    }

    for (p, h_vol) in particles.iter().zip(sources.h_vol) {
        let mat = &materials[p.material];
        let vol_n = p.j * p.vol0;
        let st = spline_stencil(geom, &p.x)?;
        if mat.kappa > 0.0 {
            st.visit(geom, |lin, _, grad| {
                // capacity comes from the same stencil, so an inactive node
                // here means this particle's weight (and hence gradient) is
                // exactly zero: a particle sitting on a cell-center line
                let id = sys.node_of[lin];
                if id == NO_NODE {
                    return;
                }
                sys.diff_ids.push(id);
                sys.diff_grads.push(grad);
            });
            sys.diff_offsets.push(sys.diff_ids.len() as u32);
            sys.diff_coeff.push(mat.kappa * vol_n);
        }
        if *h_vol != 0.0 {
            let scale = if literal_source_h { mat.h } else { 1.0 };
            st.visit(geom, |lin, w, _| {
                let id = sys.node_of[lin];
                if id == NO_NODE {
                    return;
                }
                sys.rhs[id as usize] += w * scale * h_vol * vol_n;
            });
        }
    }

    for ((s, t_bar), b_ext) in samples.iter().zip(sources.t_bar).zip(sources.b) {
        let mat = &materials[particles[s.owner].material];
        let b_total = mat.b + b_ext;
        if mat.h == 0.0 && b_total == 0.0 {
            continue;
        }
        let area = s.da.norm();
        let st = spline_stencil(geom, &s.s)?;
        // samples sit outside the particles, so their stencils are dominated
        // by fringe nodes holding almost no heat. Reading and draining the
        // nodes in proportion to capacity keeps the sample's surface
        // temperature a true mean of the nearby body (weights sum to one:
        // uniform T is stationary, conductance is exactly h |dA|) and bounds
        // the per-node extraction by the heat the node actually carries.
        let mut wc_sum = 0.0;
        st.visit(geom, |lin, w, _| wc_sum += w * cap[lin]);
        if wc_sum == 0.0 {
            continue; // degenerate: the sample sees no thermal mass at all
        }
        st.visit(geom, |lin, w, _| {
            let id = sys.node_of[lin];
            if id == NO_NODE {
                return;
            }
            let wn = w * cap[lin] / wc_sum;
            if mat.h > 0.0 {
                sys.robin_ids.push(id);
                sys.robin_w.push(wn);
            }
            sys.rhs[id as usize] += wn * (mat.h * t_bar + b_total) * area;
        });
        if mat.h > 0.0 {
            sys.robin_offsets.push(sys.robin_ids.len() as u32);
            sys.robin_coeff.push(mat.h * area);
        }
    }
    Ok(sys)
}

/// Jacobi-preconditioned CG from the initial guess `t` (T^n). Returns
/// (iterations, residual relative to the right-hand side). Measuring
/// against the right-hand side rather than the initial residual keeps a
/// good warm start from demanding extra digits below rounding.
pub fn solve_temperature<const D: usize>(
    sys: &ThermalSystem<D>,
    t: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> (usize, f64) {
    let n = sys.n();
    let inv_diag: Vec<f64> = sys.diag().iter().map(|d| 1.0 / d).collect();
    let mut r = vec![0.0; n];
    sys.apply(t, &mut r);
    for i in 0..n {
        r[i] = sys.rhs[i] - r[i];
    }
    let b_norm: f64 = sys.rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        for v in t.iter_mut() {
            *v = 0.0;
        }
        return (0, 0.0);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rho: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut q = vec![0.0; n];
    for it in 0..max_iters {
        let rn: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn <= tol * b_norm {
            return (it, rn / b_norm);
        }
        sys.apply(&p, &mut q);
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        if pq <= 0.0 {
            return (it, rn / b_norm);
        }
        let alpha = rho / pq;
        for i in 0..n {
            t[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rho_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rn: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    (max_iters, rn / b_norm)
}

/// Copies the solve result onto the grid and extends it to momentum-active
/// nodes that had no interior thermal support, each taking the value of
/// its nearest supported node (breadth-first over the node lattice).
/// Returns how many nodes needed the fallback.
pub fn scatter_temperature<const D: usize>(
    sys: &ThermalSystem<D>,
    t: &[f64],
    geom: &GridGeometry<D>,
    momentum_active: &[usize],
    grid_temp: &mut [f64],
) -> usize {
    for v in grid_temp.iter_mut() {
        *v = 0.0;
    }
    for (i, &lin) in sys.node_lin.iter().enumerate() {
        grid_temp[lin] = t[i];
    }
    let need: Vec<usize> = momentum_active
        .iter()
        .copied()
        .filter(|&lin| sys.node_of[lin] == NO_NODE)
        .collect();
    if need.is_empty() {
        return 0;
    }
    // multi-source BFS seeded from every supported node, in index order
    let mut assigned: Vec<bool> = sys.node_of.iter().map(|&id| id != NO_NODE).collect();
    let mut queue: std::collections::VecDeque<usize> = sys.node_lin.iter().copied().collect();
    let mut wanted: Vec<bool> = vec![false; geom.n_nodes()];
    let mut remaining = need.len();
    for &lin in &need {
        wanted[lin] = true;
    }
    while let Some(lin) = queue.pop_front() {
        if remaining == 0 {
            break;
        }
        let idx = geom.unlinear(lin);
        for a in 0..D {
            for dir in [-1isize, 1] {
                let mut nb = idx;
                let next = nb[a] as isize + dir;
                if next < 0 || next as usize >= geom.dims[a] {
                    continue;
                }
                nb[a] = next as usize;
                let nlin = geom.linear(nb);
                if !assigned[nlin] {
                    assigned[nlin] = true;
                    grid_temp[nlin] = grid_temp[lin];
                    if wanted[nlin] {
                        remaining -= 1;
                    }
                    queue.push_back(nlin);
                }
            }
        }
    }
    need.len()
}

/// Phase transitions with strict inequalities; crossing resets the strain
/// so the new phase starts unstressed.
pub fn apply_phase_change<const D: usize>(p: &mut Particle<D>, t_melt: f64) -> bool {
    match p.phase {
        Phase::Solid if p.t > t_melt => {
            p.phase = Phase::Liquid;
            p.j = 1.0;
            true
        }
        Phase::Liquid if p.t < t_melt => {
            p.phase = Phase::Solid;
            p.f = SMatrix::identity();
            p.j = 1.0;
            true
        }
        _ => false,
    }
}

/// Temperature-dependent coefficients for one material at a particle or
/// sample temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveCoeffs {
    pub lambda_liquid: f64,
    pub mu_liquid: f64,
    pub lambda_solid: f64,
    pub mu_solid: f64,
}

pub fn evaluate_material_coeffs(mat: &MaterialParams, t: f64) -> EffectiveCoeffs {
    EffectiveCoeffs {
        lambda_liquid: mat.lambda_liquid.eval(t),
        mu_liquid: mat.mu_liquid.eval(t),
        lambda_solid: mat.lambda_solid.eval(t),
        mu_solid: mat.mu_solid.eval(t),
    }
}

pub fn surface_coefficient(mat: &MaterialParams, interface: Interface, t: f64) -> f64 {
    mat.surface_tension.eval(interface, t)
}
