//! Per-step boundary reconstruction: union-of-spheres level set, isocontour
//! extraction (marching squares / cubes), Poisson-disk quadrature sampling
//! with area-weighted normals, and interface classification.
//!
//! The level set is sampled on the simulation grid itself. Particle radii
//! (0.73 dx in 2D, 0.867 dx in 3D) exceed half the node-lattice diagonal,
//! so even a single isolated particle produces a nonempty isocontour.

use crate::kernels::GridGeometry;
use crate::mc_tables::{EDGE_CORNERS, TRI_TABLE};
use crate::rng::{stream, STREAM_SAMPLING};
use crate::solve_momentum::Collider;
use crate::state::{CellBins, Interface, SurfaceSample};
use crate::{Error, Result};
use nalgebra::{SVector, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::HashMap;

/// Level-set radius around each interior particle.
pub fn particle_radius(dx: f64, d: usize) -> f64 {
    match d {
        2 => 0.73 * dx,
        3 => 0.867 * dx,
        _ => unreachable!(),
    }
}

/// Node-sampled scalar field; negative inside the liquid.
#[derive(Debug, Clone)]
pub struct LevelSetField<const D: usize> {
    pub geom: GridGeometry<D>,
    pub phi: Vec<f64>,
}

impl<const D: usize> LevelSetField<D> {
    /// Samples an analytic field at the nodes (tests and diagnostics).
    pub fn from_fn(geom: GridGeometry<D>, f: impl Fn(&SVector<f64, D>) -> f64) -> Self {
        let phi = (0..geom.n_nodes())
            .map(|lin| f(&geom.node_pos(geom.unlinear(lin))))
            .collect();
        Self { geom, phi }
    }

    /// Multilinear interpolation between nodes.
    pub fn interp(&self, x: &SVector<f64, D>) -> f64 {
        let (base, frac) = self.cell_coords(x);
        let mut out = 0.0;
        for corner in 0..(1usize << D) {
            let mut w = 1.0;
            let mut idx = [0usize; D];
            for a in 0..D {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx[a] = base[a] + bit;
            }
            out += w * self.phi[self.geom.linear(idx)];
        }
        out
    }

    /// Gradient of the multilinear interpolant.
    pub fn grad(&self, x: &SVector<f64, D>) -> SVector<f64, D> {
        let (base, frac) = self.cell_coords(x);
        let mut g = SVector::<f64, D>::zeros();
        for corner in 0..(1usize << D) {
            let mut idx = [0usize; D];
            for a in 0..D {
                idx[a] = base[a] + ((corner >> a) & 1);
            }
            let v = self.phi[self.geom.linear(idx)];
            for a in 0..D {
                let mut w = 1.0 / self.geom.dx;
                for b in 0..D {
                    let bit = (corner >> b) & 1;
                    if b == a {
                        w *= if bit == 1 { 1.0 } else { -1.0 };
                    } else {
                        w *= if bit == 1 { frac[b] } else { 1.0 - frac[b] };
                    }
                }
                g[a] += w * v;
            }
        }
        g
    }

    fn cell_coords(&self, x: &SVector<f64, D>) -> ([usize; D], SVector<f64, D>) {
        let u = self.geom.normalized(x);
        let mut base = [0usize; D];
        let mut frac = SVector::<f64, D>::zeros();
        for a in 0..D {
            let b = u[a].floor().clamp(0.0, (self.geom.dims[a] - 2) as f64);
            base[a] = b as usize;
            frac[a] = u[a] - b;
        }
        (base, frac)
    }
}

/// Exact union-of-spheres distance at grid nodes, evaluated in a narrow
/// band (nodes within r + dx sqrt(d) of a particle); everything else gets a
/// positive background value. No smoothing, no shifting.
pub fn build_level_set<const D: usize>(
    positions: &[SVector<f64, D>],
    geom: &GridGeometry<D>,
) -> LevelSetField<D> {
    let r = particle_radius(geom.dx, D);
    let band = r + geom.dx * (D as f64).sqrt();
    let background = band;
    let mut phi = vec![background; geom.n_nodes()];
    let reach = (band / geom.dx).ceil() as i64;
    for p in positions {
        let u = geom.normalized(p);
        let mut lo = [0usize; D];
        let mut hi = [0usize; D];
        for a in 0..D {
            lo[a] = (u[a].ceil() as i64 - reach).max(0) as usize;
            hi[a] = ((u[a].floor() as i64 + reach).max(0) as usize).min(geom.dims[a] - 1);
        }
        let mut idx = lo;
        'cells: loop {
            let xi = geom.node_pos(idx);
            let d = (xi - p).norm() - r;
            let lin = geom.linear(idx);
            if d < phi[lin] {
                phi[lin] = d;
            }
            for a in 0..D {
                idx[a] += 1;
                if idx[a] <= hi[a] {
                    continue 'cells;
                }
                idx[a] = lo[a];
                if a == D - 1 {
                    break 'cells;
                }
            }
        }
    }
    LevelSetField { geom: geom.clone(), phi }
}

/// Zero-isocontour mesh: segments in 2D, triangles in 3D, with per-element
/// outward normal (toward phi > 0) and measure.
#[derive(Debug, Clone)]
pub struct IsoMesh<const D: usize> {
    pub verts: Vec<SVector<f64, D>>,
    pub elems: Vec<[u32; D]>,
    pub normal: Vec<SVector<f64, D>>,
    pub measure: Vec<f64>,
    pub skipped_degenerate: usize,
}

impl<const D: usize> IsoMesh<D> {
    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn total_measure(&self) -> f64 {
        self.measure.iter().sum()
    }
}

pub fn extract_isocontour<const D: usize>(field: &LevelSetField<D>) -> Result<IsoMesh<D>> {
    if field.phi.iter().all(|&v| v < 0.0) {
        return Err(Error::Scene(
            "level set negative everywhere: liquid fills the domain".into(),
        ));
    }
    let mut mesh = IsoMesh {
        verts: Vec::new(),
        elems: Vec::new(),
        normal: Vec::new(),
        measure: Vec::new(),
        skipped_degenerate: 0,
    };
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    match D {
        2 => marching_squares(field, &mut mesh, &mut edge_vertex),
        3 => marching_cubes(field, &mut mesh, &mut edge_vertex),
        _ => unreachable!(),
    }
    Ok(mesh)
}

/// Interpolated crossing vertex on the grid edge (a, b), deduplicated by
/// the node-pair key so neighboring cells share vertices exactly.
fn edge_crossing<const D: usize>(
    field: &LevelSetField<D>,
    mesh: &mut IsoMesh<D>,
    edge_vertex: &mut HashMap<(usize, usize), u32>,
    a: [usize; D],
    b: [usize; D],
) -> u32 {
    let (la, lb) = (field.geom.linear(a), field.geom.linear(b));
    let key = (la.min(lb), la.max(lb));
    if let Some(&v) = edge_vertex.get(&key) {
        return v;
    }
    // interpolate from the lower linear index for order independence
    let (lo, hi) = if la <= lb { (a, b) } else { (b, a) };
    let (fl, fh) = (field.phi[key.0], field.phi[key.1]);
    let t = (fl / (fl - fh)).clamp(0.0, 1.0);
    let xl = field.geom.node_pos(lo);
    let xh = field.geom.node_pos(hi);
    let v = mesh.verts.len() as u32;
    mesh.verts.push(xl + (xh - xl) * t);
    edge_vertex.insert(key, v);
    v
}

fn push_element<const D: usize>(field: &LevelSetField<D>, mesh: &mut IsoMesh<D>, mut el: [u32; D]) {
    let dx = field.geom.dx;
    let (mut normal, measure, centroid) = match D {
        2 => {
            let v0 = mesh.verts[el[0] as usize];
            let v1 = mesh.verts[el[1] as usize];
            let d = v1 - v0;
            let len = d.norm();
            let mut n = SVector::<f64, D>::zeros();
            if len > 0.0 {
                n[0] = d[1] / len;
                n[1] = -d[0] / len;
            }
            (n, len, (v0 + v1) / 2.0)
        }
        3 => {
            let v0 = mesh.verts[el[0] as usize];
            let v1 = mesh.verts[el[1] as usize];
            let v2 = mesh.verts[el[2] as usize];
            let c = crate::kernels::cross_embed(&(v1 - v0), &(v2 - v0));
            let nn = c.norm();
            let mut n = SVector::<f64, D>::zeros();
            if nn > 0.0 {
                for a in 0..D {
                    n[a] = c[a] / nn;
                }
            }
            (n, nn / 2.0, (v0 + v1 + v2) / 3.0)
        }
        _ => unreachable!(),
    };
    if measure <= 1e-12 * dx.powi(D as i32 - 1) {
        mesh.skipped_degenerate += 1;
        return;
    }
    // orient outward: the interpolated field increases out of the liquid
    if normal.dot(&field.grad(&centroid)) < 0.0 {
        el.swap(D - 2, D - 1);
        normal = -normal;
    }
    mesh.elems.push(el);
    mesh.normal.push(normal);
    mesh.measure.push(measure);
}

fn marching_squares<const D: usize>(
    field: &LevelSetField<D>,
    mesh: &mut IsoMesh<D>,
    edge_vertex: &mut HashMap<(usize, usize), u32>,
) {
    debug_assert_eq!(D, 2);
    let dims = field.geom.dims;
    let at = |i: usize, j: usize| -> [usize; D] {
        let mut idx = [0usize; D];
        idx[0] = i;
        idx[1] = j;
        idx
    };
    for j in 0..dims[1] - 1 {
        for i in 0..dims[0] - 1 {
            // counterclockwise corners and their connecting edges
            let corners = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
            let f: Vec<f64> = corners.iter().map(|&c| field.phi[field.geom.linear(c)]).collect();
            let inside: Vec<bool> = f.iter().map(|&v| v < 0.0).collect();
            const EDGES: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];
            let crossed: Vec<usize> = (0..4)
                .filter(|&e| inside[EDGES[e].0] != inside[EDGES[e].1])
                .collect();
            let mut emit = |mesh: &mut IsoMesh<D>, ea: usize, eb: usize| {
                let va = edge_crossing(field, mesh, edge_vertex, corners[EDGES[ea].0], corners[EDGES[ea].1]);
                let vb = edge_crossing(field, mesh, edge_vertex, corners[EDGES[eb].0], corners[EDGES[eb].1]);
                let mut el = [0u32; D];
                el[0] = va;
                el[1] = vb;
                push_element(field, mesh, el);
            };
            match crossed.len() {
                0 => {}
                2 => emit(mesh, crossed[0], crossed[1]),
                4 => {
                    // saddle: resolve by the sign at the cell center
                    let center_inside = f.iter().sum::<f64>() / 4.0 < 0.0;
                    let diag02 = inside[0]; // true for case {0,2} inside, false for {1,3}
                    let pairs = match (diag02, center_inside) {
                        (true, true) => [(0, 1), (2, 3)],
                        (true, false) => [(0, 3), (1, 2)],
                        (false, true) => [(0, 3), (1, 2)],
                        (false, false) => [(0, 1), (2, 3)],
                    };
                    for (ea, eb) in pairs {
                        emit(mesh, ea, eb);
                    }
                }
                _ => unreachable!("marching squares: odd crossing count"),
            }
        }
    }
}

fn marching_cubes<const D: usize>(
    field: &LevelSetField<D>,
    mesh: &mut IsoMesh<D>,
    edge_vertex: &mut HashMap<(usize, usize), u32>,
) {
    debug_assert_eq!(D, 3);
    let dims = field.geom.dims;
    // corner offsets in table order
    const CORNER_OFF: [[usize; 3]; 8] = [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ];
    for k in 0..dims[2] - 1 {
        for j in 0..dims[1] - 1 {
            for i in 0..dims[0] - 1 {
                let mut corners = [[0usize; D]; 8];
                let mut case = 0usize;
                for (c, off) in CORNER_OFF.iter().enumerate() {
                    let mut idx = [0usize; D];
                    idx[0] = i + off[0];
                    idx[1] = j + off[1];
                    idx[2] = k + off[2];
                    corners[c] = idx;
                    if field.phi[field.geom.linear(idx)] < 0.0 {
                        case |= 1 << c;
                    }
                }
                let tris = &TRI_TABLE[case];
                let mut t = 0;
                while tris[t] >= 0 {
                    let mut el = [0u32; D];
                    for (slot, &e) in tris[t..t + 3].iter().enumerate() {
                        let [ca, cb] = EDGE_CORNERS[e as usize];
                        el[slot] =
                            edge_crossing(field, mesh, edge_vertex, corners[ca], corners[cb]);
                    }
                    push_element(field, mesh, el);
                    t += 3;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// quadrature sampling
// ---------------------------------------------------------------------------

/// Poisson-disk thinning radius for a target density (samples per unit
/// measure: length in 2D, area in 3D).
fn thinning_radius(density: f64, d: usize) -> f64 {
    match d {
        2 => 0.7 / density,
        3 => 0.7 / density.sqrt(),
        _ => unreachable!(),
    }
}

/// Draws quadrature samples on the mesh. Per element, a Poisson count
/// targeting `density` (at least one), dart-throwing thinning, then each
/// survivor receives dA = outward normal * measure / survivors, so the
/// element's measure is partitioned exactly. Per-element RNG streams keyed
/// by (seed, step, element) make the result order-independent.
pub fn sample_surface<const D: usize>(
    mesh: &IsoMesh<D>,
    density: f64,
    seed: u64,
    step: u64,
) -> Vec<SurfaceSample<D>> {
    assert!(density > 0.0, "sampling density must be positive");
    let r_min = thinning_radius(density, D);
    let mut out = Vec::new();
    for e in 0..mesh.elems.len() {
        let measure = mesh.measure[e];
        if measure <= 0.0 {
            continue;
        }
        let mut rng = stream(seed, &[STREAM_SAMPLING, step, e as u64]);
        let lambda = density * measure;
        let n_target = {
            let drawn = Poisson::new(lambda.max(1e-12)).unwrap().sample(&mut rng);
            (drawn as usize).max(1)
        };
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> SVector<f64, D> {
            let el = &mesh.elems[e];
            match D {
                2 => {
                    let t: f64 = rng.gen();
                    let v0 = mesh.verts[el[0] as usize];
                    let v1 = mesh.verts[el[1] as usize];
                    v0 + (v1 - v0) * t
                }
                3 => {
                    // uniform on the triangle via square-root of barycentric
                    let r1: f64 = rng.gen();
                    let r2: f64 = rng.gen();
                    let su = r1.sqrt();
                    let v0 = mesh.verts[el[0] as usize];
                    let v1 = mesh.verts[el[1] as usize];
                    let v2 = mesh.verts[el[2] as usize];
                    v0 * (1.0 - su) + v1 * (su * (1.0 - r2)) + v2 * (su * r2)
                }
                _ => unreachable!(),
            }
        };
        let mut accepted: Vec<SVector<f64, D>> = Vec::with_capacity(n_target);
        for _ in 0..n_target {
            for _attempt in 0..30 {
                let cand = draw(&mut rng);
                if accepted.iter().all(|p| (p - cand).norm() >= r_min) {
                    accepted.push(cand);
                    break;
                }
            }
        }
        if accepted.is_empty() {
            // an element is never left without quadrature
            accepted.push(draw(&mut rng));
        }
        let da = mesh.normal[e] * (measure / accepted.len() as f64);
        for s in accepted {
            out.push(SurfaceSample {
                s,
                da,
                owner: usize::MAX,
                interface: Interface::LiquidGas,
                k_sigma: 0.0,
                t: 0.0,
                m_tilde: 0.0,
                element: e,
            });
        }
    }
    out
}

/// SolidLiquid iff the point lies within `eps_contact` of a collider.
pub fn classify_interface<const D: usize>(
    pos: &SVector<f64, D>,
    colliders: &[Collider],
    eps_contact: f64,
) -> Interface {
    if colliders.iter().any(|c| c.sdf(pos) <= eps_contact) {
        Interface::SolidLiquid
    } else {
        Interface::LiquidGas
    }
}

// ---------------------------------------------------------------------------
// contact-angle measurement
// ---------------------------------------------------------------------------

/// Equilibrium contact angle from the interfacial coefficients with zero
/// solid-gas energy: theta = arccos(-k_sl / k_lg), radians.
pub fn young_angle(k_sl: f64, k_lg: f64) -> f64 {
    (-k_sl / k_lg).clamp(-1.0, 1.0).acos()
}

/// Algebraic least-squares circle fit (Kasa): minimizes
/// sum (|p|^2 + d x + e y + f)^2. Returns (center, radius).
pub fn fit_circle(points: &[Vector2<f64>]) -> Result<(Vector2<f64>, f64)> {
    if points.len() < 3 {
        return Err(Error::Scene("circle fit needs at least 3 points".into()));
    }
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = nalgebra::Vector3::<f64>::zeros();
    for p in points {
        let row = nalgebra::Vector3::new(p.x, p.y, 1.0);
        m += row * row.transpose();
        rhs -= (p.x * p.x + p.y * p.y) * row;
    }
    let sol = m.lu().solve(&rhs).ok_or_else(|| Error::Scene("degenerate circle fit".into()))?;
    let center = Vector2::new(-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = center.norm_squared() - sol[2];
    if r2 <= 0.0 {
        return Err(Error::Scene("circle fit collapsed".into()));
    }
    Ok((center, r2.sqrt()))
}

/// Contact angle of a circular cap truncated by the plane y = floor_y,
/// measured through the liquid. Hemisphere (center on the floor) gives 90
/// degrees; a center below the floor gives an acute angle.
pub fn circle_contact_angle(center_y: f64, radius: f64, floor_y: f64) -> f64 {
    ((floor_y - center_y) / radius).clamp(-1.0, 1.0).acos()
}

/// Finds the nearest interior particle for each sample (group ownership)
/// and extrapolates the owner's temperature. Exposed here so the debug
/// surface dump can run without the full step pipeline.
pub fn assign_owners<const D: usize>(
    samples: &mut [SurfaceSample<D>],
    positions: &[SVector<f64, D>],
    bins: &CellBins,
    geom: &GridGeometry<D>,
) {
    for s in samples.iter_mut() {
        s.owner = bins
            .nearest(geom, positions, &s.s)
            .expect("assign_owners: no interior particles");
    }
}
