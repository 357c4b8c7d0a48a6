//! Scene configuration, the four-phase time step, output writers, and
//! conservation diagnostics.
//!
//! A step runs: (1) surface reconstruction, sampling, wetting
//! classification, coefficient lookup, group formation and conservative
//! mass splitting; (2) particle-to-grid transfers of momentum and
//! temperature; (3) the grid momentum solve followed by the heat solve on
//! the same masses; (4) merge/G2P back to particles, strain update, phase
//! change, advection. Samples live for exactly one step. Particle state is
//! not touched before both solves succeed, so a rejected implicit step can
//! be retried with a smaller dt.

use std::fs;
use std::io::{BufWriter, Read, Write as IoWrite};
use std::path::Path;

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, NO_NODE};
use crate::kernels::{axial, cross_embed, embed3, polar_svd, GridGeometry};
use crate::resample::{build_bodies, form_groups, merge_groups, spawn_balance, split_mass};
use crate::solve_momentum::{
    compute_cfl_dt, explicit_step, implicit_step, Collider, SolverSettings,
};
use crate::solve_thermal::{
    apply_phase_change, assemble_heat_system, scatter_temperature, solve_temperature, HeatSources,
};
use crate::state::{
    seed_particles, CellBins, GridState, MaterialParams, Particle, Phase, Shape, SurfaceSample,
};
use crate::surface::{
    assign_owners, build_level_set, classify_interface, extract_isocontour, sample_surface,
    IsoMesh,
};
use crate::transfer::{
    advect, g2p_temperature, g2p_velocity, p2g_mass_momentum, p2g_temperature, update_strain, Body,
};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// scene configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub origin: Vec<f64>,
    /// Side lengths; each must be a whole number of cells.
    pub extent: Vec<f64>,
    pub dx: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub frame_rate: f64,
    pub frames: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub cfl: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { frame_rate: 24.0, frames: 1, dt_min: 1e-8, dt_max: 1e-3, cfl: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Explicit,
    Implicit,
}

/// Tolerances for the grid solves; time-step bounds live in [`TimeConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverTols {
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub krylov_tol: f64,
    pub krylov_max_iters: usize,
}

impl Default for SolverTols {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            newton_tol: s.newton_tol,
            newton_max_iters: s.newton_max_iters,
            krylov_tol: s.krylov_tol,
            krylov_max_iters: s.krylov_max_iters,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Ellipse { center: Vec<f64>, semi_axes: Vec<f64> },
    Cuboid { min: Vec<f64>, max: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub shape: ShapeSpec,
    pub material: usize,
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default)]
    pub temperature: f64,
}

fn default_phase() -> Phase {
    Phase::Liquid
}

/// Spherical heat source with a smooth-step falloff from full strength at
/// the center to zero at `radius`. `t_bar` biases the Robin ambient
/// temperature at surface samples, `b` adds boundary flux there, and
/// `h_vol` heats interior particles volumetrically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatSourceConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub t_bar: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub h_vol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DumpFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub format: DumpFormat,
    pub diagnostics: bool,
    pub surface_mesh: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { format: DumpFormat::Csv, diagnostics: true, surface_mesh: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub schema_version: u32,
    pub dimension: usize,
    pub grid: GridConfig,
    /// Empty means zero gravity.
    #[serde(default)]
    pub gravity: Vec<f64>,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub solver: SolverTols,
    pub materials: Vec<MaterialParams>,
    pub shapes: Vec<ShapeConfig>,
    #[serde(default)]
    pub colliders: Vec<Collider>,
    #[serde(default)]
    pub heat_sources: Vec<HeatSourceConfig>,
    /// Baseline Robin ambient temperature, before source contributions.
    #[serde(default)]
    pub ambient_temperature: f64,
    /// Surface samples per unit of surface measure. Default: 2 per grid
    /// cell cross-section.
    #[serde(default)]
    pub sampling_density: Option<f64>,
    /// Distance within which a surface sample counts as wetting a
    /// collider. Default: one grid cell.
    #[serde(default)]
    pub contact_threshold: Option<f64>,
    #[serde(default = "default_ppc")]
    pub particles_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
    /// Surface samples carry no mass and scatter forces only where the
    /// interior already put mass. Breaks momentum conservation; kept as a
    /// comparison mode.
    #[serde(default)]
    pub massless_mode: bool,
    /// Keep the extra convective factor on the volumetric heat source.
    #[serde(default)]
    pub literal_volumetric_h: bool,
    /// Force the heat solve on or off; absent enables it iff any material
    /// or source exchanges heat.
    #[serde(default)]
    pub thermal: Option<bool>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_ppc() -> usize {
    4
}

pub fn load_scene(path: &Path) -> Result<SceneConfig> {
    let text = fs::read_to_string(path)?;
    let config: SceneConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Scene(format!(
                "schema_version {} not supported (current: {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dimension != 2 && self.dimension != 3 {
            return Err(Error::Scene(format!("dimension must be 2 or 3, got {}", self.dimension)));
        }
        let d = self.dimension;
        for (name, v) in [("grid.origin", &self.grid.origin), ("grid.extent", &self.grid.extent)] {
            if v.len() != d {
                return Err(Error::Scene(format!(
                    "{name} needs {d} components, got {}",
                    v.len()
                )));
            }
        }
        if !(self.grid.dx > 0.0) {
            return Err(Error::Scene("grid.dx must be positive".into()));
        }
        for (a, e) in self.grid.extent.iter().enumerate() {
            let cells = e / self.grid.dx;
            if (cells - cells.round()).abs() > 1e-9 || cells.round() < 5.0 {
                return Err(Error::Scene(format!(
                    "grid.extent[{a}] = {e} must be a whole number of cells (>= 5) at dx = {}",
                    self.grid.dx
                )));
            }
        }
        if !self.gravity.is_empty() && self.gravity.len() != d {
            return Err(Error::Scene(format!(
                "gravity needs {d} components, got {}",
                self.gravity.len()
            )));
        }
        if self.time.dt_min > self.time.dt_max {
            return Err(Error::Scene(format!(
                "time.dt_min = {} exceeds time.dt_max = {}",
                self.time.dt_min, self.time.dt_max
            )));
        }
        if !(self.time.frame_rate > 0.0) {
            return Err(Error::Scene("time.frame_rate must be positive".into()));
        }
        if self.materials.is_empty() {
            return Err(Error::Scene("materials must not be empty".into()));
        }
        for (i, m) in self.materials.iter().enumerate() {
            m.validate().map_err(|e| Error::Scene(format!("materials[{i}]: {e}")))?;
        }
        if self.shapes.is_empty() {
            return Err(Error::Scene("shapes must not be empty".into()));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.material >= self.materials.len() {
                return Err(Error::Scene(format!(
                    "shapes[{i}].material = {} out of range ({} materials)",
                    s.material,
                    self.materials.len()
                )));
            }
            let vecs: &[&Vec<f64>] = match &s.shape {
                ShapeSpec::Ellipse { center, semi_axes } => &[center, semi_axes],
                ShapeSpec::Cuboid { min, max } => &[min, max],
            };
            for v in vecs {
                if v.len() != d {
                    return Err(Error::Scene(format!(
                        "shapes[{i}] vectors need {d} components, got {}",
                        v.len()
                    )));
                }
            }
            if !s.temperature.is_finite() {
                return Err(Error::Scene(format!("shapes[{i}].temperature must be finite")));
            }
        }
        for (i, src) in self.heat_sources.iter().enumerate() {
            if src.center.len() != d {
                return Err(Error::Scene(format!(
                    "heat_sources[{i}].center needs {d} components"
                )));
            }
            if !(src.radius > 0.0) {
                return Err(Error::Scene(format!("heat_sources[{i}].radius must be positive")));
            }
        }
        if let Some(sd) = self.sampling_density {
            if !(sd > 0.0) {
                return Err(Error::Scene("sampling_density must be positive".into()));
            }
        }
        if let Some(ct) = self.contact_threshold {
            if !(ct >= 0.0) {
                return Err(Error::Scene("contact_threshold must be non-negative".into()));
            }
        }
        if self.particles_per_cell == 0 {
            return Err(Error::Scene("particles_per_cell must be positive".into()));
        }
        Ok(())
    }
}

fn fixed<const D: usize>(name: &str, v: &[f64]) -> Result<SVector<f64, D>> {
    if v.len() != D {
        return Err(Error::Scene(format!("{name} needs {D} components, got {}", v.len())));
    }
    Ok(SVector::from_fn(|a, _| v[a]))
}

impl ShapeSpec {
    fn build<const D: usize>(&self) -> Result<Shape<D>> {
        match self {
            ShapeSpec::Ellipse { center, semi_axes } => Ok(Shape::Ellipse {
                center: fixed("shape center", center)?,
                semi_axes: fixed("shape semi_axes", semi_axes)?,
            }),
            ShapeSpec::Cuboid { min, max } => Ok(Shape::Cuboid {
                min: fixed("shape min", min)?,
                max: fixed("shape max", max)?,
            }),
        }
    }
}

struct HeatSource<const D: usize> {
    center: SVector<f64, D>,
    radius: f64,
    t_bar: f64,
    b: f64,
    h_vol: f64,
}

impl<const D: usize> HeatSource<D> {
    /// Smooth-step falloff: 1 at the center, 0 at the radius and beyond.
    fn weight(&self, x: &SVector<f64, D>) -> f64 {
        let u = ((x - self.center).norm() / self.radius).min(1.0);
        1.0 - u * u * (3.0 - 2.0 * u)
    }
}

// ---------------------------------------------------------------------------
// simulation driver
// ---------------------------------------------------------------------------

/// Counters and mid-step measurements from the most recent step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub dt: f64,
    pub n_samples: usize,
    pub newton_iters: usize,
    pub krylov_iters: usize,
    pub thermal_iters: usize,
    /// Force components discarded in massless mode (always 0 otherwise).
    pub dropped_force_components: usize,
    /// Momentum-active nodes whose temperature came from the nearest
    /// supported node.
    pub filled_temperature_nodes: usize,
    /// Surface energy of this step's reconstruction, sum of k |dA|.
    pub surface_energy: f64,
    pub inversions: usize,
    pub wall_clamps: usize,
}

pub struct Simulation<const D: usize> {
    pub particles: Vec<Particle<D>>,
    pub geom: GridGeometry<D>,
    pub materials: Vec<MaterialParams>,
    pub colliders: Vec<Collider>,
    pub gravity: SVector<f64, D>,
    pub settings: SolverSettings,
    pub integrator: Integrator,
    pub time: f64,
    pub step_index: u64,
    pub last: StepReport,
    sources: Vec<HeatSource<D>>,
    ambient: f64,
    sampling_density: f64,
    contact_threshold: f64,
    massless: bool,
    literal_volumetric_h: bool,
    thermal_on: bool,
    seed: u64,
}

impl<const D: usize> Simulation<D> {
    pub fn from_scene(config: &SceneConfig) -> Result<Self> {
        config.validate()?;
        if config.dimension != D {
            return Err(Error::Scene(format!(
                "scene is {}-dimensional, driver instantiated for {D}",
                config.dimension
            )));
        }
        let origin = fixed::<D>("grid.origin", &config.grid.origin)?;
        let mut dims = [0usize; D];
        for a in 0..D {
            dims[a] = (config.grid.extent[a] / config.grid.dx).round() as usize;
        }
        let geom = GridGeometry::new(origin, config.grid.dx, dims);
        let gravity = if config.gravity.is_empty() {
            SVector::zeros()
        } else {
            fixed::<D>("gravity", &config.gravity)?
        };
        for c in &config.colliders {
            c.validate::<D>()?;
        }
        let mut particles = Vec::new();
        for (i, sc) in config.shapes.iter().enumerate() {
            let shape = sc.shape.build::<D>()?;
            let mat = &config.materials[sc.material];
            let temp = sc.temperature;
            particles.extend(seed_particles(
                &shape,
                config.particles_per_cell,
                &geom,
                config.seed.wrapping_add(i as u64),
                sc.material,
                mat.rho0,
                sc.phase,
                &|_| temp,
            )?);
        }
        for (i, p) in particles.iter_mut().enumerate() {
            p.id = i as u64;
        }
        let exchanges_heat = config
            .materials
            .iter()
            .any(|m| m.kappa > 0.0 || m.h > 0.0 || m.b != 0.0)
            || !config.heat_sources.is_empty();
        let settings = SolverSettings {
            newton_tol: config.solver.newton_tol,
            newton_max_iters: config.solver.newton_max_iters,
            krylov_tol: config.solver.krylov_tol,
            krylov_max_iters: config.solver.krylov_max_iters,
            dt_min: config.time.dt_min,
            dt_max: config.time.dt_max,
            cfl_number: config.time.cfl,
        };
        settings.validate()?;
        let sources = config
            .heat_sources
            .iter()
            .map(|s| {
                Ok(HeatSource {
                    center: fixed::<D>("heat source center", &s.center)?,
                    radius: s.radius,
                    t_bar: s.t_bar,
                    b: s.b,
                    h_vol: s.h_vol,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            particles,
            geom,
            materials: config.materials.clone(),
            colliders: config.colliders.clone(),
            gravity,
            settings,
            integrator: config.integrator,
            time: 0.0,
            step_index: 0,
            last: StepReport::default(),
            sources,
            ambient: config.ambient_temperature,
            sampling_density: config
                .sampling_density
                .unwrap_or(2.0 / config.grid.dx.powi(D as i32 - 1)),
            contact_threshold: config.contact_threshold.unwrap_or(config.grid.dx),
            massless: config.massless_mode,
            literal_volumetric_h: config.literal_volumetric_h,
            thermal_on: config.thermal.unwrap_or(exchanges_heat),
            seed: config.seed,
        })
    }

    /// Time-step bound from start-of-step particle speeds.
    pub fn cfl_dt(&self) -> f64 {
        let vmax = self.particles.iter().map(|p| p.v.norm()).fold(0.0, f64::max);
        compute_cfl_dt(vmax, &self.geom, &self.settings)
    }

    /// One full step at the given dt.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let mut report = StepReport { dt, ..Default::default() };

        // (1) surface phase
        let positions: Vec<SVector<f64, D>> = self.particles.iter().map(|p| p.x).collect();
        let level_set = build_level_set(&positions, &self.geom);
        let mesh = extract_isocontour(&level_set)?;
        let mut samples = sample_surface(&mesh, self.sampling_density, self.seed, self.step_index);
        if !samples.is_empty() {
            let bins = CellBins::build(&self.geom, &positions);
            assign_owners(&mut samples, &positions, &bins, &self.geom);
        }
        for s in &mut samples {
            s.interface = classify_interface(&s.s, &self.colliders, self.contact_threshold);
            let owner = &self.particles[s.owner];
            s.t = owner.t;
            s.k_sigma = self.materials[owner.material].surface_tension.eval(s.interface, s.t);
        }
        let (groups, balance) = if self.massless {
            (Vec::new(), Vec::new())
        } else {
            let groups = form_groups(&samples);
            let mut balance = spawn_balance(&samples, &self.particles, &self.geom)?;
            split_mass(&groups, &self.particles, &mut samples, &mut balance);
            (groups, balance)
        };
        report.n_samples = samples.len();
        report.surface_energy = samples.iter().map(|s| s.k_sigma * s.da.norm()).sum();

        // (2) transfers to the grid
        let bodies: Vec<Body<D>> = if self.massless {
            self.particles
                .iter()
                .map(|p| Body { x: p.x, v: p.v, affine: p.affine, m: p.m })
                .collect()
        } else {
            build_bodies(&self.particles, &samples, &balance, &groups)
        };
        let mut grid = GridState::new(self.geom.clone());
        p2g_mass_momentum(&bodies, &mut grid)?;
        grid.normalize();
        if self.thermal_on {
            p2g_temperature(&self.particles, &mut grid)?;
        }

        // (3) grid solves: momentum first, then heat on the same masses
        let mut node_of = vec![NO_NODE; self.geom.n_nodes()];
        for (i, &lin) in grid.active.iter().enumerate() {
            node_of[lin] = i as u32;
        }
        let masses: Vec<f64> = grid.active.iter().map(|&l| grid.mass[l]).collect();
        let node_pos: Vec<SVector<f64, D>> =
            grid.active.iter().map(|&l| self.geom.node_pos(self.geom.unlinear(l))).collect();
        let mut vel: Vec<SVector<f64, D>> = grid.active.iter().map(|&l| grid.vel[l]).collect();

        let mut model = EnergyModel::<D>::new(grid.active.len(), self.massless);
        for p in &self.particles {
            let mat = &self.materials[p.material];
            match p.phase {
                Phase::Liquid => {
                    let lambda = mat.lambda_liquid.eval(p.t);
                    if lambda > 0.0 {
                        model.add_pressure(&self.geom, &node_of, &p.x, lambda, p.vol0, p.j)?;
                    }
                    let mu = mat.mu_liquid.eval(p.t);
                    if mu > 0.0 {
                        model.add_viscosity(&self.geom, &node_of, &p.x, mu, p.j * p.vol0)?;
                    }
                }
                Phase::Solid => {
                    let mu = mat.mu_solid.eval(p.t);
                    let lambda = mat.lambda_solid.eval(p.t);
                    if mu > 0.0 || lambda > 0.0 {
                        model.add_corotated(&self.geom, &node_of, &p.x, mu, lambda, p.vol0, &p.f)?;
                    }
                }
            }
        }
        for s in &samples {
            if s.k_sigma != 0.0 {
                model.add_surface(&self.geom, &node_of, &s.s, s.k_sigma, &s.da)?;
            }
        }
        match self.integrator {
            Integrator::Explicit => explicit_step(
                &model,
                &masses,
                &node_pos,
                &mut vel,
                &self.gravity,
                &self.colliders,
                dt,
            )?,
            Integrator::Implicit => {
                let stats = implicit_step(
                    &mut model,
                    &masses,
                    &node_pos,
                    &mut vel,
                    &self.gravity,
                    &self.colliders,
                    dt,
                    &self.settings,
                    self.time,
                )?;
                report.newton_iters = stats.newton_iters;
                report.krylov_iters = stats.krylov_iters;
            }
        }
        report.dropped_force_components = model.dropped_components;
        for (i, &lin) in grid.active.iter().enumerate() {
            grid.vel[lin] = vel[i];
        }

        if self.thermal_on {
            let mut t_bar = Vec::with_capacity(samples.len());
            let mut b_ext = Vec::with_capacity(samples.len());
            for s in &samples {
                let mut tb = self.ambient;
                let mut bx = 0.0;
                for src in &self.sources {
                    let w = src.weight(&s.s);
                    tb += src.t_bar * w;
                    bx += src.b * w;
                }
                t_bar.push(tb);
                b_ext.push(bx);
            }
            let h_vol: Vec<f64> = self
                .particles
                .iter()
                .map(|p| self.sources.iter().map(|src| src.h_vol * src.weight(&p.x)).sum())
                .collect();
            let sys = assemble_heat_system(
                &self.particles,
                &self.materials,
                &samples,
                &HeatSources { t_bar: &t_bar, b: &b_ext, h_vol: &h_vol },
                &self.geom,
                &grid.temp,
                dt,
                self.literal_volumetric_h,
            )?;
            let mut t: Vec<f64> = sys.node_lin.iter().map(|&l| grid.temp[l]).collect();
            let (iters, res) =
                solve_temperature(&sys, &mut t, self.settings.krylov_tol, self.settings.krylov_max_iters);
            if res > self.settings.krylov_tol {
                return Err(Error::SolveFailed {
                    time: self.time,
                    reason: format!("heat solve stalled at relative residual {res:.3e}"),
                });
            }
            report.thermal_iters = iters;
            report.filled_temperature_nodes =
                scatter_temperature(&sys, &t, &self.geom, &grid.active, &mut grid.temp);
        }

        // (4) back to particles; samples die at the end of this scope
        let mut split_owner = vec![false; self.particles.len()];
        for g in &groups {
            split_owner[g.owner] = true;
        }
        merge_groups(&groups, &mut self.particles, &samples, &balance, &grid)?;
        for (i, p) in self.particles.iter_mut().enumerate() {
            if !split_owner[i] {
                let (v, a) = g2p_velocity(&grid, &p.x)?;
                p.v = v;
                p.affine = a;
            }
        }
        if self.thermal_on {
            for p in &mut self.particles {
                let (t, gt) = g2p_temperature(&grid, &p.x)?;
                p.t = t;
                p.grad_t = gt;
            }
        }
        for p in &mut self.particles {
            let events = update_strain(p, &grid, dt)?;
            report.inversions += events.inverted as usize;
        }
        for p in &mut self.particles {
            apply_phase_change(p, self.materials[p.material].t_melt);
        }
        for p in &mut self.particles {
            report.wall_clamps += advect(p, &self.geom, dt) as usize;
        }

        self.time += dt;
        self.step_index += 1;
        self.last = report;
        Ok(())
    }

    /// Advances by the target dt, retrying a rejected implicit solve with
    /// halved steps down to dt_min. Returns the dt actually taken.
    pub fn advance(&mut self, dt_target: f64) -> Result<f64> {
        let mut dt = dt_target;
        loop {
            match self.step(dt) {
                Ok(()) => return Ok(dt),
                Err(Error::SolveFailed { .. }) if dt * 0.5 >= self.settings.dt_min => dt *= 0.5,
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs `frames` frames, writing particle dumps per frame and a
    /// diagnostics row per step.
    pub fn run(
        &mut self,
        config: &SceneConfig,
        out_dir: &Path,
        frames_override: Option<usize>,
    ) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let frames = frames_override.unwrap_or(config.time.frames);
        let meta = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "dimension": D,
            "seed": self.seed,
            "integrator": self.integrator,
            "massless_mode": self.massless,
            "thermal": self.thermal_on,
            "n_particles": self.particles.len(),
            "dx": self.geom.dx,
            "frames": frames,
            "frame_rate": config.time.frame_rate,
            "format": config.output.format,
        });
        fs::write(out_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut diag = if config.output.diagnostics {
            Some(DiagnosticsWriter::create(&out_dir.join("diagnostics.csv"), D)?)
        } else {
            None
        };
        self.write_frame(config, out_dir, 0)?;
        for frame in 1..=frames {
            let frame_end = frame as f64 / config.time.frame_rate;
            while self.time < frame_end - 1e-12 * config.time.frame_rate.recip() {
                let dt = self.cfl_dt().min(frame_end - self.time);
                self.advance(dt)?;
                if let Some(w) = &mut diag {
                    w.append(&compute_diagnostics(self))?;
                }
            }
            self.write_frame(config, out_dir, frame)?;
        }
        Ok(())
    }

    pub fn write_frame(&self, config: &SceneConfig, out_dir: &Path, frame: usize) -> Result<()> {
        match config.output.format {
            DumpFormat::Csv => write_particles_csv(
                &out_dir.join(format!("particles_{frame:04}.csv")),
                &self.particles,
            )?,
            DumpFormat::Binary => write_particles_binary(
                &out_dir.join(format!("particles_{frame:04}.bin")),
                &self.particles,
            )?,
        }
        if config.output.surface_mesh {
            let positions: Vec<SVector<f64, D>> = self.particles.iter().map(|p| p.x).collect();
            let mesh = extract_isocontour(&build_level_set(&positions, &self.geom))?;
            write_surface_obj(&out_dir.join(format!("surface_{frame:04}.obj")), &mesh)?;
        }
        Ok(())
    }

    /// Surface reconstruction and sampling only, for inspection: returns
    /// the mesh and the classified samples without touching state.
    pub fn sample_surface_now(&self) -> Result<(IsoMesh<D>, Vec<SurfaceSample<D>>)> {
        let positions: Vec<SVector<f64, D>> = self.particles.iter().map(|p| p.x).collect();
        let mesh = extract_isocontour(&build_level_set(&positions, &self.geom))?;
        let mut samples = sample_surface(&mesh, self.sampling_density, self.seed, self.step_index);
        if !samples.is_empty() {
            let bins = CellBins::build(&self.geom, &positions);
            assign_owners(&mut samples, &positions, &bins, &self.geom);
        }
        for s in &mut samples {
            s.interface = classify_interface(&s.s, &self.colliders, self.contact_threshold);
            let owner = &self.particles[s.owner];
            s.t = owner.t;
            s.k_sigma = self.materials[owner.material].surface_tension.eval(s.interface, s.t);
        }
        Ok((mesh, samples))
    }
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

/// One diagnostics row. Vector quantities are padded to 3 components so
/// the type is dimension-independent; a 2D run uses x, y and the angular
/// z component.
#[derive(Debug, Clone, Copy)]
pub struct Diagnostics {
    pub time: f64,
    pub dt: f64,
    pub mass: f64,
    pub linear_momentum: Vector3<f64>,
    /// Includes the affine contribution m (dx^2/4) axial(A).
    pub angular_momentum: Vector3<f64>,
    pub center_of_mass: Vector3<f64>,
    /// Full APIC kinetic energy including the affine term.
    pub kinetic_energy: f64,
    pub surface_energy: f64,
    pub pressure_energy: f64,
    pub hyperelastic_energy: f64,
    pub thermal_energy: f64,
    pub solver_iters: usize,
}

pub fn compute_diagnostics<const D: usize>(sim: &Simulation<D>) -> Diagnostics {
    let quarter = sim.geom.dx * sim.geom.dx * 0.25;
    let mut mass = 0.0;
    let mut p = Vector3::zeros();
    let mut l = Vector3::zeros();
    let mut com = Vector3::zeros();
    let mut ke = 0.0;
    let mut pressure = 0.0;
    let mut hyper = 0.0;
    let mut thermal = 0.0;
    for part in &sim.particles {
        let mat = &sim.materials[part.material];
        mass += part.m;
        p += part.m * embed3(&part.v);
        l += part.m * cross_embed(&part.x, &part.v) + part.m * quarter * axial(&part.affine);
        com += part.m * embed3(&part.x);
        ke += 0.5 * part.m * (part.v.norm_squared() + quarter * part.affine.norm_squared());
        match part.phase {
            Phase::Liquid => {
                let lambda = mat.lambda_liquid.eval(part.t);
                pressure += 0.5 * lambda * part.vol0 * (part.j - 1.0) * (part.j - 1.0);
            }
            Phase::Solid => {
                let mu = mat.mu_solid.eval(part.t);
                let lambda = mat.lambda_solid.eval(part.t);
                let svd = polar_svd(&part.f);
                let stretch: f64 = (0..D).map(|k| (svd.sigma[k] - 1.0).powi(2)).sum();
                hyper += part.vol0
                    * (mu * stretch + 0.5 * lambda * (part.j - 1.0) * (part.j - 1.0));
            }
        }
        thermal += mat.cp * part.m * part.t;
    }
    if mass > 0.0 {
        com /= mass;
    }
    Diagnostics {
        time: sim.time,
        dt: sim.last.dt,
        mass,
        linear_momentum: p,
        angular_momentum: l,
        center_of_mass: com,
        kinetic_energy: ke,
        surface_energy: sim.last.surface_energy,
        pressure_energy: pressure,
        hyperelastic_energy: hyper,
        thermal_energy: thermal,
        solver_iters: sim.last.newton_iters + sim.last.thermal_iters,
    }
}

pub struct DiagnosticsWriter {
    w: BufWriter<fs::File>,
    dim: usize,
}

pub fn diagnostics_header(dim: usize) -> String {
    let mut cols = vec!["time".to_string(), "dt".into(), "mass".into()];
    for a in 0..dim {
        cols.push(format!("p{}", AXES[a]));
    }
    if dim == 2 {
        cols.push("lz".into());
    } else {
        for a in 0..3 {
            cols.push(format!("l{}", AXES[a]));
        }
    }
    for a in 0..dim {
        cols.push(format!("com{}", AXES[a]));
    }
    cols.extend(
        [
            "kinetic_energy",
            "surface_energy",
            "pressure_energy",
            "hyperelastic_energy",
            "thermal_energy",
            "solver_iters",
        ]
        .map(String::from),
    );
    cols.join(",")
}

const AXES: [char; 3] = ['x', 'y', 'z'];

impl DiagnosticsWriter {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{}", diagnostics_header(dim))?;
        Ok(Self { w, dim })
    }

    pub fn append(&mut self, d: &Diagnostics) -> Result<()> {
        let mut row = vec![format!("{:?}", d.time), format!("{:?}", d.dt), format!("{:?}", d.mass)];
        for a in 0..self.dim {
            row.push(format!("{:?}", d.linear_momentum[a]));
        }
        if self.dim == 2 {
            row.push(format!("{:?}", d.angular_momentum[2]));
        } else {
            for a in 0..3 {
                row.push(format!("{:?}", d.angular_momentum[a]));
            }
        }
        for a in 0..self.dim {
            row.push(format!("{:?}", d.center_of_mass[a]));
        }
        for e in [
            d.kinetic_energy,
            d.surface_energy,
            d.pressure_energy,
            d.hyperelastic_energy,
            d.thermal_energy,
        ] {
            row.push(format!("{e:?}"));
        }
        row.push(d.solver_iters.to_string());
        writeln!(self.w, "{}", row.join(","))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Reads a diagnostics CSV and reports drift figures over the run.
pub fn summarize_diagnostics(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Scene("empty diagnostics file".into()))?
        .split(',')
        .collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    if rows.is_empty() {
        return Ok("no steps recorded".into());
    }
    let get = |row: &[f64], c: Option<usize>| c.map(|c| row[c]).unwrap_or(f64::NAN);
    let t_col = col("time");
    let mass_col = col("mass");
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    let mass0 = get(first, mass_col);
    let mut mass_drift = 0.0f64;
    let mut p_max = 0.0f64;
    let mut com_drift = 0.0f64;
    let mut l_drift = 0.0f64;
    let p_cols: Vec<usize> = ["px", "py", "pz"].iter().filter_map(|n| col(n)).collect();
    let l_cols: Vec<usize> = ["lx", "ly", "lz"].iter().filter_map(|n| col(n)).collect();
    let com_cols: Vec<usize> = ["comx", "comy", "comz"].iter().filter_map(|n| col(n)).collect();
    let l0: Vec<f64> = l_cols.iter().map(|&c| first[c]).collect();
    let com0: Vec<f64> = com_cols.iter().map(|&c| first[c]).collect();
    for row in &rows {
        if let Some(c) = mass_col {
            mass_drift = mass_drift.max(((row[c] - mass0) / mass0).abs());
        }
        let p: f64 = p_cols.iter().map(|&c| row[c] * row[c]).sum::<f64>().sqrt();
        p_max = p_max.max(p);
        let dl: f64 = l_cols
            .iter()
            .zip(&l0)
            .map(|(&c, &v0)| (row[c] - v0) * (row[c] - v0))
            .sum::<f64>()
            .sqrt();
        l_drift = l_drift.max(dl);
        let dc: f64 = com_cols
            .iter()
            .zip(&com0)
            .map(|(&c, &v0)| (row[c] - v0) * (row[c] - v0))
            .sum::<f64>()
            .sqrt();
        com_drift = com_drift.max(dc);
    }
    let energy = |row: &[f64]| -> f64 {
        ["kinetic_energy", "surface_energy", "pressure_energy", "hyperelastic_energy"]
            .iter()
            .map(|n| get(row, col(n)))
            .sum()
    };
    Ok(format!(
        "steps: {}\nfinal time: {:.6}\nmass drift (rel): {:.3e}\nmax |linear momentum|: {:.3e}\nmax |angular momentum - L0|: {:.3e}\nmax |COM - COM0|: {:.3e}\nmechanical energy: {:.6e} -> {:.6e}\n",
        rows.len(),
        get(last, t_col),
        mass_drift,
        p_max,
        l_drift,
        com_drift,
        energy(first),
        energy(last),
    ))
}

// ---------------------------------------------------------------------------
// particle dumps
// ---------------------------------------------------------------------------

/// What a dump stores per particle; enough to restart inspection and
/// postprocessing, not a full checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleRecord<const D: usize> {
    pub id: u64,
    pub x: SVector<f64, D>,
    pub v: SVector<f64, D>,
    pub phase: Phase,
    pub t: f64,
    pub material: u32,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Solid => "solid",
        Phase::Liquid => "liquid",
    }
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "solid" => Ok(Phase::Solid),
        "liquid" => Ok(Phase::Liquid),
        other => Err(Error::Scene(format!("unknown phase {other:?} in particle dump"))),
    }
}

pub fn write_particles_csv<const D: usize>(
    path: &Path,
    particles: &[Particle<D>],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut cols = vec!["id".to_string()];
    for a in 0..D {
        cols.push(AXES[a].to_string());
    }
    for a in 0..D {
        cols.push(format!("v{}", AXES[a]));
    }
    cols.extend(["phase".into(), "T".into(), "material".into()]);
    writeln!(w, "{}", cols.join(","))?;
    for p in particles {
        let mut row = vec![p.id.to_string()];
        for a in 0..D {
            row.push(format!("{:?}", p.x[a]));
        }
        for a in 0..D {
            row.push(format!("{:?}", p.v[a]));
        }
        row.push(phase_name(p.phase).into());
        row.push(format!("{:?}", p.t));
        row.push(p.material.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_particles_csv<const D: usize>(path: &Path) -> Result<Vec<ParticleRecord<D>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Scene("empty particle dump".into()))?;
    let expected = 1 + 2 * D + 3;
    if header.split(',').count() != expected {
        return Err(Error::Scene(format!(
            "particle dump has {} columns, expected {expected} for {D}D",
            header.split(',').count()
        )));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expected {
            return Err(Error::Scene(format!("bad particle record: {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Scene(format!("bad number {s:?} in particle dump")))
        };
        out.push(ParticleRecord {
            id: f[0]
                .parse()
                .map_err(|_| Error::Scene(format!("bad id {:?} in particle dump", f[0])))?,
            x: SVector::zeros(),
            v: SVector::zeros(),
            phase: parse_phase(f[1 + 2 * D])?,
            t: num(f[2 + 2 * D])?,
            material: f[3 + 2 * D]
                .parse()
                .map_err(|_| Error::Scene("bad material index in particle dump".into()))?,
        });
        let rec = out.last_mut().unwrap();
        for a in 0..D {
            rec.x[a] = num(f[1 + a])?;
            rec.v[a] = num(f[1 + D + a])?;
        }
    }
    Ok(out)
}

/// Length-prefixed little-endian binary dump: u32 dimension, u64 count,
/// then per record id (u64), position (D f64), velocity (D f64), phase
/// (u8: 0 solid, 1 liquid), temperature (f64), material (u32).
pub fn write_particles_binary<const D: usize>(
    path: &Path,
    particles: &[Particle<D>],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(D as u32).to_le_bytes())?;
    w.write_all(&(particles.len() as u64).to_le_bytes())?;
    for p in particles {
        w.write_all(&p.id.to_le_bytes())?;
        for a in 0..D {
            w.write_all(&p.x[a].to_le_bytes())?;
        }
        for a in 0..D {
            w.write_all(&p.v[a].to_le_bytes())?;
        }
        w.write_all(&[match p.phase {
            Phase::Solid => 0u8,
            Phase::Liquid => 1,
        }])?;
        w.write_all(&p.t.to_le_bytes())?;
        w.write_all(&(p.material as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_particles_binary<const D: usize>(path: &Path) -> Result<Vec<ParticleRecord<D>>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > buf.len() {
            return Err(Error::Scene("truncated binary particle dump".into()));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if dim != D {
        return Err(Error::Scene(format!("binary dump is {dim}D, expected {D}D")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut x = SVector::<f64, D>::zeros();
        for a in 0..D {
            x[a] = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let mut v = SVector::<f64, D>::zeros();
        for a in 0..D {
            v[a] = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let phase = match take(1)?[0] {
            0 => Phase::Solid,
            1 => Phase::Liquid,
            other => return Err(Error::Scene(format!("bad phase byte {other}"))),
        };
        let t = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let material = u32::from_le_bytes(take(4)?.try_into().unwrap());
        out.push(ParticleRecord { id, x, v, phase, t, material });
    }
    Ok(out)
}

/// Wavefront OBJ; 2D meshes write z = 0 vertices and line elements.
pub fn write_surface_obj<const D: usize>(path: &Path, mesh: &IsoMesh<D>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in &mesh.verts {
        let mut coords = [0.0f64; 3];
        for a in 0..D {
            coords[a] = v[a];
        }
        writeln!(w, "v {:?} {:?} {:?}", coords[0], coords[1], coords[2])?;
    }
    for e in &mesh.elems {
        match D {
            2 => writeln!(w, "l {} {}", e[0] + 1, e[1] + 1)?,
            _ => writeln!(w, "f {} {} {}", e[0] + 1, e[1] + 1, e[D - 1] + 1)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_samples_csv<const D: usize>(
    path: &Path,
    samples: &[SurfaceSample<D>],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut cols = Vec::new();
    for a in 0..D {
        cols.push(format!("s{}", AXES[a]));
    }
    for a in 0..D {
        cols.push(format!("da{}", AXES[a]));
    }
    cols.extend(["owner".to_string(), "interface".into(), "k_sigma".into(), "T".into()]);
    writeln!(w, "{}", cols.join(","))?;
    for s in samples {
        let mut row = Vec::new();
        for a in 0..D {
            row.push(format!("{:?}", s.s[a]));
        }
        for a in 0..D {
            row.push(format!("{:?}", s.da[a]));
        }
        row.push(s.owner.to_string());
        row.push(
            match s.interface {
                crate::state::Interface::LiquidGas => "liquid_gas",
                crate::state::Interface::SolidLiquid => "solid_liquid",
            }
            .to_string(),
        );
        row.push(format!("{:?}", s.k_sigma));
        row.push(format!("{:?}", s.t));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
