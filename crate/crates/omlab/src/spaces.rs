//! Discretized metric measure spaces, scalar fields, and empirical moduli
//! of continuity.
//!
//! Three space kinds are supported:
//!
//! - **Euclidean grids**: regular node lattices over an axis-aligned box.
//!   Quadrature weights are trapezoidal (boundary nodes carry half cells per
//!   axis) so the cell volumes sum to the domain volume exactly.
//! - **Atom sets**: finite point clouds carrying atom masses.
//! - **Path lattices**: a stand-in for Wiener space. "Points" are paths on
//!   a uniform time grid; they are not enumerated — the stored points are
//!   only the designated evaluation centers, and ball membership is decided
//!   against sampled paths on demand (see `ballmass`).
//!
//! All types here are immutable after construction and safe to share across
//! threads; builders run single-threaded.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::expr::CompiledExpr;
use crate::{Error, Result};

/// Default cap on the number of points a grid builder may produce.
pub const DEFAULT_POINT_CAP: u64 = 10_000_000;

/// Snap tolerance used when matching coordinates to grid nodes.
const NODE_SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    EuclideanGrid,
    AtomSet,
    PathLattice,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::EuclideanGrid => "euclidean-grid",
            SpaceKind::AtomSet => "atom-set",
            SpaceKind::PathLattice => "path-lattice",
        }
    }
}

/// Regular-grid geometry: node coordinates, strides, and stencil.
#[derive(Debug, Clone)]
pub struct GridMeta {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub spacing: Vec<f64>,
    pub shape: Vec<usize>,
    strides: Vec<usize>,
    /// Stencil offsets in index space with precomputed base edge lengths.
    stencil: Vec<([i64; 3], f64)>,
}

impl GridMeta {
    fn new(mins: Vec<f64>, maxs: Vec<f64>, spacing: Vec<f64>, shape: Vec<usize>) -> Self {
        let dim = shape.len();
        let mut strides = vec![0usize; dim];
        let mut acc = 1usize;
        for a in (0..dim).rev() {
            strides[a] = acc;
            acc *= shape[a];
        }
        let stencil = stencil_offsets(dim)
            .into_iter()
            .map(|off| {
                let len = off
                    .iter()
                    .zip(&spacing)
                    .map(|(o, h)| (*o as f64 * h).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mut arr = [0i64; 3];
                arr[..off.len()].copy_from_slice(&off);
                (arr, len)
            })
            .collect();
        GridMeta {
            mins,
            maxs,
            spacing,
            shape,
            strides,
            stencil,
        }
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.strides
            .iter()
            .map(|s| {
                let q = rest / s;
                rest %= s;
                q
            })
            .collect()
    }

    pub fn node_of(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords_of(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, i)| self.mins[a] + *i as f64 * self.spacing[a])
            .collect()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(a, v)| {
            let tol = NODE_SNAP_EPS * (1.0 + self.maxs[a].abs() + self.mins[a].abs());
            *v >= self.mins[a] - tol && *v <= self.maxs[a] + tol
        })
    }
}

fn stencil_offsets(dim: usize) -> Vec<Vec<i64>> {
    match dim {
        1 => vec![vec![-1], vec![1]],
        2 => {
            let mut offs = Vec::new();
            for a in -1i64..=1 {
                for b in -1i64..=1 {
                    if (a, b) != (0, 0) {
                        offs.push(vec![a, b]);
                    }
                }
            }
            // Knight moves cut worst-case metrication error to ~2.8%.
            for &(a, b) in &[(1i64, 2i64), (2, 1), (-1, 2), (-2, 1), (1, -2), (2, -1), (-1, -2), (-2, -1)] {
                offs.push(vec![a, b]);
            }
            offs
        }
        3 => {
            let mut offs = Vec::new();
            for a in -1i64..=1 {
                for b in -1i64..=1 {
                    for c in -1i64..=1 {
                        if (a, b, c) != (0, 0, 0) {
                            offs.push(vec![a, b, c]);
                        }
                    }
                }
            }
            offs
        }
        _ => Vec::new(),
    }
}

/// Time grid of a path lattice. Paths are sampled at `times` (t = 0, where
/// every path is pinned to 0, is not a coordinate).
#[derive(Debug, Clone)]
pub struct PathMeta {
    pub times: Vec<f64>,
    pub terminal_time: f64,
}

#[derive(Debug, Clone)]
enum Adjacency {
    GridStencil,
    Explicit(Vec<Vec<(u32, f64)>>),
    None,
}

/// A discretized ambient space with neighbor graph and quadrature weights.
#[derive(Debug, Clone)]
pub struct SampledSpace {
    kind: SpaceKind,
    dim: usize,
    points: Vec<f64>, // row-major, n * dim
    cell_volumes: Vec<f64>,
    eval_set: Vec<usize>,
    adjacency: Adjacency,
    grid: Option<GridMeta>,
    path: Option<PathMeta>,
}

impl SampledSpace {
    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.points.len() / self.dim
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cell_volume(&self, i: usize) -> f64 {
        self.cell_volumes[i]
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volumes
    }

    pub fn eval_set(&self) -> &[usize] {
        &self.eval_set
    }

    pub fn in_eval_set(&self, node: usize) -> bool {
        self.eval_set.binary_search(&node).is_ok()
    }

    /// Restrict the designated evaluation subset Z to the given nodes.
    pub fn set_eval_set(&mut self, mut nodes: Vec<usize>) -> Result<()> {
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.iter().any(|&i| i >= self.n_points()) {
            return Err(Error::invalid("eval_set", "node index out of range"));
        }
        self.eval_set = nodes;
        Ok(())
    }

    pub fn grid(&self) -> Option<&GridMeta> {
        self.grid.as_ref()
    }

    pub fn path_meta(&self) -> Option<&PathMeta> {
        self.path.as_ref()
    }

    pub fn has_neighbor_graph(&self) -> bool {
        !matches!(self.adjacency, Adjacency::None)
    }

    /// Visit every neighbor of `node` with its base (d0) edge length.
    pub fn for_each_neighbor(&self, node: usize, mut f: impl FnMut(usize, f64)) {
        match &self.adjacency {
            Adjacency::GridStencil => {
                let g = self.grid.as_ref().expect("grid stencil without meta");
                let idx = g.multi_index(node);
                'offsets: for (off, len) in &g.stencil {
                    let mut j = 0usize;
                    for a in 0..self.dim {
                        let v = idx[a] as i64 + off[a];
                        if v < 0 || v >= g.shape[a] as i64 {
                            continue 'offsets;
                        }
                        j += v as usize * g.strides[a];
                    }
                    f(j, *len);
                }
            }
            Adjacency::Explicit(adj) => {
                for &(j, len) in &adj[node] {
                    f(j as usize, len);
                }
            }
            Adjacency::None => {}
        }
    }

    /// Euclidean distance between stored points (sup-norm on path lattices).
    pub fn base_point_distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.point(i), self.point(j));
        match self.kind {
            SpaceKind::PathLattice => p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            _ => p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Snap arbitrary in-domain coordinates to the nearest stored point.
    pub fn nearest_node(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        match self.kind {
            SpaceKind::EuclideanGrid => {
                let g = self.grid.as_ref().unwrap();
                if !g.contains(x) {
                    return Err(Error::OutOfDomain(x.to_vec()));
                }
                let idx: Vec<usize> = x
                    .iter()
                    .enumerate()
                    .map(|(a, v)| {
                        let u = (v - g.mins[a]) / g.spacing[a];
                        (u.round().max(0.0) as usize).min(g.shape[a] - 1)
                    })
                    .collect();
                Ok(g.node_of(&idx))
            }
            _ => {
                let mut best = (f64::INFINITY, 0usize);
                for i in 0..self.n_points() {
                    let d = self
                        .point(i)
                        .iter()
                        .zip(x)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                if self.n_points() == 0 {
                    return Err(Error::invalid("space", "no stored points"));
                }
                Ok(best.1)
            }
        }
    }
}

/// Build a regular grid over an axis-aligned box.
///
/// `resolution` counts nodes per axis (>= 2); node spacing along axis a is
/// `(max
/// - min) / (resolution - 1)`. The neighbor stencil is the 16-neighborhood
/// in 2-D (kings plus knight moves) and the full 26-neighborhood in 3-D.
/// Quadrature weights are trapezoidal: an interior node carries the product
/// of spacings, boundary nodes carry half per boundary axis, so the weights
/// sum to the box volume.
pub fn build_grid(
    domain: &[(f64, f64)],
    resolution: &[usize],
    cap: Option<u64>,
) -> Result<SampledSpace> {
    let dim = domain.len();
    if dim == 0 || dim != resolution.len() {
        return Err(Error::invalid(
            "space.resolution",
            "resolution must list one entry per box axis",
        ));
    }
    if dim > 3 {
        return Err(Error::invalid(
            "space.box",
            "grids support 1, 2 or 3 axes",
        ));
    }
    for (a, &(lo, hi)) in domain.iter().enumerate() {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(
                "space.box",
                format!("axis {} is degenerate: [{lo}, {hi}]", a + 1),
            ));
        }
        if resolution[a] < 2 {
            return Err(Error::invalid(
                "space.resolution",
                format!("axis {} needs at least 2 nodes", a + 1),
            ));
        }
    }
    let cap = cap.unwrap_or(DEFAULT_POINT_CAP);
    let total: u128 = resolution.iter().map(|&r| r as u128).product();
    if total > cap as u128 {
        return Err(Error::PointCapExceeded { points: total, cap });
    }
    let n = total as usize;

    let mins: Vec<f64> = domain.iter().map(|d| d.0).collect();
    let maxs: Vec<f64> = domain.iter().map(|d| d.1).collect();
    let spacing: Vec<f64> = domain
        .iter()
        .zip(resolution)
        .map(|(&(lo, hi), &r)| (hi - lo) / (r - 1) as f64)
        .collect();
    let meta = GridMeta::new(mins, maxs, spacing.clone(), resolution.to_vec());

    let mut points = Vec::with_capacity(n * dim);
    let mut volumes = Vec::with_capacity(n);
    for node in 0..n {
        let idx = meta.multi_index(node);
        let coords = meta.coords_of(&idx);
        points.extend_from_slice(&coords);
        let mut w = 1.0;
        for a in 0..dim {
            let edge = idx[a] == 0 || idx[a] == resolution[a] - 1;
            w *= spacing[a] * if edge { 0.5 } else { 1.0 };
        }
        volumes.push(w);
    }

    Ok(SampledSpace {
        kind: SpaceKind::EuclideanGrid,
        dim,
        points,
        cell_volumes: volumes,
        eval_set: (0..n).collect(),
        adjacency: Adjacency::GridStencil,
        grid: Some(meta),
        path: None,
    })
}

/// Build a finite atom space. `masses` become the base-measure weights; the
/// neighbor graph is the complete graph with Euclidean edge lengths.
pub fn build_atoms(coords: &[Vec<f64>], masses: &[f64]) -> Result<SampledSpace> {
    if coords.is_empty() || coords.len() != masses.len() {
        return Err(Error::invalid(
            "space.atoms",
            "need equally many atom coordinates and masses",
        ));
    }
    let dim = coords[0].len();
    if dim == 0 {
        return Err(Error::invalid("space.atoms", "atoms need coordinates"));
    }
    let mut total = 0.0;
    for m in masses {
        if !(m.is_finite() && *m > 0.0) {
            return Err(Error::invalid(
                "space.atoms",
                format!("atom masses must be positive and finite, got {m}"),
            ));
        }
        total += m;
    }
    if !total.is_finite() {
        return Err(Error::invalid("space.atoms", "total atom mass overflows"));
    }
    let n = coords.len();
    let mut points = Vec::with_capacity(n * dim);
    for c in coords {
        if c.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.len(),
            });
        }
        points.extend_from_slice(c);
    }
    let mut adj = vec![Vec::with_capacity(n - 1); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = coords[i]
                .iter()
                .zip(&coords[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= 0.0 {
                return Err(Error::invalid(
                    "space.atoms",
                    format!("atoms {i} and {j} coincide"),
                ));
            }
            adj[i].push((j as u32, d));
            adj[j].push((i as u32, d));
        }
    }
    Ok(SampledSpace {
        kind: SpaceKind::AtomSet,
        dim,
        points,
        cell_volumes: masses.to_vec(),
        eval_set: (0..n).collect(),
        adjacency: Adjacency::Explicit(adj),
        grid: None,
        path: None,
    })
}

/// Build a path lattice: "points" are piecewise-linear paths sampled on the
/// uniform time grid t_i = i * T / steps, i = 1..steps. Only the designated
/// evaluation centers are stored; there is no neighbor graph, and ball
/// membership is decided directly against sampled paths.
pub fn build_path_lattice(
    steps: usize,
    terminal_time: f64,
    centers: &[Vec<f64>],
) -> Result<SampledSpace> {
    if steps < 2 {
        return Err(Error::invalid(
            "space.steps",
            format!("need at least 2 steps, got {steps}"),
        ));
    }
    if !(terminal_time > 0.0) || !terminal_time.is_finite() {
        return Err(Error::invalid(
            "space.terminal_time",
            "terminal time must be positive and finite",
        ));
    }
    if centers.is_empty() {
        return Err(Error::invalid(
            "space.centers",
            "need at least one evaluation center path",
        ));
    }
    let mut points = Vec::with_capacity(centers.len() * steps);
    for (k, c) in centers.iter().enumerate() {
        if c.len() != steps {
            return Err(Error::invalid(
                "space.centers",
                format!(
                    "center {k} has {} values, lattice has {steps} time points",
                    c.len()
                ),
            ));
        }
        points.extend_from_slice(c);
    }
    let times: Vec<f64> = (1..=steps)
        .map(|i| terminal_time * i as f64 / steps as f64)
        .collect();
    let n = centers.len();
    Ok(SampledSpace {
        kind: SpaceKind::PathLattice,
        dim: steps,
        points,
        cell_volumes: vec![1.0; n],
        eval_set: (0..n).collect(),
        adjacency: Adjacency::None,
        grid: None,
        path: Some(PathMeta {
            times,
            terminal_time,
        }),
    })
}

/// Evaluate a time expression (identifier `t`) on the lattice time grid to
/// produce a center path.
pub fn center_path_from_expr(steps: usize, terminal_time: f64, src: &str) -> Result<Vec<f64>> {
    let e = CompiledExpr::parse(src, &["t"])?;
    Ok((1..=steps)
        .map(|i| e.eval(&[terminal_time * i as f64 / steps as f64]))
        .collect())
}

// ---------------------------------------------------------------------------
// Scalar fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum FieldRule {
    Multilinear,
    NearestPoint,
    PathFunctional(CompiledExpr),
}

/// A pointwise function on the space. Holds one value per stored point plus
/// an interpolation rule: multilinear on grids, nearest-point on atom sets,
/// and a functional of the whole path (wT / intw grammar) on path lattices.
#[derive(Debug, Clone)]
pub struct ScalarField {
    values: Vec<f64>,
    rule: FieldRule,
}

impl ScalarField {
    /// Compile an expression into a field. On grids and atom sets the
    /// expression binds `x1..xn`; on path lattices it binds `wT` and `intw`.
    pub fn from_expr(space: &SampledSpace, src: &str) -> Result<Self> {
        match space.kind() {
            SpaceKind::PathLattice => {
                let expr = CompiledExpr::parse(src, &["wT", "intw"])?;
                let meta = space.path_meta().unwrap().clone();
                let values = (0..space.n_points())
                    .map(|i| eval_path_functional(&expr, &meta, space.point(i)))
                    .collect();
                Ok(ScalarField {
                    values,
                    rule: FieldRule::PathFunctional(expr),
                })
            }
            _ => {
                let names: Vec<String> =
                    (1..=space.dim()).map(|a| format!("x{a}")).collect();
                let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                let expr = CompiledExpr::parse(src, &name_refs)?;
                let values = (0..space.n_points())
                    .map(|i| expr.eval(space.point(i)))
                    .collect();
                let rule = match space.kind() {
                    SpaceKind::EuclideanGrid => FieldRule::Multilinear,
                    _ => FieldRule::NearestPoint,
                };
                Ok(ScalarField { values, rule })
            }
        }
    }

    /// Build a field from a closure over point coordinates (grids and atom
    /// sets; path lattices require an expression or explicit values).
    pub fn from_fn(space: &SampledSpace, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if space.kind() == SpaceKind::PathLattice {
            return Err(Error::UnsupportedSpace {
                op: "ScalarField::from_fn".into(),
                kind: space.kind().name().into(),
            });
        }
        let values = (0..space.n_points()).map(|i| f(space.point(i))).collect();
        let rule = match space.kind() {
            SpaceKind::EuclideanGrid => FieldRule::Multilinear,
            _ => FieldRule::NearestPoint,
        };
        Ok(ScalarField { values, rule })
    }

    /// The constant field.
    pub fn constant(space: &SampledSpace, c: f64) -> Self {
        let rule = match space.kind() {
            SpaceKind::EuclideanGrid => FieldRule::Multilinear,
            SpaceKind::AtomSet => FieldRule::NearestPoint,
            SpaceKind::PathLattice => FieldRule::PathFunctional(CompiledExpr::constant(c)),
        };
        ScalarField {
            values: vec![c; space.n_points()],
            rule,
        }
    }

    /// Attach explicit per-point values (nearest-point interpolation off
    /// grid nodes is used for grids too in this case only when asked; grids
    /// get multilinear).
    pub fn from_values(space: &SampledSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.n_points() {
            return Err(Error::invalid(
                "field.values",
                format!(
                    "expected {} values, got {}",
                    space.n_points(),
                    values.len()
                ),
            ));
        }
        if space.kind() == SpaceKind::PathLattice {
            return Err(Error::UnsupportedSpace {
                op: "ScalarField::from_values".into(),
                kind: space.kind().name().into(),
            });
        }
        let rule = match space.kind() {
            SpaceKind::EuclideanGrid => FieldRule::Multilinear,
            _ => FieldRule::NearestPoint,
        };
        Ok(ScalarField { values, rule })
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest stored value.
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Evaluate at arbitrary in-domain coordinates. Exact at stored points;
    /// multilinear interpolation is bounded by the nodal extremes of the
    /// enclosing cell.
    pub fn eval(&self, space: &SampledSpace, x: &[f64]) -> Result<f64> {
        if x.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: x.len(),
            });
        }
        match &self.rule {
            FieldRule::PathFunctional(expr) => {
                let meta = space.path_meta().ok_or_else(|| Error::UnsupportedSpace {
                    op: "path functional eval".into(),
                    kind: space.kind().name().into(),
                })?;
                Ok(eval_path_functional(expr, meta, x))
            }
            FieldRule::NearestPoint => {
                let i = space.nearest_node(x)?;
                Ok(self.values[i])
            }
            FieldRule::Multilinear => {
                let g = space.grid().expect("multilinear rule requires a grid");
                if !g.contains(x) {
                    return Err(Error::OutOfDomain(x.to_vec()));
                }
                let dim = space.dim();
                let mut base = vec![0usize; dim];
                let mut frac = vec![0f64; dim];
                for a in 0..dim {
                    let u = (x[a] - g.mins[a]) / g.spacing[a];
                    let r = u.round();
                    if (u - r).abs() < NODE_SNAP_EPS {
                        // exact node along this axis
                        base[a] = (r.max(0.0) as usize).min(g.shape[a] - 1);
                        frac[a] = 0.0;
                    } else {
                        let i0 = (u.floor().max(0.0) as usize).min(g.shape[a] - 2);
                        base[a] = i0;
                        frac[a] = (u - i0 as f64).clamp(0.0, 1.0);
                    }
                }
                let mut acc = 0.0;
                for corner in 0..(1usize << dim) {
                    let mut w = 1.0;
                    let mut node = 0usize;
                    for a in 0..dim {
                        let hi = (corner >> a) & 1 == 1;
                        if hi && frac[a] == 0.0 {
                            w = 0.0;
                            break;
                        }
                        w *= if hi { frac[a] } else { 1.0 - frac[a] };
                        let ia = base[a] + usize::from(hi);
                        node += ia * g.strides[a];
                    }
                    if w != 0.0 {
                        acc += w * self.values[node];
                    }
                }
                Ok(acc)
            }
        }
    }
}

fn eval_path_functional(expr: &CompiledExpr, meta: &PathMeta, path: &[f64]) -> f64 {
    let terminal = *path.last().expect("path lattice has at least 2 steps");
    // Trapezoid over [0, T] with the pinned start w(0) = 0.
    let mut integral = 0.0;
    let mut prev_t = 0.0;
    let mut prev_w = 0.0;
    for (t, w) in meta.times.iter().zip(path) {
        integral += 0.5 * (prev_w + w) * (t - prev_t);
        prev_t = *t;
        prev_w = *w;
    }
    expr.eval(&[terminal, integral])
}

// ---------------------------------------------------------------------------
// Metric and measure descriptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMetric {
    Euclidean,
    SupNormPath,
}

/// Declarative description of the metric d: the base metric d0, optionally
/// reweighted conformally to e^(-U) d0.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub base: BaseMetric,
    pub conformal_weight: Option<ScalarField>,
}

impl MetricSpec {
    pub fn base_for(space: &SampledSpace) -> Self {
        MetricSpec {
            base: match space.kind() {
                SpaceKind::PathLattice => BaseMetric::SupNormPath,
                _ => BaseMetric::Euclidean,
            },
            conformal_weight: None,
        }
    }

    pub fn conformal(space: &SampledSpace, weight: ScalarField) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::invalid(
                "metric.conformal",
                "conformal weight must be finite at every point",
            ));
        }
        let mut m = Self::base_for(space);
        m.conformal_weight = Some(weight);
        Ok(m)
    }

    pub fn is_conformal(&self) -> bool {
        self.conformal_weight.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMeasure {
    LebesgueCells,
    AtomMasses,
    GaussianPath,
}

/// Declarative description of the measure mu = e^(-V) mu0.
#[derive(Debug, Clone)]
pub struct MeasureSpec {
    pub base: BaseMeasure,
    pub tilt: Option<ScalarField>,
}

impl MeasureSpec {
    pub fn base_for(space: &SampledSpace) -> Self {
        MeasureSpec {
            base: match space.kind() {
                SpaceKind::EuclideanGrid => BaseMeasure::LebesgueCells,
                SpaceKind::AtomSet => BaseMeasure::AtomMasses,
                SpaceKind::PathLattice => BaseMeasure::GaussianPath,
            },
            tilt: None,
        }
    }

    pub fn tilted(space: &SampledSpace, tilt: ScalarField) -> Result<Self> {
        if !tilt.is_finite() {
            return Err(Error::invalid(
                "measure.tilt",
                "tilt must be finite at every point",
            ));
        }
        let mut m = Self::base_for(space);
        m.tilt = Some(tilt);
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Empirical moduli of continuity
// ---------------------------------------------------------------------------

/// A sampled modulus of continuity around `center`: nondecreasing bounds on
/// |field(y) - field(center)| binned by base distance, valid out to
/// `scope_radius`. Breakpoints are bin upper edges.
#[derive(Debug, Clone)]
pub struct ContinuityModulus {
    pub breakpoints: Vec<f64>,
    pub bounds: Vec<f64>,
    pub center: Vec<f64>,
    pub scope_radius: f64,
}

impl ContinuityModulus {
    /// Bound valid at base distance `r`; `None` when r exceeds the scope.
    pub fn bound_for(&self, r: f64) -> Option<f64> {
        if r <= 0.0 {
            return Some(0.0);
        }
        let tol = 1e-12 * self.scope_radius.max(1.0);
        for (b, v) in self.breakpoints.iter().zip(&self.bounds) {
            if r <= b + tol {
                return Some(*v);
            }
        }
        None
    }

    /// Check the vanishing-at-zero invariant: the first bound must sit below
    /// `tol` for the smallest breakpoint.
    pub fn vanishes_at_zero(&self, tol: f64) -> bool {
        self.bounds.first().map(|b| *b <= tol).unwrap_or(false)
    }
}

/// Number of distance bins used by `estimate_modulus`.
const MODULUS_BINS: usize = 32;

/// Estimate a modulus of continuity empirically: the least nondecreasing
/// envelope of |field(y) - field(center)| over sampled points y, binned by
/// base distance from the center.
///
/// On grids and atom sets, candidates are stored nodes within the scope; if
/// there are at most `sample_count` of them the envelope is exhaustive,
/// otherwise a seeded subsample is used. Path lattices are handled by
/// `ballmass::estimate_path_modulus`, which probes along sampled Brownian
/// directions.
pub fn estimate_modulus(
    space: &SampledSpace,
    field: &ScalarField,
    center: &[f64],
    scope_radius: f64,
    sample_count: usize,
    seed: u64,
) -> Result<ContinuityModulus> {
    if space.kind() == SpaceKind::PathLattice {
        return Err(Error::UnsupportedSpace {
            op: "estimate_modulus".into(),
            kind: space.kind().name().into(),
        });
    }
    if !(scope_radius > 0.0) {
        return Err(Error::invalid("modulus.scope_radius", "must be positive"));
    }
    let c = space.nearest_node(center)?;
    let c_coords = space.point(c).to_vec();
    let f_c = field.value(c);

    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for i in 0..space.n_points() {
        if i == c {
            continue;
        }
        let d = space
            .point(i)
            .iter()
            .zip(&c_coords)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if d <= scope_radius {
            candidates.push((i, d));
        }
    }
    if candidates.len() > sample_count {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(sample_count);
        for _ in 0..sample_count {
            picked.push(candidates[rng.gen_range(0..candidates.len())]);
        }
        candidates = picked;
    }

    build_envelope(
        candidates
            .iter()
            .map(|&(i, d)| (d, (field.value(i) - f_c).abs())),
        c_coords,
        scope_radius,
    )
}

/// Shared envelope construction: bin (distance, |difference|) pairs and take
/// the least nondecreasing upper envelope over bin maxima.
pub(crate) fn build_envelope(
    pairs: impl Iterator<Item = (f64, f64)>,
    center: Vec<f64>,
    scope_radius: f64,
) -> Result<ContinuityModulus> {
    let width = scope_radius / MODULUS_BINS as f64;
    let mut bin_max: BTreeMap<usize, f64> = BTreeMap::new();
    for (d, diff) in pairs {
        if d <= 0.0 || d > scope_radius {
            continue;
        }
        let k = ((d / width).ceil() as usize).clamp(1, MODULUS_BINS) - 1;
        let e = bin_max.entry(k).or_insert(0.0);
        if diff > *e {
            *e = diff;
        }
    }
    if bin_max.len() < 2 {
        return Err(Error::DegenerateModulus);
    }
    let mut breakpoints = Vec::with_capacity(bin_max.len());
    let mut bounds = Vec::with_capacity(bin_max.len());
    let mut running = 0.0f64;
    for (k, m) in bin_max {
        running = running.max(m);
        breakpoints.push(width * (k + 1) as f64);
        bounds.push(running);
    }
    Ok(ContinuityModulus {
        breakpoints,
        bounds,
        center,
        scope_radius,
    })
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// A parsed CSV table: header names plus numeric columns.
#[derive(Debug, Clone)]
pub struct PointTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl PointTable {
    pub fn read(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(|s| s.to_string())
            .collect();
        if headers.is_empty() {
            return Err(Error::Csv("empty header row".into()));
        }
        let mut columns = vec![Vec::new(); headers.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            if rec.len() != headers.len() {
                return Err(Error::Csv(format!(
                    "row {} has {} fields, header has {}",
                    row + 1,
                    rec.len(),
                    headers.len()
                )));
            }
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Csv(format!(
                        "row {} column `{}`: `{field}` is not a number",
                        row + 1,
                        self_header(&headers, k)
                    ))
                })?;
                columns[k].push(v);
            }
        }
        Ok(PointTable { headers, columns })
    }

    pub fn read_path(path: &std::path::Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|k| self.columns[k].as_slice())
            .ok_or_else(|| Error::Csv(format!("no column named `{name}`")))
    }

    /// Coordinate columns x1..xn, in order, stopping at the first gap.
    pub fn coordinate_columns(&self) -> Result<Vec<&[f64]>> {
        let mut cols = Vec::new();
        for a in 1.. {
            match self.column(&format!("x{a}")) {
                Ok(c) => cols.push(c),
                Err(_) => break,
            }
        }
        if cols.is_empty() {
            return Err(Error::Csv(
                "no coordinate columns (expected headers x1, x2, ...)".into(),
            ));
        }
        Ok(cols)
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map(|c| c.len()).unwrap_or(0)
    }
}

fn self_header(headers: &[String], k: usize) -> &str {
    headers.get(k).map(|s| s.as_str()).unwrap_or("?")
}

/// Build an atom space from a CSV table with coordinate columns x1..xn and
/// a mass column. Returns the space; further columns can be turned into
/// fields with [`field_from_table`].
pub fn atoms_from_table(table: &PointTable, mass_column: &str) -> Result<SampledSpace> {
    let coords_cols = table.coordinate_columns()?;
    let masses = table.column(mass_column)?;
    let n = table.n_rows();
    let coords: Vec<Vec<f64>> = (0..n)
        .map(|i| coords_cols.iter().map(|c| c[i]).collect())
        .collect();
    build_atoms(&coords, masses)
}

/// Turn a named CSV column into a field on a space built from the same
/// table (rows must align with stored points).
pub fn field_from_table(
    space: &SampledSpace,
    table: &PointTable,
    column: &str,
) -> Result<ScalarField> {
    let vals = table.column(column)?;
    if vals.len() != space.n_points() {
        return Err(Error::Csv(format!(
            "column `{column}` has {} rows, space has {} points",
            vals.len(),
            space.n_points()
        )));
    }
    let coords_cols = table.coordinate_columns()?;
    for i in 0..space.n_points() {
        for (a, col) in coords_cols.iter().enumerate() {
            if (col[i] - space.point(i)[a]).abs() > NODE_SNAP_EPS {
                return Err(Error::Csv(format!(
                    "row {} does not match stored point {} (axis {})",
                    i + 1,
                    i,
                    a + 1
                )));
            }
        }
    }
    ScalarField::from_values(space, vals.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_3x3_unit_square() {
        let s = build_grid(&[(0.0, 1.0), (0.0, 1.0)], &[3, 3], None).unwrap();
        assert_eq!(s.n_points(), 9);
        // interior cell carries the full product of spacings
        let center = s.nearest_node(&[0.5, 0.5]).unwrap();
        assert!((s.cell_volume(center) - 0.25).abs() < 1e-15);
        // partition of unity over the box
        let total: f64 = s.cell_volumes().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_volumes_sum_to_domain_volume() {
        let s = build_grid(&[(0.0, 1.0)], &[101], None).unwrap();
        let total: f64 = s.cell_volumes().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);

        let s = build_grid(&[(-1.0, 2.0), (0.0, 0.5)], &[41, 17], None).unwrap();
        let total: f64 = s.cell_volumes().iter().sum();
        assert!((total - 1.5).abs() / 1.5 < 1e-9);
    }

    #[test]
    fn grid_cap_guard() {
        let err = build_grid(&[(0.0, 1.0), (0.0, 1.0)], &[10_000, 10_000], None).unwrap_err();
        assert!(matches!(err, Error::PointCapExceeded { .. }));
    }

    #[test]
    fn grid_stencil_sizes() {
        let s = build_grid(&[(0.0, 1.0), (0.0, 1.0)], &[9, 9], None).unwrap();
        let center = s.nearest_node(&[0.5, 0.5]).unwrap();
        let mut n = 0;
        s.for_each_neighbor(center, |_, len| {
            assert!(len > 0.0);
            n += 1;
        });
        assert_eq!(n, 16);

        let s3 = build_grid(&[(0.0, 1.0); 3], &[5, 5, 5], None).unwrap();
        let c3 = s3.nearest_node(&[0.5, 0.5, 0.5]).unwrap();
        let mut n3 = 0;
        s3.for_each_neighbor(c3, |_, _| n3 += 1);
        assert_eq!(n3, 26);
    }

    #[test]
    fn neighbor_graph_is_symmetric_with_positive_base_lengths() {
        let s = build_grid(&[(0.0, 1.0), (0.0, 2.0)], &[7, 9], None).unwrap();
        for i in 0..s.n_points() {
            s.for_each_neighbor(i, |j, len| {
                assert!(len > 0.0);
                let d = s.base_point_distance(i, j);
                assert!((d - len).abs() < 1e-12, "edge length mismatch");
                let mut back = false;
                s.for_each_neighbor(j, |k, l2| {
                    if k == i {
                        assert!((l2 - len).abs() < 1e-12);
                        back = true;
                    }
                });
                assert!(back, "edge {i}->{j} missing its reverse");
            });
        }
    }

    #[test]
    fn path_lattice_construction() {
        let s = build_path_lattice(2, 1.0, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(s.dim(), 2);
        let times = &s.path_meta().unwrap().times;
        assert_eq!(times, &vec![0.5, 1.0]);

        let s64 = build_path_lattice(64, 1.0, &[vec![0.0; 64]]).unwrap();
        assert_eq!(s64.dim(), 64);

        assert!(build_path_lattice(1, 1.0, &[vec![0.0]]).is_err());
    }

    #[test]
    fn modulus_constant_field_is_zero() {
        let s = build_grid(&[(0.0, 1.0)], &[101], None).unwrap();
        let f = ScalarField::constant(&s, 3.0);
        let m = estimate_modulus(&s, &f, &[0.5], 0.2, 10_000, 7).unwrap();
        assert!(m.bounds.iter().all(|b| *b == 0.0));
        assert!(m.vanishes_at_zero(1e-12));
    }

    #[test]
    fn modulus_identity_field_tracks_radius() {
        // field(x) = x on [0,1], center 0.5, scope 0.2: the exact envelope
        // is bound(r) = r; binning rounds up to the bin edge.
        let s = build_grid(&[(0.0, 1.0)], &[2001], None).unwrap();
        let f = ScalarField::from_expr(&s, "x1").unwrap();
        let m = estimate_modulus(&s, &f, &[0.5], 0.2, usize::MAX, 7).unwrap();
        let bin = 0.2 / MODULUS_BINS as f64;
        for (b, v) in m.breakpoints.iter().zip(&m.bounds) {
            assert!(
                (v - b).abs() <= bin + 1e-12,
                "envelope at breakpoint {b} is {v}, want within one bin of {b}"
            );
        }
        assert!(m.vanishes_at_zero(bin + 1e-12));
    }

    #[test]
    fn modulus_respects_lipschitz_oracle() {
        // field = sin(5x) has Lipschitz constant 5.
        let s = build_grid(&[(0.0, 1.0)], &[2001], None).unwrap();
        let f = ScalarField::from_expr(&s, "sin(5*x1)").unwrap();
        let m = estimate_modulus(&s, &f, &[0.0], 0.3, usize::MAX, 7).unwrap();
        for (b, v) in m.breakpoints.iter().zip(&m.bounds) {
            assert!(*v <= 5.0 * b + 1e-12, "bound {v} exceeds 5*{b}");
        }
    }

    #[test]
    fn modulus_needs_two_bins() {
        let s = build_grid(&[(0.0, 1.0)], &[3], None).unwrap();
        let f = ScalarField::from_expr(&s, "x1").unwrap();
        // scope so small that only one neighbor (one bin) is captured
        let err = estimate_modulus(&s, &f, &[0.5], 0.5001, usize::MAX, 7);
        assert!(matches!(err, Err(Error::DegenerateModulus)));
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let s = build_grid(&[(0.0, 1.0), (0.0, 1.0)], &[11, 11], None).unwrap();
        let f = ScalarField::from_expr(&s, "sin(3*x1)*cos(2*x2)").unwrap();
        for i in (0..s.n_points()).step_by(7) {
            let p = s.point(i).to_vec();
            assert_eq!(f.eval(&s, &p).unwrap(), f.value(i));
        }
    }

    #[test]
    fn atoms_from_csv_round_trip() {
        let csv = "x1,x2,mass,U\n0.0,0.0,0.2,1.0\n1.0,0.0,0.8,2.0\n";
        let table = PointTable::read(csv.as_bytes()).unwrap();
        let space = atoms_from_table(&table, "mass").unwrap();
        assert_eq!(space.n_points(), 2);
        assert_eq!(space.cell_volume(0), 0.2);
        let u = field_from_table(&space, &table, "U").unwrap();
        assert_eq!(u.value(1), 2.0);
        assert!(field_from_table(&space, &table, "missing").is_err());
    }

    #[test]
    fn atom_masses_must_be_positive() {
        let err = build_atoms(&[vec![0.0], vec![1.0]], &[0.5, -0.1]);
        assert!(err.is_err());
    }

    #[test]
    fn path_functional_evaluates_terminal_and_integral() {
        let s = build_path_lattice(4, 1.0, &[vec![0.25, 0.5, 0.75, 1.0]]).unwrap();
        let f = ScalarField::from_expr(&s, "wT + intw").unwrap();
        // path w(t) = t: terminal 1, integral 1/2 (trapezoid is exact here)
        assert!((f.value(0) - 1.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn interpolation_bounded_by_cell_extremes(
            xf in 0.0f64..1.0,
            yf in 0.0f64..1.0,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let s = build_grid(&[(0.0, 1.0), (0.0, 1.0)], &[6, 6], None).unwrap();
            let f = ScalarField::from_fn(&s, |p| (a * p[0] * 3.0).sin() + b * p[1] * p[1]).unwrap();
            let v = f.eval(&s, &[xf, yf]).unwrap();
            let lo = f.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn modulus_is_nondecreasing(seed in 0u64..1000, k in 1.0f64..7.0) {
            let s = build_grid(&[(0.0, 1.0)], &[301], None).unwrap();
            let f = ScalarField::from_fn(&s, |p| (k * p[0]).sin() + 0.3 * (3.0 * k * p[0]).cos()).unwrap();
            let m = estimate_modulus(&s, &f, &[0.5], 0.3, 500, seed).unwrap();
            for w in m.bounds.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }
}
