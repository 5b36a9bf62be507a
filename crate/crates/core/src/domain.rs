//! Data shared by the network, the oracle, and the file formats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One operating condition: the branch-network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSample {
    /// Rod heat flux at the fixed axial sensor points, kW/m².
    pub p_rod: Vec<f64>,
    /// Inlet temperature, K.
    pub t_in: f64,
    /// Inlet velocity, m/s.
    pub v_in: f64,
}

impl InputSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.p_rod.iter().find(|q| !(q.is_finite() && **q >= 0.0)) {
            return Err(Error::invalid(format!("heat flux entry {bad} must be finite and >= 0")));
        }
        if !(self.t_in.is_finite() && self.t_in > 0.0) {
            return Err(Error::invalid(format!("inlet temperature {} must be > 0 K", self.t_in)));
        }
        if !(self.v_in.is_finite() && self.v_in > 0.0) {
            return Err(Error::invalid(format!("inlet velocity {} must be > 0 m/s", self.v_in)));
        }
        Ok(())
    }
}

/// Output quantities, in the fixed order used everywhere (files, reports, heads).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "T")]
    Temperature,
    #[serde(rename = "v")]
    Velocity,
    #[serde(rename = "k")]
    Tke,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Temperature, Quantity::Velocity, Quantity::Tke];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Quantity::Temperature => "T",
            Quantity::Velocity => "v",
            Quantity::Tke => "k",
        }
    }
}

/// Temperature (K), velocity (m/s) and turbulence kinetic energy (m²/s²) at
/// every center-plane node. Also used for normalized-space predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSnapshot {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    pub k: Vec<f64>,
}

impl FieldSnapshot {
    pub fn zeros(n: usize) -> Self {
        Self {
            t: vec![0.0; n],
            v: vec![0.0; n],
            k: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn get(&self, q: Quantity) -> &[f64] {
        match q {
            Quantity::Temperature => &self.t,
            Quantity::Velocity => &self.v,
            Quantity::Tke => &self.k,
        }
    }

    pub fn get_mut(&mut self, q: Quantity) -> &mut Vec<f64> {
        match q {
            Quantity::Temperature => &mut self.t,
            Quantity::Velocity => &mut self.v,
            Quantity::Tke => &mut self.k,
        }
    }

    pub(crate) fn check_len(&self, n: usize, context: &str) -> Result<()> {
        for q in Quantity::ALL {
            let len = self.get(q).len();
            if len != n {
                return Err(Error::shape(
                    format!("{context} ({} field)", q.symbol()),
                    format!("{n} nodes"),
                    format!("{len} nodes"),
                ));
            }
        }
        Ok(())
    }
}

/// Axis-aligned extent of the output plane, used to scale trunk inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn square(side: f64) -> Self {
        Self {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
        }
    }
}

/// Node positions on the z = const output plane together with their
/// distance to the nearest rod surface.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterPlaneMesh {
    x: Vec<f64>,
    y: Vec<f64>,
    wall_distance: Vec<f64>,
    bounds: BoundingBox,
    z_plane: f64,
}

impl CenterPlaneMesh {
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        wall_distance: Vec<f64>,
        bounds: BoundingBox,
        z_plane: f64,
    ) -> Result<Self> {
        let n = x.len();
        if y.len() != n || wall_distance.len() != n {
            return Err(Error::shape(
                "CenterPlaneMesh::new",
                format!("{n} y values and {n} wall distances"),
                format!("{} and {}", y.len(), wall_distance.len()),
            ));
        }
        if n == 0 {
            return Err(Error::invalid("mesh has no nodes"));
        }
        if !(bounds.x_max > bounds.x_min && bounds.y_max > bounds.y_min) {
            return Err(Error::invalid(format!("degenerate mesh bounds {bounds:?}")));
        }
        if let Some(d) = wall_distance.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::invalid(format!("wall distance {d} must be finite and >= 0")));
        }
        if x.iter().chain(&y).any(|c| !c.is_finite()) {
            return Err(Error::invalid("mesh coordinates must be finite"));
        }
        Ok(Self {
            x,
            y,
            wall_distance,
            bounds,
            z_plane,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn wall_distance(&self) -> &[f64] {
        &self.wall_distance
    }

    pub fn bounds(&self) -> BoundingBox {
        self.bounds
    }

    pub fn z_plane(&self) -> f64 {
        self.z_plane
    }

    /// Node coordinates scaled into the unit square, as an `N x 2` row-major block.
    pub fn normalized_coords(&self) -> Vec<f64> {
        let b = self.bounds;
        let (wx, wy) = (b.x_max - b.x_min, b.y_max - b.y_min);
        self.x
            .iter()
            .zip(&self.y)
            .flat_map(|(x, y)| [(x - b.x_min) / wx, (y - b.y_min) / wy])
            .collect()
    }

    /// Replaces one node's coordinates; wall distance is left to the caller.
    pub fn with_node_moved(&self, node: usize, x: f64, y: f64) -> Self {
        let mut m = self.clone();
        m.x[node] = x;
        m.y[node] = y;
        m
    }
}

/// Closed sampling intervals for the three operating parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRanges {
    /// Peak rod heat flux, kW/m².
    pub p_max: (f64, f64),
    /// Inlet temperature, K.
    pub t_in: (f64, f64),
    /// Inlet velocity, m/s.
    pub v_in: (f64, f64),
}

impl Default for InputRanges {
    fn default() -> Self {
        Self {
            p_max: (540.0, 660.0),
            t_in: (536.4, 655.6),
            v_in: (4.05, 4.95),
        }
    }
}

impl InputRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("p_max", self.p_max), ("t_in", self.t_in), ("v_in", self.v_in)] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
                return Err(Error::invalid(format!("range {name} = [{lo}, {hi}] must satisfy 0 < lo < hi")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p_max: f64, t_in: f64, v_in: f64) -> bool {
        let inside = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
        inside(p_max, self.p_max) && inside(t_in, self.t_in) && inside(v_in, self.v_in)
    }

    pub fn midpoint(&self) -> (f64, f64, f64) {
        let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
        (mid(self.p_max), mid(self.t_in), mid(self.v_in))
    }
}
