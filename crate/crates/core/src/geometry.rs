//! Sensing-area geometry and the ellipse shadowing model.
//!
//! Nodes sit on the perimeter of a square of edge `side_cm`. Coordinates are
//! in centimetres with the origin at a corner; node placement walks the
//! perimeter clockwise `(0,0) -> (0,side) -> (side,side) -> (side,0)`.
//! The reconstruction grid has `grid_px` pixels per edge and pixel `m` has
//! its centre at `((col + 0.5) * px, (row + 0.5) * px)`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvDoc;

pub const DEFAULT_SIDE_CM: f64 = 72.0;
pub const DEFAULT_NODES: usize = 16;
pub const DEFAULT_GRID_PX: usize = 36;
pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_LAMBDA_CM: f64 = 4.0;

const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Directed link from transmitter `tx` to receiver `rx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Link {
    pub tx: usize,
    pub rx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGeometry {
    side_cm: f64,
    nodes: Vec<Point>,
    links: Vec<Link>,
    grid_px: usize,
    channels: usize,
}

impl Default for NetworkGeometry {
    fn default() -> Self {
        Self::new(DEFAULT_SIDE_CM, DEFAULT_NODES, DEFAULT_GRID_PX, DEFAULT_CHANNELS)
            .expect("default geometry is valid")
    }
}

impl NetworkGeometry {
    /// Places `node_count` nodes evenly along the perimeter, starting at the
    /// origin corner, and enumerates all ordered pairs lexicographically.
    pub fn new(side_cm: f64, node_count: usize, grid_px: usize, channels: usize) -> Result<Self> {
        if !(side_cm > 0.0) || !side_cm.is_finite() {
            return Err(Error::InvalidArgument(format!("side_cm must be positive, got {side_cm}")));
        }
        if node_count < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 nodes, got {node_count}")));
        }
        let perimeter = 4.0 * side_cm;
        let spacing = perimeter / node_count as f64;
        let nodes = (0..node_count)
            .map(|k| perimeter_point(side_cm, k as f64 * spacing))
            .collect();
        Self::with_nodes(side_cm, nodes, grid_px, channels)
    }

    /// Geometry with explicit node positions (each must lie on the boundary).
    pub fn with_nodes(side_cm: f64, nodes: Vec<Point>, grid_px: usize, channels: usize) -> Result<Self> {
        if !(side_cm > 0.0) || !side_cm.is_finite() {
            return Err(Error::InvalidArgument(format!("side_cm must be positive, got {side_cm}")));
        }
        if nodes.len() < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 nodes, got {}", nodes.len())));
        }
        if grid_px < 2 {
            return Err(Error::InvalidArgument(format!("grid_px must be >= 2, got {grid_px}")));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("channels must be >= 1".into()));
        }
        for (i, p) in nodes.iter().enumerate() {
            if !on_boundary(side_cm, *p) {
                return Err(Error::InvalidArgument(format!(
                    "node {i} at ({}, {}) is not on the square boundary",
                    p.x, p.y
                )));
            }
        }
        let n = nodes.len();
        let links = (0..n)
            .flat_map(|tx| (0..n).filter(move |&rx| rx != tx).map(move |rx| Link { tx, rx }))
            .collect();
        Ok(Self {
            side_cm,
            nodes,
            links,
            grid_px,
            channels,
        })
    }

    pub fn side_cm(&self) -> f64 {
        self.side_cm
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn grid_px(&self) -> usize {
        self.grid_px
    }

    pub fn pixel_count(&self) -> usize {
        self.grid_px * self.grid_px
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_size_cm(&self) -> f64 {
        self.side_cm / self.grid_px as f64
    }

    pub fn pixel_center(&self, m: usize) -> Point {
        let px = self.pixel_size_cm();
        let (row, col) = (m / self.grid_px, m % self.grid_px);
        Point::new((col as f64 + 0.5) * px, (row as f64 + 0.5) * px)
    }

    pub fn center(&self) -> Point {
        Point::new(self.side_cm / 2.0, self.side_cm / 2.0)
    }

    /// Index of the directed link `tx -> rx` in lexicographic order.
    pub fn link_index(&self, tx: usize, rx: usize) -> Option<usize> {
        let n = self.nodes.len();
        if tx >= n || rx >= n || tx == rx {
            return None;
        }
        Some(tx * (n - 1) + if rx > tx { rx - 1 } else { rx })
    }

    pub fn link_length(&self, link_index: usize) -> Result<f64> {
        let link = self.links.get(link_index).ok_or(Error::OutOfRange {
            index: link_index,
            len: self.links.len(),
        })?;
        Ok(self.nodes[link.tx].dist(self.nodes[link.rx]))
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("side_cm", self.side_cm);
        doc.set("grid_px", self.grid_px);
        doc.set("channels", self.channels);
        doc.set("node_count", self.nodes.len());
        for (i, p) in self.nodes.iter().enumerate() {
            doc.set(&format!("node.{i}"), format!("{},{}", p.x, p.y));
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let side_cm: f64 = doc.parse_value("side_cm")?;
        let grid_px: usize = doc.parse_value("grid_px")?;
        let channels: usize = doc.parse_value("channels")?;
        let node_count: usize = doc.parse_value("node_count")?;
        let nodes = (0..node_count)
            .map(|i| {
                let xy: Vec<f64> = doc.parse_list(&format!("node.{i}"))?;
                match xy.as_slice() {
                    [x, y] => Ok(Point::new(*x, *y)),
                    _ => Err(Error::InvalidArgument(format!("node.{i} needs two coordinates"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_nodes(side_cm, nodes, grid_px, channels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::read(path)?)
    }

    /// Stable fingerprint of the serialized geometry, used to pair model
    /// checkpoints with datasets.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().to_string().as_bytes());
        hex::encode(&digest[..16])
    }
}

fn perimeter_point(side: f64, s: f64) -> Point {
    let s = s.rem_euclid(4.0 * side);
    if s < side {
        Point::new(0.0, s)
    } else if s < 2.0 * side {
        Point::new(s - side, side)
    } else if s < 3.0 * side {
        Point::new(side, 3.0 * side - s)
    } else {
        Point::new(4.0 * side - s, 0.0)
    }
}

fn on_boundary(side: f64, p: Point) -> bool {
    let tol = BOUNDARY_TOL * side.max(1.0);
    let inside = p.x >= -tol && p.x <= side + tol && p.y >= -tol && p.y <= side + tol;
    let on_edge = p.x.abs() <= tol
        || (p.x - side).abs() <= tol
        || p.y.abs() <= tol
        || (p.y - side).abs() <= tol;
    inside && on_edge
}

/// Dense `links x pixels` shadowing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    lambda_cm: f64,
}

impl WeightMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn lambda_cm(&self) -> f64 {
        self.lambda_cm
    }

    pub fn get(&self, link: usize, pixel: usize) -> f64 {
        self.entries[link * self.cols + pixel]
    }

    pub fn row(&self, link: usize) -> &[f64] {
        &self.entries[link * self.cols..(link + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `W r`: per-link shadowing for an image vector `r`.
    pub fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("image vector", self.cols, r.len())?;
        Ok((0..self.rows)
            .map(|l| self.row(l).iter().zip(r).map(|(w, x)| w * x).sum())
            .collect())
    }

    /// `W^T g`.
    pub fn apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("link vector", self.rows, g.len())?;
        let mut out = vec![0.0; self.cols];
        for (l, &gl) in g.iter().enumerate() {
            if gl == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(l)) {
                *o += w * gl;
            }
        }
        Ok(out)
    }
}

/// Normalized ellipse model: row `l` holds `1/sqrt(d_l)` for every pixel
/// centre whose focal-distance sum is at most `d_l + lambda_cm`.
pub fn ellipse_weights(geom: &NetworkGeometry, lambda_cm: f64) -> Result<WeightMatrix> {
    if !(lambda_cm > 0.0) || !lambda_cm.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda_cm must be positive, got {lambda_cm}")));
    }
    let cols = geom.pixel_count();
    let rows = geom.link_count();
    let centers: Vec<Point> = (0..cols).map(|m| geom.pixel_center(m)).collect();
    let mut entries = vec![0.0; rows * cols];
    for (l, link) in geom.links().iter().enumerate() {
        let (a, b) = (geom.nodes()[link.tx], geom.nodes()[link.rx]);
        let d = a.dist(b);
        let w = 1.0 / d.sqrt();
        let reach = d + lambda_cm;
        let row = &mut entries[l * cols..(l + 1) * cols];
        for (slot, p) in row.iter_mut().zip(&centers) {
            if p.dist(a) + p.dist(b) <= reach {
                *slot = w;
            }
        }
    }
    Ok(WeightMatrix {
        rows,
        cols,
        entries,
        lambda_cm,
    })
}
