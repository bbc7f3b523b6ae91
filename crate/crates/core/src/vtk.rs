//! Legacy-format VTK output of scalar fields on the active cells of a mesh.

use std::io::Write;
use std::path::Path;

use crate::fe::ScalarSpace;

/// An unstructured-grid snapshot: points, quad connectivity and one scalar
/// per point. Construction and emission are deterministic, so repeated runs
/// produce identical files.
pub struct VtkSnapshot {
    pub name: String,
    pub points: Vec<[f64; 2]>,
    pub quads: Vec<[usize; 4]>,
    pub scalars: Vec<f64>,
}

impl VtkSnapshot {
    /// Samples a finite element field at the vertices of the active cells.
    pub fn from_field(space: &ScalarSpace, coeffs: &[f64], name: &str) -> VtkSnapshot {
        let mesh = &space.mesh;
        let mut compact: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
        for &cell in space.active_cells() {
            for &v in &mesh.cell(cell).verts {
                let next = compact.len();
                compact.entry(v).or_insert(next);
            }
        }
        let mut points = vec![[0.0; 2]; compact.len()];
        let mut scalars = vec![0.0; compact.len()];
        for (&v, &k) in &compact {
            points[k] = mesh.vertex(v);
        }
        let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let mut quads = Vec::with_capacity(space.active_cells().len());
        for &cell in space.active_cells() {
            let verts = mesh.cell(cell).verts;
            let mut quad = [0usize; 4];
            for (i, &v) in verts.iter().enumerate() {
                let k = compact[&v];
                quad[i] = k;
                scalars[k] = space.eval(coeffs, cell, corners[i]);
            }
            quads.push(quad);
        }
        VtkSnapshot {
            name: name.to_string(),
            points,
            quads,
            scalars,
        }
    }

    /// Writes the snapshot as a legacy ASCII VTK unstructured grid.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\n");
        out.push_str(&self.name);
        out.push('\n');
        out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
        out.push_str(&format!("POINTS {} double\n", self.points.len()));
        for p in &self.points {
            out.push_str(&format!("{} {} 0\n", p[0], p[1]));
        }
        out.push_str(&format!("CELLS {} {}\n", self.quads.len(), 5 * self.quads.len()));
        for q in &self.quads {
            out.push_str(&format!("4 {} {} {} {}\n", q[0], q[1], q[2], q[3]));
        }
        out.push_str(&format!("CELL_TYPES {}\n", self.quads.len()));
        for _ in &self.quads {
            out.push_str("9\n");
        }
        out.push_str(&format!("POINT_DATA {}\n", self.points.len()));
        out.push_str("SCALARS u double 1\nLOOKUP_TABLE default\n");
        for s in &self.scalars {
            out.push_str(&format!("{s}\n"));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())
    }
}
