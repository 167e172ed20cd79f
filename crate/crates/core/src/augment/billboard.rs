use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::{AugmentError, Instance};

/// Instances closer than this to the sensor have no usable beam direction.
const MIN_CENTER_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskCell {
    /// Range from the sensor of the closest instance point in the cell.
    pub depth: f64,
    pub intensity: f32,
    /// Filled by dilation rather than by an instance point.
    pub dilated: bool,
}

/// Planar silhouette of an instance as seen from the sensor.
///
/// The plane passes through the instance center with normal `unit(center)`.
/// Cell `(i, j)` is centered at `center + i·s·u + j·s·v` for cell size `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct BillboardMask {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub cell_size: f64,
    cells: BTreeMap<(i32, i32), MaskCell>,
}

impl BillboardMask {
    pub fn build(instance: &Instance, cell_size: f64) -> Result<Self, AugmentError> {
        assert!(cell_size > 0.0, "cell size must be positive");
        if !(instance.center_range >= MIN_CENTER_RANGE) {
            return Err(AugmentError::DegenerateInstance { range: instance.center_range });
        }
        let normal = instance.center / instance.center_range;
        let up = if normal.z.abs() < 0.999 { Vector3::z() } else { Vector3::x() };
        let u = up.cross(&normal).normalize();
        let v = normal.cross(&u);
        let mut mask = Self { center: instance.center, normal, u, v, cell_size, cells: BTreeMap::new() };

        for p in &instance.points {
            let xyz = Vector3::from(p.xyz());
            let range = xyz.norm();
            let Some(key) = mask.project(xyz).map(|ab| mask.cell_key(ab)) else { continue };
            let cell = MaskCell { depth: range, intensity: p.intensity, dilated: false };
            mask.cells
                .entry(key)
                .and_modify(|c| {
                    if range < c.depth {
                        *c = cell;
                    }
                })
                .or_insert(cell);
        }

        let mut ring: BTreeMap<(i32, i32), MaskCell> = BTreeMap::new();
        for (&(i, j), c) in &mask.cells {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let key = (i + di, j + dj);
                    if mask.cells.contains_key(&key) {
                        continue;
                    }
                    let cand = MaskCell { dilated: true, ..*c };
                    ring.entry(key).and_modify(|r| if c.depth < r.depth { *r = cand }).or_insert(cand);
                }
            }
        }
        mask.cells.extend(ring);
        Ok(mask)
    }

    /// Plane coordinates where the ray through `p` meets the billboard, or
    /// `None` when the ray points away from it.
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        let norm = p.norm();
        if norm == 0.0 {
            return None;
        }
        let dir = p / norm;
        let cos = dir.dot(&self.normal);
        if cos <= 1e-9 {
            return None;
        }
        let hit = dir * (self.center.dot(&self.normal) / cos) - self.center;
        Some((hit.dot(&self.u), hit.dot(&self.v)))
    }

    pub fn cell_key(&self, (a, b): (f64, f64)) -> (i32, i32) {
        ((a / self.cell_size).round() as i32, (b / self.cell_size).round() as i32)
    }

    pub fn cell(&self, key: (i32, i32)) -> Option<&MaskCell> {
        self.cells.get(&key)
    }

    pub fn cells(&self) -> impl Iterator<Item = ((i32, i32), &MaskCell)> {
        self.cells.iter().map(|(k, c)| (*k, c))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Depth at plane point `ab` by inverse-distance weighting over the `k`
    /// nearest cell centers, with the nearest cell's intensity.
    pub fn interpolate(&self, ab: (f64, f64), k: usize) -> Option<(f64, f32)> {
        let mut near: Vec<(f64, &MaskCell)> = self
            .cells
            .iter()
            .map(|(&(i, j), c)| {
                let (da, db) = (ab.0 - i as f64 * self.cell_size, ab.1 - j as f64 * self.cell_size);
                (da.hypot(db), c)
            })
            .collect();
        let k = k.min(near.len());
        if k == 0 {
            return None;
        }
        near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
        near.truncate(k);
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (d0, c0) = near[0];
        if d0 < 1e-12 {
            return Some((c0.depth, c0.intensity));
        }
        let (num, den) = near.iter().fold((0.0, 0.0), |(n, d), (dist, c)| (n + c.depth / dist, d + 1.0 / dist));
        Some((num / den, c0.intensity))
    }

    /// Interpolated instance range and intensity on the beam through `p`,
    /// when that beam crosses an occupied cell.
    pub fn occluder(&self, p: Vector3<f64>, k: usize) -> Option<(f64, f32)> {
        let ab = self.project(p)?;
        self.cell(self.cell_key(ab))?;
        self.interpolate(ab, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Point;

    fn inst(points: &[[f32; 3]]) -> Instance {
        Instance::new("f", 1, "people", points.iter().map(|p| Point::new(p[0], p[1], p[2], 0.7)).collect())
    }

    #[test]
    fn single_point_mask() {
        let m = BillboardMask::build(&inst(&[[10.0, 0.0, 0.0]]), 0.05).unwrap();
        assert_eq!(m.len(), 9);
        let c = m.cell((0, 0)).unwrap();
        assert_eq!((c.depth, c.dilated), (10.0, false));
        assert!(m.cells().all(|(_, c)| c.depth == 10.0));
        assert_eq!(m.project(Vector3::new(20.0, 0.0, 0.0)), Some((0.0, 0.0)));
        assert_eq!(m.occluder(Vector3::new(20.0, 0.0, 0.0), 3), Some((10.0, 0.7)));
        assert_eq!(m.occluder(Vector3::new(20.0, 5.0, 0.0), 3), None);
        assert_eq!(m.occluder(Vector3::new(-20.0, 0.0, 0.0), 3), None);
    }

    #[test]
    fn closest_surface_wins() {
        let m = BillboardMask::build(&inst(&[[10.0, 0.0, 0.0], [10.4, 0.0, 0.0]]), 0.05).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.cell((0, 0)).unwrap().depth, 10.0);
    }

    #[test]
    fn degenerate_instance() {
        assert!(matches!(
            BillboardMask::build(&inst(&[[0.0, 0.0, 0.0]]), 0.05),
            Err(AugmentError::DegenerateInstance { .. })
        ));
        assert!(BillboardMask::build(&inst(&[[0.03, 0.0, 0.0], [-0.03, 0.0, 0.02]]), 0.05).is_err());
    }

    #[test]
    fn every_point_lands_in_an_occupied_cell() {
        let pts: Vec<[f32; 3]> = (0..200)
            .map(|k| {
                let a = k as f32 * 0.37;
                [8.0 + 0.3 * a.sin(), 2.0 + 0.3 * a.cos(), -1.7 + 1.7 * (k as f32 / 200.0)]
            })
            .collect();
        let i = inst(&pts);
        let m = BillboardMask::build(&i, 0.05).unwrap();
        assert!((m.normal.norm() - 1.0).abs() < 1e-12);
        assert!(m.normal.dot(&m.u).abs() < 1e-12 && m.normal.dot(&m.v).abs() < 1e-12);
        for p in &i.points {
            let key = m.cell_key(m.project(Vector3::from(p.xyz())).unwrap());
            let c = m.cell(key).unwrap();
            assert!(!c.dilated && c.depth > 0.0 && c.depth <= p.range() + 1e-12);
        }
    }

    #[test]
    fn idw_blends_neighbours() {
        // two surfaces about two cells apart on the plane, depths 10 and 12
        let m = BillboardMask::build(&inst(&[[10.0, 0.0, 0.0], [12.0, -0.12, 0.0]]), 0.05).unwrap();
        let a = m.project(Vector3::new(10.0, 0.0, 0.0)).unwrap();
        let b = m.project(Vector3::new(12.0, -0.12, 0.0)).unwrap();
        assert_eq!(m.interpolate(a, 1).unwrap().0, 10.0);
        assert!((m.interpolate(b, 1).unwrap().0 - 12.0).abs() < 1e-3);
        let (d, _) = m.interpolate((0.25 * a.0 + 0.75 * b.0, 0.25 * a.1 + 0.75 * b.1), 3).unwrap();
        assert!(d > 10.0 && d < 12.0, "{d}");
    }
}
