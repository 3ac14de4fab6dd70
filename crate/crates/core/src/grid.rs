//! Spherical latitude-longitude grids and gridded field tensors.
//!
//! Grids are uniform in both axes, include both poles, and use the
//! half-open longitude convention `[-180, 180)`. Longitude is treated as
//! periodic everywhere: the cell between the last and the first meridian is
//! a valid interpolation cell.

use thiserror::Error;

/// Coordinate comparisons (refinement checks, node matching) use this slack.
pub const COORD_EPS_DEG: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid too small: need at least {need} nodes per axis, got {n_lat}x{n_lon}")]
    DimensionTooSmall { need: usize, n_lat: usize, n_lon: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid coordinates: {0}")]
    InvalidCoordinates(String),
    #[error("non-finite field value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("value buffer has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// A uniform spherical discretization with both poles included.
///
/// `lats` runs from -90 to +90 inclusive with spacing `180/(n_lat-1)`;
/// `lons` runs from -180 with spacing `360/n_lon`, all values in
/// `[-180, 180)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLonGrid {
    n_lat: usize,
    n_lon: usize,
    lats: Vec<f64>,
    lons: Vec<f64>,
}

impl LatLonGrid {
    /// Build the uniform grid with `n_lat` latitude rows and `n_lon`
    /// longitude columns. Requires at least 2 nodes per axis.
    pub fn build(n_lat: usize, n_lon: usize) -> Result<Self, GridError> {
        if n_lat < 2 || n_lon < 2 {
            return Err(GridError::DimensionTooSmall { need: 2, n_lat, n_lon });
        }
        // (k*180)/(n-1) evaluates to exactly 180 at k = n-1, so the pole
        // endpoints are exact regardless of whether the spacing is dyadic.
        let lats = (0..n_lat)
            .map(|k| (k as f64 * 180.0) / (n_lat - 1) as f64 - 90.0)
            .collect();
        let lons = (0..n_lon)
            .map(|m| (m as f64 * 360.0) / n_lon as f64 - 180.0)
            .collect();
        Ok(Self { n_lat, n_lon, lats, lons })
    }

    /// Reconstruct a grid from stored coordinate arrays, validating the
    /// uniformity, endpoint, and range invariants.
    pub fn from_coords(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self, GridError> {
        let (n_lat, n_lon) = (lats.len(), lons.len());
        if n_lat < 2 || n_lon < 2 {
            return Err(GridError::DimensionTooSmall { need: 2, n_lat, n_lon });
        }
        let reference = Self::build(n_lat, n_lon)?;
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() <= COORD_EPS_DEG)
        };
        if !close(&lats, &reference.lats) {
            return Err(GridError::InvalidCoordinates(format!(
                "latitudes are not the uniform [-90, 90] discretization for n_lat={n_lat}"
            )));
        }
        if !close(&lons, &reference.lons) {
            return Err(GridError::InvalidCoordinates(format!(
                "longitudes are not the uniform [-180, 180) discretization for n_lon={n_lon}"
            )));
        }
        Ok(Self { n_lat, n_lon, lats, lons })
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    /// Number of grid nodes.
    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn lat(&self, k: usize) -> f64 {
        self.lats[k]
    }

    pub fn lon(&self, m: usize) -> f64 {
        self.lons[m]
    }

    /// Latitude spacing in degrees.
    pub fn lat_spacing(&self) -> f64 {
        180.0 / (self.n_lat - 1) as f64
    }

    /// Longitude spacing in degrees.
    pub fn lon_spacing(&self) -> f64 {
        360.0 / self.n_lon as f64
    }

    /// Cosine-latitude row weights; the pole rows are exactly zero.
    pub fn latitude_weights(&self) -> Vec<f64> {
        self.lats
            .iter()
            .map(|&lat| {
                if lat.abs() == 90.0 {
                    0.0
                } else {
                    lat.to_radians().cos()
                }
            })
            .collect()
    }

    /// The grid obtained by densifying this grid by `ratio`, keeping the
    /// poles and the periodic longitude layout:
    /// `n_lat' = round((n_lat-1)*ratio) + 1`, `n_lon' = round(n_lon*ratio)`.
    pub fn refine(&self, ratio: f64) -> Result<Self, GridError> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(GridError::InvalidCoordinates(format!(
                "refinement ratio must be a positive finite real, got {ratio}"
            )));
        }
        let n_lat = ((self.n_lat - 1) as f64 * ratio).round() as usize + 1;
        let n_lon = (self.n_lon as f64 * ratio).round() as usize;
        Self::build(n_lat.max(2), n_lon.max(2))
    }

    /// True iff every node coordinate of `coarse` appears (within
    /// [`COORD_EPS_DEG`]) among the node coordinates of `fine`.
    pub fn is_refinement(coarse: &Self, fine: &Self) -> bool {
        let contains = |sub: &[f64], sup: &[f64]| {
            // Both sorted ascending: a single merge pass suffices.
            let mut j = 0;
            'outer: for &c in sub {
                while j < sup.len() {
                    if (sup[j] - c).abs() <= COORD_EPS_DEG {
                        continue 'outer;
                    }
                    if sup[j] > c {
                        return false;
                    }
                    j += 1;
                }
                return false;
            }
            true
        };
        contains(&coarse.lats, &fine.lats) && contains(&coarse.lons, &fine.lons)
    }

    /// For each coordinate of `self` (as the coarse grid), the index of the
    /// matching coordinate in `fine`. `None` if `self` is not a refinement
    /// subset of `fine`.
    pub fn node_map_into(&self, fine: &Self) -> Option<(Vec<usize>, Vec<usize>)> {
        let map_axis = |sub: &[f64], sup: &[f64]| -> Option<Vec<usize>> {
            let mut out = Vec::with_capacity(sub.len());
            let mut j = 0;
            for &c in sub {
                loop {
                    if j >= sup.len() {
                        return None;
                    }
                    if (sup[j] - c).abs() <= COORD_EPS_DEG {
                        out.push(j);
                        break;
                    }
                    if sup[j] > c {
                        return None;
                    }
                    j += 1;
                }
            }
            Some(out)
        };
        Some((map_axis(&self.lats, &fine.lats)?, map_axis(&self.lons, &fine.lons)?))
    }
}

/// Wrap a longitude difference into `[-180, 180)`.
///
/// Uses repeated exact +-360 steps so that inputs already shifted by whole
/// turns map back bit-exactly whenever the shifted values are representable.
pub fn wrap_lon_delta(mut d: f64) -> f64 {
    while d < -180.0 {
        d += 360.0;
    }
    while d >= 180.0 {
        d -= 360.0;
    }
    d
}

/// Wrap an absolute longitude into `[-180, 180)`.
pub fn wrap_lon(lon: f64) -> f64 {
    wrap_lon_delta(lon)
}

/// Multi-variable field values on a [`LatLonGrid`], stored `[var, lat, lon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTensor {
    grid: LatLonGrid,
    n_vars: usize,
    values: Vec<f64>,
}

impl FieldTensor {
    pub fn new(grid: LatLonGrid, n_vars: usize, values: Vec<f64>) -> Result<Self, GridError> {
        let expected = n_vars * grid.len();
        if values.len() != expected {
            return Err(GridError::LengthMismatch { expected, got: values.len() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteValue(bad));
        }
        Ok(Self { grid, n_vars, values })
    }

    pub fn constant(grid: LatLonGrid, n_vars: usize, value: f64) -> Self {
        let len = n_vars * grid.len();
        Self { grid, n_vars, values: vec![value; len] }
    }

    pub fn zeros(grid: LatLonGrid, n_vars: usize) -> Self {
        Self::constant(grid, n_vars, 0.0)
    }

    pub fn grid(&self) -> &LatLonGrid {
        &self.grid
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, var: usize, k: usize, m: usize) -> usize {
        (var * self.grid.n_lat + k) * self.grid.n_lon + m
    }

    #[inline]
    pub fn get(&self, var: usize, k: usize, m: usize) -> f64 {
        self.values[self.index(var, k, m)]
    }

    #[inline]
    pub fn set(&mut self, var: usize, k: usize, m: usize, value: f64) {
        let i = self.index(var, k, m);
        self.values[i] = value;
    }

    /// The contiguous `[lat, lon]` slab of one variable.
    pub fn var_slice(&self, var: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[var * n..(var + 1) * n]
    }

    pub fn same_layout(&self, other: &Self) -> Result<(), GridError> {
        if self.grid != other.grid || self.n_vars != other.n_vars {
            return Err(GridError::GridMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.n_vars,
                self.grid.n_lat,
                self.grid.n_lon,
                other.n_vars,
                other.grid.n_lat,
                other.grid.n_lon
            )));
        }
        Ok(())
    }
}

/// Location of a query latitude inside the row array: cell index and the
/// fractional offset in `[0, 1]`.
fn lat_cell(lats: &[f64], lat: f64) -> (usize, f64) {
    debug_assert!((-90.0..=90.0).contains(&lat));
    // Last cell whose lower edge is <= lat, clamped so lat = +90 lands in the
    // top cell with fraction 1.
    let mut k = lats.partition_point(|&l| l <= lat);
    k = k.saturating_sub(1).min(lats.len() - 2);
    let t = (lat - lats[k]) / (lats[k + 1] - lats[k]);
    (k, t)
}

/// Location of a query longitude: cell index (the cell may wrap around the
/// seam) and fractional offset.
fn lon_cell(lons: &[f64], lon: f64) -> (usize, f64) {
    let lon = wrap_lon(lon);
    let n = lons.len();
    let m = lons.partition_point(|&l| l <= lon);
    if m == 0 {
        // lon == lons[0] up to wrap; only reachable at exactly -180.
        return (0, 0.0);
    }
    let m = m - 1;
    if m == n - 1 {
        let span = lons[0] + 360.0 - lons[n - 1];
        (m, (lon - lons[n - 1]) / span)
    } else {
        (m, (lon - lons[m]) / (lons[m + 1] - lons[m]))
    }
}

/// Bilinearly sample one variable of a field at an arbitrary point.
/// Longitude is periodic; latitude must lie in `[-90, 90]`.
pub fn bilinear_sample(field: &FieldTensor, var: usize, lat: f64, lon: f64) -> f64 {
    let grid = field.grid();
    let (k, t) = lat_cell(grid.lats(), lat);
    let (m, u) = lon_cell(grid.lons(), lon);
    let m1 = (m + 1) % grid.n_lon();
    let v00 = field.get(var, k, m);
    let v01 = field.get(var, k, m1);
    let v10 = field.get(var, k + 1, m);
    let v11 = field.get(var, k + 1, m1);
    let top = (1.0 - u) * v00 + u * v01;
    let bot = (1.0 - u) * v10 + u * v11;
    (1.0 - t) * top + t * bot
}

/// Resample a field onto `dst` with bilinear interpolation.
pub fn bilinear_interp(field: &FieldTensor, dst: &LatLonGrid) -> FieldTensor {
    let mut out = FieldTensor::zeros(dst.clone(), field.n_vars());
    for var in 0..field.n_vars() {
        for k in 0..dst.n_lat() {
            for m in 0..dst.n_lon() {
                let v = bilinear_sample(field, var, dst.lat(k), dst.lon(m));
                out.set(var, k, m, v);
            }
        }
    }
    out
}

/// Catmull-Rom kernel weights for the four stencil points around a cell with
/// fractional offset `t`.
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t + 2.0 * t2 - t3),
        0.5 * (2.0 - 5.0 * t2 + 3.0 * t3),
        0.5 * (t + 4.0 * t2 - 3.0 * t3),
        0.5 * (-t2 + t3),
    ]
}

/// Bicubic (Catmull-Rom) sample of one variable at an arbitrary point.
/// The latitude stencil clamps at the poles; longitude wraps.
pub fn bicubic_sample(field: &FieldTensor, var: usize, lat: f64, lon: f64) -> f64 {
    let grid = field.grid();
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    let (k, t) = lat_cell(grid.lats(), lat);
    let (m, u) = lon_cell(grid.lons(), lon);
    let wl = catmull_rom_weights(t);
    let wo = catmull_rom_weights(u);
    let mut acc = 0.0;
    for (r, &wlat) in wl.iter().enumerate() {
        let row = (k as isize + r as isize - 1).clamp(0, n_lat as isize - 1) as usize;
        let mut row_acc = 0.0;
        for (c, &wlon) in wo.iter().enumerate() {
            let col = (m + n_lon + c - 1) % n_lon;
            row_acc += wlon * field.get(var, row, col);
        }
        acc += wlat * row_acc;
    }
    acc
}

/// Resample a field onto `dst` with bicubic interpolation.
/// The source grid must have at least 4 nodes per axis.
pub fn bicubic_interp(field: &FieldTensor, dst: &LatLonGrid) -> Result<FieldTensor, GridError> {
    let grid = field.grid();
    if grid.n_lat() < 4 || grid.n_lon() < 4 {
        return Err(GridError::DimensionTooSmall {
            need: 4,
            n_lat: grid.n_lat(),
            n_lon: grid.n_lon(),
        });
    }
    let mut out = FieldTensor::zeros(dst.clone(), field.n_vars());
    for var in 0..field.n_vars() {
        for k in 0..dst.n_lat() {
            for m in 0..dst.n_lon() {
                let v = bicubic_sample(field, var, dst.lat(k), dst.lon(m));
                out.set(var, k, m, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_small_grids() {
        let g = LatLonGrid::build(3, 4).unwrap();
        assert_eq!(g.lats(), &[-90.0, 0.0, 90.0]);
        assert_eq!(g.lons(), &[-180.0, -90.0, 0.0, 90.0]);
        let g = LatLonGrid::build(2, 2).unwrap();
        assert_eq!(g.lats(), &[-90.0, 90.0]);
        assert_eq!(g.lons(), &[-180.0, 0.0]);
    }

    #[test]
    fn build_era5_like_spacing() {
        let g = LatLonGrid::build(129, 256).unwrap();
        assert!((g.lat_spacing() - 1.40625).abs() < 1e-15);
        assert!((g.lon_spacing() - 1.40625).abs() < 1e-15);
        assert_eq!(g.lat(128), 90.0);
        assert!(*g.lons().last().unwrap() < 180.0);
    }

    #[test]
    fn build_rejects_tiny_grids() {
        assert!(matches!(
            LatLonGrid::build(1, 8),
            Err(GridError::DimensionTooSmall { .. })
        ));
        assert!(matches!(
            LatLonGrid::build(8, 1),
            Err(GridError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn latitude_weights_exact_values() {
        let g = LatLonGrid::build(7, 4).unwrap(); // lats: -90,-60,-30,0,30,60,90
        let w = g.latitude_weights();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[6], 0.0);
        assert!((w[1] - 0.5).abs() < 1e-15);
        assert!((w[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_peak_nearest_equator() {
        // n_lat = 2 is excluded: both rows are poles, so every weight is 0.
        for n_lat in 3..40 {
            let g = LatLonGrid::build(n_lat, 4).unwrap();
            let w = g.latitude_weights();
            assert!(w.iter().sum::<f64>() > 0.0);
            let argmax = (0..n_lat).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            let argmin_lat = (0..n_lat)
                .min_by(|&a, &b| g.lat(a).abs().total_cmp(&g.lat(b).abs()))
                .unwrap();
            assert_eq!(w[argmax], w[argmin_lat]);
            if g.lat(argmin_lat).abs() < 1e-12 {
                assert_eq!(w[argmax], 1.0);
            }
        }
    }

    #[test]
    fn refinement_detection() {
        let c = LatLonGrid::build(3, 4).unwrap();
        let f = LatLonGrid::build(5, 8).unwrap();
        assert!(LatLonGrid::is_refinement(&c, &f));
        let g = LatLonGrid::build(4, 6).unwrap();
        assert!(!LatLonGrid::is_refinement(&c, &g));
        assert!(LatLonGrid::is_refinement(&c, &c));
    }

    #[test]
    fn refine_ratio_rounding() {
        let g = LatLonGrid::build(33, 64).unwrap();
        let r4 = g.refine(4.0).unwrap();
        assert_eq!((r4.n_lat(), r4.n_lon()), (129, 256));
        assert!(LatLonGrid::is_refinement(&g, &r4));
        let r3 = g.refine(3.0).unwrap();
        assert_eq!((r3.n_lat(), r3.n_lon()), (97, 192));
        let r1 = g.refine(1.0).unwrap();
        assert_eq!(&r1, &g);
    }

    #[test]
    fn node_map_between_refinements() {
        let c = LatLonGrid::build(33, 64).unwrap();
        let f = LatLonGrid::build(129, 256).unwrap();
        let (lk, lm) = c.node_map_into(&f).unwrap();
        assert_eq!(lk[1], 4);
        assert_eq!(lm[1], 4);
        assert!(c.node_map_into(&LatLonGrid::build(4, 6).unwrap()).is_none());
    }

    #[test]
    fn field_rejects_bad_buffers() {
        let g = LatLonGrid::build(3, 4).unwrap();
        assert!(matches!(
            FieldTensor::new(g.clone(), 2, vec![0.0; 5]),
            Err(GridError::LengthMismatch { expected: 24, got: 5 })
        ));
        let mut v = vec![0.0; 12];
        v[7] = f64::NAN;
        assert!(matches!(
            FieldTensor::new(g, 1, v),
            Err(GridError::NonFiniteValue(7))
        ));
    }

    #[test]
    fn bilinear_reproduces_nodes_bit_for_bit() {
        let g = LatLonGrid::build(5, 8).unwrap();
        let values: Vec<f64> = (0..40).map(|i| (i as f64).sin() * 3.7).collect();
        let f = FieldTensor::new(g.clone(), 1, values).unwrap();
        for k in 0..5 {
            for m in 0..8 {
                let v = bilinear_sample(&f, 0, g.lat(k), g.lon(m));
                assert_eq!(v.to_bits(), f.get(0, k, m).to_bits());
            }
        }
    }

    #[test]
    fn bilinear_linear_in_longitude_midpoint() {
        // 2x4 grid, field linear in longitude index.
        let g = LatLonGrid::build(2, 4).unwrap();
        let mut f = FieldTensor::zeros(g.clone(), 1);
        for k in 0..2 {
            for m in 0..4 {
                f.set(0, k, m, 10.0 * m as f64);
            }
        }
        // Midpoint of the cell between columns 1 and 2 at a node latitude.
        let v = bilinear_sample(&f, 0, -90.0, -45.0);
        assert!((v - 15.0).abs() < 1e-12);
        // Midpoint of the seam cell: mean of last and first column values.
        let v = bilinear_sample(&f, 0, -90.0, 135.0);
        assert!((v - 15.0).abs() < 1e-12);
    }

    #[test]
    fn bicubic_matches_direct_stencil_at_midpoint() {
        // One nonzero node; the sampled value must equal the product of the
        // separable Catmull-Rom weights addressing that node.
        let g = LatLonGrid::build(4, 4).unwrap();
        let mut f = FieldTensor::zeros(g.clone(), 1);
        f.set(0, 1, 1, 1.0);
        let lat = 0.5 * (g.lat(1) + g.lat(2));
        let lon = 0.5 * (g.lon(1) + g.lon(2));
        let v = bicubic_sample(&f, 0, lat, lon);
        let w = catmull_rom_weights(0.5);
        assert!((v - w[1] * w[1]).abs() < 1e-12, "{v} vs {}", w[1] * w[1]);
        assert!((w[1] - 0.5625).abs() < 1e-15);
    }

    #[test]
    fn bicubic_rejects_small_sources() {
        let g = LatLonGrid::build(3, 4).unwrap();
        let f = FieldTensor::zeros(g, 1);
        let dst = LatLonGrid::build(5, 8).unwrap();
        assert!(matches!(
            bicubic_interp(&f, &dst),
            Err(GridError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn bicubic_node_exact() {
        let g = LatLonGrid::build(5, 8).unwrap();
        let values: Vec<f64> = (0..40).map(|i| (i as f64 * 0.71).cos()).collect();
        let f = FieldTensor::new(g.clone(), 1, values).unwrap();
        let out = bicubic_interp(&f, &g).unwrap();
        assert_eq!(out.values(), f.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn interp_exact_on_constants(
            n_lat in 4usize..12,
            n_lon in 4usize..16,
            c in -100.0f64..100.0,
            dn_lat in 2usize..20,
            dn_lon in 2usize..24,
        ) {
            let src = FieldTensor::constant(LatLonGrid::build(n_lat, n_lon).unwrap(), 2, c);
            let dst = LatLonGrid::build(dn_lat, dn_lon).unwrap();
            let bl = bilinear_interp(&src, &dst);
            let bc = bicubic_interp(&src, &dst).unwrap();
            for &v in bl.values() {
                prop_assert!((v - c).abs() < 1e-12);
            }
            for &v in bc.values() {
                prop_assert!((v - c).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_stays_within_stencil_bounds(
            seed in 0u64..1000,
            lat in -90.0f64..=90.0,
            lon in -180.0f64..180.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = LatLonGrid::build(5, 8).unwrap();
            let values: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let f = FieldTensor::new(g.clone(), 1, values).unwrap();
            let v = bilinear_sample(&f, 0, lat, lon);
            let (k, _) = super::lat_cell(g.lats(), lat);
            let (m, _) = super::lon_cell(g.lons(), lon);
            let m1 = (m + 1) % 8;
            let stencil = [f.get(0, k, m), f.get(0, k, m1), f.get(0, k + 1, m), f.get(0, k + 1, m1)];
            let lo = stencil.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = stencil.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn longitude_shift_by_full_turn_is_bit_identical(
            lat in -90.0f64..=90.0,
            lon_16ths in -2880i32..2880,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            // Dyadic query longitudes: lon + 360 is exactly representable, so
            // the full-turn shift must be undone bit-exactly by the wrap.
            let lon = lon_16ths as f64 / 16.0;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = LatLonGrid::build(4, 8).unwrap();
            let values: Vec<f64> = (0..32).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let f = FieldTensor::new(g, 1, values).unwrap();
            let a = bilinear_sample(&f, 0, lat, lon);
            let b = bilinear_sample(&f, 0, lat, lon + 360.0);
            prop_assert_eq!(a.to_bits(), b.to_bits());
            let a = bicubic_sample(&f, 0, lat, lon);
            let b = bicubic_sample(&f, 0, lat, lon + 360.0);
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
