use super::{GeomError, Vec3};

/// Dense multi-channel voxel grid.
///
/// Cell `(i, j, k)` spans `origin + [i, i+1) · cell` (per axis) and its value
/// is attributed to the cell centre. Storage is x-fastest with channels
/// interleaved: `values[lin(i, j, k) · C + c]`, `lin = i + nx·(j + ny·k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    origin: Vec3,
    cell: f64,
    res: [usize; 3],
    channels: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(origin: Vec3, cell: f64, res: [usize; 3], channels: usize) -> Result<Self, GeomError> {
        let n = res.iter().product::<usize>() * channels;
        Self::from_values(origin, cell, res, channels, vec![0.0; n])
    }

    pub fn from_values(
        origin: Vec3,
        cell: f64,
        res: [usize; 3],
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self, GeomError> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(GeomError::InvalidGrid(format!("cell size {cell}")));
        }
        if res.contains(&0) || channels == 0 {
            return Err(GeomError::InvalidGrid(format!("resolution {res:?} x {channels} channels")));
        }
        if values.len() != res.iter().product::<usize>() * channels {
            return Err(GeomError::InvalidGrid(format!("{} values for {res:?} x {channels}", values.len())));
        }
        Ok(Self { origin, cell, res, channels, values })
    }

    /// Cube of `res³` cells spanning `extent` meters, centred on `center`.
    pub fn cube(center: Vec3, extent: f64, res: usize, channels: usize) -> Result<Self, GeomError> {
        let origin = center - Vec3::repeat(extent * 0.5);
        Self::zeros(origin, extent / res as f64, [res; 3], channels)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }
    pub fn cell_size(&self) -> f64 {
        self.cell
    }
    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }
    pub fn channels(&self) -> usize {
        self.channels
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
    pub fn cell_count(&self) -> usize {
        self.res.iter().product()
    }
    pub fn is_cubical(&self) -> bool {
        self.res[0] == self.res[1] && self.res[1] == self.res[2]
    }
    pub fn extent(&self) -> Vec3 {
        Vec3::new(self.res[0] as f64, self.res[1] as f64, self.res[2] as f64) * self.cell
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.res[0] * (j + self.res[1] * k)
    }

    pub fn cell_coords(&self, lin: usize) -> [usize; 3] {
        let i = lin % self.res[0];
        let j = (lin / self.res[0]) % self.res[1];
        let k = lin / (self.res[0] * self.res[1]);
        [i, j, k]
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.cell
    }

    /// Cell containing `p`, if inside the grid bounds.
    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let q = (p - self.origin) / self.cell;
        let mut out = [0; 3];
        for a in 0..3 {
            if !(q[a] >= 0.0) || q[a] >= self.res[a] as f64 {
                return None;
            }
            out[a] = q[a] as usize;
        }
        Some(out)
    }

    pub fn get(&self, lin: usize, c: usize) -> f64 {
        self.values[lin * self.channels + c]
    }

    pub fn cell_values(&self, lin: usize) -> &[f64] {
        &self.values[lin * self.channels..(lin + 1) * self.channels]
    }

    pub fn cell_values_mut(&mut self, lin: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.values[lin * c..(lin + 1) * c]
    }

    /// Same geometry, different channel count, zero-filled.
    pub fn zeros_like(&self, channels: usize) -> Self {
        Self {
            origin: self.origin,
            cell: self.cell,
            res: self.res,
            channels,
            values: vec![0.0; self.cell_count() * channels],
        }
    }

    pub fn with_values(&self, channels: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.cell_count() * channels);
        Self { origin: self.origin, cell: self.cell, res: self.res, channels, values }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.cell_of(p).is_some()
    }
}

/// The eight cells (and weights) blended by a trilinear lookup. Corners that
/// fall outside the grid are omitted, which is equivalent to zero padding.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrilinearStencil {
    pub cells: [usize; 8],
    pub weights: [f64; 8],
    pub len: usize,
}

impl TrilinearStencil {
    /// Empty for points outside the grid bounds.
    pub fn new(grid: &VoxelGrid, p: &Vec3) -> Self {
        let mut s = Self::default();
        if !grid.contains(p) {
            return s;
        }
        let q = (p - grid.origin) / grid.cell - Vec3::repeat(0.5);
        let base = q.map(f64::floor);
        let frac = q - base;
        for corner in 0..8 {
            let mut idx = [0usize; 3];
            let mut w = 1.0;
            let mut inside = true;
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                let ia = base[a] as i64 + hi as i64;
                if ia < 0 || ia >= grid.res[a] as i64 {
                    inside = false;
                    break;
                }
                idx[a] = ia as usize;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if inside && w != 0.0 {
                s.cells[s.len] = grid.linear_index(idx[0], idx[1], idx[2]);
                s.weights[s.len] = w;
                s.len += 1;
            }
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.cells[..self.len].iter().copied().zip(self.weights[..self.len].iter().copied())
    }

    /// Accumulates the blended channel vector into `out`.
    pub fn gather(&self, grid: &VoxelGrid, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (cell, w) in self.iter() {
            for (o, v) in out.iter_mut().zip(grid.cell_values(cell)) {
                *o += w * v;
            }
        }
    }
}

/// Trilinear blend of the 8 cells around `p`; zero outside the grid bounds.
pub fn trilinear_sample(grid: &VoxelGrid, p: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; grid.channels];
    TrilinearStencil::new(grid, p).gather(grid, &mut out);
    out
}

/// Dense 2D feature map with a pixel mapping: image pixel coordinates
/// `uv` map to map coordinates `(uv − offset) / scale`, and map pixel
/// `(x, y)` has its centre at map coordinate `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
    scale: f64,
    offset: f64,
}

impl FeatureMap2D {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self, GeomError> {
        Self::from_values(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn from_values(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self, GeomError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GeomError::InvalidGrid(format!("feature map {width}x{height}x{channels}")));
        }
        if values.len() != width * height * channels {
            return Err(GeomError::InvalidGrid(format!("{} values for {width}x{height}x{channels}", values.len())));
        }
        Ok(Self { width, height, channels, values, scale: 1.0, offset: 0.0 })
    }

    /// Sets the image-pixel → map-pixel mapping.
    pub fn with_mapping(mut self, scale: f64, offset: f64) -> Self {
        self.scale = scale;
        self.offset = offset;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn offset(&self) -> f64 {
        self.offset
    }
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y) * self.channels;
        &self.values[i..i + self.channels]
    }
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let c = self.channels;
        let i = self.index(x, y) * c;
        &mut self.values[i..i + c]
    }

    /// Up to four `(pixel index, weight)` pairs for a bilinear lookup at
    /// image coordinates `uv`. Empty outside the map.
    pub fn bilinear_stencil(&self, uv: [f64; 2]) -> ([usize; 4], [f64; 4], usize) {
        let mut cells = [0; 4];
        let mut weights = [0.0; 4];
        let mut n = 0;
        let x = (uv[0] - self.offset) / self.scale;
        let y = (uv[1] - self.offset) / self.scale;
        let inside = x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5;
        if !inside {
            return (cells, weights, 0);
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for corner in 0..4 {
            let (dx, dy) = (corner & 1, corner >> 1);
            let (xi, yi) = (x0 as i64 + dx as i64, y0 as i64 + dy as i64);
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                continue;
            }
            let w = if dx == 1 { fx } else { 1.0 - fx } * if dy == 1 { fy } else { 1.0 - fy };
            if w != 0.0 {
                cells[n] = self.index(xi as usize, yi as usize);
                weights[n] = w;
                n += 1;
            }
        }
        (cells, weights, n)
    }
}

/// Bilinear blend of the 4 pixels around `uv` (image pixel coordinates);
/// zero outside the map.
pub fn bilinear_sample(map: &FeatureMap2D, uv: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    let (cells, weights, n) = map.bilinear_stencil(uv);
    for t in 0..n {
        let v = &map.values[cells[t] * map.channels..(cells[t] + 1) * map.channels];
        for (o, x) in out.iter_mut().zip(v) {
            *o += weights[t] * x;
        }
    }
    out
}
