use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::{Scalar, Tensor};

/// `(row, col)` grid coordinate.
pub type Cell = (usize, usize);

/// Smallest extent [`generate_layout`] produces.
pub const MIN_EXTENT: usize = 16;

/// Binary region-of-interest mask plus the transmitter cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMap {
    height: usize,
    width: usize,
    cell_size_m: f64,
    roi: Vec<bool>,
    tx: Cell,
}

impl GeoMap {
    pub fn new(height: usize, width: usize, cell_size_m: f64, roi: Vec<bool>, tx: Cell) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry(format!("empty map {height}x{width}")));
        }
        if roi.len() != height * width {
            return Err(Error::Geometry(format!(
                "mask holds {} cells, expected {height}x{width}",
                roi.len()
            )));
        }
        if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
            return Err(Error::Geometry(format!("cell size {cell_size_m} m")));
        }
        if tx.0 >= height || tx.1 >= width {
            return Err(Error::Geometry(format!("transmitter {tx:?} outside {height}x{width}")));
        }
        if !roi[tx.0 * width + tx.1] {
            return Err(Error::Geometry(format!("transmitter {tx:?} stands inside a building")));
        }
        Ok(Self {
            height,
            width,
            cell_size_m,
            roi,
            tx,
        })
    }

    /// An obstacle-free map.
    pub fn open(height: usize, width: usize, cell_size_m: f64, tx: Cell) -> Result<Self> {
        Self::new(height, width, cell_size_m, vec![true; height * width], tx)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn tx(&self) -> Cell {
        self.tx
    }

    pub fn roi(&self) -> &[bool] {
        &self.roi
    }

    pub fn is_roi(&self, (r, c): Cell) -> bool {
        self.roi[r * self.width + c]
    }

    pub fn roi_count(&self) -> usize {
        self.roi.iter().filter(|&&v| v).count()
    }

    /// Fraction of cells covered by buildings.
    pub fn building_fraction(&self) -> f64 {
        1.0 - self.roi_count() as f64 / self.roi.len() as f64
    }

    /// Marks a cell as building (or free). The transmitter cell stays free.
    pub fn set_roi(&mut self, (r, c): Cell, free: bool) -> Result<()> {
        if r >= self.height || c >= self.width {
            return Err(Error::Geometry(format!("cell {:?} out of bounds", (r, c))));
        }
        if !free && (r, c) == self.tx {
            return Err(Error::Geometry("cannot build on the transmitter cell".into()));
        }
        self.roi[r * self.width + c] = free;
        Ok(())
    }
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    for e in [height, width] {
        if e < MIN_EXTENT || !e.is_power_of_two() {
            return Err(Error::Geometry(format!(
                "map extents must be powers of two >= {MIN_EXTENT}, got {height}x{width}"
            )));
        }
    }
    Ok(())
}

/// Building placement for [`generate_layout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub n_rects: usize,
    pub rect_min: usize,
    pub rect_max: usize,
}

impl LayoutParams {
    /// Scales the building count and size with the map extent.
    pub fn for_size(size: usize) -> Self {
        Self {
            n_rects: (size / 8).max(2),
            rect_min: (size / 16).max(2),
            rect_max: (size / 4).max(3),
        }
    }
}

/// Stamps `n_rects` axis-aligned buildings onto an open map, then places the
/// transmitter uniformly on a remaining free cell.
pub fn generate_layout(seed: u64, height: usize, width: usize, layout: &LayoutParams, cell_size_m: f64) -> Result<GeoMap> {
    check_extent(height, width)?;
    if layout.rect_min == 0 || layout.rect_min > layout.rect_max {
        return Err(Error::Config(format!(
            "building size range {}..={} is empty",
            layout.rect_min, layout.rect_max
        )));
    }
    let mut roi = vec![true; height * width];
    let mut rects = Rng64::keyed(seed, "layout.rects");
    for _ in 0..layout.n_rects {
        let top = rects.below(height as u64) as usize;
        let left = rects.below(width as u64) as usize;
        let rh = rects.range_inclusive(layout.rect_min as u64, layout.rect_max as u64) as usize;
        let rw = rects.range_inclusive(layout.rect_min as u64, layout.rect_max as u64) as usize;
        for r in top..(top + rh).min(height) {
            roi[r * width + left..r * width + (left + rw).min(width)].fill(false);
        }
    }
    let free: Vec<usize> = (0..roi.len()).filter(|&i| roi[i]).collect();
    if free.is_empty() {
        return Err(Error::Geometry("no free cell left for the transmitter".into()));
    }
    let mut txs = Rng64::keyed(seed, "layout.tx");
    let pick = free[txs.below(free.len() as u64) as usize];
    GeoMap::new(height, width, cell_size_m, roi, (pick / width, pick % width))
}

/// Number of building cells strictly between `src` and `dst` on the
/// Bresenham line. The line is always traced from the lexicographically
/// smaller endpoint, so the count is symmetric.
pub fn los_wall_count(geo: &GeoMap, src: Cell, dst: Cell) -> Result<usize> {
    for c in [src, dst] {
        if c.0 >= geo.height || c.1 >= geo.width {
            return Err(Error::Geometry(format!(
                "cell {c:?} outside {}x{}",
                geo.height, geo.width
            )));
        }
    }
    let (a, b) = if src <= dst { (src, dst) } else { (dst, src) };
    Ok(wall_count_unchecked(geo, a, b))
}

fn wall_count_unchecked(geo: &GeoMap, a: Cell, b: Cell) -> usize {
    let (mut y, mut x) = (a.0 as i64, a.1 as i64);
    let (y1, x1) = (b.0 as i64, b.1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut count = 0;
    loop {
        if (y, x) == (y1, x1) {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        if (y, x) != (y1, x1) && !geo.roi[y as usize * geo.width + x as usize] {
            count += 1;
        }
    }
    count
}

/// Two-channel network input `[1, 2, H, W]`: the RoI mask, then a one-hot
/// transmitter map.
pub fn assemble_input<T: Scalar>(geo: &GeoMap) -> Tensor<T> {
    assemble_batch(std::slice::from_ref(geo)).expect("single map is a consistent batch")
}

/// Stacks several maps of equal extent into `[N, 2, H, W]`.
pub fn assemble_batch<T: Scalar>(geos: &[GeoMap]) -> Result<Tensor<T>> {
    let first = geos
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let plane = h * w;
    let mut data = vec![T::zero(); geos.len() * 2 * plane];
    for (i, geo) in geos.iter().enumerate() {
        if (geo.height, geo.width) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {}x{}",
                geo.height, geo.width
            )));
        }
        let base = i * 2 * plane;
        for (d, &free) in data[base..base + plane].iter_mut().zip(&geo.roi) {
            *d = if free { T::one() } else { T::zero() };
        }
        data[base + plane + geo.tx.0 * w + geo.tx.1] = T::one();
    }
    Tensor::from_vec(&[geos.len(), 2, h, w], data)
}
