use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved (HWC) raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster<T = u8> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// `size×size` window at `(y0, x0)`; coordinates past the edge are
    /// mirrored back inside (edge pixel not repeated).
    fn window(&self, y0: usize, x0: usize, size: usize) -> Raster<T> {
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in y0..y0 + size {
            let sy = reflect(y, self.height);
            for x in x0..x0 + size {
                data.extend_from_slice(self.pixel(sy, reflect(x, self.width)));
            }
        }
        Raster {
            channels: self.channels,
            height: size,
            width: size,
            data,
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilePolicy {
    /// Only whole tiles; the ragged right/bottom border is discarded.
    #[default]
    Drop,
    /// Mirror-pad to a whole number of tiles so every pixel is covered.
    ReflectPad,
}

/// Tile rows and columns for an `height×width` raster.
pub fn tile_grid(height: usize, width: usize, size: usize, policy: TilePolicy) -> (usize, usize) {
    match policy {
        TilePolicy::Drop => (height / size, width / size),
        TilePolicy::ReflectPad => (height.div_ceil(size), width.div_ceil(size)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub image: Raster<u8>,
    pub mask: Option<Raster<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSet {
    /// Row-major by (tile row, tile col).
    pub tiles: Vec<Tile>,
    pub rows: usize,
    pub cols: usize,
    /// Set when the raster was too small to yield any tile.
    pub warning: Option<String>,
}

/// Cuts an image and its optional mask into `size×size` tiles at identical
/// offsets.
pub fn tile(image: &Raster<u8>, mask: Option<&Raster<u8>>, size: usize, policy: TilePolicy) -> Result<TileSet> {
    if size < 16 || !size.is_multiple_of(16) {
        return Err(Error::Param(format!(
            "tile size must be a multiple of 16 and at least 16, got {size}"
        )));
    }
    if let Some(m) = mask {
        if (m.height, m.width) != (image.height, image.width) {
            return Err(Error::Data(format!(
                "mask is {}x{}, image is {}x{}",
                m.height, m.width, image.height, image.width
            )));
        }
    }
    let (rows, cols) = tile_grid(image.height, image.width, size, policy);
    let warning = (rows * cols == 0).then(|| {
        format!(
            "{}x{} raster is smaller than one {size}x{size} tile; no tiles produced",
            image.height, image.width
        )
    });
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (y, x) = (row * size, col * size);
            tiles.push(Tile {
                row,
                col,
                image: image.window(y, x, size),
                mask: mask.map(|m| m.window(y, x, size)),
            });
        }
    }
    Ok(TileSet {
        tiles,
        rows,
        cols,
        warning,
    })
}

/// Reassembles row-major tiles and crops to `height×width`.
pub fn untile<T: Copy + Default>(
    tiles: &[Raster<T>],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
) -> Result<Raster<T>> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Shape(format!(
            "{} tiles for a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (size, ch) = (tiles[0].height, tiles[0].channels);
    if rows * size < height || cols * size < width {
        return Err(Error::Shape(format!(
            "{rows}x{cols} tiles of {size} cannot cover {height}x{width}"
        )));
    }
    let mut data = vec![T::default(); height * width * ch];
    for y in 0..height {
        for x in 0..width {
            let t = &tiles[(y / size) * cols + x / size];
            let src = t.pixel(y % size, x % size);
            let dst = (y * width + x) * ch;
            data[dst..dst + ch].copy_from_slice(src);
        }
    }
    Raster::new(ch, height, width, data)
}
