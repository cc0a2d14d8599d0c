use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel rectangle `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl RegionBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn overlaps(&self, other: &RegionBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "3x3")]
    G3,
    #[serde(rename = "4x4")]
    G4,
}

impl Granularity {
    pub const ALL: [Granularity; 2] = [Granularity::G3, Granularity::G4];

    pub fn side(self) -> u32 {
        match self {
            Granularity::G3 => 3,
            Granularity::G4 => 4,
        }
    }

    pub fn cells(self) -> usize {
        (self.side() * self.side()) as usize
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{0}x{0}", self.side())
    }
}

/// Row-major `g × g` tiling of an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub granularity: Granularity,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<RegionBox>,
}

/// Tile a `width × height` image into `g × g` cells. Cells are
/// `⌊W/g⌋ × ⌊H/g⌋` except the last column and row, which absorb the
/// remainder.
pub fn make_grid(width: u32, height: u32, granularity: Granularity) -> Result<RegionGrid> {
    let g = granularity.side();
    if width < g || height < g {
        return Err(Error::Precondition(format!(
            "image {width}x{height} is smaller than the {granularity} grid"
        )));
    }
    let cell_w = width / g;
    let cell_h = height / g;
    let mut boxes = Vec::with_capacity(granularity.cells());
    for r in 0..g {
        for c in 0..g {
            let x = c * cell_w;
            let y = r * cell_h;
            let w = if c == g - 1 { width - x } else { cell_w };
            let h = if r == g - 1 { height - y } else { cell_h };
            boxes.push(RegionBox { x, y, w, h });
        }
    }
    Ok(RegionGrid { granularity, width, height, boxes })
}
