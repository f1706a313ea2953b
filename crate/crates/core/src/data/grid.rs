use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Image;

pub struct PaletteColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const PALETTE: [PaletteColor; 10] = [
    PaletteColor {
        name: "red",
        rgb: [0.9, 0.1, 0.1],
    },
    PaletteColor {
        name: "green",
        rgb: [0.1, 0.8, 0.2],
    },
    PaletteColor {
        name: "blue",
        rgb: [0.1, 0.2, 0.9],
    },
    PaletteColor {
        name: "yellow",
        rgb: [0.95, 0.9, 0.1],
    },
    PaletteColor {
        name: "cyan",
        rgb: [0.1, 0.85, 0.9],
    },
    PaletteColor {
        name: "magenta",
        rgb: [0.85, 0.1, 0.8],
    },
    PaletteColor {
        name: "orange",
        rgb: [1.0, 0.55, 0.0],
    },
    PaletteColor {
        name: "purple",
        rgb: [0.45, 0.1, 0.6],
    },
    PaletteColor {
        name: "white",
        rgb: [1.0, 1.0, 1.0],
    },
    PaletteColor {
        name: "gray",
        rgb: [0.5, 0.5, 0.5],
    },
];

/// A `k x k` grid of palette indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridImage {
    pub k: usize,
    pub cells: Vec<u8>,
}

impl GridImage {
    pub fn new(k: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != k * k {
            return Err(Error::Dataset(format!(
                "grid of side {k} needs {} cells, got {}",
                k * k,
                cells.len()
            )));
        }
        Ok(GridImage { k, cells })
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.k + col]
    }

    /// Paints each cell as a uniform `(size/k) x (size/k)` block.
    pub fn render(&self, size: usize) -> Result<Image> {
        if self.k == 0 || !size.is_multiple_of(self.k) {
            return Err(Error::Config(format!(
                "image size {size} is not a multiple of grid size {}",
                self.k
            )));
        }
        let block = size / self.k;
        let mut pixels = vec![0.0; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let c = self.cell(y / block, x / block) as usize;
                let rgb = PALETTE
                    .get(c)
                    .ok_or_else(|| Error::Dataset(format!("color index {c} outside palette")))?
                    .rgb;
                pixels[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&rgb);
            }
        }
        Image::new(size, size, pixels)
    }
}
