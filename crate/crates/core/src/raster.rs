//! Small square RGB rasters in f64, the working currency of the view
//! pipeline and the network input. Values are nominally in [0,1] but the
//! type does not enforce it; augmentation clamps where the contract says
//! so.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TileRaster {
    px: usize,
    /// Row-major, interleaved RGB: data[(y*px + x)*3 + c].
    data: Vec<f64>,
}

impl TileRaster {
    pub fn zeros(px: usize) -> Self {
        TileRaster { px, data: vec![0.0; px * px * 3] }
    }

    pub fn from_data(px: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != px * px * 3 {
            return Err(Error::Domain(format!(
                "raster data length {} does not match {px}x{px}x3",
                data.len()
            )));
        }
        Ok(TileRaster { px, data })
    }

    /// From 8-bit interleaved RGB; values scaled to [0,1] by /255.
    pub fn from_rgb8(px: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != px * px * 3 {
            return Err(Error::Domain(format!(
                "rgb8 length {} does not match {px}x{px}x3",
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(TileRaster { px, data })
    }

    pub fn px(&self) -> usize {
        self.px
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.px + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.px + x) * 3 + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Per-pixel luma (Rec. 601 weights), used by saturation adjustment.
    #[inline]
    pub fn luma(r: f64, g: f64, b: f64) -> f64 {
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn hflip(&mut self) {
        let px = self.px;
        for y in 0..px {
            for x in 0..px / 2 {
                for c in 0..3 {
                    let a = (y * px + x) * 3 + c;
                    let b = (y * px + (px - 1 - x)) * 3 + c;
                    self.data.swap(a, b);
                }
            }
        }
    }

    pub fn vflip(&mut self) {
        let px = self.px;
        for y in 0..px / 2 {
            let (top, bot) = (y * px * 3, (px - 1 - y) * px * 3);
            for i in 0..px * 3 {
                self.data.swap(top + i, bot + i);
            }
        }
    }

    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Crop the axis-aligned square `[ox, ox+side) x [oy, oy+side)` and
    /// resize it to `out_px` with bilinear interpolation (align-corners
    /// = false convention: sample at pixel centers).
    pub fn resized_crop(&self, ox: usize, oy: usize, side: usize, out_px: usize) -> Result<TileRaster> {
        if side == 0 || out_px == 0 {
            return Err(Error::Domain("resized_crop: zero-sized crop".into()));
        }
        if ox + side > self.px || oy + side > self.px {
            return Err(Error::Domain(format!(
                "resized_crop: crop {side}@({ox},{oy}) exceeds {}px tile",
                self.px
            )));
        }
        let mut out = TileRaster::zeros(out_px);
        let scale = side as f64 / out_px as f64;
        let max_src = (side - 1) as f64;
        for y in 0..out_px {
            // Source coordinate of this output pixel's center, clamped so
            // edge pixels replicate.
            let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, max_src);
            let y0 = sy.floor() as usize;
            let fy = sy - y0 as f64;
            let y1 = (y0 + 1).min(side - 1);
            for x in 0..out_px {
                let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, max_src);
                let x0 = sx.floor() as usize;
                let fx = sx - x0 as f64;
                let x1 = (x0 + 1).min(side - 1);
                for c in 0..3 {
                    let p00 = self.get(oy + y0, ox + x0, c);
                    let p01 = self.get(oy + y0, ox + x1, c);
                    let p10 = self.get(oy + y1, ox + x0, c);
                    let p11 = self.get(oy + y1, ox + x1, c);
                    let top = p00 + fx * (p01 - p00);
                    let bot = p10 + fx * (p11 - p10);
                    out.set(y, x, c, top + fy * (bot - top));
                }
            }
        }
        Ok(out)
    }
}
