use crate::Frame;

/// Boolean pixel mask, row-major `height × width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Nearest-neighbour resample to another grid, used to compare masks
    /// with coarse attention maps.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                let sy = (y * self.height + self.height / 2) / height;
                let sx = (x * self.width + self.width / 2) / width;
                out.bits[y * width + x] = self.bits[sy.min(self.height - 1) * self.width + sx.min(self.width - 1)];
            }
        }
        out
    }
}

/// Float RGB canvas over the arena `[-1, 1]²`, y pointing up.
pub struct Canvas {
    size: usize,
    rgb: Vec<f32>,
}

impl Canvas {
    /// Checkered floor in two shades of blue.
    pub fn floor(size: usize) -> Self {
        let mut rgb = Vec::with_capacity(size * size * 3);
        let cell = (size / 8).max(1);
        for y in 0..size {
            for x in 0..size {
                let c = if (x / cell + y / cell) % 2 == 0 { [0.16, 0.24, 0.42] } else { [0.21, 0.31, 0.52] };
                rgb.extend_from_slice(&c);
            }
        }
        Self { size, rgb }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.size as f64;
        ((x + 1.0) * 0.5 * s, (1.0 - y) * 0.5 * s)
    }

    fn blend(&mut self, px: usize, py: usize, color: [f32; 3], alpha: f32) {
        let i = (py * self.size + px) * 3;
        for c in 0..3 {
            self.rgb[i + c] = self.rgb[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Paints every pixel by coverage from a signed distance (in pixels,
    /// negative inside) and returns the covered mask.
    fn paint(&mut self, color: [f32; 3], sdf: impl Fn(f64, f64) -> f64) -> Mask {
        let mut mask = Mask::empty(self.size, self.size);
        for py in 0..self.size {
            for px in 0..self.size {
                let d = sdf(px as f64 + 0.5, py as f64 + 0.5);
                let alpha = (0.5 - d).clamp(0.0, 1.0) as f32;
                if alpha > 0.0 {
                    self.blend(px, py, color, alpha);
                }
                mask.bits[py * self.size + px] = alpha >= 0.5;
            }
        }
        mask
    }

    pub fn disk(&mut self, x: f64, y: f64, r: f64, color: [f32; 3]) -> Mask {
        let (cx, cy) = self.to_px(x, y);
        let rp = r * 0.5 * self.size as f64;
        self.paint(color, |px, py| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - rp)
    }

    /// Segment from `a` to `b` with rounded ends, half-thickness `r`.
    pub fn capsule(&mut self, a: (f64, f64), b: (f64, f64), r: f64, color: [f32; 3]) -> Mask {
        let (ax, ay) = self.to_px(a.0, a.1);
        let (bx, by) = self.to_px(b.0, b.1);
        let rp = r * 0.5 * self.size as f64;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.paint(color, |px, py| {
            let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
            ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt() - rp
        })
    }

    /// Axis-aligned box given by its centre and half extents.
    pub fn rect(&mut self, x: f64, y: f64, hx: f64, hy: f64, color: [f32; 3]) -> Mask {
        let (cx, cy) = self.to_px(x, y);
        let s = 0.5 * self.size as f64;
        let (hxp, hyp) = (hx * s, hy * s);
        self.paint(color, |px, py| {
            let qx = (px - cx).abs() - hxp;
            let qy = (py - cy).abs() - hyp;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0)
        })
    }

    pub fn finish(self) -> Frame {
        let pixels = self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Frame::new(self.size, self.size, pixels)
    }
}

/// Coarse word for a coordinate in `[-1, 1]`, used in frame descriptions.
pub fn region(x: f64, y: f64) -> String {
    let col = if x < -0.33 {
        "left"
    } else if x > 0.33 {
        "right"
    } else {
        "center"
    };
    let row = if y > 0.33 {
        "upper"
    } else if y < -0.33 {
        "lower"
    } else {
        "middle"
    };
    format!("{row} {col}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_mask_area_is_close_to_analytic() {
        let mut c = Canvas::floor(64);
        let m = c.disk(0.0, 0.0, 0.25, [1.0, 0.0, 0.0]);
        let area = std::f64::consts::PI * 8.0 * 8.0;
        assert!((m.count() as f64 - area).abs() < 0.1 * area, "{}", m.count());
    }

    #[test]
    fn resize_keeps_full_and_empty() {
        let full = Mask { height: 4, width: 4, bits: vec![true; 16] };
        assert_eq!(full.resize(2, 2).count(), 4);
        assert_eq!(Mask::empty(64, 64).resize(8, 8).count(), 0);
    }
}
