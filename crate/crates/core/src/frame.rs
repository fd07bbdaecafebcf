use orca_tape::{Scalar, Tensor};

/// An RGB image observation, `u8` in height × width × channel order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "frame buffer size");
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn rgb(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-first tensor `[3, H, W]` with values in `[0, 1]`.
    pub fn to_chw<S: Scalar>(&self) -> Tensor<S> {
        let hw = self.height * self.width;
        let inv = S::c(1.0 / 255.0);
        let mut data = vec![S::zero(); 3 * hw];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = S::c(f64::from(px[c])) * inv;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data)
    }

    /// Stacks frames into `[N, 3, H, W]`.
    pub fn batch<S: Scalar>(frames: &[&Frame]) -> Tensor<S> {
        let parts: Vec<Tensor<S>> = frames.iter().map(|f| f.to_chw()).collect();
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_layout_and_range() {
        let mut f = Frame::filled(2, 2, [0, 0, 0]);
        f.pixels[3 * 3] = 255; // pixel (1, 1), red
        let t: Tensor<f64> = f.to_chw();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(t.data()[3], 1.0);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
