use crate::tensor::Tensor;

/// Row-major grayscale image with `f32` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(height * width, pixels.len(), "image geometry");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(top + h <= self.height && left + w <= self.width);
        let mut out = Vec::with_capacity(h * w);
        for y in top..top + h {
            out.extend_from_slice(&self.pixels[y * self.width + left..y * self.width + left + w]);
        }
        Image::new(h, w, out)
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    /// Resizing to the same geometry returns an identical image.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                let top = self.get(y0, x0) * (1.0 - tx) + self.get(y0, x1) * tx;
                let bot = self.get(y1, x0) * (1.0 - tx) + self.get(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
        Image::new(h, w, out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            out.extend(row.iter().rev());
        }
        Image::new(self.height, self.width, out)
    }

    pub fn mean(&self) -> f32 {
        self.pixels.iter().sum::<f32>() / self.pixels.len().max(1) as f32
    }

    /// Stacks equally sized images into an (N, 1, H, W) tensor.
    pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<f32> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut hw = None;
        for im in images {
            let g = (im.height, im.width);
            assert!(hw.is_none_or(|p| p == g), "batch images must share geometry");
            hw = Some(g);
            data.extend_from_slice(&im.pixels);
            n += 1;
        }
        let (h, w) = hw.unwrap_or((0, 0));
        Tensor::new(vec![n, 1, h, w], data).expect("batch geometry")
    }
}
