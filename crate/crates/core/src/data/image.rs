use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// An RGB image stored channel-major (3 × height × width), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<Float>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<Float>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::shape("image", format!("{} values for 3x{height}x{width}", data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => Image::from_data(w, h, t.data().to_vec()),
            ref s => Err(Error::shape("image", format!("expected 3xHxW, got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("image dimensions are nonzero")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> Float {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: Float) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [Float; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [Float; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer positions); samples outside the image read as zero.
    pub fn sample(&self, c: usize, x: Float, y: Float) -> Float {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let at = |xi: isize, yi: isize| -> Float {
            if xi < 0 || yi < 0 || xi as usize >= self.width || yi as usize >= self.height {
                0.0
            } else {
                self.get(c, yi as usize, xi as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Builds a `width × height` image whose pixel `(u, v)` is sampled at
    /// the source pixel coordinates returned by `source(u, v)`.
    pub fn warp(&self, width: usize, height: usize, source: impl Fn(usize, usize) -> (Float, Float)) -> Image {
        let mut out = Image::new(width, height);
        for v in 0..height {
            for u in 0..width {
                let (x, y) = source(u, v);
                for c in 0..3 {
                    out.set(c, v, u, self.sample(c, x, y));
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: Float| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let [r, g, b] = self.pixel(x as usize, y as usize);
            Rgb([q(r), q(g), q(b)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            let rgb = px.0.map(|v| v as Float / 255.0);
            out.set_pixel(x as usize, y as usize, rgb);
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Geometry(format!("{} is empty", path.display())));
        }
        Ok(Image::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
