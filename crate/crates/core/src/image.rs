//! Planar RGB images in `[-1, 1]` and one-channel masks, with PNG I/O.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use styleswap_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

/// CHW image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape {
                op: "Image::new",
                detail: format!("{} values for 3x{height}x{width}", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// RGB at `(row, col)` mapped to `[0, 1]`.
    pub fn pixel_unit(&self, row: usize, col: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let p = row * self.width + col;
        [0, 1, 2].map(|k| (self.data[k * plane + p] as f64 + 1.0) / 2.0)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(&[1, 3, self.height, self.width], data).expect("shape matches data")
    }

    /// Splits an `[N, 3, H, W]` tensor into images.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape {
                op: "Image::from_batch",
                detail: format!("expected 3 channels, got {c}"),
            });
        }
        let per = 3 * h * w;
        Ok((0..n)
            .map(|i| Self {
                height: h,
                width: w,
                data: t.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
            })
            .collect())
    }

    pub fn stack<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or(Error::Empty("image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.height != first.height || im.width != first.width {
                return Err(Error::Shape {
                    op: "Image::stack",
                    detail: format!(
                        "{}x{} vs {}x{}",
                        im.height, im.width, first.height, first.width
                    ),
                });
            }
            data.extend(im.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), 3, first.height, first.width], data)?)
    }

    fn to_rgb8(&self) -> RgbImage {
        let plane = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = y as usize * self.width + x as usize;
            image::Rgb([0, 1, 2].map(|k| to_u8(self.data[k * plane + p])))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a PNG, center-crops it to a square and resizes to `resolution`.
    pub fn load_png(path: &Path, resolution: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let side = img.width().min(img.height());
        let (x0, y0) = ((img.width() - side) / 2, (img.height() - side) / 2);
        let cropped = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
        let r = resolution as u32;
        let resized = if side == r {
            cropped
        } else {
            image::imageops::resize(&cropped, r, r, FilterType::Triangle)
        };
        let plane = resolution * resolution;
        let mut data = vec![0f32; 3 * plane];
        for (x, y, px) in resized.enumerate_pixels() {
            let p = y as usize * resolution + x as usize;
            for k in 0..3 {
                data[k * plane + p] = px[k] as f32 / 127.5 - 1.0;
            }
        }
        Self::new(resolution, resolution, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

/// One-channel mask, `H x W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "Mask::new",
                detail: format!("{} values for {height}x{width}", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("shape matches data")
    }

    /// Splits an `[N, 1, H, W]` tensor into masks.
    pub fn from_batch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Self>> {
        let (n, _, h, w) = t.dims4()?;
        let per = h * w;
        Ok((0..n)
            .map(|i| Self {
                height: h,
                width: w,
                data: t.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v.as_f64() as f32)
                    .collect(),
            })
            .collect())
    }

    /// Writes `255 * value` as 8-bit gray.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.data[y as usize * self.width + x as usize];
            image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Mask rendered as a gray image in `[-1, 1]`.
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend(self.data.iter().map(|v| 2.0 * v - 1.0));
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Tiles equally sized images into a grid, `rows[r][c]`.
pub fn grid(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or(Error::Empty("image grid"))?;
    let (h, w) = (first.height, first.width);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut out = Image::filled(gh, gw, -1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, im) in row.iter().enumerate() {
            if im.height != h || im.width != w {
                return Err(Error::Shape {
                    op: "grid",
                    detail: "tiles differ in size".into(),
                });
            }
            for k in 0..3 {
                for y in 0..h {
                    let src = &im.data[k * h * w + y * w..k * h * w + (y + 1) * w];
                    let off = k * gh * gw + (r * h + y) * gw + c * w;
                    out.data[off..off + w].copy_from_slice(src);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i % 97) as f32 / 48.0) - 1.0).collect();
        let im = Image::new(16, 16, data).unwrap();
        let path = dir.path().join("a.png");
        im.save_png(&path).unwrap();
        let back = Image::load_png(&path, 16).unwrap();
        for (a, b) in im.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 127.0);
        }
    }

    #[test]
    fn grid_places_tiles() {
        let a = Image::filled(2, 2, 0.5);
        let b = Image::filled(2, 2, -0.5);
        let g = grid(&[vec![a, b]]).unwrap();
        assert_eq!((g.height(), g.width()), (2, 4));
        assert_eq!(g.pixel_unit(0, 0)[0], 0.75);
        assert_eq!(g.pixel_unit(1, 3)[2], 0.25);
    }
}
