//! 8-bit PNG input and output.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::Result;
use crate::tensor::{BinaryMask, ImageGrid, Tensor3};

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_from_image(img: &RgbImage) -> ImageGrid {
    let (w, h) = img.dimensions();
    Tensor3::from_fn(h as usize, w as usize, 3, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn image_from_rgb(grid: &ImageGrid) -> RgbImage {
    RgbImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let p = grid.pixel(y as usize, x as usize);
        if p.len() >= 3 {
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        } else {
            let g = to_u8(p[0]);
            Rgb([g, g, g])
        }
    })
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<ImageGrid> {
    Ok(rgb_from_image(&image::open(path)?.to_rgb8()))
}

/// Grayscale values above 127 are set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::from_fn(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

pub fn save_rgb(path: impl AsRef<Path>, grid: &ImageGrid) -> Result<()> {
    image_from_rgb(grid).save(path)?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([(x * 50) as u8, (y * 80) as u8, 7]));
        let grid = rgb_from_image(&img);
        let p = dir.path().join("a.png");
        save_rgb(&p, &grid).unwrap();
        assert_eq!(image::open(&p).unwrap().to_rgb8(), img);
        assert_eq!(load_rgb(&p).unwrap(), grid);
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::from_fn(4, 1, |x, _| Luma([[0, 127, 128, 255][x as usize]]))
            .save(&p)
            .unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), &[false, false, true, true]);
    }
}
