//! Raster images as `[3,H,W]` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Decodes PNG or JPEG bytes. Alpha and grey inputs are converted to RGB.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

/// Image dimensions `(width, height)` read from the header alone.
pub fn image_dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    Ok(reader.into_dimensions()?)
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("numel matches dims")
}

fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let &[3, h, w] = image.shape() else {
        return shape_err(format!("expected a [3,H,W] image, got {:?}", image.shape()));
    };
    if !image.all_finite() {
        return invalid("image has non-finite values");
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}

/// The `w × h` window of `image` whose top-left pixel is `(x0, y0)`.
pub fn crop_image(image: &Tensor, x0: usize, y0: usize, w: usize, h: usize) -> Result<Tensor> {
    let &[c, ih, iw] = image.shape() else {
        return shape_err(format!("expected a [C,H,W] image, got {:?}", image.shape()));
    };
    if w == 0 || h == 0 || x0 + w > iw || y0 + h > ih {
        return invalid(format!("crop {w}x{h}+{x0}+{y0} does not fit a {iw}x{ih} image"));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in y0..y0 + h {
            let row = ch * ih * iw + y * iw;
            out.extend_from_slice(&d[row + x0..row + x0 + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// PNG bytes of an image, quantized to 8 bits per channel.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    tensor_to_rgb(image)?.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    tensor_to_rgb(image)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_keeps_quantized_values() {
        let (h, w) = (64, 512);
        let data = (0..3 * h * w).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::new(&[3, h, w], data).unwrap();
        let bytes = encode_png(&t).unwrap();
        assert_eq!(image_dimensions(&bytes).unwrap(), (512, 64));
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.shape(), &[3, 64, 512]);
        assert_eq!(back, t);
        assert!(back.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_takes_the_window() {
        let t = Tensor::new(&[1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        let c = crop_image(&t, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(crop_image(&t, 3, 0, 2, 1).is_err());
    }

    #[test]
    fn jpeg_and_garbage() {
        let img = RgbImage::from_pixel(9, 5, image::Rgb([200, 10, 90]));
        let mut jpg = Vec::new();
        img.write_to(&mut Cursor::new(&mut jpg), ImageFormat::Jpeg).unwrap();
        let t = decode_image(&jpg).unwrap();
        assert_eq!(t.shape(), &[3, 5, 9]);
        assert!((t.data()[0] - 200.0 / 255.0).abs() < 0.05);
        assert!(decode_image(b"hello, not an image").is_err());
        assert!(encode_png(&Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
