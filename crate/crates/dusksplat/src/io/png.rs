//! PNG read/write. Internal math is real-valued; quantization happens only
//! here, at image write.

use std::path::Path;

use crate::error::{Error, Result};
use crate::img::Image;

pub fn load_png(path: &Path) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingFile {
                path: path.to_path_buf(),
                msg: "image file not found".into(),
            }
        }
        other => Error::Image(other),
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let mut img = Image::zeros(w, h, 3);
    match dynamic {
        image::DynamicImage::ImageRgb16(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    img.data[i * 3 + c] = px.0[c] as f64 / 65535.0;
                }
            }
        }
        image::DynamicImage::ImageRgba16(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    img.data[i * 3 + c] = px.0[c] as f64 / 65535.0;
                }
            }
        }
        other => {
            let buf = other.to_rgb8();
            for (i, px) in buf.pixels().enumerate() {
                for c in 0..3 {
                    img.data[i * 3 + c] = px.0[c] as f64 / 255.0;
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png8(path: &Path, img: &Image) -> Result<()> {
    assert_eq!(img.channels, 3);
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [
                (img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(x, y, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(x, y, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn save_png16(path: &Path, img: &Image) -> Result<()> {
    assert_eq!(img.channels, 3);
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for y in 0..img.height {
        for x in 0..img.width {
            let px = [
                (img.get(x, y, 0).clamp(0.0, 1.0) * 65535.0).round() as u16,
                (img.get(x, y, 1).clamp(0.0, 1.0) * 65535.0).round() as u16,
                (img.get(x, y, 2).clamp(0.0, 1.0) * 65535.0).round() as u16,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let img = Image::from_fn(16, 12, 3, |x, y, c| {
            ((x * 13 + y * 7 + c * 101) % 256) as f64 / 255.0
        });
        save_png8(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn sixteen_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt16.png");
        let img = Image::from_fn(8, 8, 3, |x, y, c| {
            ((x * 5417 + y * 911 + c * 30011) % 65536) as f64 / 65535.0
        });
        save_png16(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img.data, back.data);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_png(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }
}
