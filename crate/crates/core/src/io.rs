//! Lossless 8-bit image files. Values map to `[0, 1]` by `/255`; masks are
//! foreground where the luma is at least 128.

use std::fs;
use std::path::{Path, PathBuf};

use ::image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::{BinaryMap, ImagePlane};

fn open(path: &Path) -> Result<::image::DynamicImage> {
    let img_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(img_err)
}

/// Three-channel image; grayscale files are replicated across channels.
pub fn load_rgb(path: &Path) -> Result<ImagePlane> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImagePlane::from_fn(h as usize, w as usize, 3, |r, c, k| {
        img.get_pixel(c as u32, r as u32)[k] as f32 / 255.0
    }))
}

/// Single-channel map from the luma of any image.
pub fn load_plane(path: &Path) -> Result<ImagePlane> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(ImagePlane::from_fn(h as usize, w as usize, 1, |r, c, _| {
        img.get_pixel(c as u32, r as u32)[0] as f32 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<BinaryMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMap::from_fn(h as usize, w as usize, |r, c| {
        img.get_pixel(c as u32, r as u32)[0] >= 128
    }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".part");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_with(path: &Path, save: impl FnOnce(&Path) -> ::image::ImageResult<()>) -> Result<()> {
    let tmp = tmp_path(path);
    save(&tmp).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves a 1- or 3-channel plane as PNG.
pub fn save_plane(path: &Path, plane: &ImagePlane) -> Result<()> {
    let (h, w) = plane.dims();
    match plane.channels() {
        1 => {
            let img = GrayImage::from_fn(w as u32, h as u32, |c, r| Luma([to_u8(plane.get(r as usize, c as usize, 0))]));
            save_with(path, |p| img.save_with_format(p, ::image::ImageFormat::Png))
        }
        3 => {
            let img = RgbImage::from_fn(w as u32, h as u32, |c, r| {
                let px = plane.pixel(r as usize, c as usize);
                Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])])
            });
            save_with(path, |p| img.save_with_format(p, ::image::ImageFormat::Png))
        }
        n => Err(Error::InvalidParameter(format!("cannot save a {n}-channel image"))),
    }
}

pub fn save_mask(path: &Path, mask: &BinaryMap) -> Result<()> {
    save_plane(path, &mask.to_plane())
}

/// Overlay colors, indexed by the position of a CPI in the mask list.
pub const OVERLAY_PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.8, 0.0],
    [0.0, 0.3, 1.0],
    [1.0, 0.8, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 0.9, 0.9],
    [1.0, 0.5, 0.0],
    [0.6, 0.3, 1.0],
];

/// Paints each extracted contour in its palette color over a dimmed
/// grayscale copy of the query. Later contours draw over earlier ones.
pub fn render_overlay(query: &ImagePlane, contours: &[BinaryMap]) -> Result<ImagePlane> {
    let (h, w) = query.dims();
    if let Some(bad) = contours.iter().find(|m| m.dims() != (h, w)) {
        return Err(Error::DimMismatch(format!(
            "overlay contour {:?} vs query {:?}",
            bad.dims(),
            (h, w)
        )));
    }
    let mut out = ImagePlane::from_fn(h, w, 3, |r, c, _| {
        let px = query.pixel(r, c);
        0.5 * px.iter().sum::<f32>() / px.len() as f32
    });
    for (i, m) in contours.iter().enumerate() {
        let color = OVERLAY_PALETTE[i % OVERLAY_PALETTE.len()];
        for (r, c) in m.points() {
            out.pixel_mut(r, c).copy_from_slice(&color);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("cpie-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn eight_bit_values_roundtrip_exactly() {
        let d = scratch_dir("rt");
        let img = ImagePlane::from_fn(5, 7, 3, |r, c, k| ((r * 31 + c * 7 + k * 50) % 256) as f32 / 255.0);
        save_plane(&d.join("a.png"), &img).unwrap();
        assert_eq!(load_rgb(&d.join("a.png")).unwrap(), img);
        let g = img.channel(1);
        save_plane(&d.join("g.png"), &g).unwrap();
        assert_eq!(load_plane(&d.join("g.png")).unwrap(), g);
        fs::remove_dir_all(d).unwrap();
    }

    #[test]
    fn masks_binarize_at_128() {
        let d = scratch_dir("mask");
        let p = ImagePlane::from_fn(1, 4, 1, |_, c, _| [0.0, 127.0, 128.0, 255.0][c] / 255.0);
        save_plane(&d.join("m.png"), &p).unwrap();
        let m = load_mask(&d.join("m.png")).unwrap();
        assert_eq!(m.data(), &[false, false, true, true]);
        fs::remove_dir_all(d).unwrap();
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn overlay_uses_palette_by_position() {
        let q = ImagePlane::filled(4, 4, 3, 1.0);
        let a = BinaryMap::from_points(4, 4, &[(0, 0)]);
        let b = BinaryMap::from_points(4, 4, &[(3, 3)]);
        let o = render_overlay(&q, &[a, b]).unwrap();
        assert_eq!(o.pixel(0, 0), &OVERLAY_PALETTE[0]);
        assert_eq!(o.pixel(3, 3), &OVERLAY_PALETTE[1]);
        assert_eq!(o.pixel(1, 1), &[0.5, 0.5, 0.5]);
        assert!(render_overlay(&q, &[BinaryMap::new(2, 2)]).is_err());
    }
}
