//! 16-bit grayscale PNG depth/label maps, 8-bit RGB color images and
//! plain-text poses.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::{DepthImage, LabelImage, Pose, RgbImage};

fn img_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    image::open(path).map_err(|e| img_err(path, e.to_string()))
}

fn load_gray16(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    match open(path)? {
        DynamicImage::ImageLuma16(buf) => Ok((buf.width(), buf.height(), buf.into_raw())),
        other => Err(img_err(
            path,
            format!("expected 16-bit single-channel image, found {:?}", other.color()),
        )),
    }
}

fn save_gray16(path: &Path, width: u32, height: u32, data: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width, height, data).ok_or_else(|| img_err(path, "buffer size mismatch"))?;
    buf.save(path).map_err(|e| img_err(path, e.to_string()))
}

/// Reads a 16-bit depth map, converting stored units to meters with `scale`.
pub fn load_depth(path: &Path, scale: f64) -> Result<DepthImage> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("depth scale must be positive, got {scale}")));
    }
    let (w, h, raw) = load_gray16(path)?;
    let values = raw.into_iter().map(|v| (v as f64 * scale) as f32).collect();
    DepthImage::from_values(w, h, values)
}

/// Writes a depth map in stored units of `scale` meters. Depths beyond the
/// 16-bit range are clamped.
pub fn save_depth(path: &Path, depth: &DepthImage, scale: f64) -> Result<()> {
    let data = depth
        .values
        .iter()
        .map(|&d| {
            if d > 0.0 {
                (d as f64 / scale).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    save_gray16(path, depth.width, depth.height, data)
}

pub fn load_labels(path: &Path) -> Result<LabelImage> {
    let (w, h, ids) = load_gray16(path)?;
    LabelImage::from_ids(w, h, ids)
}

pub fn save_labels(path: &Path, labels: &LabelImage) -> Result<()> {
    save_gray16(path, labels.width, labels.height, labels.ids.clone())
}

pub fn load_color(path: &Path) -> Result<RgbImage> {
    let rgb = open(path)?.into_rgb8();
    let (width, height) = rgb.dimensions();
    Ok(RgbImage {
        width,
        height,
        pixels: rgb.pixels().map(|p| p.0).collect(),
    })
}

pub fn save_color(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(img.width, img.height, raw)
        .ok_or_else(|| img_err(path, "buffer size mismatch"))?;
    buf.save(path).map_err(|e| img_err(path, e.to_string()))
}

/// Parses a whitespace separated row-major 4x4 camera-to-world matrix.
pub fn parse_pose(text: &str) -> std::result::Result<Pose, String> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("invalid number `{t}`")))
        .collect::<std::result::Result<_, _>>()?;
    Pose::from_row_major(&values).map_err(|e| e.to_string())
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose(&text).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

pub fn format_pose(pose: &Pose) -> String {
    let v = pose.to_row_major();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", v[r * 4 + c])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn save_pose(path: &Path, pose: &Pose) -> Result<()> {
    fs::write(path, format_pose(pose)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Vec3};

    #[test]
    fn depth_scale_and_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        save_gray16(&p, 2, 1, vec![2000, 0]).unwrap();
        let d = load_depth(&p, 0.001).unwrap();
        assert!((d.values[0] - 2.0).abs() < 1e-6);
        assert_eq!(d.get(1, 0), None);
    }

    #[test]
    fn labels_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let ids: Vec<u16> = (0..64).map(|i| (i * 1021 % 65536) as u16).collect();
        let labels = LabelImage::from_ids(8, 8, ids).unwrap();
        save_labels(&p, &labels).unwrap();
        assert_eq!(load_labels(&p).unwrap(), labels);
    }

    #[test]
    fn rejects_8bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_color(
            &p,
            &RgbImage {
                width: 1,
                height: 1,
                pixels: vec![[1, 2, 3]],
            },
        )
        .unwrap();
        assert!(matches!(load_depth(&p, 0.001), Err(Error::Image { .. })));
        assert_eq!(load_color(&p).unwrap().pixels, vec![[1, 2, 3]]);
    }

    #[test]
    fn pose_text_round_trip() {
        let pose = Pose::look_at(Point3::new(1.0, 2.0, 1.5), Point3::new(0.1, 0.2, 0.3)).unwrap();
        let back = parse_pose(&format_pose(&pose)).unwrap();
        assert_eq!(back, pose);
        let t = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(parse_pose("1 0 0 1\n0 1 0 2\n0 0 1 3\n0 0 0 1").unwrap(), t);
        assert!(parse_pose("1 0 0").is_err());
    }
}
