//! PGM images and georeference sidecar files.
//!
//! Intensities in `[0, 1]` are stored as 16-bit codes `1..=65535`; code `0`
//! is reserved for [`INVALID`] pixels so masks survive a round trip.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::raster::{is_valid, GeoRaster, GrayImage, INVALID};

fn invalid_data(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn encode_intensity(v: f32) -> u16 {
    if !is_valid(v) {
        return 0;
    }
    1 + (v.clamp(0.0, 1.0) as f64 * 65534.0).round() as u16
}

pub fn decode_intensity(code: u16) -> f32 {
    if code == 0 {
        INVALID
    } else {
        ((code - 1) as f64 / 65534.0) as f32
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> io::Result<()> {
    let mut buf = Vec::with_capacity(32 + img.data.len() * 2);
    write!(buf, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for v in &img.data {
        buf.extend_from_slice(&encode_intensity(*v).to_be_bytes());
    }
    fs::write(path, buf)
}

/// Writes a boolean mask as an 8-bit PGM (255 = valid).
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(32 + mask.len());
    write!(buf, "P5\n{} {}\n255\n", width, height)?;
    buf.extend(mask.iter().map(|m| if *m { 255u8 } else { 0 }));
    fs::write(path, buf)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> io::Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(invalid_data("truncated PGM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads an 8- or 16-bit binary PGM. 8-bit files are scaled to `[0, 1]`
/// without an invalid code.
pub fn read_pgm(path: &Path) -> io::Result<GrayImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if next_token(&bytes, &mut pos)? != "P5" {
        return Err(invalid_data(format!("{}: not a binary PGM", path.display())));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| invalid_data("bad PGM header field"));
    let width = parse(next_token(&bytes, &mut pos)?)?;
    let height = parse(next_token(&bytes, &mut pos)?)?;
    let maxval = parse(next_token(&bytes, &mut pos)?)?;
    pos += 1;
    let n = width * height;
    let data: Vec<f32> = if maxval > 255 {
        let raw = bytes.get(pos..pos + 2 * n).ok_or_else(|| invalid_data("truncated PGM data"))?;
        raw.chunks_exact(2)
            .map(|c| decode_intensity(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        let raw = bytes.get(pos..pos + n).ok_or_else(|| invalid_data("truncated PGM data"))?;
        raw.iter().map(|b| *b as f32 / maxval as f32).collect()
    };
    GrayImage::from_vec(width, height, data).map_err(|e| invalid_data(e.to_string()))
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("geo")
}

/// Writes `<name>.pgm` plus a `<name>.geo` sidecar holding the georeference.
pub fn write_georaster(pgm: &Path, raster: &GeoRaster) -> io::Result<()> {
    write_pgm(pgm, &raster.image)?;
    let text = format!(
        "origin_x = {}\norigin_y = {}\nmeters_per_pixel = {}\n",
        raster.origin_x, raster.origin_y, raster.meters_per_pixel
    );
    fs::write(sidecar_path(pgm), text)
}

pub fn read_georaster(pgm: &Path) -> io::Result<GeoRaster> {
    let image = read_pgm(pgm)?;
    let text = fs::read_to_string(sidecar_path(pgm))?;
    let (mut ox, mut oy, mut mpp) = (None, None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid_data(format!("malformed sidecar line: {line}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| invalid_data(format!("bad number for {}", key.trim())))?;
        match key.trim() {
            "origin_x" => ox = Some(value),
            "origin_y" => oy = Some(value),
            "meters_per_pixel" => mpp = Some(value),
            other => return Err(invalid_data(format!("unknown sidecar key {other}"))),
        }
    }
    let missing = |k: &str| invalid_data(format!("sidecar is missing {k}"));
    GeoRaster::new(
        image,
        ox.ok_or_else(|| missing("origin_x"))?,
        oy.ok_or_else(|| missing("origin_y"))?,
        mpp.ok_or_else(|| missing("meters_per_pixel"))?,
    )
    .map_err(|e| invalid_data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn georaster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dir = dir.path();
        let img = GrayImage::from_fn(7, 5, |c, r| ((c * 5 + r) as f32) / 40.0);
        let raster = GeoRaster::new(img, -12.5, 300.0, 0.5).unwrap();
        let path = dir.join("map.pgm");
        write_georaster(&path, &raster).unwrap();
        let back = read_georaster(&path).unwrap();
        assert_eq!(back.origin_x, -12.5);
        assert_eq!(back.meters_per_pixel, 0.5);
        for (a, b) in raster.image.data.iter().zip(&back.image.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_pixels_survive() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let img = GrayImage::from_vec(2, 1, vec![INVALID, 0.0]).unwrap();
        let path = dir.join("f.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.data, vec![INVALID, 0.0]);
    }

    #[test]
    fn sidecar_missing_key_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let path = dir.join("m.pgm");
        write_pgm(&path, &GrayImage::new(1, 1)).unwrap();
        fs::write(sidecar_path(&path), "origin_x = 0\norigin_y = 0\n").unwrap();
        assert!(read_georaster(&path).is_err());
    }

    proptest! {
        #[test]
        fn intensity_codec_is_accurate(v in 0.0f32..=1.0) {
            prop_assert!((decode_intensity(encode_intensity(v)) - v).abs() <= 1.0 / 65534.0);
        }
    }
}
