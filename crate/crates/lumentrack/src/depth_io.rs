//! Depth map file formats: PFM (grayscale, little-endian, scale -1.0) and
//! 16-bit PGM (depth in mm times 100, clamped). Invalid pixels are written as
//! zero in both formats and restored as invalid on read.

use crate::camera::{CameraError, DepthMap};
use std::io::{Read, Write};
use std::path::Path;

/// Writes a depth map; the format is chosen by file extension
/// (`.pfm` or `.pgm`).
pub fn write_depth(path: &Path, map: &DepthMap) -> Result<(), CameraError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => write_pfm(path, map),
        Some("pgm") => write_pgm(path, map),
        other => Err(CameraError::UnsupportedFormat(format!("{other:?}"))),
    }
}

/// PFM, grayscale "Pf". Rows are stored bottom-to-top; the negative scale
/// marks little-endian data.
pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<(), CameraError> {
    let mut buf = Vec::with_capacity(64 + map.width * map.height * 4);
    write!(buf, "Pf\n{} {}\n-1.0\n", map.width, map.height)?;
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            let v = map.get(x, y).unwrap_or(0.0) as f32;
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<DepthMap, CameraError> {
    let data = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(&data);
    let mut header = Vec::new();
    let mut fields = 0;
    // Header: "Pf", width, height, scale - whitespace separated.
    let mut token = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    while fields < 4 {
        let mut byte = [0u8; 1];
        cursor.read_exact(&mut byte)?;
        header.push(byte[0]);
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
                fields += 1;
            }
        } else {
            token.push(byte[0]);
        }
    }
    if tokens[0] != "Pf" {
        return Err(CameraError::MalformedFile(format!(
            "expected grayscale PFM, magic {}",
            tokens[0]
        )));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| CameraError::MalformedFile("bad width".into()))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| CameraError::MalformedFile("bad height".into()))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| CameraError::MalformedFile("bad scale".into()))?;
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    cursor.read_exact(&mut raw)?;
    let mut values = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = (y * width + x) * 4;
            let bytes = [raw[i], raw[i + 1], raw[i + 2], raw[i + 3]];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            // PFM rows run bottom-to-top.
            values[(height - 1 - y) * width + x] = v as f64;
        }
    }
    Ok(DepthMap::from_values(width, height, values))
}

/// 16-bit binary PGM; values are depth in mm times 100, clamped to u16.
pub fn write_pgm(path: &Path, map: &DepthMap) -> Result<(), CameraError> {
    let mut buf = Vec::with_capacity(64 + map.width * map.height * 2);
    write!(buf, "P5\n{} {}\n65535\n", map.width, map.height)?;
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map
                .get(x, y)
                .map(|d| (d * 100.0).round().clamp(0.0, 65535.0) as u16)
                .unwrap_or(0);
            buf.extend_from_slice(&v.to_be_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}
