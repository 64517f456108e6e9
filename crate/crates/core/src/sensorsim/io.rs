use std::io::{Read, Write};

use super::SensorError;
use crate::geom::{FeatureMap2D, Vec3};

const CLOUD_MAGIC: &[u8; 4] = b"S3PC";

fn format_err<T>(m: impl Into<String>) -> Result<T, SensorError> {
    Err(SensorError::Format(m.into()))
}

/// `S3PC`, u32 count, then count × 3 little-endian f32.
pub fn write_point_cloud<W: Write>(points: &[Vec3], mut w: W) -> Result<(), SensorError> {
    let n = u32::try_from(points.len()).map_err(|_| SensorError::Format("too many points".into()))?;
    let mut buf = Vec::with_capacity(8 + points.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    for p in points {
        for c in p.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_point_cloud<R: Read>(mut r: R) -> Result<Vec<Vec3>, SensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != CLOUD_MAGIC {
        return format_err("missing S3PC header");
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if Some(bytes.len()) != n.checked_mul(12).and_then(|b| b.checked_add(8)) {
        return format_err(format!("{} bytes for {n} points", bytes.len()));
    }
    let f: Vec<f64> = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(f.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Channel 0 as a little-endian greyscale PFM (rows stored bottom to top).
pub fn write_depth_pfm<W: Write>(image: &FeatureMap2D, mut w: W) -> Result<(), SensorError> {
    let (wd, ht) = (image.width(), image.height());
    let mut buf = format!("Pf\n{wd} {ht}\n-1.0\n").into_bytes();
    for y in (0..ht).rev() {
        for x in 0..wd {
            buf.extend_from_slice(&(image.pixel(x, y)[0] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Channel 1 as a binary PGM: 255 where the silhouette is set, else 0.
pub fn write_mask_pgm<W: Write>(image: &FeatureMap2D, mut w: W) -> Result<(), SensorError> {
    if image.channels() < 2 {
        return format_err("image has no silhouette channel");
    }
    let (wd, ht) = (image.width(), image.height());
    let mut buf = format!("P5\n{wd} {ht}\n255\n").into_bytes();
    for y in 0..ht {
        for x in 0..wd {
            buf.push(if image.pixel(x, y)[1] > 0.5 { 255 } else { 0 });
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Splits a netpbm-style header into `fields` whitespace-separated tokens
/// and returns them with the offset of the payload.
fn header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize), SensorError> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return format_err("truncated header");
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    if i >= bytes.len() {
        return format_err("truncated header");
    }
    Ok((tokens, i + 1))
}

fn dims(tokens: &[String]) -> Result<(usize, usize), SensorError> {
    let parse = |s: &str| s.parse::<usize>().map_err(|_| SensorError::Format(format!("bad dimension {s:?}")));
    Ok((parse(&tokens[1])?, parse(&tokens[2])?))
}

/// Reads a depth PFM and a mask PGM back into a `[depth, silhouette]` image.
pub fn read_depth_silhouette<R1: Read, R2: Read>(mut pfm: R1, mut pgm: R2) -> Result<FeatureMap2D, SensorError> {
    let mut bytes = Vec::new();
    pfm.read_to_end(&mut bytes)?;
    let (tok, off) = header(&bytes, 4)?;
    if tok[0] != "Pf" {
        return format_err("not a greyscale PFM");
    }
    let (w, h) = dims(&tok)?;
    let scale: f64 = tok[3].parse().map_err(|_| SensorError::Format(format!("bad scale {:?}", tok[3])))?;
    if bytes.len() - off != w * h * 4 {
        return format_err(format!("PFM payload {} bytes for {w}x{h}", bytes.len() - off));
    }
    let read = |i: usize| {
        let b: [u8; 4] = bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };

    let mut mask_bytes = Vec::new();
    pgm.read_to_end(&mut mask_bytes)?;
    let (mt, moff) = header(&mask_bytes, 4)?;
    if mt[0] != "P5" || mt[3] != "255" {
        return format_err("not an 8-bit binary PGM");
    }
    if dims(&mt)? != (w, h) {
        return format_err("depth and mask sizes differ");
    }
    if mask_bytes.len() - moff != w * h {
        return format_err("PGM payload size");
    }

    let mut img = FeatureMap2D::zeros(w, h, 2)?;
    for y in 0..h {
        for x in 0..w {
            let px = img.pixel_mut(x, y);
            px[0] = read((h - 1 - y) * w + x) as f64;
            px[1] = if mask_bytes[moff + y * w + x] > 127 { 1.0 } else { 0.0 };
        }
    }
    Ok(img)
}
