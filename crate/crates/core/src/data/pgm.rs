//! Binary 8-bit PGM (P5) reading and writing.

use super::{DataError, Image, Result};

fn malformed(msg: impl Into<String>) -> DataError {
    DataError::MalformedPgm(msg.into())
}

/// Parses a P5 image; pixels are scaled into `[0, 1]` by the header maxval.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("missing 'P' magic"));
    }
    if bytes[1] != b'5' {
        return Err(DataError::UnsupportedPgm(
            String::from_utf8_lossy(&bytes[..2]).into_owned(),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(format!("maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed("missing separator before raster"));
    }
    pos += 1;
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| malformed(format!("raster truncated: need {n} bytes")))?;
    let maxval = maxval as f32;
    Ok(Image::new(
        height,
        width,
        raster.iter().map(|&b| f32::from(b) / maxval).collect(),
    ))
}

/// Encodes with maxval 255, rounding each pixel after clamping to `[0, 1]`.
pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(
        image
            .pixels()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
