//! Binary PGM (P5) and PPM (P6) image files.
//!
//! 8-bit only. Values scale by 1/255 on read and round to nearest on write,
//! so a write/read cycle of any image quantized to 8 bits is exact.

use crate::error::{Error, Result};
use crate::image::Image;
use std::fs;
use std::path::Path;

/// Reads a P5 (grayscale) or P6 (RGB) binary file.
pub fn read(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes P5 for single-channel images, P6 for three-channel.
pub fn write(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode(img))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.pixels()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Parse(format!("unsupported magic `{other}`"))),
    };
    let width: usize = parse_int(&take_token(bytes, &mut pos)?)?;
    let height: usize = parse_int(&take_token(bytes, &mut pos)?)?;
    let maxval: usize = parse_int(&take_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Parse(format!("only maxval 255 supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() {
        return Err(Error::Parse("truncated before raster".into()));
    }
    pos += 1;
    let expected = width * height * channels;
    let raster = bytes
        .get(pos..pos + expected)
        .ok_or_else(|| {
            Error::Parse(format!(
                "raster truncated: need {expected} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ))
        })?;
    let pixels = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, pixels)
}

fn take_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("unexpected end of header".into()));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| Error::Parse("non-UTF8 header token".into()))
}

fn parse_int(token: &str) -> Result<usize> {
    token
        .parse()
        .map_err(|_| Error::Parse(format!("expected integer, got `{token}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_quantized_gray() {
        let img = Image::new(2, 3, 1, vec![0.0, 1.0, 128.0 / 255.0, 5.0 / 255.0, 0.5, 1.0])
            .unwrap();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.height(), 2);
        assert_eq!(back.width(), 3);
        // 0.5*255 = 127.5 rounds to 128.
        assert_eq!(back.pixels()[4], 128.0 / 255.0);
        assert_eq!(back.pixels()[0], 0.0);
        assert_eq!(back.pixels()[1], 1.0);
    }

    #[test]
    fn roundtrip_rgb() {
        let img = Image::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let back = decode(&encode(&img)).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend([10u8, 200]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert!((img.pixels()[1] - 200.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_raster_is_a_parse_error() {
        let bytes = b"P5\n4 4\n255\nxy".to_vec();
        assert!(matches!(decode(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(decode(b"P3\n1 1\n255\n0"), Err(Error::Parse(_))));
    }
}
