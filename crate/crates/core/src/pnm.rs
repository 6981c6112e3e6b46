//! Binary PGM (P5) and PPM (P6) reading and writing, maxval up to 255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (rgb) interleaved bytes per pixel, row-major.
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Data("pixel count does not match extents".into()));
        }
        Ok(PnmImage {
            width,
            height,
            channels: 1,
            pixels,
        })
    }

    /// Luma conversion (Rec. 601 weights) for hashing.
    pub fn to_gray_f64(&self) -> Vec<f64> {
        match self.channels {
            1 => self.pixels.iter().map(|&p| p as f64).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
                .collect(),
        }
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_token(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let start = skip_whitespace_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && !bytes[end].is_ascii_whitespace() {
        end += 1;
    }
    if start == end {
        return Err(Error::Data("truncated pnm header".into()));
    }
    let token = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::Data("non-ascii pnm header".into()))?;
    let value = token
        .parse::<usize>()
        .map_err(|_| Error::Data(format!("bad pnm header token '{token}'")))?;
    Ok((value, end))
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 {
        return Err(Error::Data("not a pnm file".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::Data("unsupported pnm magic (want P5 or P6)".into())),
    };
    let (width, pos) = read_token(bytes, 2)?;
    let (height, pos) = read_token(bytes, pos)?;
    let (maxval, pos) = read_token(bytes, pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported pnm maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Data("empty pnm image".into()));
    }
    // exactly one whitespace byte separates header and payload
    let payload = pos + 1;
    let need = width * height * channels;
    if bytes.len() < payload + need {
        return Err(Error::Data(format!(
            "pnm payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(payload)
        )));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels: bytes[payload..payload + need].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<PnmImage> {
    decode(&std::fs::read(path)?)
}

pub fn encode(image: &PnmImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write(image: &PnmImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_gray() {
        let img = PnmImage::gray(3, 2, vec![0, 64, 128, 192, 255, 10]).unwrap();
        let decoded = decode(&encode(&img)).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn decode_handles_comments() {
        let bytes = b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = b"P5\n2 2\n255\n\x01\x02";
        assert!(decode(bytes).is_err());
    }

    #[test]
    fn rgb_luma_conversion() {
        let img = PnmImage {
            width: 1,
            height: 1,
            channels: 3,
            pixels: vec![255, 0, 0],
        };
        let gray = img.to_gray_f64();
        assert!((gray[0] - 0.299 * 255.0).abs() < 1e-12);
    }
}
