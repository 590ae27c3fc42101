//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pnm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::invalid(format!("PNM needs 1 or 3 channels, got {}", img.channels)));
    }
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

pub fn decode_pnm(bytes: &[u8], name: &str) -> Result<Image> {
    let bad = |msg: &str| Error::Parse {
        source_name: name.to_string(),
        line: 1,
        message: msg.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PNM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported PNM type `{m}`"))),
    };
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad header value `{t}`")));
    let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(bad("truncated PNM raster"));
    }
    Ok(Image {
        width,
        height,
        channels,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_gray_and_rgb() {
        for channels in [1, 3] {
            let mut img = Image::new(5, 3, channels);
            img.pixels.iter_mut().enumerate().for_each(|(i, p)| *p = (i * 7 % 256) as u8);
            let back = decode_pnm(&encode_pnm(&img), "mem").unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# comment\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pnm(bytes, "mem").unwrap().pixels, vec![1, 2]);
        assert!(decode_pnm(b"P5\n2 1\n255\n\x01", "mem").is_err());
        assert!(decode_pnm(b"P2\n2 1\n255\n", "mem").is_err());
        assert!(decode_pnm(b"P5\n2", "mem").is_err());
    }
}
