//! RGB input images and binary PPM/PGM files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three-channel image stored `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputImage {
    pixels: Tensor<f32>,
}

impl InputImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::dim(
                "image",
                format!("[3, H, W] expected, got {:?}", pixels.shape()),
            ));
        }
        if !pixels
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::Numeric(
                "image values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(InputImage { pixels })
    }

    pub fn filled(h: usize, w: usize, value: f32) -> Self {
        InputImage {
            pixels: Tensor::full(&[3, h, w], value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<f32> {
        self.pixels
    }

    /// Parses a binary `P6` file with maxval 255.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let (header, body) = parse_header(bytes, b"P6")?;
        let [w, h, maxval] = header;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        if body.len() != 3 * w * h {
            return Err(Error::Format(format!(
                "PPM body has {} bytes, expected {}",
                body.len(),
                3 * w * h
            )));
        }
        let mut data = vec![0f32; 3 * h * w];
        for (i, px) in body.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(Tensor::new(vec![3, h, w], data)?)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let (h, w) = self.hw();
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        let d = self.pixels.data();
        for i in 0..h * w {
            for c in 0..3 {
                out.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Single-channel 8-bit map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim(
                "gray_map",
                format!("{} values for {height}x{width}", data.len()),
            ));
        }
        Ok(GrayMap {
            height,
            width,
            data,
        })
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let (header, body) = parse_header(bytes, b"P5")?;
        let [w, h, maxval] = header;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        Self::new(h, w, body.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes)
    }
}

/// Splits a netpbm file into its three numeric header fields and the body.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<([usize; 3], &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *f = text
            .parse()
            .map_err(|_| Error::Format("bad netpbm header field".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("netpbm header not terminated".into()));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("zero-sized netpbm image".into()));
    }
    Ok((fields, &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let px = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f32 / 255.0);
        let img = InputImage::new(px).unwrap();
        let back = InputImage::decode_ppm(&img.encode_ppm()).unwrap();
        assert!(back.pixels().max_abs_diff(img.pixels()) < 1e-6);
    }

    #[test]
    fn ppm_header_with_comment() {
        let mut b = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        b.extend([255, 0, 51]);
        let img = InputImage::decode_ppm(&b).unwrap();
        assert_eq!(img.pixels().data(), &[1.0, 0.0, 0.2]);
        assert!(InputImage::decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(InputImage::decode_ppm(b"P6\n2 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let m = GrayMap::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        assert_eq!(GrayMap::decode_pgm(&m.encode_pgm()).unwrap(), m);
    }
}
