//! Square RGB images with channel values in [-1, 1].

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    /// Row-major, interleaved RGB.
    data: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "side {side} needs {} values, got {}",
                    side * side * 3,
                    data.len()
                ),
            ));
        }
        Ok(Image { side, data })
    }

    pub fn filled(side: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            data.extend_from_slice(&rgb);
        }
        Image { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.side + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.side + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Box-filter reduction to `side × side`; `side` must divide the current side.
    pub fn downsample(&self, side: usize) -> Result<Image> {
        if side == 0 || self.side % side != 0 {
            return Err(Error::NotDivisible {
                resolution: self.side,
                latent: side,
            });
        }
        let f = self.side / side;
        let mut out = vec![0.0f32; side * side * 3];
        let norm = 1.0 / (f * f) as f32;
        for y in 0..self.side {
            for x in 0..self.side {
                let o = ((y / f) * side + x / f) * 3;
                let p = self.pixel(y, x);
                for c in 0..3 {
                    out[o + c] += p[c] * norm;
                }
            }
        }
        Image::new(side, out)
    }

    /// 8-bit quantization used by the PPM writer.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes
            .iter()
            .map(|&b| b as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        Image::new(side, data)
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.side, self.side)?;
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_ppm(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Format(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if fields[3] != "255" {
            return Err(bad("maxval must be 255"));
        }
        if w != h {
            return Err(bad("image must be square"));
        }
        let need = w * h * 3;
        if buf.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Image::from_bytes(w, &buf[pos..pos + need])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::filled(4, [-1.0, 0.0, 1.0]);
        img.set_pixel(1, 2, [1.0, 1.0, -1.0]);
        let mut bytes = Vec::new();
        img.write_ppm(&mut bytes).unwrap();
        assert!(bytes.starts_with(b"P6\n4 4\n255\n"));
        let back = Image::read_ppm(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
        assert_eq!(back.pixel(1, 2), [1.0, 1.0, -1.0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let mut img = Image::filled(4, [0.0; 3]);
        img.set_pixel(0, 0, [1.0, -1.0, 0.5]);
        let d = img.downsample(2).unwrap();
        assert_eq!(d.pixel(0, 0), [0.25, -0.25, 0.125]);
        assert_eq!(d.pixel(1, 1), [0.0; 3]);
        assert_eq!(img.downsample(4).unwrap(), img);
        assert!(img.downsample(3).is_err());
    }

    #[test]
    fn ppm_rejects_other_formats() {
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n0 0 0"[..]).is_err());
        assert!(Image::read_ppm(&b"P6\n2 2\n255\nab"[..]).is_err());
    }
}
