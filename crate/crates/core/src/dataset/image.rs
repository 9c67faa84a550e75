//! Square RGB images with 8-bit storage and `[0, 1]` float access.
//!
//! Pixels are kept as bytes: a float `p` is stored as `round(p * 255)` and read
//! back as `byte / 255`, which makes PPM persistence lossless.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    side: usize,
    data: Vec<u8>,
}

pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            side,
            data: vec![quantize(value); side * side * 3],
        }
    }

    pub fn from_bytes(side: usize, data: Vec<u8>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(Error::dim(format!(
                "image side {side} needs {} bytes, got {}",
                side * side * 3,
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * 3 + c] as f64 / 255.0
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.side + x) * 3 + c] = quantize(value);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.side + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let o = (y * self.side + x) * 3;
        self.data[o..o + 3].copy_from_slice(&px);
    }

    /// Pixels that differ from the uniform background.
    pub fn foreground_count(&self) -> usize {
        let bg = quantize(BACKGROUND);
        self.data.chunks(3).filter(|p| p.iter().any(|&c| c != bg)).count()
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64 / 255.0;
            }
        }
        acc.map(|a| a / (self.side * self.side) as f64)
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.side, self.side)?;
        w.write_all(&self.data)
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::IoOther(format!("malformed PPM: {m}"));
        let mut header = Vec::new();
        // magic, width, height, maxval
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::IoOther(e.to_string()))? == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_string));
        }
        if header[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (w, h, max) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if w != h {
            return Err(bad("image is not square"));
        }
        if max != 255 {
            return Err(bad("max value must be 255"));
        }
        let mut data = vec![0u8; w * h * 3];
        r.read_exact(&mut data).map_err(|_| bad("truncated pixel data"))?;
        Self::from_bytes(w, data)
    }
}
