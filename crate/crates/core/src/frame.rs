//! RGB frames and their on-disk portable pixmap (P6) encoding.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image with channels in `[0, 1]`, stored row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut f = Self::new(height, width);
        for px in f.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        f
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Quantizes to 8-bit channels.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * 3);
        Self {
            height,
            width,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    /// Round-trips through 8-bit quantization, matching what a reader of the
    /// written file observes.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height).expect("in-memory write");
        out.extend_from_slice(&self.to_bytes());
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut reader = BufReader::new(file);
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: message.to_string(),
        };
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments are not produced by the writer
        while header.len() < 4 {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if n == 0 {
                return Err(bad("truncated header"));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P6" {
            return Err(bad("not a binary RGB pixmap"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let width = parse(&header[1])?;
        let height = parse(&header[2])?;
        if parse(&header[3])? != 255 {
            return Err(bad("only 8-bit pixmaps are supported"));
        }
        let mut bytes = vec![0u8; width * height * 3];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(format!("reading pixels of {}", path.display()), e))?;
        Ok(Self::from_bytes(height, width, &bytes))
    }
}
