//! PGM/PPM images and the relevance CSV format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw pixels in `[channels, height, width]` order, values 0-255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Channel-major tensor of raw pixel values.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; self.pixels.len()];
        for (i, &p) in self.pixels.iter().enumerate() {
            data[(i % self.channels) * plane + i / self.channels] = f64::from(p);
        }
        Tensor::new(vec![self.channels, self.height, self.width], data)
    }

    pub fn rgb(&self) -> Vec<[u8; 3]> {
        match self.channels {
            3 => self.pixels.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            _ => self.pixels.iter().map(|&g| [g; 3]).collect(),
        }
    }
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(rgb.len() * 3);
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: 0,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                if b == b'\n' {
                    self.line += 1;
                }
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("expected {what}")))
    }
}

/// Decodes binary (P5/P6) and plain (P2/P3) PGM/PPM with maxval 255.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    let mut hdr = Header {
        bytes,
        pos: 0,
        line: 1,
    };
    let magic = bytes
        .get(..2)
        .ok_or_else(|| hdr.err("missing magic number"))?;
    let (channels, binary) = match magic {
        b"P2" => (1, false),
        b"P3" => (3, false),
        b"P5" => (1, true),
        b"P6" => (3, true),
        _ => return Err(hdr.err("expected P2, P3, P5 or P6 magic number")),
    };
    hdr.pos = 2;
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(hdr.err(format!("image size {width}x{height} is empty")));
    }
    if maxval != 255 {
        return Err(hdr.err(format!("maxval {maxval} unsupported (expected 255)")));
    }
    let n = width * height * channels;
    let pixels = if binary {
        match bytes.get(hdr.pos) {
            Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
            _ => return Err(hdr.err("expected whitespace after maxval")),
        }
        let data = &bytes[hdr.pos..];
        if data.len() != n {
            return Err(hdr.err(format!("expected {n} pixel bytes, found {}", data.len())));
        }
        data.to_vec()
    } else {
        let mut px = Vec::with_capacity(n);
        for _ in 0..n {
            let v = hdr.number("pixel value")?;
            px.push(u8::try_from(v).map_err(|_| hdr.err(format!("pixel value {v} above 255")))?);
        }
        hdr.skip_space();
        if hdr.pos != bytes.len() {
            return Err(hdr.err("trailing data after pixels"));
        }
        px
    };
    Ok(Image {
        channels,
        width,
        height,
        pixels,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

pub fn write_ppm(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    rgb: &[[u8; 3]],
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(width, height, rgb)).map_err(|e| Error::io(path, e))
}

/// One line per row, shortest round-trip decimals, comma separated.
pub fn encode_csv(map: &Tensor) -> Result<String> {
    let [h, w] = *map.shape() else {
        return Err(Error::Dimension(format!(
            "CSV relevance must be rank 2, got shape {:?}",
            map.shape()
        )));
    };
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = map.data()[y * w..(y + 1) * w]
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                column: col + 1,
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 0,
                    message: format!("row has {count} fields, expected {w}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Parse {
        line: 1,
        column: 0,
        message: "empty relevance CSV".into(),
    })?;
    Tensor::new(vec![rows, width], data)
}

pub fn write_csv(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_csv(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_bytes() {
        assert_eq!(encode_ppm(1, 1, &[[255; 3]]), b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(
            encode_ppm(2, 1, &[[255; 3], [255, 0, 0]]),
            b"P6\n2 1\n255\n\xff\xff\xff\xff\x00\x00"
        );
    }

    #[test]
    fn ppm_round_trip() {
        let rgb = vec![
            [1, 2, 3],
            [4, 5, 6],
            [7, 8, 9],
            [10, 11, 12],
            [13, 14, 15],
            [16, 17, 18],
        ];
        let img = decode_netpbm(&encode_ppm(3, 2, &rgb)).unwrap();
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        assert_eq!(img.rgb(), rgb);
    }

    #[test]
    fn plain_pgm_with_comment() {
        let img = decode_netpbm(b"P2\n# comment\n2 2\n255\n0 10\n20 255\n").unwrap();
        assert_eq!(img.pixels, vec![0, 10, 20, 255]);
        assert_eq!(img.to_tensor().unwrap().shape(), &[1, 2, 2]);
    }

    #[test]
    fn rgb_tensor_is_channel_major() {
        let img = decode_netpbm(&encode_ppm(2, 1, &[[1, 2, 3], [4, 5, 6]])).unwrap();
        assert_eq!(
            img.to_tensor().unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn malformed_images() {
        assert_eq!(decode_netpbm(b"P7\n").unwrap_err().category(), "parse");
        assert_eq!(
            decode_netpbm(b"P5\n2 2\n255\n\x00").unwrap_err().category(),
            "parse"
        );
        assert_eq!(
            decode_netpbm(b"P5\n2 2\n65535\n").unwrap_err().category(),
            "parse"
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = Tensor::new(vec![2, 2], vec![0.1, 1.0 / 3.0, 0.0, 1e-300]).unwrap();
        let text = encode_csv(&t).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(decode_csv(&text).unwrap(), t);
    }

    #[test]
    fn csv_errors_carry_position() {
        match decode_csv("1,2\n3,x\n").unwrap_err() {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (2, 2)),
            e => panic!("unexpected {e:?}"),
        }
        assert!(decode_csv("1,2\n3\n").is_err());
    }
}
