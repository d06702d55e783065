use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Image;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("pnm parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: &Image, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

/// Binary greyscale (`P5`), maxval 255.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>, PnmError> {
    if img.channels != 1 {
        return Err(PnmError::Unsupported(format!("PGM needs 1 channel, image has {}", img.channels)));
    }
    Ok(encode(img, "P5"))
}

/// Binary RGB (`P6`), maxval 255.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>, PnmError> {
    if img.channels != 3 {
        return Err(PnmError::Unsupported(format!("PPM needs 3 channels, image has {}", img.channels)));
    }
    Ok(encode(img, "P6"))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, PnmError> {
        Err(PnmError::Parse { offset: self.pos, message: message.into() })
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => Err(PnmError::Parse { offset: start, message: format!("{what} out of range") }),
        }
    }
}

/// Parses binary `P5`/`P6` data into `[0,1]` values.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, PnmError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return cur.fail("expected magic P5 or P6"),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return cur.fail(format!("maxval {maxval} not in 1..=255"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.fail("expected whitespace after maxval"),
    }
    let n = width * height * channels;
    let body = &bytes[cur.pos..];
    if body.len() < n {
        return cur.fail(format!("expected {n} pixel bytes, found {}", body.len()));
    }
    let scale = maxval as f64;
    let data = body[..n].iter().map(|&b| b as f64 / scale).collect();
    Ok(Image { width, height, channels, data })
}

pub fn save_pgm(path: &Path, img: &Image) -> Result<(), PnmError> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<(), PnmError> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Loads a `P5` or `P6` file.
pub fn load_ppm(path: &Path) -> Result<Image, PnmError> {
    decode_pnm(&fs::read(path)?)
}

pub fn load_pgm(path: &Path) -> Result<Image, PnmError> {
    let img = load_ppm(path)?;
    if img.channels != 1 {
        return Err(PnmError::Unsupported(format!("{} is not greyscale", path.display())));
    }
    Ok(img)
}
