//! Minimal binary Netpbm IO: P6 (RGB) for images, P5 (single byte per
//! pixel) for label masks. Headers may contain `#` comments; maxval is
//! fixed at 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

fn fail(path: &Path, what: &str) -> CoreError {
    CoreError::Dataset(format!("{}: {what}", path.display()))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(fail(path, "pixel buffer does not match dimensions"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(fail(path, "pixel buffer does not match dimensions"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    w.flush()?;
    Ok(())
}

/// Read whitespace-separated header tokens, skipping `#` comments.
fn read_token(r: &mut impl Read, path: &Path) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(fail(path, "truncated header"));
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            if !tok.is_empty() {
                return Ok(tok);
            }
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
            continue;
        }
        tok.push(c);
    }
}

fn read_header(r: &mut impl Read, path: &Path, magic: &str) -> Result<(usize, usize)> {
    if read_token(r, path)? != magic {
        return Err(fail(path, &format!("expected {magic} magic")));
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>().map_err(|_| fail(path, "malformed header field"))
    };
    let width = parse(read_token(r, path)?)?;
    let height = parse(read_token(r, path)?)?;
    let maxval = parse(read_token(r, path)?)?;
    if width == 0 || height == 0 {
        return Err(fail(path, "zero dimension"));
    }
    if maxval != 255 {
        return Err(fail(path, "only maxval 255 is supported"));
    }
    Ok((width, height))
}

fn read_exact_pixels(r: &mut impl Read, path: &Path, n: usize) -> Result<Vec<u8>> {
    let mut data = vec![0u8; n];
    r.read_exact(&mut data).map_err(|_| fail(path, "truncated pixel data"))?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(fail(path, "trailing bytes after pixel data"));
    }
    Ok(data)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| fail(path, &e.to_string()))?);
    let (width, height) = read_header(&mut r, path, "P6")?;
    let data = read_exact_pixels(&mut r, path, width * height * 3)?;
    Ok((width, height, data))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| fail(path, &e.to_string()))?);
    let (width, height) = read_header(&mut r, path, "P5")?;
    let data = read_exact_pixels(&mut r, path, width * height)?;
    Ok((width, height, data))
}
