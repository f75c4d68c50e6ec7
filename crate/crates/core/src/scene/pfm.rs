//! Minimal PFM (portable float map) reader/writer.
//!
//! Little-endian (`scale = -1.0`), grayscale `Pf` or 3-channel `PF`.
//! Scanlines are stored bottom-to-top per the format; the in-memory layout
//! here is row-major top-down.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top-down, channel-interleaved.
    pub data: Vec<f32>,
}

pub fn write_pfm(path: &Path, img: &PfmImage) -> Result<()> {
    if img.data.len() != img.width * img.height * img.channels {
        return Err(Error::invalid("pfm: data length mismatch"));
    }
    let header = match img.channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::invalid("pfm: channels must be 1 or 3")),
    };
    let mut out = Vec::with_capacity(img.data.len() * 4 + 64);
    write!(out, "{}\n{} {}\n-1.0\n", header, img.width, img.height)
        .map_err(|e| Error::io(path, e))?;
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.write_f32::<LittleEndian>(*v).map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(&bytes);

    let mut token = |what: &str| -> Result<String> {
        let mut s = String::new();
        let mut b = [0u8; 1];
        // skip whitespace
        loop {
            cursor
                .read_exact(&mut b)
                .map_err(|_| corrupt(path, &format!("truncated before {what}")))?;
            if !b[0].is_ascii_whitespace() {
                break;
            }
        }
        s.push(b[0] as char);
        loop {
            if cursor.read_exact(&mut b).is_err() {
                break;
            }
            if b[0].is_ascii_whitespace() {
                break;
            }
            s.push(b[0] as char);
        }
        Ok(s)
    };

    let magic = token("magic")?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(corrupt(path, &format!("bad magic `{other}`"))),
    };
    let width: usize = token("width")?
        .parse()
        .map_err(|_| corrupt(path, "bad width"))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|_| corrupt(path, "bad height"))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|_| corrupt(path, "bad scale"))?;
    if scale >= 0.0 {
        return Err(corrupt(path, "big-endian PFM not supported"));
    }
    let n = width * height * channels;
    let mut flipped = vec![0f32; n];
    for v in flipped.iter_mut() {
        *v = cursor
            .read_f32::<LittleEndian>()
            .map_err(|_| corrupt(path, "truncated pixel data"))?;
    }
    // bottom-up -> top-down
    let row = width * channels;
    let mut data = vec![0f32; n];
    for y in 0..height {
        let src = (height - 1 - y) * row;
        data[y * row..(y + 1) * row].copy_from_slice(&flipped[src..src + row]);
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

fn corrupt(path: &Path, reason: &str) -> Error {
    Error::SceneLoad {
        path: path.to_path_buf(),
        reason: format!("corrupt PFM: {reason}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let img = PfmImage {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18).map(|i| (i as f32) * 0.37 - 1.5).collect(),
        };
        write_pfm(&path, &img).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.channels, 3);
        assert_eq!(back.data, img.data);
        write_pfm(&path, &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn grayscale_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pfm");
        let img = PfmImage {
            width: 4,
            height: 3,
            channels: 1,
            data: (0..12).map(|i| i as f32).collect(),
        };
        write_pfm(&path, &img).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn corrupt_file_errors_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"PF\n3 2\n-1.0\nshort").unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("bad.pfm"));
    }
}
