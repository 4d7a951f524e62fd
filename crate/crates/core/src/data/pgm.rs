//! Binary PGM (P5) with 16-bit samples, big-endian per the format spec.
//! Images quantize [0,1] to 0..=65535; label maps store class ids directly.

use crate::data::audit;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub struct Pgm {
    pub w: usize,
    pub h: usize,
    pub samples: Vec<u16>,
    pub comments: Vec<String>,
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_pgm16(
    path: &Path,
    w: usize,
    h: usize,
    samples: &[u16],
    comments: &[String],
) -> Result<()> {
    if samples.len() != w * h {
        return Err(Error::shape(format!("{} samples", w * h), format!("{}", samples.len())));
    }
    let mut buf = Vec::with_capacity(32 + samples.len() * 2);
    buf.extend_from_slice(b"P5\n");
    for c in comments {
        debug_assert!(!c.contains('\n'));
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{w} {h}\n65535\n").as_bytes());
    for s in samples {
        buf.extend_from_slice(&s.to_be_bytes());
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn bad(path: &Path, why: &str) -> Error {
    Error::Data(format!("{}: {why}", path.display()))
}

pub fn read_pgm16(path: &Path) -> Result<Pgm> {
    audit::record_read(path);
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut comments = Vec::new();

    // PGM header tokens are whitespace-separated; '#' starts a comment
    // running to end of line.
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                let start = pos + 1;
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                comments.push(String::from_utf8_lossy(&bytes[start..pos]).trim().to_string());
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes).map_err(|_| bad(path, "truncated header"))? != "P5" {
        return Err(bad(path, "not a binary PGM (P5) file"));
    }
    let w: usize =
        token(&bytes)?.parse().map_err(|_| bad(path, "bad width"))?;
    let h: usize =
        token(&bytes)?.parse().map_err(|_| bad(path, "bad height"))?;
    let maxval: u32 =
        token(&bytes)?.parse().map_err(|_| bad(path, "bad maxval"))?;
    if maxval != 65535 {
        return Err(bad(path, "expected 16-bit samples (maxval 65535)"));
    }
    if w == 0 || h == 0 {
        return Err(bad(path, "zero dimension"));
    }
    // exactly one whitespace byte separates header from raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad(path, "missing raster separator"));
    }
    pos += 1;
    let need = w * h * 2;
    if bytes.len() - pos < need {
        return Err(bad(path, "raster shorter than header promises"));
    }
    let samples: Vec<u16> = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Pgm { w, h, samples, comments })
}

/// [0,1] float value to a 16-bit sample, round-to-nearest.
pub fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize(s: u16) -> f32 {
    s as f32 / 65535.0
}
