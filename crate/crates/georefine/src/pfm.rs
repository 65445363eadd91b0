//! Portable Float Map files: `Pf` (one channel) and `PF` (three channels),
//! 32-bit floats, rows stored bottom to top, with the scale line's sign
//! encoding endianness. Written files are always little-endian (scale -1.0);
//! the reader accepts both byte orders.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes an [H, W] raster as `Pf` or a [3, H, W] raster as `PF`.
pub fn write_pfm(path: &Path, raster: &Tensor) -> Result<()> {
    let (channels, h, w) = match raster.shape() {
        [h, w] => (1usize, *h, *w),
        [3, h, w] => (3usize, *h, *w),
        other => {
            return Err(Error::Shape {
                op: "write_pfm",
                lhs: other.to_vec(),
                rhs: vec![3, 0, 0],
            })
        }
    };
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut bytes = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(h * w * channels * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let v = if channels == 1 {
                    raster.get2(y, x)
                } else {
                    raster.get3(c, y, x)
                };
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pulls one whitespace-delimited header token, returning it with the offset
/// just past its trailing separator byte.
fn token(bytes: &[u8], mut at: usize, path: &Path) -> Result<(String, usize)> {
    while at < bytes.len() && bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    let start = at;
    while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    if start == at {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: start,
            msg: "truncated header".into(),
        });
    }
    let text = std::str::from_utf8(&bytes[start..at])
        .map_err(|_| Error::Parse {
            path: path.display().to_string(),
            offset: start,
            msg: "header is not ASCII".into(),
        })?
        .to_string();
    // The single whitespace byte that terminates the token belongs to the
    // header; payload starts right after it.
    Ok((text, (at + 1).min(bytes.len())))
}

/// Reads a PFM file into an [H, W] or [3, H, W] tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg,
    };
    let (magic, at) = token(&bytes, 0, path)?;
    let channels = match magic.as_str() {
        "Pf" => 1usize,
        "PF" => 3usize,
        other => return Err(parse_err(0, format!("bad magic {other:?}, want Pf or PF"))),
    };
    let (w_text, at2) = token(&bytes, at, path)?;
    let w: usize = w_text
        .parse()
        .map_err(|_| parse_err(at, format!("bad width {w_text:?}")))?;
    let (h_text, at3) = token(&bytes, at2, path)?;
    let h: usize = h_text
        .parse()
        .map_err(|_| parse_err(at2, format!("bad height {h_text:?}")))?;
    if h == 0 || w == 0 {
        return Err(parse_err(at, format!("degenerate size {w}x{h}")));
    }
    let (scale_text, data_at) = token(&bytes, at3, path)?;
    let scale: f64 = scale_text
        .parse()
        .map_err(|_| parse_err(at3, format!("bad scale {scale_text:?}")))?;
    if scale == 0.0 {
        return Err(parse_err(at3, "scale must be non-zero".into()));
    }
    let little_endian = scale < 0.0;
    let need = h * w * channels * 4;
    let payload = &bytes[data_at.min(bytes.len())..];
    if payload.len() != need {
        return Err(parse_err(
            data_at + payload.len().min(need),
            format!("payload holds {} bytes, want {need}", payload.len()),
        ));
    }
    let value = |i: usize| {
        let raw: [u8; 4] = payload[4 * i..4 * i + 4].try_into().unwrap();
        f64::from(if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        })
    };
    let shape: &[usize] = if channels == 1 { &[h, w] } else { &[3, h, w] };
    let mut out = Tensor::zeros(shape);
    let mut i = 0usize;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                if channels == 1 {
                    out.set2(y, x, value(i));
                } else {
                    out.set3(c, y, x, value(i));
                }
                i += 1;
            }
        }
    }
    Ok(out)
}
