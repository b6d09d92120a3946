//! Binary PPM/PGM image grids.

use std::fs;
use std::path::Path;

use gradinv_core::Tensor;

use crate::Error;

/// Maps `[0, 1]` to a byte, clamping first.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out rows of `[N, C, H, W]` tensors as tiles with a one pixel black
/// separator after every tile, right and below. Rows may hold different
/// tile counts; short rows are padded with black. One channel gives a P5
/// file, three give P6.
pub fn encode_grid(rows: &[Tensor]) -> Result<Vec<u8>, Error> {
    let first = rows.first().ok_or_else(|| Error::Data("empty image grid".into()))?;
    let shape = first.shape();
    if shape.len() != 4 {
        return Err(Error::Data(format!("expected NCHW tiles, got shape {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("cannot encode {c} channels")));
    }
    if rows.iter().any(|r| r.shape()[1..] != shape[1..]) {
        return Err(Error::Data("grid rows differ in tile shape".into()));
    }
    let cols = rows.iter().map(|r| r.shape()[0]).max().unwrap_or(0);
    let width = cols * (w + 1);
    let height = rows.len() * (h + 1);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic} {width} {height} 255\n").into_bytes();
    let header = out.len();
    out.resize(header + width * height * c, 0);
    let plane = h * w;
    for (r, row) in rows.iter().enumerate() {
        for n in 0..row.shape()[0] {
            let tile = &row.data()[n * c * plane..(n + 1) * c * plane];
            for y in 0..h {
                for x in 0..w {
                    let px = (r * (h + 1) + y) * width + n * (w + 1) + x;
                    for ch in 0..c {
                        out[header + px * c + ch] = to_byte(tile[ch * plane + y * w + x]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn write_image_grid(rows: &[Tensor], path: &Path) -> Result<(), Error> {
    let bytes = encode_grid(rows)?;
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Decodes a binary PPM/PGM with maxval 255 into a `[C, H, W]` tensor in
/// `[0, 1]`. Comments are not supported.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor, Error> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Data(format!("unsupported image type {other}"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("bad image header field {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Data(format!("unsupported maxval {max}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * c {
        return Err(Error::Data(format!("expected {} pixel bytes, got {}", w * h * c, body.len())));
    }
    let plane = w * h;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        body[p * c + ch] as f64 / 255.0
    }))
}

pub fn read_pnm(path: &Path) -> Result<Tensor, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_pnm(&bytes)
}
