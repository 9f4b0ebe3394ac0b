use std::fs;
use std::path::Path;

use crate::deform::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "WSB1";

/// What a flat array file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    Image,
    Deformation,
    Mask,
}

impl ArrayKind {
    fn name(&self) -> &'static str {
        match self {
            ArrayKind::Image => "image",
            ArrayKind::Deformation => "deformation",
            ArrayKind::Mask => "mask",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(ArrayKind::Image),
            "deformation" => Ok(ArrayKind::Deformation),
            "mask" => Ok(ArrayKind::Mask),
            _ => Err(Error::Format(format!("unknown array kind `{s}`"))),
        }
    }
}

/// One text header line `WSB1 f64 <kind> <d0>x<d1>x...` followed by little-endian values.
pub fn write_array(path: &Path, kind: ArrayKind, t: &Tensor) -> Result<()> {
    let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut bytes = format!("{MAGIC} f64 {} {shape}\n", kind.name()).into_bytes();
    bytes.reserve(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(ArrayKind, Tensor)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    let [MAGIC, "f64", kind, shape] = fields[..] else {
        return Err(bad(&format!("unsupported header `{header}`")));
    };
    let kind = ArrayKind::parse(kind)?;
    let shape: Vec<usize> =
        shape.split('x').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad shape"))?;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * shape.iter().product::<usize>() {
        return Err(bad(&format!("{} payload bytes for shape {shape:?}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok((kind, Tensor::new(shape, data)?))
}

pub fn read_expecting(path: &Path, kind: ArrayKind) -> Result<Tensor> {
    let (k, t) = read_array(path)?;
    if k != kind {
        return Err(Error::Format(format!("{} holds a {:?}, expected {kind:?}", path.display(), k)));
    }
    Ok(t)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write_array(path, ArrayKind::Mask, &m.to_tensor())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Mask::from_tensor(&read_expecting(path, ArrayKind::Mask)?)
}

/// 8-bit binary PPM (3 channels) or PGM (1 channel); values are rounded and clamped to `[0,255]`.
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidArgument(format!("PNM output needs 1 or 3 channels, got {c}"))),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let p = h * w;
    for q in 0..p {
        for ch in 0..c {
            bytes.push(img.data()[ch * p + q].round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary 8-bit PPM (P6) or PGM (P5) as `[C,H,W]` in `[0,255]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not text"))?.to_string());
    }
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported PNM type {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PNM is supported"));
    }
    let body = &bytes[i + 1..];
    let p = h * w;
    if body.len() < p * c {
        return Err(bad("truncated pixel data"));
    }
    let scale = 255.0 / maxval as f64;
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let (ch, q) = (k / p, k % p);
        body[q * c + ch] as f64 * scale
    }))
}
