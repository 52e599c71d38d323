//! Bit-exact file formats.
//!
//! * FPCT tensors: magic `"FPCT"`, `u32` rank, rank × `u32` dims, then the
//!   little-endian `f32` payload. Round-trips are bitwise exact.
//! * Images: binary PGM (`P5`, maxval 255); pixel `v` maps to `v / 255`.
//! * Keypoints: CSV with header `x,y,score`; floats are printed with the
//!   shortest representation that round-trips exactly.
//! * Homographies: nine whitespace-separated decimals, row-major, in a
//!   `.hom` text file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{ImageGray, Keypoint, Tensor};

const FPCT_MAGIC: &[u8; 4] = b"FPCT";

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    buf.extend_from_slice(FPCT_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::format("FPCT file shorter than header"));
    }
    if &bytes[0..4] != FPCT_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?}, expected \"FPCT\"",
            &bytes[0..4]
        )));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(Error::format("FPCT rank must be positive"));
    }
    if bytes.len() < 8 + 4 * rank {
        return Err(Error::format("FPCT header truncated"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[8 + 4 * rank..];
    if payload.len() != 4 * numel {
        return Err(Error::format(format!(
            "FPCT payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_image_pgm(img: &ImageGray, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    for r in 0..img.height {
        for c in 0..img.width {
            buf.push((img.get(r, c) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_image_pgm(path: impl AsRef<Path>) -> Result<ImageGray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format(
            "unsupported format: expected binary PGM (P5) header",
        ));
    }
    // Header: three whitespace-separated tokens after "P5" (width, height,
    // maxval), '#' comment lines allowed, then a single whitespace byte
    // before the payload.
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        tokens.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::format("non-ASCII PGM header"))?
                .to_owned(),
        );
    }
    pos += 1; // single whitespace separating header from payload
    let width: usize = tokens[0]
        .parse()
        .map_err(|_| Error::format("bad PGM width"))?;
    let height: usize = tokens[1]
        .parse()
        .map_err(|_| Error::format("bad PGM height"))?;
    let maxval: usize = tokens[2]
        .parse()
        .map_err(|_| Error::format("bad PGM maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    let payload = &bytes[pos..];
    if payload.len() != width * height {
        return Err(Error::format(format!(
            "PGM payload has {} bytes, expected {}",
            payload.len(),
            width * height
        )));
    }
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    ImageGray::new(Tensor::new(vec![height, width], data)?)
}

pub fn keypoints_csv(kps: &[Keypoint]) -> String {
    let mut out = String::from("x,y,score\n");
    for kp in kps {
        out.push_str(&format!("{},{},{}\n", kp.x, kp.y, kp.score));
    }
    out
}

pub fn parse_keypoints_csv(text: &str) -> Result<Vec<Keypoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("x,y,score") => {}
        _ => return Err(Error::format("missing keypoint CSV header \"x,y,score\"")),
    }
    let mut kps = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(format!(
                "keypoint CSV line {}: expected 3 fields",
                i + 2
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(format!("non-numeric field {s:?} on line {}", i + 2)))
        };
        let (x, y, score) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::format(format!(
                "keypoint score {score} outside [0, 1] on line {}",
                i + 2
            )));
        }
        kps.push(Keypoint::new(x, y, score));
    }
    Ok(kps)
}

pub fn save_keypoints(kps: &[Keypoint], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, keypoints_csv(kps))?;
    Ok(())
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<Vec<Keypoint>> {
    parse_keypoints_csv(&fs::read_to_string(path)?)
}

pub fn homography_text(h: &Homography) -> String {
    let m = h.matrix();
    let mut parts = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            parts.push(format!("{}", m[(r, c)]));
        }
    }
    parts.join(" ") + "\n"
}

pub fn parse_homography_text(text: &str) -> Result<Homography> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(format!("bad homography entry {t:?}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != 9 {
        return Err(Error::format(format!(
            "homography file must hold 9 decimals, got {}",
            vals.len()
        )));
    }
    Homography::from_rows(&vals)
}

pub fn save_homography(h: &Homography, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, homography_text(h))?;
    Ok(())
}

pub fn load_homography(path: impl AsRef<Path>) -> Result<Homography> {
    parse_homography_text(&fs::read_to_string(path)?)
}
