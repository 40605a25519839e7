//! On-disk formats: the `.lf4` raw container, sub-aperture image directories,
//! aperture code / measurement files, and EPI export.
//!
//! `.lf4` layout: magic "LF4D", four little-endian u32 dims (M,N,H,W), then
//! M*N*H*W little-endian f32 samples in (u,v,x,y) row-major order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::{ApertureCode, CodedMeasurements, Image2d, LightField4D, ValueRange};
use crate::error::{Error, Result};

const LF4_MAGIC: &[u8; 4] = b"LF4D";
const CMS_MAGIC: &[u8; 4] = b"LFCM";
const CODE_MAGIC: &[u8; 4] = b"LFAC";

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: &[u32]) -> Result<()> {
    w.write_all(magic)?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(format!("truncated file: {}", what)))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    if &b != magic {
        return Err(Error::format(format!(
            "bad magic for {}: expected {:?}, found {:?}",
            what,
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&b)
        )));
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or(r, &mut bytes, what)?;
    let mut out = Vec::with_capacity(count);
    for c in bytes.chunks_exact(4) {
        out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    Ok(out)
}

fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut one = [0u8; 1];
    match r.read(&mut one)? {
        0 => Ok(()),
        _ => Err(Error::format(format!("trailing bytes after {}", what))),
    }
}

fn checked_len(dims: &[u32], what: &str) -> Result<usize> {
    let mut len = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(Error::format(format!("zero dimension in {} header", what)));
        }
        len = len
            .checked_mul(d as usize)
            .filter(|&l| l <= (1 << 31))
            .ok_or_else(|| Error::format(format!("{} header dims too large", what)))?;
    }
    Ok(len)
}

pub fn save_lf4(lf: &LightField4D, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, LF4_MAGIC, &[lf.m as u32, lf.n as u32, lf.h as u32, lf.w as u32])?;
    write_f32s(&mut w, lf.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_lf4(path: &Path) -> Result<LightField4D> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, LF4_MAGIC, "light field")?;
    let m = read_u32(&mut r, "light field header")?;
    let n = read_u32(&mut r, "light field header")?;
    let h = read_u32(&mut r, "light field header")?;
    let w = read_u32(&mut r, "light field header")?;
    let len = checked_len(&[m, n, h, w], "light field")?;
    let data = read_f32s(&mut r, len, "light field samples")?;
    expect_eof(&mut r, "light field samples")?;
    let unit = data.iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(&(*v as f64)));
    let mut lf =
        LightField4D::from_vec(m as usize, n as usize, h as usize, w as usize, ValueRange::Raw, data)?;
    lf.range = if unit { ValueRange::Unit } else { ValueRange::Raw };
    Ok(lf)
}

pub fn save_cms(cms: &CodedMeasurements, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, CMS_MAGIC, &[cms.s as u32, cms.h as u32, cms.w as u32])?;
    write_f32s(&mut w, cms.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_cms(path: &Path) -> Result<CodedMeasurements> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, CMS_MAGIC, "coded measurements")?;
    let s = read_u32(&mut r, "measurement header")?;
    let h = read_u32(&mut r, "measurement header")?;
    let w = read_u32(&mut r, "measurement header")?;
    let len = checked_len(&[s, h, w], "coded measurements")?;
    let data = read_f32s(&mut r, len, "measurement samples")?;
    expect_eof(&mut r, "measurement samples")?;
    CodedMeasurements::from_vec(s as usize, h as usize, w as usize, data)
}

pub fn save_code(code: &ApertureCode, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, CODE_MAGIC, &[code.s as u32, code.m as u32, code.n as u32])?;
    write_f32s(&mut w, code.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_code(path: &Path) -> Result<ApertureCode> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, CODE_MAGIC, "aperture code")?;
    let s = read_u32(&mut r, "code header")?;
    let m = read_u32(&mut r, "code header")?;
    let n = read_u32(&mut r, "code header")?;
    let len = checked_len(&[s, m, n], "aperture code")?;
    let data = read_f32s(&mut r, len, "code weights")?;
    expect_eof(&mut r, "code weights")?;
    ApertureCode::from_vec(s as usize, m as usize, n as usize, data)
}

/// Bit depth for sub-aperture image directories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaiBitDepth {
    Eight,
    Sixteen,
}

/// Write one `view_{u}_{v}.png` per angular position, grayscale.
pub fn save_sai_dir(lf: &LightField4D, dir: &Path, depth: SaiBitDepth) -> Result<()> {
    fs::create_dir_all(dir)?;
    for u in 0..lf.m {
        for v in 0..lf.n {
            let path = dir.join(format!("view_{}_{}.png", u, v));
            let pixels = lf.view_slice(u, v);
            match depth {
                SaiBitDepth::Eight => {
                    let buf: Vec<u8> = pixels
                        .iter()
                        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
                        .collect();
                    let img: ImageBuffer<Luma<u8>, _> =
                        ImageBuffer::from_raw(lf.w as u32, lf.h as u32, buf)
                            .expect("buffer size");
                    img.save(&path).map_err(|e| Error::format(e.to_string()))?;
                }
                SaiBitDepth::Sixteen => {
                    let buf: Vec<u16> = pixels
                        .iter()
                        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
                        .collect();
                    let img: ImageBuffer<Luma<u16>, _> =
                        ImageBuffer::from_raw(lf.w as u32, lf.h as u32, buf)
                            .expect("buffer size");
                    img.save(&path).map_err(|e| Error::format(e.to_string()))?;
                }
            }
        }
    }
    Ok(())
}

fn parse_view_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_suffix(".png").or_else(|| name.strip_suffix(".pgm"))?;
    let rest = stem.strip_prefix("view_")?;
    let (u, v) = rest.split_once('_')?;
    Some((u.parse().ok()?, v.parse().ok()?))
}

/// Assemble a light field from a directory of `view_{u}_{v}.png|pgm` files
/// (8- or 16-bit grayscale). Every grid position must be present and all
/// views must share one resolution.
pub fn load_sai_dir(dir: &Path) -> Result<LightField4D> {
    let mut views: Vec<(usize, usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        if let Some((u, v)) = parse_view_name(&name.to_string_lossy()) {
            views.push((u, v, entry.path()));
        }
    }
    if views.is_empty() {
        return Err(Error::format(format!("no view_{{u}}_{{v}} images found in {:?}", dir)));
    }
    let m = views.iter().map(|(u, _, _)| *u).max().unwrap() + 1;
    let n = views.iter().map(|(_, v, _)| *v).max().unwrap() + 1;
    if views.len() != m * n {
        return Err(Error::format(format!(
            "expected {}x{} = {} views, found {}",
            m,
            n,
            m * n,
            views.len()
        )));
    }
    views.sort();
    let mut lf: Option<LightField4D> = None;
    for (u, v, path) in views {
        let img = image::open(&path).map_err(|e| Error::format(format!("{:?}: {}", path, e)))?;
        let (h, w, pixels): (usize, usize, Vec<f32>) = match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                (h, w, g.into_raw().into_iter().map(|p| p as f32 / 255.0).collect())
            }
            DynamicImage::ImageLuma16(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                (h, w, g.into_raw().into_iter().map(|p| p as f32 / 65535.0).collect())
            }
            _ => {
                return Err(Error::format(format!(
                    "{:?}: expected 8- or 16-bit grayscale",
                    path
                )))
            }
        };
        let field = lf.get_or_insert_with(|| LightField4D::zeros(m, n, h, w));
        if field.h != h || field.w != w {
            return Err(Error::format(format!(
                "{:?}: view size {}x{} does not match {}x{}",
                path, h, w, field.h, field.w
            )));
        }
        field.set_sai(u, v, &Image2d::from_vec(h, w, pixels)?)?;
    }
    Ok(lf.unwrap())
}

/// Export a 2-D slice (EPI or SAI) as an 8-bit PNG, clamped to [0,1].
pub fn export_image_png(img: &Image2d, path: &Path) -> Result<()> {
    let buf: Vec<u8> =
        img.as_slice().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let out: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(img.w as u32, img.h as u32, buf).expect("buffer size");
    out.save(path).map_err(|e| Error::format(e.to_string()))
}
