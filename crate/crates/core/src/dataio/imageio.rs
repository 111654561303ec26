use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
    Image::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) or binary PPM.
///
/// Alpha is composited over `background`.
pub fn read_image_over(path: &Path, background: [f64; 3]) -> Result<Image> {
    match extension(path).as_str() {
        "png" => read_png(path, background),
        "ppm" => read_ppm(path),
        other => Err(Error::ImageFormat(format!("{}: extension `{other}`", path.display()))),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    read_image_over(path, [0.0; 3])
}

/// Writes 8-bit RGB; the format follows the extension (`png` or `ppm`).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png(path, img),
        "ppm" => {
            let bytes = encode_ppm(img);
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::ImageFormat(format!("{}: extension `{other}`", path.display()))),
    }
}

/// `P6\n<w> <h>\n255\n` followed by RGB bytes.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_bytes(img));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::ImageFormat(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?.to_string());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated raster"))?;
    from_bytes(w, h, data)
}

fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

fn read_png(path: &Path, background: [f64; 3]) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::ImageFormat(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::ImageFormat(format!("{}: color type {other:?}", path.display()))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(channels) {
        let f = |b: u8| b as f64 / 255.0;
        let (rgb, a) = match channels {
            1 => ([f(p[0]); 3], 1.0),
            2 => ([f(p[0]); 3], f(p[1])),
            3 => ([f(p[0]), f(p[1]), f(p[2])], 1.0),
            _ => ([f(p[0]), f(p[1]), f(p[2])], f(p[3])),
        };
        if a == 1.0 {
            data.extend(rgb);
        } else {
            data.extend((0..3).map(|k| rgb[k] * a + background[k] * (1.0 - a)));
        }
    }
    Image::new(w, h, data)
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::ImageFormat(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(&to_bytes(img)).map_err(err)?;
    writer.finish().map_err(err)
}

/// Depth map scaled to `[0, 1]` over the covered pixels (near = bright);
/// uncovered pixels are black.
pub fn depth_to_image(depth: &[f64], alpha: &[f64], width: usize, height: usize) -> Image {
    let covered = |i: usize| alpha[i] > 0.5;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &d) in depth.iter().enumerate() {
        if covered(i) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = depth
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| {
            let v = if covered(i) { 1.0 - (d - lo) / span } else { 0.0 };
            [v; 3]
        })
        .collect();
    Image {
        width,
        height,
        data,
    }
}
