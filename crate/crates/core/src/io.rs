//! File formats: PNG images, PGM (P5) masks and label maps, and the `SEG1`
//! raw 16-bit label format for more than 256 classes.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskGrid, SegMap};

/// Label used for "unlabeled" pixels in 8-bit ground truth.
pub const DEFAULT_IGNORE_LABEL: u16 = 255;

const SEG_MAGIC: &[u8; 4] = b"SEG1";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_png(image: &ImageGrid) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(
            BufWriter::new(&mut buf),
            image.width() as u32,
            image.height() as u32,
        );
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&image.to_u8())?;
    }
    Ok(buf)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let size = reader.output_buffer_size().ok_or_else(|| {
        Error::InvalidArgument("PNG output buffer size overflows".into())
    })?;
    let mut raw = vec![0u8; size];
    let info = reader.next_frame(&mut raw)?;
    raw.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::InvalidArgument("unexpanded indexed PNG".into()))
        }
    };
    let bytes: Vec<u8> = if channels == keep {
        raw
    } else {
        raw.chunks_exact(channels)
            .flat_map(|px| px[..keep].to_vec())
            .collect()
    };
    ImageGrid::from_u8(h, w, keep, &bytes)
}

pub fn read_png(path: &Path) -> Result<ImageGrid> {
    decode_png(&fs::read(path)?).map_err(|e| match e {
        Error::PngDecode(inner) => Error::format(path, inner.to_string()),
        other => other,
    })
}

pub fn write_png(path: &Path, image: &ImageGrid) -> Result<()> {
    write_atomic(path, &encode_png(image)?)
}

/// Binary PGM with maxval 255.
pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval <= 255, returning `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("expected a decimal header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    pos += 1;
    let n = width * height;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if bytes.len() < pos + n {
        return Err(format!("expected {n} pixel bytes, found {}", bytes.len() - pos));
    }
    Ok((height, width, bytes[pos..pos + n].to_vec()))
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path)?).map_err(|m| Error::format(path, m))
}

/// Masks as PGM: 0 = hidden, 255 = visible.
pub fn encode_mask(mask: &MaskGrid) -> Vec<u8> {
    let px: Vec<u8> = mask.cells().iter().map(|&v| if v { 255 } else { 0 }).collect();
    encode_pgm(mask.height(), mask.width(), &px)
}

pub fn decode_mask(bytes: &[u8]) -> std::result::Result<MaskGrid, String> {
    let (h, w, px) = decode_pgm(bytes)?;
    let visible = px
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(format!("mask value {other} is neither 0 nor 255")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    MaskGrid::new(h, w, visible).map_err(|e| e.to_string())
}

pub fn read_mask(path: &Path) -> Result<MaskGrid> {
    decode_mask(&fs::read(path)?).map_err(|m| Error::format(path, m))
}

pub fn write_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    write_atomic(path, &encode_mask(mask))
}

/// Encodes a label map: PGM when it fits in 8 bits, `SEG1` otherwise.
pub fn encode_segmap(seg: &SegMap) -> Vec<u8> {
    if seg.num_classes() <= 256 {
        let px: Vec<u8> = seg.labels().iter().map(|&l| l as u8).collect();
        encode_pgm(seg.height(), seg.width(), &px)
    } else {
        let mut out = Vec::with_capacity(16 + 2 * seg.labels().len());
        out.extend_from_slice(SEG_MAGIC);
        out.extend_from_slice(&(seg.height() as u32).to_le_bytes());
        out.extend_from_slice(&(seg.width() as u32).to_le_bytes());
        out.extend_from_slice(&seg.num_classes().to_le_bytes());
        for &l in seg.labels() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }
}

/// File extension matching [`encode_segmap`]'s choice of format.
pub fn segmap_extension(num_classes: u32) -> &'static str {
    if num_classes <= 256 {
        "pgm"
    } else {
        "seg"
    }
}

/// Decodes a label map. PGM files carry no class count, so `num_classes`
/// defaults to 256 for them when not given; `SEG1` files use their header.
pub fn decode_segmap(
    bytes: &[u8],
    num_classes: Option<u32>,
) -> std::result::Result<SegMap, String> {
    if bytes.starts_with(SEG_MAGIC) {
        if bytes.len() < 16 {
            return Err("truncated SEG1 header".into());
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let (h, w, header_classes) = (word(4) as usize, word(8) as usize, word(12));
        let n = h * w;
        if bytes.len() != 16 + 2 * n {
            return Err(format!("expected {} label bytes, found {}", 2 * n, bytes.len() - 16));
        }
        let labels = bytes[16..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        SegMap::new(h, w, num_classes.unwrap_or(header_classes), labels).map_err(|e| e.to_string())
    } else {
        let (h, w, px) = decode_pgm(bytes)?;
        SegMap::new(
            h,
            w,
            num_classes.unwrap_or(256),
            px.into_iter().map(u16::from).collect(),
        )
        .map_err(|e| e.to_string())
    }
}

pub fn read_segmap(path: &Path, num_classes: Option<u32>) -> Result<SegMap> {
    decode_segmap(&fs::read(path)?, num_classes).map_err(|m| Error::format(path, m))
}

pub fn write_segmap(path: &Path, seg: &SegMap) -> Result<()> {
    write_atomic(path, &encode_segmap(seg))
}

/// Certification maps as PGM: 255 certified, 0 uncertified.
pub fn encode_cert_map(height: usize, width: usize, certified: &[bool]) -> Vec<u8> {
    let px: Vec<u8> = certified.iter().map(|&c| if c { 255 } else { 0 }).collect();
    encode_pgm(height, width, &px)
}

pub fn read_cert_map(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (h, w, px) = read_pgm(path)?;
    Ok((h, w, px.into_iter().map(|v| v != 0).collect()))
}

/// Fixed 16-entry palette for colorized previews; entries cycle for more classes.
const PALETTE: [[u8; 3]; 16] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 60, 100],
    [0, 80, 100],
];

/// RGB preview of a label map; pixels with `certified == false` are drawn black.
pub fn colorize(seg: &SegMap, certified: Option<&[bool]>) -> Result<ImageGrid> {
    let mut bytes = Vec::with_capacity(seg.labels().len() * 3);
    for (idx, &l) in seg.labels().iter().enumerate() {
        let rgb = match certified {
            Some(c) if !c[idx] => [0, 0, 0],
            _ => PALETTE[l as usize % PALETTE.len()],
        };
        bytes.extend_from_slice(&rgb);
    }
    ImageGrid::from_u8(seg.height(), seg.width(), 3, &bytes)
}
