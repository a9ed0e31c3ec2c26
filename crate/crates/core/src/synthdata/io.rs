//! On-disk sequence layout:
//!
//! ```text
//! color/00000000.png    8-bit RGB
//! depth/00000000.png    16-bit grayscale, millimetres
//! groundtruth.txt       "x,y,w,h" per frame, "nan,nan,nan,nan" when not visible
//! attributes.txt        one tag per line
//! meta.txt              width=, height=, length=, seed=
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::{Attribute, DepthFrame, RgbFrame, Sequence};
use crate::bbox::BBox;
use crate::error::{Error, Result};

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    if seq.depth.len() != seq.len() || seq.groundtruth.len() != seq.len() {
        return Err(Error::InvalidArgument("sequence per-frame lists differ in length".into()));
    }
    for sub in ["color", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    }
    for (i, (rgb, depth)) in seq.rgb.iter().zip(&seq.depth).enumerate() {
        write_png(&frame_path(dir, "color", i), rgb.width, rgb.height, png::ColorType::Rgb, png::BitDepth::Eight, &rgb.data)?;
        let bytes: Vec<u8> = depth.data.iter().flat_map(|d| d.to_be_bytes()).collect();
        write_png(&frame_path(dir, "depth", i), depth.width, depth.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)?;
    }
    let gt: String = seq
        .groundtruth
        .iter()
        .map(|b| match b {
            Some(b) => format!("{},{},{},{}\n", b.x, b.y, b.w, b.h),
            None => "nan,nan,nan,nan\n".to_string(),
        })
        .collect();
    write_text(&dir.join("groundtruth.txt"), &gt)?;
    let tags: String = seq.tags.iter().map(|t| format!("{t}\n")).collect();
    write_text(&dir.join("attributes.txt"), &tags)?;
    let meta = format!(
        "width={}\nheight={}\nlength={}\nseed={}\n",
        seq.width,
        seq.height,
        seq.len(),
        seq.seed
    );
    write_text(&dir.join("meta.txt"), &meta)
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let meta_path = dir.join("meta.txt");
    let meta = read_text(&meta_path)?;
    let (mut width, mut height, mut length, mut seed) = (None, None, None, None);
    for (n, line) in meta.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: meta_path.display().to_string(),
            line: n + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("value of `{}` is not an integer", k.trim())))?;
        match k.trim() {
            "width" => width = Some(v as usize),
            "height" => height = Some(v as usize),
            "length" => length = Some(v as usize),
            "seed" => seed = Some(v),
            other => return Err(parse_err(format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Format {
        file: meta_path.clone(),
        message: format!("missing `{k}`"),
    };
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;
    let length = length.ok_or_else(|| missing("length"))?;
    let seed = seed.ok_or_else(|| missing("seed"))?;

    let groundtruth = read_groundtruth(&dir.join("groundtruth.txt"))?;
    if groundtruth.len() != length {
        return Err(Error::Format {
            file: dir.join("groundtruth.txt"),
            message: format!("{} boxes for {length} frames", groundtruth.len()),
        });
    }
    let tags = read_attributes(&dir.join("attributes.txt"))?;

    let mut rgb = Vec::with_capacity(length);
    let mut depth = Vec::with_capacity(length);
    for i in 0..length {
        let cp = frame_path(dir, "color", i);
        if !cp.is_file() {
            return Err(Error::MissingFrame { kind: "color", index: i, path: cp });
        }
        let data = read_png(&cp, width, height, png::ColorType::Rgb, png::BitDepth::Eight)?;
        rgb.push(RgbFrame { width, height, data });
        let dp = frame_path(dir, "depth", i);
        if !dp.is_file() {
            return Err(Error::MissingFrame { kind: "depth", index: i, path: dp });
        }
        let bytes = read_png(&dp, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
        let data = bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        depth.push(DepthFrame { width, height, data });
    }
    Ok(Sequence {
        width,
        height,
        seed,
        rgb,
        depth,
        groundtruth,
        tags,
    })
}

/// Ground truth and tags only; enough to score a prediction trace.
pub fn read_annotations(dir: &Path) -> Result<(Vec<Option<BBox>>, Vec<Attribute>)> {
    Ok((
        read_groundtruth(&dir.join("groundtruth.txt"))?,
        read_attributes(&dir.join("attributes.txt"))?,
    ))
}

fn read_attributes(path: &Path) -> Result<Vec<Attribute>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<Attribute>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message: format!("unknown attribute `{}`", l.trim()),
            })
        })
        .collect()
}

fn read_groundtruth(path: &Path) -> Result<Vec<Option<BBox>>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                message,
            };
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(format!("bad number: {e}")))?;
            match vals[..] {
                [x, y, w, h] if [x, y, w, h].iter().all(|v| v.is_nan()) => Ok(None),
                [x, y, w, h] if [x, y, w, h].iter().all(|v| v.is_finite()) && w >= 0.0 && h >= 0.0 => {
                    Ok(Some(BBox::new(x, y, w, h)))
                }
                [_, _, _, _] => Err(err("box must be four finite non-negative-size values or all nan".into())),
                _ => Err(err(format!("expected 4 values, got {}", vals.len()))),
            }
        })
        .collect()
}

fn frame_path(dir: &Path, kind: &str, index: usize) -> PathBuf {
    dir.join(kind).join(format!("{index:08}.png"))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let fmt_err = |e: png::EncodingError| Error::Format {
        file: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(fmt_err)?;
    writer.write_image_data(data).map_err(fmt_err)?;
    writer.finish().map_err(fmt_err)
}

fn read_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth) -> Result<Vec<u8>> {
    let fmt_err = |message: String| Error::Format {
        file: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| fmt_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err(e.to_string()))?;
    if info.width as usize != w || info.height as usize != h {
        return Err(fmt_err(format!(
            "image is {}x{}, expected {w}x{h}",
            info.width, info.height
        )));
    }
    if info.color_type != color || info.bit_depth != depth {
        return Err(fmt_err(format!(
            "expected {color:?} at {depth:?}, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}
