//! On-disk clip layout: `root/clip_<id>/frame_<n>.ppm`, `flow_<n>.flo`,
//! `tags.txt` (one class id per line) and `gt_<n>.pgm` (class ids as gray
//! levels). Images are binary PNM with maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::losses::TagSet;
use crate::synth::{ClipSample, LabelMap, RgbImage};

pub const TAGS_FILE: &str = "tags.txt";

pub fn clip_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("clip_{id}"))
}

pub fn frame_path(clip_dir: &Path, n: usize) -> PathBuf {
    clip_dir.join(format!("frame_{n}.ppm"))
}

pub fn flow_path(clip_dir: &Path, n: usize) -> PathBuf {
    clip_dir.join(format!("flow_{n}.flo"))
}

pub fn gt_path(clip_dir: &Path, n: usize) -> PathBuf {
    clip_dir.join(format!("gt_{n}.pgm"))
}

fn pnm_bytes(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses a binary PNM header; returns (width, height, pixel bytes).
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, channels: usize, origin: &Path) -> Result<(usize, usize, &'a [u8])> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(origin, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != magic {
        return Err(Error::format(origin, format!("expected {magic} magic")));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?.parse().map_err(|_| Error::format(origin, format!("bad {what} in header")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::format(origin, format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    let expected = w * h * channels;
    if body.len() != expected {
        return Err(Error::format(origin, format!("expected {expected} raster bytes for {w}×{h}, found {}", body.len())));
    }
    Ok((w, h, body))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, pnm_bytes("P6", img.width, img.height, &img.data)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, body) = parse_pnm(&bytes, "P6", 3, path)?;
    Ok(RgbImage { height, width, data: body.to_vec() })
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, pnm_bytes("P5", map.width, map.height, &map.labels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, body) = parse_pnm(&bytes, "P5", 1, path)?;
    Ok(LabelMap { height, width, labels: body.to_vec() })
}

pub fn write_clip(root: &Path, clip: &ClipSample) -> Result<()> {
    let dir = clip_dir(root, clip.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (n, f) in clip.frames.iter().enumerate() {
        write_ppm(&frame_path(&dir, n), f)?;
    }
    for (n, f) in clip.flows.iter().enumerate() {
        f.write_flo(&flow_path(&dir, n))?;
    }
    for (n, g) in clip.gt.iter().enumerate() {
        write_pgm(&gt_path(&dir, n), g)?;
    }
    let tags: String = clip.tags.present().map(|k| format!("{k}\n")).collect();
    let p = dir.join(TAGS_FILE);
    fs::write(&p, tags).map_err(|e| Error::io(&p, e))
}

pub fn write_dataset(root: &Path, clips: &[ClipSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    clips.iter().try_for_each(|c| write_clip(root, c))
}

fn count_files(dir: &Path, prefix: &str, ext: &str) -> Result<usize> {
    let mut n = 0;
    while dir.join(format!("{prefix}_{n}.{ext}")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::format(dir, format!("no {prefix}_0.{ext}")));
    }
    Ok(n)
}

pub fn read_clip(dir: &Path, id: usize, num_classes: usize) -> Result<ClipSample> {
    let n_frames = count_files(dir, "frame", "ppm")?;
    let frames = (0..n_frames).map(|n| read_ppm(&frame_path(dir, n))).collect::<Result<Vec<_>>>()?;
    let flows = (0..n_frames - 1).map(|n| FlowField::read_flo(&flow_path(dir, n))).collect::<Result<Vec<_>>>()?;
    let gt = (0..n_frames).map(|n| read_pgm(&gt_path(dir, n))).collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].height, frames[0].width);
    for n in 0..n_frames {
        let ok = frames[n].height == h
            && frames[n].width == w
            && gt[n].height == h
            && gt[n].width == w
            && flows.get(n).is_none_or(|f| f.height == h && f.width == w);
        if !ok {
            return Err(Error::format(dir, format!("frame {n}: extents differ from frame 0 ({h}×{w})")));
        }
    }
    let tp = dir.join(TAGS_FILE);
    let text = fs::read_to_string(&tp).map_err(|e| Error::io(&tp, e))?;
    let ids = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<usize>().map_err(|_| Error::format(&tp, format!("bad class id {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let tags = TagSet::new(ids, num_classes).map_err(|e| Error::format(&tp, e.to_string()))?;
    Ok(ClipSample { id, frames, flows, tags, gt })
}

/// All `clip_<id>` directories under `root`, sorted by id.
pub fn read_dataset(root: &Path, num_classes: usize) -> Result<Vec<ClipSample>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(id) = name.to_str().and_then(|n| n.strip_prefix("clip_")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().is_dir() {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.into_iter().map(|id| read_clip(&clip_dir(root, id), id, num_classes)).collect()
}
