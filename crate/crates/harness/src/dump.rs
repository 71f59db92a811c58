//! Netpbm output: P5 masks and grouping maps, P6 scene images.

use std::fs;
use std::path::{Path, PathBuf};

use cgf_core::metrics::Mask;
use cgf_core::model::Model;
use cgf_core::{ParamStore, Tensor};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::evaluate;

/// Gray level step between token indices in grouping maps.
pub const GROUP_LEVEL_STEP: usize = 32;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary 8-bit graymap written by [`write_pgm`] (or any P5 file
/// without comments).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Image { path: path.display().to_string(), msg: msg.into() };
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit graymaps are supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel data length does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, mask.width, mask.height, &px)
}

/// Pixels above mid-gray are foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, px) = read_pgm(path)?;
    Ok(Mask::new(h, w, px.into_iter().map(|v| v > 127).collect())?)
}

/// Writes an `H x W x 3` image in `[0, 1]` as a P6 pixmap.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour upscaling of a `gh x gw` owner grid to `h x w` gray
/// levels.
pub fn group_map(owners: Option<&[usize]>, gh: usize, gw: usize, h: usize, w: usize) -> Vec<u8> {
    (0..h * w)
        .map(|i| match owners {
            Some(o) => {
                let (y, x) = (i / w * gh / h, i % w * gw / w);
                (o[y * gw + x] * GROUP_LEVEL_STEP).min(255) as u8
            }
            None => 0,
        })
        .collect()
}

/// Writes `<i>_pred.pgm`, `<i>_gt.pgm` and `<i>_groups.pgm` per sample and
/// returns the written paths.
pub fn dump_masks(
    model: &Model,
    store: &ParamStore,
    samples: &[&Sample],
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ev = evaluate(model, store, samples, threshold)?;
    let side = model.cfg.image_size / 4;
    let mut paths = Vec::with_capacity(3 * samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.mask.height, s.mask.width);
        let pred = out_dir.join(format!("{i:04}_pred.pgm"));
        let gt = out_dir.join(format!("{i:04}_gt.pgm"));
        let groups = out_dir.join(format!("{i:04}_groups.pgm"));
        write_mask(&pred, &ev.preds[i])?;
        write_mask(&gt, &s.mask)?;
        write_pgm(&groups, w, h, &group_map(ev.owners[i].as_deref(), side, side, h, w))?;
        paths.extend([pred, gt, groups]);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Mask::new(3, 5, (0..15).map(|i| i % 3 == 0).collect()).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
        let raw = fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n5 3\n255\n"));
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Image { .. })));
        fs::write(&path, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn group_levels_follow_tokens() {
        let map = group_map(Some(&[0, 1, 2, 7]), 2, 2, 4, 4);
        assert_eq!(&map[..4], &[0, 0, 32, 32]);
        assert_eq!(map[15], 224);
        assert!(group_map(None, 2, 2, 4, 4).iter().all(|&v| v == 0));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, b"").unwrap();
        let r = write_pgm(&file.join("a.pgm"), 1, 1, &[0]);
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
