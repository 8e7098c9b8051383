//! Binary PGM export of the three axis-aligned mid-slices of a label volume.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::volume::LabelVolume;

/// Gray level for `class`: classes spread evenly over 0..=255.
pub fn gray_level(class: u8, num_classes: usize) -> u8 {
    if num_classes <= 1 {
        return 0;
    }
    (class as usize * 255 / (num_classes - 1)) as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub axis: char,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Slice {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Mid-slices across z (an axial y-x image), y (z-x), and x (z-y).
pub fn mid_slices(labels: &LabelVolume) -> [Slice; 3] {
    let [d, h, w] = labels.dims();
    let n = labels.num_classes();
    let px = |z, y, x| gray_level(labels.get(z, y, x), n);
    let (mz, my, mx) = (d / 2, h / 2, w / 2);
    [
        Slice {
            axis: 'z',
            width: w,
            height: h,
            pixels: (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| px(mz, y, x)).collect(),
        },
        Slice {
            axis: 'y',
            width: w,
            height: d,
            pixels: (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| px(z, my, x)).collect(),
        },
        Slice {
            axis: 'x',
            width: h,
            height: d,
            pixels: (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| px(z, y, mx)).collect(),
        },
    ]
}

/// Writes `<stem>_<axis>.pgm` for each mid-slice into `dir`.
pub fn write_mid_slices(labels: &LabelVolume, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    mid_slices(labels)
        .iter()
        .map(|s| {
            let path = dir.join(format!("{stem}_{}.pgm", s.axis));
            fs::write(&path, s.to_pgm())?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_and_layout() {
        assert_eq!(gray_level(0, 3), 0);
        assert_eq!(gray_level(1, 3), 127);
        assert_eq!(gray_level(2, 3), 255);
        let labels: Vec<u8> = (0..24).map(|v| (v % 3) as u8).collect();
        let vol = LabelVolume::new([2, 3, 4], 3, labels).unwrap();
        let [z, y, x] = mid_slices(&vol);
        assert_eq!((z.width, z.height, z.pixels.len()), (4, 3, 12));
        assert_eq!((y.width, y.height), (4, 2));
        assert_eq!((x.width, x.height), (3, 2));
        assert_eq!(z.pixels[0], gray_level(vol.get(1, 0, 0), 3));
        let bytes = z.to_pgm();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }
}
