//! Attention maps for a single slide.
//!
//! A slide usually holds more patches than the model saw during training,
//! so the map is built from repeated small groups. Each pass shuffles all
//! patch indices and cuts them into groups of `group_size`; the last group
//! keeps whatever is left. Every group gets its own softmax per head. After
//! `passes` passes each patch has one weight per pass, and the map value is
//! their mean times `group_size`, so a uniform head scores 1.0.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{DenseMatrix, RngStream};

pub const DEFAULT_PASSES: usize = 10;
pub const DEFAULT_GROUP_SIZE: usize = 32;

/// Rescaled weights above this value render as white.
pub const SATURATION: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// h x n rescaled weights.
    pub weights: DenseMatrix,
    /// Number of passes each patch took part in.
    pub samples: Vec<usize>,
}

/// Grid position of a patch on the slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

pub fn attention_map(
    model: &ModelParams,
    x: &DenseMatrix,
    passes: usize,
    group_size: usize,
    rng: &mut RngStream,
) -> Result<AttentionMap> {
    if passes == 0 || group_size == 0 {
        return Err(Error::Config("passes and group size must be positive".into()));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::Domain("empty bag".into()));
    }
    let h = model.heads;
    let mut sums = DenseMatrix::zeros(h, n);
    let mut samples = vec![0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..passes {
        rng.shuffle(&mut order);
        for group in order.chunks(group_size) {
            let (out, _) = model.forward_with_mask(&x.select_rows(group), None)?;
            for (pos, &patch) in group.iter().enumerate() {
                samples[patch] += 1;
                for head in 0..h {
                    let v = sums.get(head, patch) + out.attn.get(head, pos);
                    sums.set(head, patch, v);
                }
            }
        }
    }
    let scale = group_size as f64;
    for head in 0..h {
        for patch in 0..n {
            let v = sums.get(head, patch) / samples[patch] as f64 * scale;
            sums.set(head, patch, v);
        }
    }
    Ok(AttentionMap {
        weights: sums,
        samples,
    })
}

/// Parses `patch,row,col` lines (header optional) into one position per
/// patch. Every patch in `0..n` must appear exactly once.
pub fn parse_coords(text: &str, n: usize) -> Result<Vec<GridPos>> {
    let mut out: Vec<Option<GridPos>> = vec![None; n];
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (line_no == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(line_no as u64 + 1, format!("`{s}` is not a non-negative integer")))
        };
        if fields.len() != 3 {
            return Err(Error::format(line_no as u64 + 1, "expected patch,row,col"));
        }
        let (patch, row, col) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if patch >= n {
            return Err(Error::Domain(format!("coordinate for patch {patch}, bag has {n}")));
        }
        if out[patch].replace(GridPos { row, col }).is_some() {
            return Err(Error::Domain(format!("patch {patch} has two coordinates")));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Usage(format!("no coordinate for patch {i}"))))
        .collect()
}

impl AttentionMap {
    /// `patch,grid_row,grid_col,head,weight` with 1-based heads; the grid
    /// columns are empty without coordinates.
    pub fn to_csv(&self, coords: Option<&[GridPos]>) -> String {
        let mut out = String::from("patch,grid_row,grid_col,head,weight\n");
        for patch in 0..self.weights.cols() {
            let (r, c) = coords
                .map(|cs| (cs[patch].row.to_string(), cs[patch].col.to_string()))
                .unwrap_or_default();
            for head in 0..self.weights.rows() {
                let _ = writeln!(out, "{patch},{r},{c},{},{}", head + 1, self.weights.get(head, patch));
            }
        }
        out
    }

    /// Binary PGM (P5) of one head (0-based). Weight 0 is black, weights of
    /// [`SATURATION`] and above are white, linear in between. Grid cells
    /// without a patch are black.
    pub fn heatmap_pgm(&self, head: usize, coords: &[GridPos]) -> Result<Vec<u8>> {
        if head >= self.weights.rows() {
            return Err(Error::Domain(format!("head {head} out of range")));
        }
        if coords.len() != self.weights.cols() {
            return Err(Error::Usage(format!(
                "{} coordinates for {} patches",
                coords.len(),
                self.weights.cols()
            )));
        }
        let height = coords.iter().map(|p| p.row + 1).max().unwrap_or(0);
        let width = coords.iter().map(|p| p.col + 1).max().unwrap_or(0);
        let mut pixels = vec![0u8; width * height];
        for (patch, p) in coords.iter().enumerate() {
            pixels[p.row * width + p.col] = gray(self.weights.get(head, patch));
        }
        let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
        out.extend(pixels);
        Ok(out)
    }
}

pub fn gray(weight: f64) -> u8 {
    ((weight / SATURATION).clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn bag(rng: &mut RngStream, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_keys_give_unit_weights_in_full_groups() {
        let mut rng = RngStream::new(1, "test");
        let mut model = init_params(8, 2, &mut rng).unwrap();
        model.key_proj = DenseMatrix::zeros(8, 8);
        let x = bag(&mut rng, 64, 8);
        let map = attention_map(&model, &x, 10, 32, &mut rng).unwrap();
        assert!(map.samples.iter().all(|&s| s == 10));
        assert!(map.weights.as_slice().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn remainder_group_is_kept() {
        let mut rng = RngStream::new(2, "test");
        let model = init_params(4, 4, &mut rng).unwrap();
        let x = bag(&mut rng, 37, 4);
        let map = attention_map(&model, &x, 10, 32, &mut rng).unwrap();
        assert!(map.samples.iter().all(|&s| s == 10));
        assert_eq!(map.to_csv(None).lines().count(), 1 + 37 * 4);
    }

    #[test]
    fn coordinates_and_heatmap() {
        let coords = parse_coords("patch,row,col\n0,0,0\n1,0,2\n2,1,1\n", 3).unwrap();
        let map = AttentionMap {
            weights: DenseMatrix::new(1, 3, vec![0.0, 1.0, 5.0]).unwrap(),
            samples: vec![10; 3],
        };
        let pgm = map.heatmap_pgm(0, &coords).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 0, 128, 0, 255, 0]);
        assert!(map.to_csv(Some(&coords)).contains("\n1,0,2,1,1\n"));
        assert!(matches!(parse_coords("0,0,0\n", 2), Err(Error::Usage(_))));
        assert!(parse_coords("0,0,0\n0,1,1\n", 1).is_err());
    }
}
