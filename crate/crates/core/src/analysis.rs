//! First-stage weight maps: extraction, unit normalization, export and
//! per-region statistics over the token layout.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::UlMlpModel;
use crate::error::{usage_err, Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Token branch, `L x L`.
    Left,
    /// Channel branch, `D x D`.
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            _ => usage_err(format!("unknown side {s:?} (expected left or right)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Csv,
    Pgm,
}

impl FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MapFormat::Csv),
            "pgm" => Ok(MapFormat::Pgm),
            _ => usage_err(format!("unknown map format {s:?} (expected csv or pgm)")),
        }
    }
}

/// A row-major weight matrix `[out, in]` with optional token-region
/// boundaries shared by both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub matrix: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub side: Side,
    pub layer_index: usize,
    /// Start indices of the text and image token groups.
    pub boundaries: Vec<usize>,
}

impl WeightMap {
    pub fn new(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} map", matrix.len())));
        }
        Ok(Self { matrix, rows, cols, side: Side::Left, layer_index: 0, boundaries: Vec::new() })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols + c]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.matrix.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// First-stage weight of block `layer`: the token-branch `L x L` matrix for
/// [`Side::Left`] (with time|text and text|image boundaries) or the
/// channel-branch `D x D` matrix for [`Side::Right`].
pub fn extract_first_stage<T: Element>(model: &UlMlpModel<T>, layer: usize, side: Side) -> Result<WeightMap> {
    let depth = model.blocks.len();
    if layer >= depth {
        return usage_err(format!("layer {layer} out of range for depth {depth}"));
    }
    let Some(block) = model.blocks[layer].as_lmlp() else {
        return Err(Error::Unsupported(format!(
            "layer {layer} is a {:?} block; only L-MLP blocks have first-stage branches",
            model.blocks[layer].config().kind
        )));
    };
    let linear = match side {
        Side::Left => &block.fnn_l.linear,
        Side::Right => &block.fnn_r.linear,
    };
    let (rows, cols) = (linear.out_dim(), linear.in_dim());
    let boundaries = match side {
        Side::Left => vec![1, 1 + model.cfg.text_tokens],
        Side::Right => Vec::new(),
    };
    Ok(WeightMap {
        matrix: linear.weight.to_f64_vec(),
        rows,
        cols,
        side,
        layer_index: layer,
        boundaries,
    })
}

/// Linear rescale to `[0, 1]`; a constant matrix maps to all `0.5`.
pub fn normalize_unit(map: &WeightMap) -> WeightMap {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    let matrix = if span > 0.0 && span.is_finite() {
        map.matrix.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.5; map.matrix.len()]
    };
    WeightMap { matrix, ..map.clone() }
}

/// Writes a normalized map. PGM output is 8-bit binary (`P5`), with boundary
/// rows and columns drawn at full intensity when `mark_boundaries` is set.
pub fn export_map(map: &WeightMap, path: &Path, format: MapFormat, mark_boundaries: bool) -> Result<()> {
    let bytes = match format {
        MapFormat::Csv => {
            let mut out = String::new();
            for r in 0..map.rows {
                let row: Vec<String> = (0..map.cols).map(|c| map.get(r, c).to_string()).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
        MapFormat::Pgm => {
            let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
            for r in 0..map.rows {
                for c in 0..map.cols {
                    let edge = mark_boundaries && (map.boundaries.contains(&r) || map.boundaries.contains(&c));
                    out.push(if edge { 255 } else { quantize(map.get(r, c)) });
                }
            }
            out
        }
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a map written by [`export_map`] as CSV.
pub fn read_csv_map(path: &Path) -> Result<WeightMap> {
    let text = fs::read_to_string(path)?;
    let mut rows = 0;
    let mut cols = None;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return usage_err(format!("{}:{}: ragged row", path.display(), i + 1));
        }
        values.extend(row);
        rows += 1;
    }
    WeightMap::new(rows, cols.unwrap_or(0), values)
}

/// Reads an 8-bit `P5` image as a map with values in `[0, 1]`.
pub fn read_pgm_map(path: &Path) -> Result<WeightMap> {
    let bytes = fs::read(path)?;
    let (width, height, maxval, pixels) = parse_pgm(&bytes)
        .ok_or_else(|| Error::Usage(format!("{} is not an 8-bit binary PGM", path.display())))?;
    let matrix = pixels.iter().map(|&p| p as f64 / maxval as f64).collect();
    WeightMap::new(height, width, matrix)
}

/// `(width, height, maxval, pixels)` of an 8-bit `P5` image.
pub fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
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
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let maxval: usize = fields[3].parse().ok()?;
    if maxval == 0 || maxval > 255 {
        return None;
    }
    let data = bytes.get(pos + 1..pos + 1 + w * h)?;
    Some((w, h, maxval, data))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Statistics of the four sub-blocks of a left map. Region `a -> b` holds the
/// weights from input tokens `a` (columns) to output tokens `b` (rows). The
/// time token is counted as text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    pub text_to_text: RegionStat,
    pub image_to_text: RegionStat,
    pub text_to_image: RegionStat,
    pub image_to_image: RegionStat,
}

impl RegionStats {
    pub fn named(&self) -> [(&'static str, RegionStat); 4] {
        [
            ("text->text", self.text_to_text),
            ("image->text", self.image_to_text),
            ("text->image", self.text_to_image),
            ("image->image", self.image_to_image),
        ]
    }
}

pub fn region_stats(map: &WeightMap) -> Result<RegionStats> {
    let Some(&split) = map.boundaries.last() else {
        return usage_err("region statistics need token boundaries (left-side map)");
    };
    if map.rows != map.cols || split > map.rows {
        return usage_err(format!("boundary {split} does not fit a {}x{} map", map.rows, map.cols));
    }
    let n = map.rows;
    let stat = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        let vals: Vec<f64> = rows.flat_map(|r| cols.clone().map(move |c| (r, c))).map(|(r, c)| map.get(r, c)).collect();
        let count = vals.len();
        if count == 0 {
            return RegionStat { mean: 0.0, std: 0.0, count };
        }
        let mean = vals.iter().sum::<f64>() / count as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        RegionStat { mean, std: var.sqrt(), count }
    };
    Ok(RegionStats {
        text_to_text: stat(0..split, 0..split),
        image_to_text: stat(0..split, split..n),
        text_to_image: stat(split..n, 0..split),
        image_to_image: stat(split..n, split..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let m = WeightMap::new(1, 3, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(normalize_unit(&m).matrix, vec![0.0, 0.5, 1.0]);
        let unit = WeightMap::new(1, 3, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_unit(&unit).matrix, unit.matrix);
        let sevens = WeightMap::new(2, 2, vec![7.0; 4]).unwrap();
        assert_eq!(normalize_unit(&sevens).matrix, vec![0.5; 4]);
    }

    #[test]
    fn region_stats_block_constant() {
        // 1 time + 1 text token, 2 image tokens
        let mut m = WeightMap::new(4, 4, vec![0.0; 16]).unwrap();
        m.boundaries = vec![1, 2];
        for r in 0..4 {
            for c in 0..4 {
                m.matrix[r * 4 + c] = match (r < 2, c < 2) {
                    (true, true) => 1.0,
                    (true, false) => 2.0,
                    (false, true) => 3.0,
                    (false, false) => 4.0,
                };
            }
        }
        let s = region_stats(&m).unwrap();
        let means: Vec<f64> = s.named().iter().map(|(_, r)| r.mean).collect();
        assert_eq!(means, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(s.named().iter().all(|(_, r)| r.std == 0.0 && r.count == 4));
    }

    #[test]
    fn region_stats_need_boundaries() {
        let m = WeightMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(region_stats(&m), Err(Error::Usage(_))));
    }

    #[test]
    fn pgm_header_parse() {
        let bytes = b"P5\n# c\n2 1\n255\n\x00\xff";
        assert_eq!(parse_pgm(bytes), Some((2, 1, 255, &b"\x00\xff"[..])));
        assert_eq!(parse_pgm(b"P6\n1 1\n255\n\x00"), None);
    }
}
