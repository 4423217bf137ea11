//! Procedural captioned images. Each example is a pure function of
//! `(seed, index)`: a square or cross drawn in one quadrant of a dark
//! background, described by a four-word caption.

use std::fs;
use std::path::Path;

use lmlp_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image;

pub const BACKGROUND: f32 = -1.0;

/// Caption words; a word's token id is its index plus one (0 is the null id).
pub const VOCAB: [&str; 13] = [
    "square",
    "cross",
    "top-left",
    "top-right",
    "bottom-left",
    "bottom-right",
    "bright",
    "dim",
    "small",
    "large",
    "red",
    "green",
    "blue",
];

pub const CAPTION_WORDS: usize = 4;

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word).map(|i| i + 1)
}

pub fn word(id: usize) -> Option<&'static str> {
    id.checked_sub(1).and_then(|i| VOCAB.get(i)).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attributes {
    pub shape: Shape,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
    pub bright: bool,
    pub large: bool,
    /// Channel carrying the shape; `None` paints every channel.
    pub color: Option<usize>,
}

impl Attributes {
    /// Caption ids: `[shape, quadrant, intensity, size]`, with `size` replaced
    /// by the color word on multi-channel images.
    pub fn caption(&self) -> Vec<usize> {
        let shape = match self.shape {
            Shape::Square => "square",
            Shape::Cross => "cross",
        };
        let quadrant = VOCAB[2 + self.quadrant];
        let intensity = if self.bright { "bright" } else { "dim" };
        let last = match self.color {
            Some(c) => VOCAB[10 + c],
            None if self.large => "large",
            None => "small",
        };
        [shape, quadrant, intensity, last].iter().map(|w| token_id(w).unwrap()).collect()
    }

    pub fn intensity(&self) -> f32 {
        if self.bright {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[C, side, side]`, row-major, values in `[-1, 1]`.
    pub image: Vec<f32>,
    pub caption: Vec<usize>,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDataset {
    pub seed: u64,
    pub side: usize,
    pub channels: usize,
}

impl ToyDataset {
    pub fn new(seed: u64, side: usize, channels: usize) -> Result<Self> {
        if side < 4 || side % 2 != 0 {
            return Err(Error::Config(format!("toy images need an even side of at least 4, got {side}")));
        }
        if !(1..=3).contains(&channels) {
            return Err(Error::Config(format!("toy images have 1 to 3 channels, got {channels}")));
        }
        Ok(Self { seed, side, channels })
    }

    /// Largest token id a caption can contain.
    pub fn max_token(&self) -> usize {
        VOCAB.len()
    }

    pub fn example(&self, index: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let attributes = Attributes {
            shape: if rng.random::<bool>() { Shape::Square } else { Shape::Cross },
            quadrant: rng.random_range(0..4),
            bright: rng.random::<bool>(),
            large: rng.random::<bool>(),
            color: (self.channels > 1).then(|| rng.random_range(0..self.channels)),
        };
        // colored captions carry no size word, so colored shapes are always large
        let attributes = Attributes { large: attributes.large || attributes.color.is_some(), ..attributes };
        let half = self.side / 2;
        let extent = if attributes.large { half } else { (half / 2).max(2) };
        let (qy, qx) = ((attributes.quadrant / 2) * half, (attributes.quadrant % 2) * half);
        let oy = qy + rng.random_range(0..=half - extent);
        let ox = qx + rng.random_range(0..=half - extent);
        let plane = self.side * self.side;
        let mut image = vec![BACKGROUND; self.channels * plane];
        let value = attributes.intensity();
        for dy in 0..extent {
            for dx in 0..extent {
                let mid = extent / 2;
                let on = match attributes.shape {
                    Shape::Square => true,
                    Shape::Cross => dy == mid || dx == mid,
                };
                if !on {
                    continue;
                }
                for c in 0..self.channels {
                    if attributes.color.is_none_or(|k| k == c) {
                        image[c * plane + (oy + dy) * self.side + ox + dx] = value;
                    }
                }
            }
        }
        Example { image, caption: attributes.caption(), attributes }
    }

    /// Caption ids padded with null ids (or truncated) to `len`.
    pub fn caption_for(&self, example: &Example, len: usize) -> Vec<usize> {
        let mut ids = example.caption.clone();
        ids.resize(len, lmlp_core::backbone::NULL_TOKEN);
        ids
    }

    /// Writes `NNNNN.pgm` (or `.ppm` for 3 channels) and `captions.tsv`.
    pub fn write(&self, count: usize, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tsv = String::from("index\ttoken_ids\tcaption\n");
        for i in 0..count {
            let ex = self.example(i as u64);
            let name = format!("{i:05}.{}", image::extension(self.channels));
            image::write_image(&dir.join(name), &ex.image, self.channels, self.side, self.side)?;
            let ids: Vec<String> = ex.caption.iter().map(usize::to_string).collect();
            let words: Vec<&str> = ex.caption.iter().filter_map(|&id| word(id)).collect();
            tsv.push_str(&format!("{i:05}\t{}\t{}\n", ids.join(" "), words.join(" ")));
        }
        fs::write(dir.join("captions.tsv"), tsv)?;
        Ok(())
    }
}

/// Parses a caption line of words or numeric ids into token ids in
/// `1..=vocab_size`.
pub fn parse_caption(line: &str, vocab_size: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|tok| {
            let id = match tok.parse::<usize>() {
                Ok(id) => Some(id),
                Err(_) => token_id(tok),
            };
            match id {
                Some(id) if id <= vocab_size => Ok(id),
                _ => Err(Error::Usage(format!("caption token `{tok}` is not in the vocabulary"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits() {
        assert!(VOCAB.len() <= 32);
        assert_eq!(token_id("square"), Some(1));
        assert_eq!(word(1), Some("square"));
        assert_eq!(word(0), None);
    }

    #[test]
    fn pure_function_of_seed_and_index() {
        let d = ToyDataset::new(3, 8, 1).unwrap();
        assert_eq!(d.example(17), d.example(17));
        assert_ne!(d.example(17).image, ToyDataset::new(4, 8, 1).unwrap().example(17).image);
        let captions: std::collections::HashSet<Vec<usize>> = (0..200).map(|i| d.example(i).caption).collect();
        assert!(captions.len() > 16);
    }

    #[test]
    fn caption_parsing() {
        assert_eq!(parse_caption("square top-left 7 small", 32).unwrap(), vec![1, 3, 7, 9]);
        let err = parse_caption("square triangle", 32).unwrap_err().to_string();
        assert!(err.contains("triangle"));
        assert!(parse_caption("40", 32).is_err());
    }

    #[test]
    fn bad_geometry_is_rejected() {
        assert!(ToyDataset::new(0, 7, 1).is_err());
        assert!(ToyDataset::new(0, 8, 4).is_err());
    }
}
