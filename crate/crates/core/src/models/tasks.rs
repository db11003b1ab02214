// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks with known ground-truth evidence.
//!
//! The question-answering task hides one key symbol among distractors in each
//! modality; the label combines the two key values, so either modality alone
//! pins down half of the answer. The detection task paints one to three
//! non-overlapping rectangles of distinct classes on a token grid.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text slot 0 of every question: the classification token.
pub const TEXT_CLS: usize = 0;
/// Last text slot of every question.
pub const TEXT_SEP: usize = 1;
/// Replacement symbol for removed text tokens.
pub const TEXT_MASK: usize = 2;
const TEXT_KEY_BASE: usize = 3;
/// Replacement symbol for removed image tokens.
pub const IMAGE_MASK: usize = 0;
const IMAGE_KEY_BASE: usize = 1;

/// Number of answer classes: two bits, one per modality.
pub const VQA_CLASSES: usize = 4;
const KEY_VALUES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaTask {
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub text_distractors: usize,
    pub image_distractors: usize,
}

impl Default for VqaTask {
    fn default() -> Self {
        VqaTask {
            text_tokens: 8,
            image_tokens: 8,
            text_distractors: 6,
            image_distractors: 6,
        }
    }
}

impl VqaTask {
    pub fn text_vocab(&self) -> usize {
        TEXT_KEY_BASE + KEY_VALUES + self.text_distractors
    }

    pub fn image_vocab(&self) -> usize {
        IMAGE_KEY_BASE + KEY_VALUES + self.image_distractors
    }

    pub fn label_of(text_key: usize, image_key: usize) -> usize {
        2 * text_key + image_key
    }

    /// Key value carried by a text symbol, if it is a key.
    pub fn text_key_value(symbol: usize) -> Option<usize> {
        (TEXT_KEY_BASE..TEXT_KEY_BASE + KEY_VALUES)
            .contains(&symbol)
            .then(|| symbol - TEXT_KEY_BASE)
    }

    pub fn image_key_value(symbol: usize) -> Option<usize> {
        (IMAGE_KEY_BASE..IMAGE_KEY_BASE + KEY_VALUES)
            .contains(&symbol)
            .then(|| symbol - IMAGE_KEY_BASE)
    }

    pub fn text_key_symbol(value: usize) -> usize {
        TEXT_KEY_BASE + value
    }

    pub fn image_key_symbol(value: usize) -> usize {
        IMAGE_KEY_BASE + value
    }

    fn validate(&self) -> Result<()> {
        if self.text_tokens < 3 {
            return Err(Error::InvalidInput(
                "questions need a CLS slot, a SEP slot and at least one word".into(),
            ));
        }
        if self.image_tokens == 0 || self.text_distractors == 0 || self.image_distractors == 0 {
            return Err(Error::InvalidInput(
                "image tokens and distractor vocabularies must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidInput("dataset size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_distractor_base = TEXT_KEY_BASE + KEY_VALUES;
        let image_distractor_base = IMAGE_KEY_BASE + KEY_VALUES;
        let samples = (0..n)
            .map(|_| {
                let text_key = rng.random_range(0..KEY_VALUES);
                let image_key = rng.random_range(0..KEY_VALUES);
                let mut text: Vec<usize> = (0..self.text_tokens)
                    .map(|_| text_distractor_base + rng.random_range(0..self.text_distractors))
                    .collect();
                text[0] = TEXT_CLS;
                text[self.text_tokens - 1] = TEXT_SEP;
                let relevant_text = rng.random_range(1..self.text_tokens - 1);
                text[relevant_text] = Self::text_key_symbol(text_key);

                let mut image: Vec<usize> = (0..self.image_tokens)
                    .map(|_| image_distractor_base + rng.random_range(0..self.image_distractors))
                    .collect();
                let relevant_image = rng.random_range(0..self.image_tokens);
                image[relevant_image] = Self::image_key_symbol(image_key);

                SyntheticSample::Vqa(VqaSample {
                    text,
                    image,
                    label: Self::label_of(text_key, image_key),
                    relevant_text,
                    relevant_image,
                })
            })
            .collect();
        Ok(samples)
    }
}

/// Shorthand for [`VqaTask::generate`] with the default task shape.
pub fn gen_vqa_task(seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
    VqaTask::default().generate(seed, n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionTask {
    pub grid: usize,
    pub object_classes: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub background_symbols: usize,
    /// Pixels per grid cell in the original-resolution image.
    pub cell_pixels: usize,
}

impl Default for DetectionTask {
    fn default() -> Self {
        DetectionTask {
            grid: 8,
            object_classes: 3,
            max_objects: 3,
            min_side: 2,
            max_side: 5,
            background_symbols: 2,
            cell_pixels: 4,
        }
    }
}

impl DetectionTask {
    pub fn image_vocab(&self) -> usize {
        1 + self.background_symbols + self.object_classes
    }

    pub fn class_symbol(&self, class: usize) -> usize {
        1 + self.background_symbols + class
    }

    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.object_classes == 0 || self.background_symbols == 0 {
            return Err(Error::InvalidInput("empty detection task".into()));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.grid {
            return Err(Error::InvalidInput(format!(
                "rectangle sides {}..={} do not fit a {} grid",
                self.min_side, self.max_side, self.grid
            )));
        }
        if self.max_objects == 0 || self.cell_pixels == 0 {
            return Err(Error::InvalidInput("need at least one object and one pixel per cell".into()));
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<SyntheticSample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidInput("dataset size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.grid;
        let classes: Vec<usize> = (0..self.object_classes).collect();
        let samples = (0..n)
            .map(|_| {
                let count = rng.random_range(1..=self.max_objects.min(self.object_classes));
                let chosen: Vec<usize> = classes.choose_multiple(&mut rng, count).copied().collect();
                let mut occupied = vec![false; g * g];
                let mut objects = Vec::new();
                for class in chosen {
                    // Rejection sampling; an object that finds no free spot is dropped.
                    for _ in 0..64 {
                        let w = rng.random_range(self.min_side..=self.max_side);
                        let h = rng.random_range(self.min_side..=self.max_side);
                        let x = rng.random_range(0..=g - w);
                        let y = rng.random_range(0..=g - h);
                        let free = (y..y + h).all(|r| (x..x + w).all(|c| !occupied[r * g + c]));
                        if free {
                            for r in y..y + h {
                                for c in x..x + w {
                                    occupied[r * g + c] = true;
                                }
                            }
                            objects.push(GroundTruthObject { class, x, y, w, h });
                            break;
                        }
                    }
                }
                objects.sort_by_key(|o| o.class);
                let mut image: Vec<usize> = (0..g * g)
                    .map(|_| 1 + rng.random_range(0..self.background_symbols))
                    .collect();
                for o in &objects {
                    for r in o.y..o.y + o.h {
                        for c in o.x..o.x + o.w {
                            image[r * g + c] = self.class_symbol(o.class);
                        }
                    }
                }
                SyntheticSample::Detection(DetectionSample {
                    grid: g,
                    cell_pixels: self.cell_pixels,
                    image,
                    objects,
                })
            })
            .collect();
        Ok(samples)
    }
}

/// Shorthand for [`DetectionTask::generate`] with a given grid side.
pub fn gen_detection_task(seed: u64, n: usize, grid: usize) -> Result<Vec<SyntheticSample>> {
    let defaults = DetectionTask::default();
    let task = DetectionTask {
        grid,
        max_side: defaults.max_side.min(grid),
        min_side: defaults.min_side.min(grid),
        ..defaults
    };
    task.generate(seed, n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub text: Vec<usize>,
    pub image: Vec<usize>,
    pub label: usize,
    pub relevant_text: usize,
    pub relevant_image: usize,
}

/// Axis-aligned rectangle in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl GroundTruthObject {
    pub fn area_cells(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub grid: usize,
    pub cell_pixels: usize,
    pub image: Vec<usize>,
    pub objects: Vec<GroundTruthObject>,
}

impl DetectionSample {
    pub fn original_size(&self) -> usize {
        self.grid * self.cell_pixels
    }

    /// Ground-truth mask of `object` at original resolution, row-major.
    pub fn object_mask(&self, object: &GroundTruthObject) -> Vec<bool> {
        let side = self.original_size();
        let p = self.cell_pixels;
        (0..side * side)
            .map(|k| {
                let (r, c) = (k / side / p, k % side / p);
                r >= object.y && r < object.y + object.h && c >= object.x && c < object.x + object.w
            })
            .collect()
    }

    pub fn object_of_class(&self, class: usize) -> Option<&GroundTruthObject> {
        self.objects.iter().find(|o| o.class == class)
    }

    /// Normalized `[x0, y0, x1, y1]` box of an object.
    pub fn normalized_box(&self, o: &GroundTruthObject) -> [f64; 4] {
        let g = self.grid as f64;
        [
            o.x as f64 / g,
            o.y as f64 / g,
            (o.x + o.w) as f64 / g,
            (o.y + o.h) as f64 / g,
        ]
    }
}

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSample {
    Vqa(VqaSample),
    Detection(DetectionSample),
}

impl SyntheticSample {
    pub fn as_vqa(&self) -> Option<&VqaSample> {
        match self {
            SyntheticSample::Vqa(s) => Some(s),
            SyntheticSample::Detection(_) => None,
        }
    }

    pub fn as_detection(&self) -> Option<&DetectionSample> {
        match self {
            SyntheticSample::Detection(s) => Some(s),
            SyntheticSample::Vqa(_) => None,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Shuffles the non-designated positions of a question, keeping key slots and
/// the CLS/SEP frame in place. Used to check that labels ignore distractors.
pub fn permute_distractors(sample: &VqaSample, seed: u64) -> VqaSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    let t = out.text.len();
    let mut slots: Vec<usize> = (1..t - 1).filter(|&k| k != sample.relevant_text).collect();
    let mut values: Vec<usize> = slots.iter().map(|&k| out.text[k]).collect();
    values.shuffle(&mut rng);
    for (k, v) in slots.iter().zip(values) {
        out.text[*k] = v;
    }
    slots = (0..out.image.len()).filter(|&k| k != sample.relevant_image).collect();
    let mut values: Vec<usize> = slots.iter().map(|&k| out.image[k]).collect();
    values.shuffle(&mut rng);
    for (k, v) in slots.iter().zip(values) {
        out.image[*k] = v;
    }
    out
}

/// Label implied by the symbols of a question, read back from its tokens.
pub fn vqa_label_from_tokens(sample: &VqaSample) -> Option<usize> {
    let t = VqaTask::text_key_value(sample.text[sample.relevant_text])?;
    let i = VqaTask::image_key_value(sample.image[sample.relevant_image])?;
    Some(VqaTask::label_of(t, i))
}
