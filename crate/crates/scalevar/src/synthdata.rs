//! Deterministic synthetic scenes: glyph targets plus distractor clutter.
//!
//! Each scene is a grayscale image containing a handful of "face" glyphs
//! (filled ellipse, two interior dots, a mouth bar) over noisy background and
//! structured clutter (blobs, rings, dot pairs, segments). Glyph heights are
//! drawn log-uniformly so every sub-range of a partition sees comparable
//! sample counts. Generation is a pure function of `(spec, n_images)`:
//! every image derives its own RNG stream from the spec seed and its index,
//! so results are identical regardless of generation order or parallelism.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box};

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_w: usize,
    pub image_h: usize,
    /// Smallest and largest glyph height, in pixels.
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Inclusive (min, max) glyph count per image.
    pub faces_per_image: (usize, usize),
    /// Clutter amount in [0, 1]; 0 disables clutter entirely.
    pub clutter_density: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo < self.scale_hi) {
            return Err(Error::invalid("scale range requires 0 < lo < hi"));
        }
        if self.scale_hi > self.image_w.min(self.image_h) as f64 {
            return Err(Error::invalid("scale_hi must not exceed the shorter image side"));
        }
        if self.faces_per_image.0 > self.faces_per_image.1 {
            return Err(Error::invalid("faces_per_image min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return Err(Error::invalid("clutter_density must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A grayscale image with its ground-truth boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
    pub boxes: Vec<Box>,
}

impl AnnotatedImage {
    fn put(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }
}

const ASPECT_LO: f64 = 0.72;
const ASPECT_HI: f64 = 0.92;
const MAX_PLACE_TRIES: usize = 60;
const CLUTTER_TRIES: usize = 40;
/// Targets and clutter may touch, but never overlap past this IoU.
const CLUTTER_MAX_IOU: f64 = 0.2;
/// Glyphs may crowd each other, but not stack.
const FACE_MAX_IOU: f64 = 0.25;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent RNG stream for one sub-task of a seeded job.
pub fn subseed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Generates `n_images` scenes. Deterministic in `(spec, n_images)`.
pub fn generate(spec: &SceneSpec, n_images: usize) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::invalid("n_images must be >= 1"));
    }
    (0..n_images)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

fn generate_one(spec: &SceneSpec, index: usize) -> Result<AnnotatedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, index as u64));
    let (w, h) = (spec.image_w, spec.image_h);
    let mut img = AnnotatedImage {
        image_id: format!("im_{index:05}"),
        width: w,
        height: h,
        pixels: vec![0; w * h],
        boxes: Vec::new(),
    };

    let base = rng.random_range(70..=110) as i32;
    for p in img.pixels.iter_mut() {
        *p = (base + rng.random_range(-8..=8)).clamp(0, 255) as u8;
    }

    // Decide target boxes first so clutter can avoid them.
    let n_faces = rng.random_range(spec.faces_per_image.0..=spec.faces_per_image.1);
    let mut boxes: Vec<Box> = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let mut placed = false;
        for _ in 0..MAX_PLACE_TRIES {
            let fh = log_uniform(&mut rng, spec.scale_lo, spec.scale_hi);
            let fw = (fh * rng.random_range(ASPECT_LO..ASPECT_HI)).max(1.0);
            if fw >= w as f64 || fh >= h as f64 {
                continue;
            }
            let x = rng.random_range(0.0..(w as f64 - fw));
            let y = rng.random_range(0.0..(h as f64 - fh));
            let cand = Box::new(x, y, fw, fh);
            if boxes.iter().all(|b| iou(b, &cand) <= FACE_MAX_IOU) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure {
                image_index: index,
                msg: format!("could not place glyph after {MAX_PLACE_TRIES} tries"),
            });
        }
    }

    // Clutter goes under the glyphs.
    let clutter_max = (spec.scale_hi * 0.75).min(w.min(h) as f64 / 3.0).max(spec.scale_lo + 1.0);
    let n_clutter = (spec.clutter_density * (w * h) as f64 / 1800.0).round() as usize;
    for _ in 0..n_clutter {
        for _ in 0..CLUTTER_TRIES {
            let s = log_uniform(&mut rng, spec.scale_lo, clutter_max);
            if s >= w as f64 || s >= h as f64 {
                continue;
            }
            let x = rng.random_range(0.0..(w as f64 - s));
            let y = rng.random_range(0.0..(h as f64 - s));
            let cand = Box::new(x, y, s, s);
            if boxes.iter().all(|b| iou(b, &cand) <= CLUTTER_MAX_IOU) {
                let kind = rng.random_range(0..5u32);
                draw_clutter(&mut img, &cand, kind, &mut rng);
                break;
            }
        }
    }

    for b in &boxes {
        let shade = rng.random_range(170..=230) as u8;
        let dark = rng.random_range(20..=60) as u8;
        draw_glyph(&mut img, b, shade, dark);
    }
    img.boxes = boxes;
    Ok(img)
}

/// Filled ellipse with two interior dots and a mouth bar. Nearest-neighbor
/// rasterization over pixel centers; detail degrades naturally at small sizes.
fn draw_glyph(img: &mut AnnotatedImage, b: &Box, shade: u8, dark: u8) {
    let (cx, cy) = b.center();
    let (ax, ay) = (b.w / 2.0, b.h / 2.0);
    let eye_dx = 0.17 * b.w;
    let eye_dy = 0.12 * b.h;
    let eye_r = (0.07 * b.h).max(0.5);
    let mouth_y = cy + 0.22 * b.h;
    let mouth_hw = 0.22 * b.w;
    let mouth_hh = (0.05 * b.h).max(0.5);

    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = b.right().ceil() as i64;
    let y1 = b.bottom().ceil() as i64;
    for py in y0..y1 {
        for px in x0..x1 {
            let fx = px as f64 + 0.5;
            let fy = py as f64 + 0.5;
            let nx = (fx - cx) / ax;
            let ny = (fy - cy) / ay;
            if nx * nx + ny * ny > 1.0 {
                continue;
            }
            let mut v = shade;
            for ex in [cx - eye_dx, cx + eye_dx] {
                let dx = fx - ex;
                let dy = fy - (cy - eye_dy);
                if dx * dx + dy * dy <= eye_r * eye_r {
                    v = dark;
                }
            }
            if (fx - cx).abs() <= mouth_hw && (fy - mouth_y).abs() <= mouth_hh {
                v = dark;
            }
            img.put(px, py, v);
        }
    }
}

/// Distractors share visual vocabulary with the glyphs (bright rings, dark
/// dot pairs) without forming the full pattern.
fn draw_clutter(img: &mut AnnotatedImage, b: &Box, kind: u32, rng: &mut ChaCha8Rng) {
    let (cx, cy) = b.center();
    let (ax, ay) = (b.w / 2.0, b.h / 2.0);
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = b.right().ceil() as i64;
    let y1 = b.bottom().ceil() as i64;
    match kind {
        // Filled blob of arbitrary gray.
        0 => {
            let v = rng.random_range(40..=220) as u8;
            for py in y0..y1 {
                for px in x0..x1 {
                    let nx = (px as f64 + 0.5 - cx) / ax;
                    let ny = (py as f64 + 0.5 - cy) / ay;
                    if nx * nx + ny * ny <= 1.0 {
                        img.put(px, py, v);
                    }
                }
            }
        }
        // Filled rectangle.
        1 => {
            let v = rng.random_range(40..=220) as u8;
            for py in y0..y1 {
                for px in x0..x1 {
                    img.put(px, py, v);
                }
            }
        }
        // Line segment through the center.
        2 => {
            let v = rng.random_range(20..=240) as u8;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            let half = ax.max(ay);
            let steps = (half * 2.0).ceil() as i64 * 2;
            for i in 0..=steps {
                let t = -half + i as f64 * (2.0 * half / steps as f64);
                img.put((cx + t * dx) as i64, (cy + t * dy) as i64, v);
            }
        }
        // Bright ring: an ellipse outline without interior structure.
        3 => {
            let v = rng.random_range(170..=230) as u8;
            for py in y0..y1 {
                for px in x0..x1 {
                    let nx = (px as f64 + 0.5 - cx) / ax;
                    let ny = (py as f64 + 0.5 - cy) / ay;
                    let r = (nx * nx + ny * ny).sqrt();
                    if (r - 0.85).abs() <= 0.15 {
                        img.put(px, py, v);
                    }
                }
            }
        }
        // Dark dot pair: the eye pattern without the face.
        _ => {
            let v = rng.random_range(20..=60) as u8;
            let r = (0.12 * b.h).max(0.5);
            for ex in [cx - 0.17 * b.w, cx + 0.17 * b.w] {
                for py in y0..y1 {
                    for px in x0..x1 {
                        let dx = px as f64 + 0.5 - ex;
                        let dy = py as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            img.put(px, py, v);
                        }
                    }
                }
            }
        }
    }
}

/// Duplicates crowded images and optionally appends horizontally mirrored
/// copies of everything. Images with strictly more than `crowded_threshold`
/// boxes appear `1 + dup_factor` times.
pub fn augment(
    images: Vec<AnnotatedImage>,
    crowded_threshold: usize,
    dup_factor: usize,
    hflip: bool,
) -> Vec<AnnotatedImage> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let crowded = img.boxes.len() > crowded_threshold;
        let copies = if crowded { 1 + dup_factor } else { 1 };
        for k in 0..copies {
            let mut copy = img.clone();
            if k > 0 {
                copy.image_id = format!("{}_dup{k}", img.image_id);
            }
            out.push(copy);
        }
    }
    if hflip {
        let flipped: Vec<AnnotatedImage> = out.iter().map(hflip_image).collect();
        out.extend(flipped);
    }
    out
}

fn hflip_image(img: &AnnotatedImage) -> AnnotatedImage {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(img.width) {
        pixels.extend(row.iter().rev());
    }
    let boxes = img
        .boxes
        .iter()
        .map(|b| Box::new(img.width as f64 - b.x - b.w, b.y, b.w, b.h))
        .collect();
    AnnotatedImage {
        image_id: format!("{}_flip", img.image_id),
        width: img.width,
        height: img.height,
        pixels,
        boxes,
    }
}

/// Rescales so the longer side is exactly `cap` (identity if already within),
/// resampling bilinearly and scaling boxes by the same factor.
pub fn resize_longest(img: &AnnotatedImage, cap: usize) -> AnnotatedImage {
    let longer = img.width.max(img.height);
    if longer <= cap {
        return img.clone();
    }
    let scale = cap as f64 / longer as f64;
    let (nw, nh) = if img.width >= img.height {
        (cap, (img.height as f64 * scale).round().max(1.0) as usize)
    } else {
        ((img.width as f64 * scale).round().max(1.0) as usize, cap)
    };
    let mut pixels = vec![0u8; nw * nh];
    let sx = img.width as f64 / nw as f64;
    let sy = img.height as f64 / nh as f64;
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let p00 = img.pixels[y0 * img.width + x0] as f64;
            let p01 = img.pixels[y0 * img.width + x1] as f64;
            let p10 = img.pixels[y1 * img.width + x0] as f64;
            let p11 = img.pixels[y1 * img.width + x1] as f64;
            let v = p00 * (1.0 - wy) * (1.0 - wx)
                + p01 * (1.0 - wy) * wx
                + p10 * wy * (1.0 - wx)
                + p11 * wy * wx;
            pixels[y * nw + x] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let boxes = img
        .boxes
        .iter()
        .map(|b| Box::new(b.x * scale, b.y * scale, b.w * scale, b.h * scale))
        .collect();
    AnnotatedImage {
        image_id: img.image_id.clone(),
        width: nw,
        height: nh,
        pixels,
        boxes,
    }
}

// ---------------------------------------------------------------------------
// On-disk formats: binary PGM (P5) images, JSONL annotations.
// ---------------------------------------------------------------------------

/// One annotation line: `{image_id, file, width, height, boxes: [[x,y,w,h],..]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: &str| Error::Parse {
        file: path.display().to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval as whitespace-separated tokens
    // (comments starting with '#' allowed), then a single whitespace byte
    // before the raster.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes).as_deref() != Some("P5") {
        return Err(err("not a binary PGM (P5) file"));
    }
    let width: usize = token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad width"))?;
    let height: usize = token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad height"))?;
    let maxval: usize = token(&bytes).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    pos += 1;
    if bytes.len() < pos + width * height {
        return Err(err("truncated raster"));
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}

/// Writes images as `<dir>/<image_id>.pgm` plus `<dir>/annotations.jsonl`,
/// returning the dataset content digest (hex SHA-256 over annotation lines
/// and raster bytes in order).
pub fn save_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let mut ann = std::fs::File::create(dir.join("annotations.jsonl"))?;
    let mut hasher = Sha256::new();
    for img in images {
        let file = format!("{}.pgm", img.image_id);
        write_pgm(&dir.join(&file), img.width, img.height, &img.pixels)?;
        let rec = AnnotationRecord {
            image_id: img.image_id.clone(),
            file,
            width: img.width,
            height: img.height,
            boxes: img.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(ann, "{line}")?;
        hasher.update(line.as_bytes());
        hasher.update(&img.pixels);
    }
    Ok(hex(&hasher.finalize()))
}

/// Reads a dataset back from its annotations file; image paths resolve
/// relative to the annotation file's directory.
pub fn load_dataset(annotations: &Path) -> Result<Vec<AnnotatedImage>> {
    let dir = annotations.parent().map(PathBuf::from).unwrap_or_default();
    let text = std::fs::read_to_string(annotations)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: annotations.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let (w, h, pixels) = read_pgm(&dir.join(&rec.file))?;
        if w != rec.width || h != rec.height {
            return Err(Error::Parse {
                file: annotations.display().to_string(),
                line: lineno + 1,
                msg: format!("annotation size {}x{} disagrees with raster {w}x{h}", rec.width, rec.height),
            });
        }
        out.push(AnnotatedImage {
            image_id: rec.image_id,
            width: w,
            height: h,
            pixels,
            boxes: rec.boxes.iter().map(|b| Box::new(b[0], b[1], b[2], b[3])).collect(),
        });
    }
    Ok(out)
}

/// Content digest of an in-memory dataset (same construction as [`save_dataset`]).
pub fn dataset_digest(images: &[AnnotatedImage]) -> String {
    let mut hasher = Sha256::new();
    for img in images {
        let rec = AnnotationRecord {
            image_id: img.image_id.clone(),
            file: format!("{}.pgm", img.image_id),
            width: img.width,
            height: img.height,
            boxes: img.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        };
        hasher.update(serde_json::to_string(&rec).expect("record serializes").as_bytes());
        hasher.update(&img.pixels);
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
