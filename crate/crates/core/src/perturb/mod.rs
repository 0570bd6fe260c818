//! Manifest-driven pixel edits on document page images.
//!
//! All fills write the exact requested RGB triple. Nothing outside the edited
//! box is touched, and outputs are always written as PNG.

pub mod font;
pub mod table;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the ring sampled around a box to pick its fill color.
pub const RING_PX: u32 = 5;
pub const DEFAULT_INK: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("bbox {bbox:?} is not inside a {width}x{height} image")]
    BboxOutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("text {text:?} ({needed_w}x{needed_h} px) does not fit in {bbox:?}")]
    TextDoesNotFit { text: String, needed_w: u32, needed_h: u32, bbox: BBox },
    #[error("no glyph for {0:?}")]
    UnsupportedGlyph(char),
    #[error("font_px {0} is below the 7 px glyph height")]
    FontTooSmall(u32),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Pixel rectangle `(x, y, w, h)`; serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(img: &RgbImage) -> Self {
        Self::new(0, 0, img.width(), img.height())
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    #[inline]
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px - self.x < self.w && py - self.y < self.h
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        (self.x as u64 + self.w as u64) <= width as u64 && (self.y as u64 + self.h as u64) <= height as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Grown by `by` pixels on every side, clipped to the image.
    pub fn expanded(&self, by: u32, width: u32, height: u32) -> BBox {
        let x0 = self.x.saturating_sub(by);
        let y0 = self.y.saturating_sub(by);
        let x1 = (self.x + self.w).saturating_add(by).min(width);
        let y1 = (self.y + self.h).saturating_add(by).min(height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    fn check(&self, img: &RgbImage) -> Result<(), PerturbError> {
        if self.fits(img.width(), img.height()) {
            Ok(())
        } else {
            Err(PerturbError::BboxOutOfBounds { bbox: *self, width: img.width(), height: img.height() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Occlude,
    ReplaceText,
    KeepOnly,
}

/// One pixel edit. For `replace_text`, `color` is the ink color.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub kind: EditKind,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub font_px: Option<u32>,
}

impl Edit {
    pub fn occlude(bbox: BBox) -> Self {
        Self { kind: EditKind::Occlude, bbox, color: None, text: None, font_px: None }
    }

    pub fn replace_text(bbox: BBox, text: impl Into<String>, font_px: u32) -> Self {
        Self { kind: EditKind::ReplaceText, bbox, color: None, text: Some(text.into()), font_px: Some(font_px) }
    }

    pub fn keep_only(bbox: BBox) -> Self {
        Self { kind: EditKind::KeepOnly, bbox, color: None, text: None, font_px: None }
    }

    fn rgb(&self) -> Option<Rgb<u8>> {
        self.color.map(Rgb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Micro,
    Macro,
    TextOcclusion,
    Signal,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditManifest {
    pub source_image: PathBuf,
    pub edits: Vec<Edit>,
    pub output_image: PathBuf,
    pub condition: Condition,
}

impl EditManifest {
    /// Checks everything that does not need the image itself.
    pub fn validate(&self) -> Result<(), PerturbError> {
        let bad = |m: String| Err(PerturbError::InvalidManifest(m));
        if self.edits.is_empty() {
            return bad("manifest has no edits".into());
        }
        for (i, e) in self.edits.iter().enumerate() {
            if e.bbox.is_empty() {
                return bad(format!("edit {i}: zero-area bbox {:?}", e.bbox));
            }
            if e.kind == EditKind::ReplaceText {
                match (&e.text, e.font_px) {
                    (Some(t), Some(px)) if !t.is_empty() && px > 0 => {}
                    _ => return bad(format!("edit {i}: replace_text needs non-empty text and font_px")),
                }
            }
        }
        let keep_only = self.edits.iter().filter(|e| e.kind == EditKind::KeepOnly).count();
        match self.condition {
            Condition::Signal if keep_only != 1 => {
                bad(format!("signal manifest needs exactly one keep_only edit, found {keep_only}"))
            }
            Condition::Noise if self.edits.iter().any(|e| e.kind != EditKind::Occlude) => {
                bad("noise manifest may only contain occlude edits".into())
            }
            _ => Ok(()),
        }
    }

    /// Resolves a relative source against `input_base` and a relative output against `out_dir`.
    pub fn resolved(mut self, input_base: &Path, out_dir: &Path) -> Self {
        if self.source_image.is_relative() {
            self.source_image = input_base.join(&self.source_image);
        }
        if self.output_image.is_relative() {
            self.output_image = out_dir.join(&self.output_image);
        }
        self
    }
}

/// Reads a JSON Lines manifest file; blank lines are skipped.
pub fn read_manifests(path: &Path) -> Result<Vec<EditManifest>, PerturbError> {
    let io = |source| PerturbError::Io { path: path.to_path_buf(), source };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let m: EditManifest = serde_json::from_str(&line)
            .map_err(|e| PerturbError::InvalidManifest(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(m);
    }
    Ok(out)
}

/// Most frequent exact RGB triple in `probe` (whole image by default).
/// Ties go to the lighter color; remaining ties to the larger triple.
pub fn dominant_background_color(img: &RgbImage, probe: Option<BBox>) -> Rgb<u8> {
    let probe = probe.unwrap_or_else(|| BBox::full(img));
    let mut counts: HashMap<[u8; 3], u64> = HashMap::new();
    for y in probe.y..(probe.y + probe.h).min(img.height()) {
        for x in probe.x..(probe.x + probe.w).min(img.width()) {
            *counts.entry(img.get_pixel(x, y).0).or_default() += 1;
        }
    }
    let lightness = |c: &[u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(lightness(ca).cmp(&lightness(cb))).then(ca.cmp(cb)))
        .map(|(c, _)| Rgb(c))
        .unwrap_or(Rgb([255, 255, 255]))
}

/// Mode of the ring of width [`RING_PX`] around `bbox`; whole-image mode if the ring is empty.
pub fn ring_background_color(img: &RgbImage, bbox: BBox) -> Rgb<u8> {
    let outer = bbox.expanded(RING_PX, img.width(), img.height());
    let mut counts: HashMap<[u8; 3], u64> = HashMap::new();
    for y in outer.y..outer.y + outer.h {
        for x in outer.x..outer.x + outer.w {
            if !bbox.contains(x, y) {
                *counts.entry(img.get_pixel(x, y).0).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return dominant_background_color(img, None);
    }
    let lightness = |c: &[u8; 3]| c.iter().map(|&v| v as u32).sum::<u32>();
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(lightness(ca).cmp(&lightness(cb))).then(ca.cmp(cb)))
        .map(|(c, _)| Rgb(c))
        .expect("ring is non-empty")
}

fn fill(img: &mut RgbImage, bbox: BBox, color: Rgb<u8>) {
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            img.put_pixel(x, y, color);
        }
    }
}

/// Fills `bbox` with `color`, or with the ring background when `None`.
pub fn apply_occlusion(img: &RgbImage, bbox: BBox, color: Option<Rgb<u8>>) -> Result<RgbImage, PerturbError> {
    bbox.check(img)?;
    let color = color.unwrap_or_else(|| ring_background_color(img, bbox));
    let mut out = img.clone();
    fill(&mut out, bbox, color);
    Ok(out)
}

/// Draws `text` left-aligned and vertically centered in `bbox` onto `img` without
/// clearing it first. Used both by the table renderer and by text replacement.
pub fn draw_text(img: &mut RgbImage, bbox: BBox, text: &str, font_px: u32, ink: Rgb<u8>) -> Result<(), PerturbError> {
    bbox.check(img)?;
    if let Some(c) = font::first_unsupported(text) {
        return Err(PerturbError::UnsupportedGlyph(c));
    }
    let scale = font::scale_for(font_px).ok_or(PerturbError::FontTooSmall(font_px))?;
    let (tw, th) = font::text_extent(text, scale);
    if tw > bbox.w || th > bbox.h {
        return Err(PerturbError::TextDoesNotFit { text: text.to_string(), needed_w: tw, needed_h: th, bbox });
    }
    let oy = bbox.y + (bbox.h - th) / 2;
    font::for_each_ink(text, scale, |x, y| img.put_pixel(bbox.x + x, oy + y, ink));
    Ok(())
}

/// Clears `bbox` to its background, then renders `text` in `ink` (black by default).
pub fn apply_text_replacement(
    img: &RgbImage,
    bbox: BBox,
    text: &str,
    font_px: u32,
    ink: Option<Rgb<u8>>,
) -> Result<RgbImage, PerturbError> {
    bbox.check(img)?;
    if text.is_empty() {
        return Err(PerturbError::InvalidManifest("replacement text is empty".into()));
    }
    let bg = ring_background_color(img, bbox);
    let mut out = img.clone();
    fill(&mut out, bbox, bg);
    draw_text(&mut out, bbox, text, font_px, ink.unwrap_or(DEFAULT_INK))?;
    Ok(out)
}

/// Horizontal extent of glyph `index` when text is drawn into `bbox`.
pub fn glyph_cell(bbox: BBox, font_px: u32, index: usize) -> Option<BBox> {
    let scale = font::scale_for(font_px)?;
    let adv = font::ADVANCE * scale;
    let x = bbox.x + index as u32 * adv;
    let oy = bbox.y + (bbox.h.saturating_sub(font::GLYPH_H * scale)) / 2;
    Some(BBox::new(x, oy, adv.min((bbox.x + bbox.w).saturating_sub(x)), font::GLYPH_H * scale))
}

/// Keeps `table_bbox`, replaces everything else with the page's dominant color.
pub fn make_signal_image(img: &RgbImage, table_bbox: BBox) -> Result<RgbImage, PerturbError> {
    make_signal_with(img, table_bbox, None)
}

fn make_signal_with(img: &RgbImage, table_bbox: BBox, color: Option<Rgb<u8>>) -> Result<RgbImage, PerturbError> {
    table_bbox.check(img)?;
    let bg = color.unwrap_or_else(|| dominant_background_color(img, None));
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if !table_bbox.contains(x, y) {
            *p = bg;
        }
    }
    Ok(out)
}

/// Erases `table_bbox` with the page's dominant color, keeps everything else.
pub fn make_noise_image(img: &RgbImage, table_bbox: BBox) -> Result<RgbImage, PerturbError> {
    table_bbox.check(img)?;
    let bg = dominant_background_color(img, None);
    let mut out = img.clone();
    fill(&mut out, table_bbox, bg);
    Ok(out)
}

/// Number of pixels that differ between two same-sized images.
pub fn changed_pixels(a: &RgbImage, b: &RgbImage) -> u64 {
    assert_eq!(a.dimensions(), b.dimensions());
    a.pixels().zip(b.pixels()).filter(|(p, q)| p != q).count() as u64
}

/// Applies one edit to an image.
pub fn apply_edit(img: &RgbImage, edit: &Edit) -> Result<RgbImage, PerturbError> {
    match edit.kind {
        EditKind::Occlude => apply_occlusion(img, edit.bbox, edit.rgb()),
        EditKind::ReplaceText => {
            let text = edit.text.as_deref().unwrap_or_default();
            let font_px = edit.font_px.unwrap_or_default();
            apply_text_replacement(img, edit.bbox, text, font_px, edit.rgb())
        }
        EditKind::KeepOnly => make_signal_with(img, edit.bbox, edit.rgb()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestReport {
    pub output_image: PathBuf,
    pub condition: Condition,
    pub edits_applied: usize,
    /// Pixels changed by each edit relative to the image before it.
    pub changed_pixels: Vec<u64>,
}

/// Applies every edit to an in-memory image, in order.
pub fn apply_edits(img: &RgbImage, edits: &[Edit]) -> Result<(RgbImage, Vec<u64>), PerturbError> {
    let mut current = img.clone();
    let mut changed = Vec::with_capacity(edits.len());
    for e in edits {
        let next = apply_edit(&current, e)?;
        changed.push(changed_pixels(&current, &next));
        current = next;
    }
    Ok((current, changed))
}

/// Loads the source, applies the edits, and writes a PNG. Any failure leaves no output file.
pub fn run_manifest(manifest: &EditManifest) -> Result<ManifestReport, PerturbError> {
    manifest.validate()?;
    let src = &manifest.source_image;
    let img = image::open(src).map_err(|source| PerturbError::Image { path: src.clone(), source })?.to_rgb8();
    let (out, changed) = apply_edits(&img, &manifest.edits)?;
    write_png_atomic(&out, &manifest.output_image)?;
    Ok(ManifestReport {
        output_image: manifest.output_image.clone(),
        condition: manifest.condition,
        edits_applied: changed.len(),
        changed_pixels: changed,
    })
}

/// Writes next to the destination and renames into place.
pub fn write_png_atomic(img: &RgbImage, dest: &Path) -> Result<(), PerturbError> {
    let io = |source| PerturbError::Io { path: dest.to_path_buf(), source };
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let file_name = dest.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dest.with_file_name(format!(".{file_name}.partial"));
    if let Err(source) = img.save_with_format(&tmp, image::ImageFormat::Png) {
        let _ = fs::remove_file(&tmp);
        return Err(PerturbError::Image { path: dest.to_path_buf(), source });
    }
    fs::rename(&tmp, dest).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}
