//! Procedural glyph atlases and text-line rendering.
//!
//! Every character of an alphabet gets a glyph made of a few straight strokes
//! between anchor points of a small grid. Per-line jitter (slant, stroke
//! thickness, inter-glyph spacing, baseline shift and stroke wobble) stands in
//! for writer variation. White ink is drawn on a black background so that
//! right padding with zeros looks like blank background.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alphabet::Alphabet;
use super::image::{LineImage, LINE_HEIGHT};
use crate::error::{Error, Result};

const BODY_TOP: f32 = 12.0;
const BODY_BOTTOM: f32 = 36.0;
const ANCHOR_COLS: usize = 3;
const ANCHOR_ROWS: usize = 4;

/// Per-line style variation bounds. All-zero ranges render every line of the
/// same text identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    /// Maximum absolute shear (horizontal pixels per vertical pixel).
    pub slant: f32,
    /// Stroke thickness range in pixels.
    pub thickness: (f32, f32),
    /// Maximum extra pixels inserted after each glyph.
    pub spacing: usize,
    /// Maximum absolute vertical baseline shift in pixels.
    pub baseline: i32,
    /// Maximum absolute anchor displacement, in fractions of the glyph box.
    pub wobble: f32,
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            slant: 0.0,
            thickness: (2.0, 2.0),
            spacing: 0,
            baseline: 0,
            wobble: 0.0,
        }
    }

    pub fn handwriting() -> Self {
        Jitter {
            slant: 0.25,
            thickness: (1.5, 2.6),
            spacing: 2,
            baseline: 2,
            wobble: 0.06,
        }
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Self::handwriting()
    }
}

/// Style of one synthetic font.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FontSpec {
    pub seed: u64,
    /// Horizontal advance of every glyph in pixels (monospace).
    pub advance: usize,
    #[serde(default)]
    pub jitter: Jitter,
}

#[derive(Clone, Debug)]
struct Glyph {
    strokes: Vec<((f32, f32), (f32, f32))>,
}

/// Glyph set for one alphabet and font.
#[derive(Clone, Debug)]
pub struct GlyphAtlas {
    font: FontSpec,
    glyphs: HashMap<char, Glyph>,
}

/// Horizontal pixel extent of one rendered character.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphSpan {
    pub ch: char,
    pub x0: usize,
    pub x1: usize,
}

impl GlyphAtlas {
    /// Builds a procedural atlas. Distinct characters always get distinct
    /// stroke sets; whitespace renders blank.
    pub fn synthetic(alphabet: &Alphabet, font: FontSpec) -> Result<Self> {
        if font.advance < 4 {
            return Err(Error::Config(format!("glyph advance {} too small", font.advance)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(font.seed);
        let mut used = BTreeSet::new();
        let mut glyphs = HashMap::new();
        for &c in alphabet.chars() {
            if c.is_whitespace() {
                glyphs.insert(c, Glyph { strokes: Vec::new() });
                continue;
            }
            loop {
                let n = rng.gen_range(2..=4);
                let mut edges = BTreeSet::new();
                while edges.len() < n {
                    let a = rng.gen_range(0..ANCHOR_COLS * ANCHOR_ROWS);
                    let b = rng.gen_range(0..ANCHOR_COLS * ANCHOR_ROWS);
                    if a != b {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
                if used.insert(edges.clone()) {
                    let anchor = |i: usize| {
                        let u = 0.18 + 0.32 * (i % ANCHOR_COLS) as f32;
                        let v = (i / ANCHOR_COLS) as f32 / (ANCHOR_ROWS - 1) as f32;
                        (u, v)
                    };
                    let strokes = edges.iter().map(|&(a, b)| (anchor(a), anchor(b))).collect();
                    glyphs.insert(c, Glyph { strokes });
                    break;
                }
            }
        }
        Ok(GlyphAtlas { font, glyphs })
    }

    pub fn font(&self) -> &FontSpec {
        &self.font
    }

    pub fn advance(&self) -> usize {
        self.font.advance
    }
}

/// Renders `text` at height 48 with per-line jitter drawn from `rng`.
pub fn render_line(text: &str, atlas: &GlyphAtlas, rng: &mut impl Rng) -> Result<LineImage> {
    render_line_with_layout(text, atlas, rng).map(|(img, _)| img)
}

/// Like [`render_line`], also reporting where each character landed.
pub fn render_line_with_layout(
    text: &str,
    atlas: &GlyphAtlas,
    rng: &mut impl Rng,
) -> Result<(LineImage, Vec<GlyphSpan>)> {
    if text.is_empty() {
        return Err(Error::Render("cannot render an empty line".into()));
    }
    let glyphs: Vec<(char, &Glyph)> = text
        .chars()
        .map(|c| {
            atlas
                .glyphs
                .get(&c)
                .map(|g| (c, g))
                .ok_or_else(|| Error::Render(format!("no glyph for character {c:?}")))
        })
        .collect::<Result<_>>()?;

    let j = &atlas.font.jitter;
    let slant = if j.slant > 0.0 { rng.gen_range(-j.slant..=j.slant) } else { 0.0 };
    let thickness = if j.thickness.1 > j.thickness.0 {
        rng.gen_range(j.thickness.0..=j.thickness.1)
    } else {
        j.thickness.0
    };
    let shift = if j.baseline > 0 { rng.gen_range(-j.baseline..=j.baseline) as f32 } else { 0.0 };

    let advance = atlas.font.advance;
    let mut spans = Vec::with_capacity(glyphs.len());
    let mut x = 0;
    for (c, _) in &glyphs {
        let extra = if j.spacing > 0 { rng.gen_range(0..=j.spacing) } else { 0 };
        spans.push(GlyphSpan { ch: *c, x0: x, x1: x + advance });
        x += advance + extra;
    }
    let width = x;
    let mut img = LineImage::filled(LINE_HEIGHT, width, 0.0);
    let body = BODY_BOTTOM - BODY_TOP;
    let base_y = BODY_BOTTOM + shift;
    let radius = thickness / 2.0;

    for ((_, glyph), span) in glyphs.iter().zip(&spans) {
        for &((u0, v0), (u1, v1)) in &glyph.strokes {
            let mut wob = || if j.wobble > 0.0 { rng.gen_range(-j.wobble..=j.wobble) } else { 0.0 };
            let (u0, v0, u1, v1) = (u0 + wob(), v0 + wob(), u1 + wob(), v1 + wob());
            let to_px = |u: f32, v: f32| {
                let y = BODY_TOP + shift + v * body;
                let x = span.x0 as f32 + u * advance as f32 + slant * (base_y - y);
                (x, y)
            };
            draw_segment(&mut img, to_px(u0, v0), to_px(u1, v1), radius);
        }
    }
    Ok((img, spans))
}

fn draw_segment(img: &mut LineImage, (ax, ay): (f32, f32), (bx, by): (f32, f32), radius: f32) {
    let pad = radius + 1.0;
    let x_lo = (ax.min(bx) - pad).floor().max(0.0) as usize;
    let x_hi = ((ax.max(bx) + pad).ceil().max(0.0) as usize).min(img.width());
    let y_lo = (ay.min(by) - pad).floor().max(0.0) as usize;
    let y_hi = ((ay.max(by) + pad).ceil().max(0.0) as usize).min(img.height());
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let t = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
            let d = (cx * cx + cy * cy).sqrt();
            let ink = (radius + 0.5 - d).clamp(0.0, 1.0);
            if ink > img.get(x, y) {
                img.set(x, y, ink);
            }
        }
    }
}
