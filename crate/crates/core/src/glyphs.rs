//! Procedural glyph images: the small-image counterpart to the Gaussian
//! mixture track.
//!
//! Superclasses select a shape family (disk, cross, bar, ring by parent id
//! mod 4); a subclass's position among its siblings selects an intensity
//! level and a rotation bucket. Each rendered sample adds small position and
//! rotation jitter so a subclass is a distribution, not a single image.
//! Pixels live in `[-1, 1]` with background at -1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::LabeledSample;
use crate::rng::{domain, rng_for};
use crate::taxonomy::Taxonomy;

/// Shape family owned by a superclass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphKind {
    Disk,
    Cross,
    Bar,
    Ring,
}

impl GlyphKind {
    pub fn for_superclass(parent: usize) -> Self {
        match parent % 4 {
            0 => GlyphKind::Disk,
            1 => GlyphKind::Cross,
            2 => GlyphKind::Bar,
            _ => GlyphKind::Ring,
        }
    }
}

/// Rendering parameters. Intensity and rotation buckets are fixed by the
/// subclass; jitter amounts apply per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphSpec {
    /// Image side length in pixels; samples have `side * side` values.
    pub side: usize,
    /// Uniform center jitter in pixels, applied per axis.
    pub jitter_px: f64,
    /// Uniform rotation jitter in radians.
    pub rot_jitter: f64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self { side: 16, jitter_px: 0.5, rot_jitter: std::f64::consts::PI / 24.0 }
    }
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::invalid("glyph side must be at least 4"));
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return Err(Error::invalid("jitter_px must be finite and non-negative"));
        }
        if !(self.rot_jitter >= 0.0 && self.rot_jitter.is_finite()) {
            return Err(Error::invalid("rot_jitter must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }
}

const INTENSITIES: [f64; 4] = [0.4, 0.6, 0.8, 1.0];
const ROT_STEP: f64 = std::f64::consts::PI / 8.0;

/// Peak intensity for the `k`-th child of a superclass.
pub fn intensity_level(k: usize) -> f64 {
    INTENSITIES[k % INTENSITIES.len()]
}

/// Base rotation for the `k`-th child of a superclass. The first four
/// children share rotation 0 and differ by intensity; further children
/// advance in π/8 steps.
pub fn rotation_level(k: usize) -> f64 {
    (k / INTENSITIES.len()) as f64 * ROT_STEP
}

/// Rasterize one glyph. `offset` is the center displacement in normalized
/// coordinates (the image spans [-1, 1] per axis).
pub fn glyph_image(
    kind: GlyphKind,
    intensity: f64,
    rotation: f64,
    offset: (f64, f64),
    side: usize,
) -> Vec<f64> {
    let edge = 4.0 / side as f64; // two pixels of soft edge
    let (sin, cos) = rotation.sin_cos();
    let mut img = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let u0 = (px as f64 + 0.5) / side as f64 * 2.0 - 1.0 - offset.0;
            let v0 = (py as f64 + 0.5) / side as f64 * 2.0 - 1.0 - offset.1;
            // rotate the sampling point into the glyph frame
            let u = cos * u0 + sin * v0;
            let v = -sin * u0 + cos * v0;
            let sd = signed_distance(kind, u, v);
            let m = (0.5 - sd / edge).clamp(0.0, 1.0);
            img.push((-1.0 + (1.0 + intensity) * m).clamp(-1.0, 1.0));
        }
    }
    img
}

fn signed_distance(kind: GlyphKind, u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    match kind {
        GlyphKind::Disk => r - 0.55,
        GlyphKind::Ring => (r - 0.55).abs() - 0.18,
        GlyphKind::Bar => (u.abs() - 0.62).max(v.abs() - 0.18),
        GlyphKind::Cross => {
            let horiz = (u.abs() - 0.62).max(v.abs() - 0.18);
            let vert = (u.abs() - 0.18).max(v.abs() - 0.62);
            horiz.min(vert)
        }
    }
}

/// Render `n_per_subclass` jittered glyphs for every subclass. Samples are
/// ordered subclass-major and are a pure function of `seed`.
pub fn render_dataset(
    tax: &Taxonomy,
    spec: &GlyphSpec,
    n_per_subclass: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n_per_subclass == 0 {
        return Err(Error::invalid("n_per_subclass must be >= 1"));
    }
    // Position of each subclass among its siblings drives its variation.
    let mut sibling_rank = vec![0usize; tax.n_sub()];
    for s in 0..tax.n_super() {
        for (k, sub) in tax.children(s)?.iter().enumerate() {
            sibling_rank[*sub] = k;
        }
    }
    let spec = spec.clone();
    let tax2 = tax.clone();
    let rows = crate::par::map_indexed(tax.n_sub() * n_per_subclass, move |i| {
        let sub = i / n_per_subclass;
        let j = i % n_per_subclass;
        let mut rng = rng_for(seed, &[domain::GLYPH, sub as u64, j as u64]);
        let parent = tax2.parent(sub).expect("validated");
        let kind = GlyphKind::for_superclass(parent);
        let k = sibling_rank[sub];
        let jitter_n = spec.jitter_px * 2.0 / spec.side as f64;
        let dx = rng.random_range(-1.0..1.0) * jitter_n;
        let dy = rng.random_range(-1.0..1.0) * jitter_n;
        let dr = rng.random_range(-1.0..1.0) * spec.rot_jitter;
        let img = glyph_image(
            kind,
            intensity_level(k),
            rotation_level(k) + dr,
            (dx, dy),
            spec.side,
        );
        LabeledSample { x0: img, subclass: sub }
    });
    Ok(rows)
}
