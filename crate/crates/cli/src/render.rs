//! Token-map visualization as binary PPM rasters and SVG.

use std::fmt::Write as _;

use atoken::cce::ScoreMap;
use serde::{Deserialize, Serialize};

/// Token regions (and optional scores) as written to `tokens.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMap {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_scores: Option<Vec<f64>>,
}

impl TokenMap {
    pub fn labels(&self) -> Result<Vec<usize>, String> {
        atoken::fmcore::check_partition(self.width, self.height, &self.regions)
            .map_err(|e| e.to_string())?;
        let mut labels = vec![0; self.width * self.height];
        for (t, r) in self.regions.iter().enumerate() {
            for &p in r {
                labels[p] = t;
            }
        }
        Ok(labels)
    }

    pub fn score_map(&self) -> Result<Option<ScoreMap>, String> {
        self.pixel_scores
            .as_ref()
            .map(|v| ScoreMap::new(self.width, self.height, v.clone()).map_err(|e| e.to_string()))
            .transpose()
    }
}

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    /// Binary `P6` encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

const PALETTE: [Rgb; 20] = [
    [31, 119, 180],
    [174, 199, 232],
    [255, 127, 14],
    [255, 187, 120],
    [44, 160, 44],
    [152, 223, 138],
    [214, 39, 40],
    [255, 152, 150],
    [148, 103, 189],
    [197, 176, 213],
    [140, 86, 75],
    [196, 156, 148],
    [227, 119, 194],
    [247, 182, 210],
    [127, 127, 127],
    [199, 199, 199],
    [188, 189, 34],
    [219, 219, 141],
    [23, 190, 207],
    [158, 218, 229],
];

pub const OUTLINE: Rgb = [0, 0, 0];
pub const BACKDROP: Rgb = [255, 255, 255];

/// Fixed color for a token index. The first 20 indices map to distinct
/// palette entries; later ones are hashed.
pub fn token_color(index: usize) -> Rgb {
    if index < PALETTE.len() {
        return PALETTE[(index * 7) % PALETTE.len()];
    }
    let mut z = (index as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    // Keep away from the outline color.
    let ch = |s: u32| 48 + ((z >> s) & 0xFF) as u8 % 200;
    [ch(0), ch(8), ch(16)]
}

/// Blue-to-red ramp over `[0, 1]`.
fn heat(t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    [r, g, b]
}

/// Draws each token as a `scale × scale` block per pixel in its own color,
/// with one-pixel outlines on every edge between different tokens. When
/// scores are given, a heatmap panel of the same size is placed to the right.
pub fn render_token_map(
    width: usize,
    height: usize,
    labels: &[usize],
    scores: Option<&ScoreMap>,
    scale: usize,
) -> Raster {
    assert_eq!(labels.len(), width * height);
    let scale = scale.max(2);
    let panel_w = width * scale;
    let gap = if scores.is_some() { scale } else { 0 };
    let total_w = if scores.is_some() {
        2 * panel_w + gap
    } else {
        panel_w
    };
    let mut img = Raster::new(total_w, height * scale, BACKDROP);

    for v in 0..height {
        for u in 0..width {
            let t = labels[v * width + u];
            let color = token_color(t);
            let right_edge = u + 1 < width && labels[v * width + u + 1] != t;
            let bottom_edge = v + 1 < height && labels[(v + 1) * width + u] != t;
            for dy in 0..scale {
                for dx in 0..scale {
                    let edge = (right_edge && dx == scale - 1) || (bottom_edge && dy == scale - 1);
                    img.put(
                        u * scale + dx,
                        v * scale + dy,
                        if edge { OUTLINE } else { color },
                    );
                }
            }
        }
    }

    if let Some(s) = scores {
        let vals = s.values();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x0 = panel_w + gap;
        for v in 0..height {
            for u in 0..width {
                let c = heat((vals[v * width + u] - lo) / span);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put(x0 + u * scale + dx, v * scale + dy, c);
                    }
                }
            }
        }
    }
    img
}

/// SVG with one filled square per pixel and line segments along token
/// boundaries.
pub fn render_token_svg(width: usize, height: usize, labels: &[usize], scale: usize) -> String {
    let s = scale.max(1);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" shape-rendering="crispEdges">"#,
        width * s,
        height * s,
        width * s,
        height * s
    );
    for v in 0..height {
        for u in 0..width {
            let [r, g, b] = token_color(labels[v * width + u]);
            let _ = writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{s}" height="{s}" fill="#{r:02x}{g:02x}{b:02x}"/>"##,
                u * s,
                v * s
            );
        }
    }
    let _ = writeln!(out, r#"<g stroke="black" stroke-width="1">"#);
    for v in 0..height {
        for u in 0..width {
            let t = labels[v * width + u];
            if u + 1 < width && labels[v * width + u + 1] != t {
                let x = (u + 1) * s;
                let _ = writeln!(
                    out,
                    r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}"/>"#,
                    v * s,
                    (v + 1) * s
                );
            }
            if v + 1 < height && labels[(v + 1) * width + u] != t {
                let y = (v + 1) * s;
                let _ = writeln!(
                    out,
                    r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}"/>"#,
                    u * s,
                    (u + 1) * s
                );
            }
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}
