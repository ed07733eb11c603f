//! Procedural face generator with identity labels and exact landmarks.
//!
//! Each identity is a bounded parameter vector derived from `(seed, id)`;
//! each sample adds pose and lighting jitter derived from
//! `(seed, id, sample index)`, so rendering is order independent.
//!
//! Landmark order (image-left = smaller x):
//!
//! | idx | point                         | flips to |
//! |-----|-------------------------------|----------|
//! | 0   | left eye, outer corner        | 3        |
//! | 1   | left eye, inner corner        | 2        |
//! | 2   | right eye, inner corner       | 1        |
//! | 3   | right eye, outer corner       | 0        |
//! | 4   | left eye centre               | 5        |
//! | 5   | right eye centre              | 4        |
//! | 6   | nasion (nose bridge)          | 6        |
//! | 7   | nose tip                      | 7        |
//! | 8   | subnasale (philtrum top)      | 8        |
//! | 9   | upper-lip top (philtrum base) | 9        |
//! | 10  | left mouth corner             | 11       |
//! | 11  | right mouth corner            | 10       |
//! | 12  | stomion (mouth centre)        | 12       |
//! | 13  | lower-lip bottom              | 13       |
//!
//! With `snap_to_label_grid` (the default) every landmark is moved onto the
//! heatmap lattice (multiples of [`STRIDE`](crate::heatmap::STRIDE) input
//! pixels) *before* the face is drawn, and the features are drawn through
//! the snapped points. Ground truth is then exactly representable by the
//! heatmap encoding, so a perfect detector has zero error.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{FlipSpec, LandmarkSet, STRIDE};
use crate::tensorcore::Tensor;

pub const NUM_LANDMARKS: usize = 14;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Left/right pairing for the landmark order documented above.
pub fn flip_spec() -> FlipSpec {
    FlipSpec::new(vec![3, 2, 1, 0, 5, 4, 6, 7, 8, 9, 11, 10, 12, 13]).expect("valid involution")
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for a tuple of stream coordinates.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

type Rgb = [f32; 3];

/// Geometry and colour of one synthetic person, in units of a 64-pixel
/// canvas (scaled with the render size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub id: usize,
    pub face_width: f32,
    pub face_aspect: f32,
    pub eye_spacing: f32,
    pub eye_height: f32,
    pub eye_width: f32,
    pub nose_length: f32,
    pub philtrum_depth: f32,
    pub mouth_width: f32,
    pub mouth_curvature: f32,
    pub upper_lip: f32,
    pub lower_lip: f32,
    pub skin: Rgb,
    pub lip: Rgb,
    pub iris: Rgb,
    pub hair: Rgb,
    pub background: Rgb,
}

/// Inclusive bounds of every scalar identity parameter.
pub const BOUNDS: [(&str, f32, f32); 11] = [
    ("face_width", 38.0, 46.0),
    ("face_aspect", 1.2, 1.35),
    ("eye_spacing", 18.0, 24.0),
    ("eye_height", -8.0, -5.0),
    ("eye_width", 9.0, 12.0),
    ("nose_length", 7.0, 10.0),
    ("philtrum_depth", 4.0, 6.0),
    ("mouth_width", 14.0, 20.0),
    ("mouth_curvature", -2.0, 2.0),
    ("upper_lip", 4.0, 5.0),
    ("lower_lip", 4.0, 5.0),
];

const SKIN_RANGE: [(f32, f32); 3] = [(0.55, 0.95), (0.40, 0.78), (0.30, 0.68)];
const LIP_RANGE: [(f32, f32); 3] = [(0.55, 0.80), (0.08, 0.25), (0.12, 0.30)];

impl IdentityParams {
    pub fn scalars(&self) -> [f32; 11] {
        [
            self.face_width,
            self.face_aspect,
            self.eye_spacing,
            self.eye_height,
            self.eye_width,
            self.nose_length,
            self.philtrum_depth,
            self.mouth_width,
            self.mouth_curvature,
            self.upper_lip,
            self.lower_lip,
        ]
    }

    pub fn within_bounds(&self) -> bool {
        let scalars_ok = self
            .scalars()
            .iter()
            .zip(BOUNDS)
            .all(|(v, (_, lo, hi))| (lo..=hi).contains(v));
        let colour_ok = |c: &Rgb, range: &[(f32, f32); 3]| {
            c.iter().zip(range).all(|(v, (lo, hi))| (*lo..=*hi).contains(v))
        };
        let unit = |c: &Rgb| c.iter().all(|v| (0.0..=1.0).contains(v));
        scalars_ok
            && colour_ok(&self.skin, &SKIN_RANGE)
            && colour_ok(&self.lip, &LIP_RANGE)
            && unit(&self.iris)
            && unit(&self.hair)
            && unit(&self.background)
    }
}

/// Parameters for identity `id` under generator seed `seed`.
pub fn make_identity(seed: u64, id: usize) -> IdentityParams {
    let mut rng = stream_rng(&[0x1d, seed, id as u64]);
    let mut s = [0.0f32; 11];
    for (v, (_, lo, hi)) in s.iter_mut().zip(BOUNDS) {
        *v = rng.gen_range(lo..=hi);
    }
    let mut colour = |range: &[(f32, f32); 3]| -> Rgb {
        let mut c = [0.0; 3];
        for (v, (lo, hi)) in c.iter_mut().zip(range) {
            *v = rng.gen_range(*lo..=*hi);
        }
        c
    };
    let skin = colour(&SKIN_RANGE);
    let lip = colour(&LIP_RANGE);
    let iris = colour(&[(0.05, 0.5); 3]);
    let hair = colour(&[(0.02, 0.6); 3]);
    let background = colour(&[(0.0, 1.0); 3]);
    IdentityParams {
        id,
        face_width: s[0],
        face_aspect: s[1],
        eye_spacing: s[2],
        eye_height: s[3],
        eye_width: s[4],
        nose_length: s[5],
        philtrum_depth: s[6],
        mouth_width: s[7],
        mouth_curvature: s[8],
        upper_lip: s[9],
        lower_lip: s[10],
        skin,
        lip,
        iris,
        hair,
        background,
    }
}

/// Per-sample variation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Translation in 64-canvas units.
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    /// Rotation in radians.
    pub angle: f32,
    pub brightness: f32,
    /// Left-to-right brightness gradient amplitude.
    pub gradient: f32,
    /// Amplitude of uniform per-pixel noise.
    pub noise: f32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        angle: 0.0,
        brightness: 1.0,
        gradient: 0.0,
        noise: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Jitter {
            dx: rng.gen_range(-3.0..=3.0),
            dy: rng.gen_range(-3.0..=3.0),
            scale: rng.gen_range(0.93..=1.07),
            angle: rng.gen_range(-4.0f32..=4.0).to_radians(),
            brightness: rng.gen_range(0.9..=1.1),
            gradient: rng.gen_range(-0.08..=0.08),
            noise: 0.02,
        }
    }
}

/// Rendering options shared by a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub size: usize,
    pub snap_to_label_grid: bool,
}

impl RenderOptions {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            snap_to_label_grid: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 32",
                self.size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::usage(format!("unknown split `{other}`"))),
        }
    }
}

/// An image with its labels. `image` is `[H, W, 3]` in `[0, 1]`, already
/// quantised to 8-bit levels so it survives a PNG round trip unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    pub identity: usize,
    pub split: Split,
}

/// Canonical feature points in 64-canvas units relative to the face centre.
fn canonical_points(p: &IdentityParams) -> [[f32; 2]; NUM_LANDMARKS] {
    let half_spacing = p.eye_spacing / 2.0;
    let half_eye = p.eye_width / 2.0;
    let eye_y = p.eye_height;
    let tip_y = eye_y + p.nose_length;
    let subnasale_y = tip_y + 4.0;
    let lip_top_y = subnasale_y + p.philtrum_depth;
    let stomion_y = lip_top_y + p.upper_lip;
    let lip_bottom_y = stomion_y + p.lower_lip;
    let corner_y = stomion_y - p.mouth_curvature;
    let half_mouth = p.mouth_width / 2.0;
    [
        [-half_spacing - half_eye, eye_y],
        [-half_spacing + half_eye, eye_y],
        [half_spacing - half_eye, eye_y],
        [half_spacing + half_eye, eye_y],
        [-half_spacing, eye_y],
        [half_spacing, eye_y],
        [0.0, eye_y],
        [0.0, tip_y],
        [0.0, subnasale_y],
        [0.0, lip_top_y],
        [-half_mouth, corner_y],
        [half_mouth, corner_y],
        [0.0, stomion_y],
        [0.0, lip_bottom_y],
    ]
}

/// Similarity transform from face-relative 64-units to image pixels.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f32,
    cy: f32,
    unit: f32,
    cos: f32,
    sin: f32,
}

impl Pose {
    fn new(size: usize, jitter: &Jitter) -> Self {
        let unit = size as f32 / 64.0;
        let centre = (size - 1) as f32 / 2.0;
        Pose {
            cx: centre + jitter.dx * unit,
            cy: centre + 2.0 * unit + jitter.dy * unit,
            unit: unit * jitter.scale,
            cos: jitter.angle.cos(),
            sin: jitter.angle.sin(),
        }
    }

    fn to_image(&self, [x, y]: [f32; 2]) -> [f32; 2] {
        let (x, y) = (x * self.unit, y * self.unit);
        [
            self.cx + self.cos * x - self.sin * y,
            self.cy + self.sin * x + self.cos * y,
        ]
    }

    /// Inverse rotation, in pixels, about the face centre.
    fn to_face(&self, [x, y]: [f32; 2]) -> [f32; 2] {
        let (dx, dy) = (x - self.cx, y - self.cy);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }
}

fn snap(v: f32, size: usize) -> f32 {
    let step = STRIDE as f32;
    let max = (size - STRIDE) as f32;
    ((v / step).round() * step).clamp(0.0, max)
}

/// Landmarks of `identity` rendered with `jitter`.
pub fn landmarks_for(identity: &IdentityParams, jitter: &Jitter, options: &RenderOptions) -> LandmarkSet {
    let pose = Pose::new(options.size, jitter);
    let points = canonical_points(identity)
        .iter()
        .map(|&p| {
            let [x, y] = pose.to_image(p);
            if options.snap_to_label_grid {
                [snap(x, options.size), snap(y, options.size)]
            } else {
                [x, y]
            }
        })
        .collect();
    LandmarkSet { points }
}

struct Canvas {
    size: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    fn new(size: usize, fill: Rgb) -> Self {
        Self {
            size,
            pixels: vec![fill; size * size],
        }
    }

    fn paint(&mut self, mut inside: impl FnMut(f32, f32) -> bool, colour: Rgb) {
        for row in 0..self.size {
            for col in 0..self.size {
                if inside(col as f32, row as f32) {
                    self.pixels[row * self.size + col] = colour;
                }
            }
        }
    }

    fn segment(&mut self, a: [f32; 2], b: [f32; 2], half_width: f32, colour: Rgb) {
        self.paint(|x, y| dist_to_segment([x, y], a, b) <= half_width, colour);
    }

    fn disk(&mut self, c: [f32; 2], radius: f32, colour: Rgb) {
        self.paint(|x, y| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= radius * radius, colour);
    }
}

fn dist_to_segment(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * abx, a[1] + t * aby);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

fn in_polygon(p: [f32; 2], poly: &[[f32; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn shade(c: Rgb, f: f32) -> Rgb {
    [c[0] * f, c[1] * f, c[2] * f]
}

/// Draw one face. The sample id/split are placeholders the caller fills in.
pub fn render_with(identity: &IdentityParams, jitter: &Jitter, noise_seed: u64, options: &RenderOptions) -> Result<Sample> {
    options.validate()?;
    let size = options.size;
    let pose = Pose::new(size, jitter);
    let lm = landmarks_for(identity, jitter, options);
    let l = &lm.points;
    let u = pose.unit;
    let mut canvas = Canvas::new(size, identity.background);

    // Head: hair cap behind, then the face ellipse.
    let (ax, ay) = (identity.face_width / 2.0 * u, identity.face_width * identity.face_aspect / 2.0 * u);
    canvas.paint(
        |x, y| {
            let [fx, fy] = pose.to_face([x, y]);
            let r = (fx / (ax + 2.0 * u)).powi(2) + ((fy + 2.0 * u) / (ay + 2.0 * u)).powi(2);
            r <= 1.0 && fy < -0.45 * ay
        },
        identity.hair,
    );
    canvas.paint(
        |x, y| {
            let [fx, fy] = pose.to_face([x, y]);
            (fx / ax).powi(2) + (fy / ay).powi(2) <= 1.0 && fy >= -0.55 * ay
        },
        identity.skin,
    );

    // Eyes and brows.
    for (outer, inner, centre) in [(0, 1, 4), (3, 2, 5)] {
        let (a, b) = (l[outer], l[inner]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let half_len = 0.5 * ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt() + 0.5;
        let half_open = 2.2 * u;
        let (dx, dy) = ((b[0] - a[0]) / (2.0 * half_len), (b[1] - a[1]) / (2.0 * half_len));
        canvas.paint(
            |x, y| {
                let (px, py) = (x - mid[0], y - mid[1]);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                (along / half_len).powi(2) + (across / half_open).powi(2) <= 1.0
            },
            [0.95, 0.95, 0.93],
        );
        canvas.disk(l[centre], 1.8 * u, identity.iris);
        canvas.disk(l[centre], 0.7 * u, [0.03, 0.03, 0.03]);
        let lift = pose.to_image([0.0, -4.0]);
        let (ox, oy) = (lift[0] - pose.cx, lift[1] - pose.cy);
        canvas.segment([a[0] + ox, a[1] + oy], [b[0] + ox, b[1] + oy], 0.9 * u, identity.hair);
    }

    // Nose ridge and nostrils.
    let ridge = shade(identity.skin, 0.78);
    canvas.segment(l[6], l[7], 0.8 * u, ridge);
    let across = pose.to_image([2.2, 1.0]);
    let (nx, ny) = (across[0] - pose.cx, across[1] - pose.cy);
    let back = pose.to_image([-2.2, 1.0]);
    let (mx, my) = (back[0] - pose.cx, back[1] - pose.cy);
    canvas.disk([l[7][0] + nx, l[7][1] + ny], 1.0 * u, shade(identity.skin, 0.45));
    canvas.disk([l[7][0] + mx, l[7][1] + my], 1.0 * u, shade(identity.skin, 0.45));

    // Philtrum ridges.
    let side = pose.to_image([1.2, 0.0]);
    let (sx, sy) = (side[0] - pose.cx, side[1] - pose.cy);
    let groove = shade(identity.skin, 0.85);
    for sign in [-1.0, 1.0] {
        canvas.segment(
            [l[8][0] + sign * sx, l[8][1] + sign * sy],
            [l[9][0] + sign * sx, l[9][1] + sign * sy],
            0.5 * u,
            groove,
        );
    }

    // Lips: the quad through the corners, top and bottom, dilated slightly,
    // and a darker line through the stomion.
    let quad = [l[10], l[9], l[11], l[13]];
    canvas.paint(
        |x, y| {
            in_polygon([x, y], &quad)
                || (0..4).any(|i| dist_to_segment([x, y], quad[i], quad[(i + 1) % 4]) <= 1.2)
        },
        identity.lip,
    );
    let mouth_line = shade(identity.lip, 0.7);
    canvas.segment(l[10], l[12], 0.5, mouth_line);
    canvas.segment(l[12], l[11], 0.5, mouth_line);

    // Lighting, noise and 8-bit quantisation.
    let mut rng = stream_rng(&[0x401e, noise_seed]);
    let mut data = Vec::with_capacity(size * size * 3);
    for (i, px) in canvas.pixels.iter().enumerate() {
        let col = (i % size) as f32;
        let light = jitter.brightness * (1.0 + jitter.gradient * (col / size as f32 - 0.5));
        for &v in px {
            let n = if jitter.noise > 0.0 {
                rng.gen_range(-jitter.noise..=jitter.noise)
            } else {
                0.0
            };
            let v = (v * light + n).clamp(0.0, 1.0);
            data.push((v * 255.0).round() / 255.0);
        }
    }
    Ok(Sample {
        id: String::new(),
        image: Tensor::new(vec![size, size, 3], data)?,
        landmarks: lm,
        identity: identity.id,
        split: Split::Train,
    })
}

/// Render sample `index` of `identity`, drawing jitter from `jitter_seed`.
pub fn render(identity: &IdentityParams, jitter_seed: u64, options: &RenderOptions) -> Result<Sample> {
    let mut rng = stream_rng(&[0x717e, jitter_seed]);
    let jitter = Jitter::sample(&mut rng);
    render_with(identity, &jitter, jitter_seed, options)
}

// ---------------------------------------------------------------------------
// Datasets and manifests

/// Fractions of the shuffled sample list assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    /// `(train, val, test)` counts for `n` samples; test takes the remainder.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {all:?} must be in [0, 1] and sum to 1"
            )));
        }
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        Ok((train, val, n - train - val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub size: usize,
    pub seed: u64,
    pub split: SplitFractions,
    pub snap_to_label_grid: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_ids: 10,
            per_id: 40,
            size: 64,
            seed: 7,
            split: SplitFractions::default(),
            snap_to_label_grid: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image: String,
    pub identity: usize,
    pub split: Split,
    pub landmarks: LandmarkSet,
}

/// On-disk description of a generated dataset. Paths are relative to the
/// directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub root: String,
    pub image_size: usize,
    pub num_landmarks: usize,
    pub num_classes: usize,
    pub flip_permutation: FlipSpec,
    pub seed: u64,
    pub generator: DatasetConfig,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.records.iter().filter(|r| r.split == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        FlipSpec::new(self.flip_permutation.permutation.clone())
            .map_err(|e| Error::format(e.to_string()))?;
        if self.flip_permutation.permutation.len() != self.num_landmarks {
            return Err(Error::format("flip permutation length differs from K"));
        }
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("duplicate record id (a sample in two splits?)"));
        }
        for r in &self.records {
            if r.landmarks.len() != self.num_landmarks {
                return Err(Error::format(format!("record {} has {} landmarks", r.id, r.landmarks.len())));
            }
            if r.identity >= self.num_classes {
                return Err(Error::format(format!("record {} has identity {}", r.id, r.identity)));
            }
            if !r.landmarks.inside(self.image_size, self.image_size) {
                return Err(Error::format(format!("record {} has landmarks off the image", r.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path)?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Render and write a dataset into `out_dir`; returns the manifest, which is
/// also written to `out_dir/manifest.json`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if config.num_ids == 0 || config.per_id == 0 {
        return Err(Error::config("need at least one identity and one sample per identity"));
    }
    let options = RenderOptions {
        size: config.size,
        snap_to_label_grid: config.snap_to_label_grid,
    };
    options.validate()?;
    let n = config.num_ids * config.per_id;
    let (n_train, n_val, _) = config.split.counts(n)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(&[0x5911, config.seed]));
    let mut split_of = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut records = Vec::with_capacity(n);
    for id in 0..config.num_ids {
        let identity = make_identity(config.seed, id);
        for k in 0..config.per_id {
            let idx = id * config.per_id + k;
            let jitter_seed = mix(config.seed ^ mix((id as u64) << 32 | k as u64));
            let sample = render(&identity, jitter_seed, &options)?;
            let name = format!("{id:03}_{k:03}");
            let rel = format!("images/{name}.png");
            write_png(&out_dir.join(&rel), &sample.image)?;
            records.push(Record {
                id: name,
                image: rel,
                identity: id,
                split: split_of[idx],
                landmarks: sample.landmarks,
            });
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        root: ".".into(),
        image_size: config.size,
        num_landmarks: NUM_LANDMARKS,
        num_classes: config.num_ids,
        flip_permutation: flip_spec(),
        seed: config.seed,
        generator: config.clone(),
        records,
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::shape(format!("expected [H, W, 3], got {:?}", image.shape()))),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// A manifest with every image loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base_dir = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.root);
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let path = base_dir.join(&r.image);
            if !path.exists() {
                return Err(Error::format(format!("missing image {}", path.display())));
            }
            let image = read_png(&path)?;
            if image.shape() != [manifest.image_size, manifest.image_size, 3] {
                return Err(Error::format(format!("{} has shape {:?}", path.display(), image.shape())));
            }
            samples.push(Sample {
                id: r.id.clone(),
                image,
                landmarks: r.landmarks.clone(),
                identity: r.identity,
                split: r.split,
            });
        }
        Ok(Self {
            manifest,
            base_dir,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn flip(&self) -> &FlipSpec {
        &self.manifest.flip_permutation
    }
}
