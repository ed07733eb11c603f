//! Landmark ↔ heatmap conversion and landmark-aware augmentation.
//!
//! Public coordinates are always input-image pixel indices: pixel `(col, row)`
//! sits at `(x, y) = (col, row)`. Heatmaps live at a quarter of the input
//! resolution, so heatmap pixel `(a, b)` corresponds to input `(4a, 4b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// Input-to-heatmap downscaling factor.
pub const STRIDE: usize = 4;
/// Gaussian kernel width in heatmap pixels.
pub const DEFAULT_SIGMA: f32 = 1.5;
/// Number of landmarks annotated per face.
pub const DEFAULT_K: usize = 14;

/// Ordered landmark coordinates in input pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    pub points: Vec<[f32; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f32; 2]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::usage("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether every point lies within a `width × height` canvas.
    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.points.iter().all(|&[x, y]| {
            x >= 0.0 && y >= 0.0 && x <= (width - 1) as f32 && y <= (height - 1) as f32
        })
    }
}

/// `K` heatmaps stored channels-last as `[H/4, W/4, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub maps: Tensor,
    pub sigma: f32,
    /// Channels whose landmark fell outside the heatmap and were left zero.
    pub out_of_bounds: Vec<bool>,
}

impl HeatmapStack {
    pub fn height(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[2]
    }

    /// One channel as a row-major `height × width` vector.
    pub fn channel(&self, k: usize) -> Vec<f32> {
        let kk = self.channels();
        self.maps.data().iter().skip(k).step_by(kk).copied().collect()
    }
}

/// Left/right pairing of landmarks under a horizontal mirror.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlipSpec {
    pub permutation: Vec<usize>,
}

impl FlipSpec {
    pub fn new(permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let involution = permutation
            .iter()
            .enumerate()
            .all(|(i, &p)| p < n && permutation[p] == i);
        if !involution {
            return Err(Error::config(format!(
                "flip permutation {permutation:?} is not an involution"
            )));
        }
        Ok(Self { permutation })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            permutation: (0..k).collect(),
        }
    }
}

/// Render Gaussian heatmaps for `landmarks` on an `input_width × input_height`
/// image.
pub fn encode(
    landmarks: &LandmarkSet,
    input_width: usize,
    input_height: usize,
    sigma: f32,
) -> Result<HeatmapStack> {
    if input_width % STRIDE != 0 || input_height % STRIDE != 0 || input_width == 0 || input_height == 0 {
        return Err(Error::config(format!(
            "input size {input_width}×{input_height} is not a positive multiple of {STRIDE}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("heatmap sigma must be positive"));
    }
    let (w, h, k) = (input_width / STRIDE, input_height / STRIDE, landmarks.len());
    if k == 0 {
        return Err(Error::usage("cannot encode an empty landmark set"));
    }
    let mut data = vec![0.0f32; h * w * k];
    let mut out_of_bounds = vec![false; k];
    let denom = 2.0 * sigma * sigma;
    for (ch, &[x, y]) in landmarks.points.iter().enumerate() {
        let (sx, sy) = (x / STRIDE as f32, y / STRIDE as f32);
        if !(sx >= 0.0 && sy >= 0.0 && sx < w as f32 && sy < h as f32) {
            out_of_bounds[ch] = true;
            continue;
        }
        // Nearest heatmap pixel; the clamp only matters for the last half
        // pixel before the far border.
        let cx = sx.round().min((w - 1) as f32);
        let cy = sy.round().min((h - 1) as f32);
        for row in 0..h {
            let dy = row as f32 - cy;
            for col in 0..w {
                let dx = col as f32 - cx;
                data[(row * w + col) * k + ch] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok(HeatmapStack {
        maps: Tensor::new(vec![h, w, k], data)?,
        sigma,
        out_of_bounds,
    })
}

/// Result of argmax decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub landmarks: LandmarkSet,
    /// Channels that were constant (no unique peak); decoded as `(0, 0)`.
    pub degenerate: Vec<bool>,
}

/// Per-channel argmax of a `[h, w, K]` map, scaled back to input pixels.
/// Ties go to the smallest row-major index.
pub fn decode(maps: &Tensor) -> Result<Decoded> {
    if maps.shape().len() != 3 {
        return Err(Error::shape(format!(
            "expected [h, w, K] heatmaps, got {:?}",
            maps.shape()
        )));
    }
    let (h, w, k) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut best = vec![(f32::NEG_INFINITY, 0usize); k];
    let mut lowest = vec![f32::INFINITY; k];
    for (pixel, values) in maps.data().chunks_exact(k).enumerate() {
        for (ch, &v) in values.iter().enumerate() {
            if v > best[ch].0 {
                best[ch] = (v, pixel);
            }
            lowest[ch] = lowest[ch].min(v);
        }
    }
    let mut points = Vec::with_capacity(k);
    let mut degenerate = Vec::with_capacity(k);
    for ch in 0..k {
        let (peak, pixel) = best[ch];
        let flat = !(peak > lowest[ch]);
        let (row, col) = (pixel / w, pixel % w);
        debug_assert!(row < h);
        points.push([(col * STRIDE) as f32, (row * STRIDE) as f32]);
        degenerate.push(flat);
    }
    Ok(Decoded {
        landmarks: LandmarkSet { points },
        degenerate,
    })
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(format!(
            "expected an [H, W, C] image, got {:?}",
            image.shape()
        ))),
    }
}

/// Mirror columns and relabel left/right landmarks.
pub fn hflip(image: &Tensor, landmarks: &LandmarkSet, spec: &FlipSpec) -> Result<(Tensor, LandmarkSet)> {
    let (h, w, c) = image_dims(image)?;
    if spec.permutation.len() != landmarks.len() {
        return Err(Error::config(format!(
            "flip permutation covers {} landmarks, got {}",
            spec.permutation.len(),
            landmarks.len()
        )));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            let from = (row * w + (w - 1 - col)) * c;
            let to = (row * w + col) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    let mirrored: Vec<[f32; 2]> = landmarks
        .points
        .iter()
        .map(|&[x, y]| [(w - 1) as f32 - x, y])
        .collect();
    let points = spec.permutation.iter().map(|&p| mirrored[p]).collect();
    Ok((Tensor::new(image.shape().to_vec(), out)?, LandmarkSet { points }))
}

/// Map a point through the scale-about-centre transform.
pub fn rescale_point([x, y]: [f32; 2], factor: f32, width: usize, height: usize) -> [f32; 2] {
    let cx = (width - 1) as f32 / 2.0;
    let cy = (height - 1) as f32 / 2.0;
    [cx + factor * (x - cx), cy + factor * (y - cy)]
}

/// Scale image and landmarks about the image centre, keeping the canvas
/// size (zero fill outside the source). Returns `Ok(None)` when a landmark
/// would leave the canvas.
pub fn rescale(image: &Tensor, landmarks: &LandmarkSet, factor: f32) -> Result<Option<(Tensor, LandmarkSet)>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::config(format!("scale factor must be positive, got {factor}")));
    }
    let (h, w, c) = image_dims(image)?;
    let points: Vec<[f32; 2]> = landmarks
        .points
        .iter()
        .map(|&p| rescale_point(p, factor, w, h))
        .collect();
    let moved = LandmarkSet { points };
    if !moved.inside(w, h) {
        return Ok(None);
    }
    if factor == 1.0 {
        return Ok(Some((image.clone(), moved)));
    }
    let cx = (w - 1) as f32 / 2.0;
    let cy = (h - 1) as f32 / 2.0;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let fetch = |r: isize, q: isize, ch: usize| -> f32 {
        if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
            0.0
        } else {
            src[(r as usize * w + q as usize) * c + ch]
        }
    };
    for row in 0..h {
        let sy = cy + (row as f32 - cy) / factor;
        let y0 = sy.floor();
        let fy = sy - y0;
        for col in 0..w {
            let sx = cx + (col as f32 - cx) / factor;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (r0, q0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let top = fetch(r0, q0, ch) * (1.0 - fx) + fetch(r0, q0 + 1, ch) * fx;
                let bottom = fetch(r0 + 1, q0, ch) * (1.0 - fx) + fetch(r0 + 1, q0 + 1, ch) * fx;
                out[(row * w + col) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(Some((Tensor::new(image.shape().to_vec(), out)?, moved)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[[f32; 2]]) -> LandmarkSet {
        LandmarkSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn encode_peak_and_offset_value() {
        let hm = encode(&set(&[[100.0, 60.0]]), 256, 256, 1.5).unwrap();
        let ch = hm.channel(0);
        assert_eq!(ch[15 * 64 + 25], 1.0);
        let three_right = ch[15 * 64 + 28];
        assert!((three_right - (-2.0f32).exp()).abs() < 1e-6);
        assert!((three_right - 0.13534).abs() < 1e-5);
    }

    #[test]
    fn distinct_landmarks_have_distinct_peaks() {
        let hm = encode(&set(&[[8.0, 8.0], [40.0, 20.0]]), 64, 64, 1.5).unwrap();
        let d = decode(&hm.maps).unwrap();
        assert_ne!(d.landmarks.points[0], d.landmarks.points[1]);
    }

    #[test]
    fn out_of_bounds_channel_is_zero_and_flagged() {
        let hm = encode(&set(&[[-3.0, 8.0], [70.0, 8.0], [8.0, 8.0]]), 64, 64, 1.5).unwrap();
        assert_eq!(hm.out_of_bounds, vec![true, true, false]);
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
        assert!(hm.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_indivisible_size() {
        assert!(encode(&set(&[[1.0, 1.0]]), 62, 64, 1.5).is_err());
    }

    #[test]
    fn constant_channel_decodes_to_origin() {
        let maps = Tensor::full(&[4, 4, 2], 0.3);
        let d = decode(&maps).unwrap();
        assert_eq!(d.landmarks.points, vec![[0.0, 0.0]; 2]);
        assert_eq!(d.degenerate, vec![true, true]);
        let zeros = Tensor::zeros(&[4, 4, 1]);
        assert!(decode(&zeros).unwrap().degenerate[0]);
    }

    #[test]
    fn flip_spec_must_be_involution() {
        assert!(FlipSpec::new(vec![1, 0, 2]).is_ok());
        assert!(FlipSpec::new(vec![1, 2, 0]).is_err());
        assert!(FlipSpec::new(vec![0, 3]).is_err());
    }

    #[test]
    fn flip_maps_left_edge_to_right_edge() {
        let img = Tensor::zeros(&[4, 8, 3]);
        let (_, lm) = hflip(&img, &set(&[[0.0, 2.0]]), &FlipSpec::identity(1)).unwrap();
        assert_eq!(lm.points[0], [7.0, 2.0]);
    }

    #[test]
    fn rescale_examples() {
        let img = Tensor::full(&[65, 65, 3], 0.5);
        let c = 32.0;
        let lm = set(&[[c, c], [c + 10.0, c]]);
        let (same, lm1) = rescale(&img, &lm, 1.0).unwrap().unwrap();
        assert_eq!(same, img);
        assert_eq!(lm1, lm);
        let (_, lm2) = rescale(&img, &lm, 0.8).unwrap().unwrap();
        assert_eq!(lm2.points[0], [c, c]);
        assert!((lm2.points[1][0] - (c + 8.0)).abs() < 1e-5);
        assert_eq!(lm2.points[1][1], c);
        assert!(rescale(&img, &lm, 0.0).is_err());
        let edge = set(&[[60.0, 32.0]]);
        assert!(rescale(&img, &edge, 1.25).unwrap().is_none());
    }
}
