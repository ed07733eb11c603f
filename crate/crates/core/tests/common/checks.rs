//! Property checks shared by the integration tests and the acceptance run.
//!
//! Each returns a one-line summary on success and a description of the first
//! violation otherwise.

use crosstask::evalkit::{auc_fr, ced, mean_error, CED_GRID};
use crosstask::heatmap::{decode, encode, LandmarkSet, DEFAULT_SIGMA, STRIDE};
use crosstask::losses::{self, EdReduction};
use crosstask::tensorcore::kernels::{conv2d, deconv2d, deconv_out_extent};
use crosstask::tensorcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{random_tensor, rng, Arr};

pub type Check = std::result::Result<String, String>;

fn dot64(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `⟨deconv(x, W), y⟩ = ⟨x, conv(y, W)⟩` with the same weight buffer read as
/// `[Cout_conv = Cin, k, k, Cin_conv = Cout]`, over every small shape.
pub fn deconv_adjoint() -> Check {
    let mut g = rng(0x5eed);
    let mut shapes = 0;
    for k in 1..=4 {
        for s in 1..=3 {
            for p in 0..k {
                for h in 1..=4 {
                    for w in 1..=3 {
                        let Ok(oh) = deconv_out_extent(h, k, s, p) else { continue };
                        let Ok(ow) = deconv_out_extent(w, k, s, p) else { continue };
                        if oh == 0 || ow == 0 {
                            continue;
                        }
                        let (n, ci, co) = (g.gen_range(1..=2), g.gen_range(1..=3), g.gen_range(1..=3));
                        let x = random_tensor(&[n, h, w, ci], &mut g);
                        let wt = random_tensor(&[ci, k, k, co], &mut g);
                        let y = random_tensor(&[n, oh, ow, co], &mut g);
                        let forward = deconv2d(&x, &wt, &Tensor::zeros(&[co]), s, p)
                            .map_err(|e| format!("deconv k{k} s{s} p{p}: {e}"))?;
                        let adjoint = conv2d(&y, &wt, &Tensor::zeros(&[ci]), s, p)
                            .map_err(|e| format!("conv k{k} s{s} p{p}: {e}"))?;
                        if adjoint.shape() != x.shape() {
                            return Err(format!("adjoint shape {:?} vs {:?}", adjoint.shape(), x.shape()));
                        }
                        let (lhs, rhs) = (dot64(&forward, &y), dot64(&x, &adjoint));
                        if (lhs - rhs).abs() > 1e-4 * (1.0 + lhs.abs()) {
                            return Err(format!("k{k} s{s} p{p} {h}×{w}: {lhs} vs {rhs}"));
                        }
                        // And against the scatter-form reference.
                        let reference = super::deconv2d(
                            &Arr::from_tensor(&x),
                            &Arr::from_tensor(&wt),
                            &Arr::zeros(&[co]),
                            s,
                            p,
                        );
                        let worst = reference
                            .data
                            .iter()
                            .zip(forward.data())
                            .map(|(a, &b)| (a - b as f64).abs())
                            .fold(0.0, f64::max);
                        if reference.shape != forward.shape() || worst > 1e-5 {
                            return Err(format!("k{k} s{s} p{p} {h}×{w}: reference mismatch {worst:e}"));
                        }
                        shapes += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{shapes} shapes"))
}

/// Exhaustive encode→decode over every integer coordinate of a 64×64 image,
/// plus random real coordinates and the kernel value at a 3-pixel offset.
/// The error bound is one heatmap pixel per axis.
pub fn heatmap_codec() -> Check {
    let size = 64;
    let mut worst = 0.0f32;
    for y in 0..size {
        for x in 0..size {
            let p = [x as f32, y as f32];
            let got = roundtrip(p, size)?;
            let err = axis_error(got, p);
            if x % STRIDE == 0 && y % STRIDE == 0 && got != p {
                return Err(format!("lattice point {p:?} decoded to {got:?}"));
            }
            if err > 4.0 {
                return Err(format!("{p:?} decoded to {got:?}, error {err}"));
            }
            worst = worst.max(err);
        }
    }
    let mut g = rng(64);
    for _ in 0..2000 {
        let p = [g.gen_range(0.0..size as f32), g.gen_range(0.0..size as f32)];
        let got = roundtrip(p, size)?;
        let err = axis_error(got, p);
        if err > 4.0 {
            return Err(format!("{p:?} decoded to {got:?}, error {err}"));
        }
        worst = worst.max(err);
    }

    let stack = encode(&LandmarkSet::new(vec![[16.0, 32.0]]).unwrap(), size, size, DEFAULT_SIGMA)
        .map_err(|e| e.to_string())?;
    let w = stack.width();
    let at = |row: usize, col: usize| stack.maps.data()[row * w + col];
    let expected = (-2.0f64).exp();
    let value = at(8, 4 + 3) as f64;
    if (value - expected).abs() > 1e-6 || at(8, 4) != 1.0 {
        return Err(format!("kernel at 3-px offset {value}, expected {expected}"));
    }
    Ok(format!("worst in-bounds error {worst:.3} px; 3-px kernel value {value:.6}"))
}

/// Distance in units of whole heatmap pixels: the larger per-axis offset.
/// (Euclidean distance reaches 3√2 at the far corner, where the rounded
/// centre is clamped back onto the map on both axes.)
fn axis_error(a: [f32; 2], b: [f32; 2]) -> f32 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

fn roundtrip(p: [f32; 2], size: usize) -> std::result::Result<[f32; 2], String> {
    let stack = encode(&LandmarkSet::new(vec![p]).unwrap(), size, size, DEFAULT_SIGMA).map_err(|e| e.to_string())?;
    let decoded = decode(&stack.maps).map_err(|e| e.to_string())?;
    Ok(decoded.landmarks.points[0])
}

/// Exact integral of the empirical CED over `[0, t]`, divided by `t`.
pub fn oracle_auc(errors: &[f64], t: f64) -> f64 {
    let n = errors.len() as f64;
    errors.iter().filter(|&&e| e <= t).map(|e| t - e).sum::<f64>() / (n * t)
}

fn random_errors(g: &mut impl Rng, threshold: f64) -> Vec<f64> {
    let n = g.gen_range(1..=60);
    let scale = g.gen_range(0.2..3.0) * threshold;
    (0..n)
        .map(|_| match g.gen_range(0..10) {
            0 => 0.0,
            1 => threshold,
            _ => g.gen_range(0.0..scale),
        })
        .collect()
}

/// AUC and FR against the step-function oracle on `vectors` random error
/// vectors, CED bracketing and monotonicity, permutation invariance, and the
/// worked examples.
pub fn metric_oracle(vectors: usize) -> Check {
    let mut g = rng(8);
    let tol = 1.0 / CED_GRID as f64;
    let mut worst = 0.0f64;
    for i in 0..vectors {
        let threshold = if i % 2 == 0 { 1.2 } else { g.gen_range(0.1..5.0) };
        let mut errors = random_errors(&mut g, threshold);
        let (auc, fr) = auc_fr(&errors, threshold).map_err(|e| e.to_string())?;
        let expect_auc = oracle_auc(&errors, threshold);
        let expect_fr = errors.iter().filter(|&&e| e > threshold).count() as f64 / errors.len() as f64;
        worst = worst.max((auc - expect_auc).abs());
        if (auc - expect_auc).abs() > tol {
            return Err(format!("vector {i}: AUC {auc} vs oracle {expect_auc}"));
        }
        if fr != expect_fr {
            return Err(format!("vector {i}: FR {fr} vs {expect_fr}"));
        }

        let curve = ced(&errors, threshold, CED_GRID).map_err(|e| e.to_string())?;
        if curve.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) || curve.last().unwrap().1 != 1.0 {
            return Err(format!("vector {i}: CED not a non-decreasing curve ending at 1"));
        }
        // FR read off the CED around the threshold brackets the counted FR.
        let below = curve.iter().filter(|c| c.0 <= threshold).last().unwrap();
        let above = curve.iter().find(|c| c.0 >= threshold).unwrap();
        if !(1.0 - above.1 <= fr + 1e-12 && fr <= 1.0 - below.1 + 1e-12) {
            return Err(format!("vector {i}: CED-derived FR does not bracket {fr}"));
        }

        errors.shuffle(&mut g);
        if auc_fr(&errors, threshold).map_err(|e| e.to_string())? != (auc, fr) {
            return Err(format!("vector {i}: AUC/FR changed under permutation"));
        }
    }

    let truth = LandmarkSet::new(vec![[10.0, 10.0], [20.0, 5.0]]).unwrap();
    let pred = LandmarkSet::new(vec![[13.0, 14.0], [17.0, 1.0]]).unwrap();
    let me = mean_error(&[pred], &[truth]).map_err(|e| e.to_string())?.me;
    if me != 5.0 {
        return Err(format!("(3,4) offsets give ME {me}, expected 5"));
    }
    let (_, fr) = auc_fr(&[2.0, 0.0, 0.0, 0.0], 1.2).map_err(|e| e.to_string())?;
    if fr != 0.25 {
        return Err(format!("FR of {{2,0,0,0}} at 1.2 is {fr}, expected 0.25"));
    }
    Ok(format!("{vectors} vectors, worst AUC gap {worst:.2e} (tolerance {tol:.2e}); worked examples exact"))
}

/// Zero at identity configurations, shift/scale invariances over random
/// draws.
pub fn loss_identities(draws: usize) -> Check {
    let mut g = rng(3);
    let mut worst_shift = 0.0f32;
    let mut worst_scale = 0.0f32;
    for i in 0..draws {
        let (n, c, d) = (g.gen_range(1..=4), g.gen_range(2..=12), g.gen_range(2..=64));
        let mu = g.gen_range(0.5f32..4.0);
        let heat = random_tensor(&[n, 4, 4, 3], &mut g);
        let l_r = losses::loss_regression(&heat, &heat).map_err(|e| e.to_string())?;
        if l_r != 0.0 {
            return Err(format!("draw {i}: L_R(x, x) = {l_r}"));
        }
        let s = random_tensor(&[n, c], &mut g);
        let l_cd = losses::loss_cd(&s, &s, mu).map_err(|e| e.to_string())?;
        if l_cd != 0.0 {
            return Err(format!("draw {i}: L_CD(s, s) = {l_cd}"));
        }
        let e = random_tensor(&[n, d], &mut g);
        for reduction in [EdReduction::Mean, EdReduction::Sum] {
            let mut identity = e.clone();
            if reduction == EdReduction::Sum {
                // The summed form is zero at alignment only for one sample.
                identity = e.index_outer(0).unwrap().reshape(&[1, d]).unwrap();
            }
            let l_ed = losses::loss_ed(&identity, &identity, reduction).map_err(|e| e.to_string())?.value;
            if l_ed.abs() > 1e-6 {
                return Err(format!("draw {i}: L_ED(e, e) = {l_ed} ({reduction:?})"));
            }
        }

        let t = random_tensor(&[n, c], &mut g);
        let base = losses::loss_cd(&s, &t, mu).map_err(|e| e.to_string())?;
        let shift_s = g.gen_range(-20.0f32..20.0);
        let shift_t = g.gen_range(-20.0f32..20.0);
        let shifted = |x: &Tensor, by: f32| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + by).collect()).unwrap();
        let moved = losses::loss_cd(&shifted(&s, shift_s), &shifted(&t, shift_t), mu).map_err(|e| e.to_string())?;
        worst_shift = worst_shift.max((moved - base).abs());
        if (moved - base).abs() > 1e-6 {
            return Err(format!("draw {i}: L_CD moved {base} → {moved} under a logit shift"));
        }

        let f = random_tensor(&[n, d], &mut g);
        let base = losses::loss_ed(&e, &f, EdReduction::Mean).map_err(|e| e.to_string())?.value;
        let (a, b) = (g.gen_range(0.01f32..100.0), g.gen_range(0.01f32..100.0));
        let scaled = |x: &Tensor, by: f32| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * by).collect()).unwrap();
        let moved = losses::loss_ed(&scaled(&e, a), &scaled(&f, b), EdReduction::Mean).map_err(|e| e.to_string())?.value;
        worst_scale = worst_scale.max((moved - base).abs());
        if (moved - base).abs() > 1e-6 {
            return Err(format!("draw {i}: L_ED moved {base} → {moved} under positive scaling"));
        }
    }
    Ok(format!(
        "{draws} draws; worst CD shift drift {worst_shift:.1e}, worst ED scale drift {worst_scale:.1e}"
    ))
}

/// Gradients of the regularizers with respect to the source-side inputs
/// are absent or identically zero, while the target side does get one.
pub fn stop_gradient(draws: usize) -> Check {
    let mut g = rng(4);
    for i in 0..draws {
        let (n, c, d) = (g.gen_range(1..=4), g.gen_range(2..=10), g.gen_range(2..=32));
        let mut tape = Tape::new();
        let s_logits = tape.variable(random_tensor(&[n, c], &mut g));
        let t_logits = tape.variable(random_tensor(&[n, c], &mut g));
        let s_emb = tape.variable(random_tensor(&[n, d], &mut g));
        let t_emb = tape.variable(random_tensor(&[n, d], &mut g));
        let l_cd = losses::cd(&mut tape, s_logits, t_logits, 2.0).map_err(|e| e.to_string())?;
        let (l_ed, _) = losses::ed(&mut tape, s_emb, t_emb, EdReduction::Mean).map_err(|e| e.to_string())?;
        let total = tape.add(l_cd, l_ed).map_err(|e| e.to_string())?;
        let grads = tape.backward(total).map_err(|e| e.to_string())?;
        for (what, var) in [("source logits", s_logits), ("source embeddings", s_emb)] {
            if let Some(grad) = grads.get(var) {
                if grad.data().iter().any(|&v| v != 0.0) {
                    return Err(format!("draw {i}: non-zero gradient reached the {what}"));
                }
            }
        }
        for (what, var) in [("target logits", t_logits), ("target embeddings", t_emb)] {
            match grads.get(var) {
                Some(grad) if grad.data().iter().any(|&v| v != 0.0) => {}
                _ => return Err(format!("draw {i}: no gradient reached the {what}")),
            }
        }
    }
    Ok(format!("{draws} draws; source-side gradients identically zero"))
}
