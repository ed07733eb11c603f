//! Independent reference implementations used as test oracles.
//!
//! Everything here is written from the definitions with naive loops in f64
//! and shares no code with the library kernels.

#![allow(dead_code)]

pub mod checks;

use crosstask::tensorcore::{CustomOp, Tape, Tensor, Var};
use crosstask::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense f64 array with an NHWC-style row-major shape.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn dot(&self, other: &Arr) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Values bounded away from zero (keeps ReLU kinks out of the
/// finite-difference stencil).
pub fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Reference forward passes

/// `y[n,oy,ox,co] = b[co] + Σ x[n, oy·s−p+ky, ox·s−p+kx, ci] · w[co,ky,kx,ci]`
pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, s: usize, p: usize) -> Arr {
    let (n, h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, kh, kw) = (w.shape[0], w.shape[1], w.shape[2]);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wd + 2 * p - kw) / s + 1;
    let mut y = Arr::zeros(&[n, oh, ow, co]);
    for b_ in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = b.data[o];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.data[((b_ * h + iy as usize) * wd + ix as usize) * ci + c]
                                    * w.data[((o * kh + ky) * kw + kx) * ci + c];
                            }
                        }
                    }
                    y.data[((b_ * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    y
}

/// Scatter form of the transposed convolution:
/// `y[n, iy·s−p+ky, ix·s−p+kx, co] += x[n,iy,ix,ci] · w[ci,ky,kx,co]`.
pub fn deconv2d(x: &Arr, w: &Arr, b: &Arr, s: usize, p: usize) -> Arr {
    let (n, h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, co) = (w.shape[1], w.shape[2], w.shape[3]);
    let oh = (h - 1) * s + kh - 2 * p;
    let ow = (wd - 1) * s + kw - 2 * p;
    let mut y = Arr::zeros(&[n, oh, ow, co]);
    for (i, v) in y.data.iter_mut().enumerate() {
        *v = b.data[i % co];
    }
    for b_ in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                for c in 0..ci {
                    let xv = x.data[((b_ * h + iy) * wd + ix) * ci + c];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let oy = (iy * s + ky) as isize - p as isize;
                            let ox = (ix * s + kx) as isize - p as isize;
                            if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                continue;
                            }
                            for o in 0..co {
                                y.data[((b_ * oh + oy as usize) * ow + ox as usize) * co + o] +=
                                    xv * w.data[((c * kh + ky) * kw + kx) * co + o];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// `y[n,c] = Σ_j w[c,j] x[n,j] + b[c]`
pub fn dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, d) = (x.shape[0], x.shape[1]);
    let c = w.shape[0];
    let mut y = Arr::zeros(&[n, c]);
    for i in 0..n {
        for o in 0..c {
            y.data[i * c + o] = b.data[o] + (0..d).map(|j| w.data[o * d + j] * x.data[i * d + j]).sum::<f64>();
        }
    }
    y
}

pub fn relu(x: &Arr) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let (n, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut y = Arr::zeros(&[n, c]);
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                y.data[b * c + ch] += x.data[(b * h * w + p) * c + ch] / (h * w) as f64;
            }
        }
    }
    y
}

fn softmax_row(row: &[f64], mu: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / mu).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Row-wise `softmax(x / μ)` over the last axis.
pub fn softmax_t(x: &Arr, mu: f64) -> Arr {
    let c = *x.shape.last().unwrap();
    Arr {
        shape: x.shape.clone(),
        data: x.data.chunks(c).flat_map(|r| softmax_row(r, mu)).collect(),
    }
}

pub fn scalar(v: f64) -> Arr {
    Arr {
        shape: vec![1],
        data: vec![v],
    }
}

/// `(1/N) Σ_i ‖G_i − P_i‖²_F`
pub fn loss_regression(pred: &Arr, target: &Arr) -> f64 {
    let n = pred.shape[0] as f64;
    pred.data.iter().zip(&target.data).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n
}

/// `(1/N) Σ_i ‖softmax(s_i/μ) − softmax(t_i/μ)‖²`
pub fn loss_cd(source: &Arr, target: &Arr, mu: f64) -> f64 {
    let n = source.shape[0] as f64;
    let (ps, pt) = (softmax_t(source, mu), softmax_t(target, mu));
    ps.data.iter().zip(&pt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

fn cosines(source: &Arr, target: &Arr) -> Vec<f64> {
    let d = source.shape[1];
    source
        .data
        .chunks(d)
        .zip(target.data.chunks(d))
        .map(|(s, t)| {
            let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
            let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ns == 0.0 || nt == 0.0 { 0.0 } else { dot / (ns * nt) }
        })
        .collect()
}

/// `1 − mean_i cos(s_i, t_i)`
pub fn loss_ed_mean(source: &Arr, target: &Arr) -> f64 {
    let c = cosines(source, target);
    1.0 - c.iter().sum::<f64>() / c.len() as f64
}

/// `1 − Σ_i cos(s_i, t_i)`
pub fn loss_ed_sum(source: &Arr, target: &Arr) -> f64 {
    1.0 - cosines(source, target).iter().sum::<f64>()
}

/// `−(1/N) Σ_i log softmax(z_i)[y_i]`
pub fn loss_cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let c = logits.shape[1];
    logits
        .data
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| -softmax_row(row, 1.0)[y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

// ---------------------------------------------------------------------------
// Finite-difference harness

/// `Σ r ⊙ x` as a tape operator, turning any tensor output into a scalar.
struct Project(Tensor);

impl CustomOp for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_output.item()?;
        let data = self.0.data().iter().map(|v| v * g).collect();
        Ok(vec![Some(Tensor::new(self.0.shape().to_vec(), data)?)])
    }
}

pub fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Var {
    let value: f32 = tape.value(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    tape.custom(vec![x], &[], Tensor::scalar(value), Box::new(Project(r.clone())))
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Worst relative error over the checked inputs.
    pub rel_error: f64,
    /// Worst forward mismatch against the reference.
    pub forward_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_error < FD_TOLERANCE && self.forward_error < 1e-4
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 { diff } else { diff / scale }
}

/// Compare tape gradients of `Σ r ⊙ op(inputs)` with central differences of
/// the f64 reference `reference(inputs)`.
///
/// `checked` lists which inputs are differentiated; inputs listed in
/// `source_side` are recorded as tape variables too and must receive no
/// gradient at all.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    checked: &[usize],
    source_side: &[usize],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    reference: &dyn Fn(&[Arr]) -> Arr,
    seed: u64,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if checked.contains(&i) || source_side.contains(&i) {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars).expect("forward failed");
    let out_value = tape.value(out).clone();
    let r = random_tensor(out_value.shape(), &mut rng(seed ^ 0xabcd));
    let loss = project(&mut tape, out, &r);
    let grads = tape.backward(loss).expect("backward failed");

    let arrs: Vec<Arr> = inputs.iter().map(Arr::from_tensor).collect();
    let r64 = Arr::from_tensor(&r);
    let ref_out = reference(&arrs);
    assert_eq!(ref_out.shape.iter().product::<usize>(), out_value.len(), "{name}: reference shape");
    let forward_error = ref_out
        .data
        .iter()
        .zip(out_value.data())
        .map(|(a, &b)| (a - b as f64).abs() / (1.0 + a.abs()))
        .fold(0.0, f64::max);

    let mut worst = 0.0f64;
    for &i in checked {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut probe = arrs.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = arrs[i].data[j];
            probe[i].data[j] = orig + FD_STEP;
            let plus = reference(&probe).dot(&r64);
            probe[i].data[j] = orig - FD_STEP;
            let minus = reference(&probe).dot(&r64);
            probe[i].data[j] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    for &i in source_side {
        if let Some(g) = grads.get(vars[i]) {
            if g.data().iter().any(|&v| v != 0.0) {
                worst = f64::INFINITY;
            }
        }
    }
    GradCheck {
        name: name.to_string(),
        rel_error: worst,
        forward_error,
    }
}

/// Random small configuration of every differentiable op and loss for one
/// seed.
pub fn check_all(seed: u64) -> Vec<GradCheck> {
    let mut g = rng(seed);
    let mut out = Vec::new();

    // conv2d
    {
        let k = g.gen_range(1..=3);
        let s = g.gen_range(1..=2);
        let p = g.gen_range(0..k);
        let (n, h, w) = (g.gen_range(1..=2), g.gen_range(k..=5), g.gen_range(k..=5));
        let (ci, co) = (g.gen_range(1..=3), g.gen_range(1..=3));
        let inputs = vec![
            random_tensor(&[n, h, w, ci], &mut g),
            random_tensor(&[co, k, k, ci], &mut g),
            random_tensor(&[co], &mut g),
        ];
        out.push(check_op(
            "conv2d",
            &inputs,
            &[0, 1, 2],
            &[],
            &|t, v| t.conv2d(v[0], v[1], v[2], s, p),
            &|a| conv2d(&a[0], &a[1], &a[2], s, p),
            seed,
        ));
    }
    // deconv2d, including the decoder's 4×4 stride-2 pad-1 shape
    for (k, s, p) in [(4, 2, 1), (g.gen_range(1..=3), g.gen_range(1..=3), 0)] {
        let (n, h, w) = (g.gen_range(1..=2), g.gen_range(1..=3), g.gen_range(1..=3));
        let (ci, co) = (g.gen_range(1..=3), g.gen_range(1..=3));
        let inputs = vec![
            random_tensor(&[n, h, w, ci], &mut g),
            random_tensor(&[ci, k, k, co], &mut g),
            random_tensor(&[co], &mut g),
        ];
        out.push(check_op(
            "deconv2d",
            &inputs,
            &[0, 1, 2],
            &[],
            &|t, v| t.deconv2d(v[0], v[1], v[2], s, p),
            &|a| deconv2d(&a[0], &a[1], &a[2], s, p),
            seed,
        ));
    }
    // dense
    {
        let (n, d, c) = (g.gen_range(1..=3), g.gen_range(1..=5), g.gen_range(1..=4));
        let inputs = vec![
            random_tensor(&[n, d], &mut g),
            random_tensor(&[c, d], &mut g),
            random_tensor(&[c], &mut g),
        ];
        out.push(check_op(
            "dense",
            &inputs,
            &[0, 1, 2],
            &[],
            &|t, v| t.dense(v[0], v[1], v[2]),
            &|a| dense(&a[0], &a[1], &a[2]),
            seed,
        ));
    }
    let shape = [g.gen_range(1..=2), g.gen_range(1..=3), g.gen_range(1..=3), g.gen_range(1..=3)];
    out.push(check_op(
        "relu",
        &[random_off_zero(&shape, &mut g)],
        &[0],
        &[],
        &|t, v| Ok(t.relu(v[0])),
        &|a| relu(&a[0]),
        seed,
    ));
    out.push(check_op(
        "add",
        &[random_tensor(&shape, &mut g), random_tensor(&shape, &mut g)],
        &[0, 1],
        &[],
        &|t, v| t.add(v[0], v[1]),
        &|a| add(&a[0], &a[1]),
        seed,
    ));
    out.push(check_op(
        "global_avg_pool",
        &[random_tensor(&shape, &mut g)],
        &[0],
        &[],
        &|t, v| t.global_avg_pool(v[0]),
        &|a| global_avg_pool(&a[0]),
        seed,
    ));
    let mu: f32 = g.gen_range(0.5..3.0);
    let rows = [g.gen_range(1..=3), g.gen_range(2..=5)];
    out.push(check_op(
        "softmax_t",
        &[random_tensor(&rows, &mut g)],
        &[0],
        &[],
        &|t, v| t.softmax_t(v[0], mu),
        &|a| softmax_t(&a[0], mu as f64),
        seed,
    ));
    out.push(check_op(
        "sum",
        &[random_tensor(&shape, &mut g)],
        &[0],
        &[],
        &|t, v| Ok(t.sum(v[0])),
        &|a| scalar(a[0].data.iter().sum()),
        seed,
    ));
    let factor: f32 = g.gen_range(-2.0..2.0);
    out.push(check_op(
        "scale",
        &[random_tensor(&shape, &mut g)],
        &[0],
        &[],
        &|t, v| Ok(t.scale(v[0], factor)),
        &|a| Arr {
            shape: a[0].shape.clone(),
            data: a[0].data.iter().map(|x| x * factor as f64).collect(),
        },
        seed,
    ));
    out.extend(check_losses(seed, &mut g));
    out
}

fn check_losses(seed: u64, g: &mut ChaCha8Rng) -> Vec<GradCheck> {
    use crosstask::losses::{self, EdReduction};
    let mut out = Vec::new();
    let hm = [g.gen_range(1..=3), g.gen_range(1..=3), g.gen_range(1..=3), g.gen_range(1..=3)];
    let target = random_tensor(&hm, g);
    {
        let target = target.clone();
        out.push(check_op(
            "L_R",
            &[random_tensor(&hm, g), target.clone()],
            &[0],
            &[],
            &move |t, v| losses::regression(t, v[0], &target),
            &|a| scalar(loss_regression(&a[0], &a[1])),
            seed,
        ));
    }
    let n = g.gen_range(1..=3);
    let c = g.gen_range(2..=5);
    let d = g.gen_range(2..=6);
    let mu: f32 = g.gen_range(0.5..3.0);
    out.push(check_op(
        "L_CD",
        &[random_tensor(&[n, c], g), random_tensor(&[n, c], g)],
        &[1],
        &[0],
        &|t, v| losses::cd(t, v[0], v[1], mu),
        &|a| scalar(loss_cd(&a[0], &a[1], mu as f64)),
        seed,
    ));
    for (name, red) in [("L_ED(mean)", EdReduction::Mean), ("L_ED(sum)", EdReduction::Sum)] {
        out.push(check_op(
            name,
            &[random_tensor(&[n, d], g), random_tensor(&[n, d], g)],
            &[1],
            &[0],
            &|t, v| Ok(losses::ed(t, v[0], v[1], red)?.0),
            &|a| {
                scalar(match red {
                    EdReduction::Mean => loss_ed_mean(&a[0], &a[1]),
                    EdReduction::Sum => loss_ed_sum(&a[0], &a[1]),
                })
            },
            seed,
        ));
    }
    let labels: Vec<usize> = (0..n).map(|_| g.gen_range(0..c)).collect();
    {
        let labels = labels.clone();
        let labels2 = labels.clone();
        out.push(check_op(
            "cross_entropy",
            &[random_tensor(&[n, c], g)],
            &[0],
            &[],
            &move |t, v| losses::cross_entropy(t, v[0], &labels),
            &move |a| scalar(loss_cross_entropy(&a[0], &labels2)),
            seed,
        ));
    }
    // The combined objective with both regularizers: L_R + λ (L_CD + L_ED). λ is enlarged so
    // the regularizer gradients are not swamped by L_R's.
    let lambda: f32 = g.gen_range(0.1..1.0);
    {
        let target = target.clone();
        let target2 = target.clone();
        out.push(check_op(
            "L_total",
            &[
                random_tensor(&hm, g),
                random_tensor(&[n, c], g),
                random_tensor(&[n, c], g),
                random_tensor(&[n, d], g),
                random_tensor(&[n, d], g),
            ],
            &[0, 2, 4],
            &[1, 3],
            &move |t, v| {
                let l_r = losses::regression(t, v[0], &target)?;
                let l_cd = losses::cd(t, v[1], v[2], mu)?;
                let (l_ed, _) = losses::ed(t, v[3], v[4], EdReduction::Mean)?;
                let reg = t.add(l_cd, l_ed)?;
                let reg = t.scale(reg, lambda);
                t.add(l_r, reg)
            },
            &move |a| {
                let t64 = Arr::from_tensor(&target2);
                scalar(
                    loss_regression(&a[0], &t64)
                        + lambda as f64 * (loss_cd(&a[1], &a[2], mu as f64) + loss_ed_mean(&a[3], &a[4])),
                )
            },
            seed,
        ));
    }
    out
}
