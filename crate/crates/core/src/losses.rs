//! Training objectives.
//!
//! Every loss has a plain function returning its value and a tape variant
//! recording a fused operator with an analytic backward. The regularizers
//! take the source model's outputs as stop-gradient inputs: the source runs
//! in inference mode and never receives a gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::kernels::softmax_row_in_place;
use crate::tensorcore::{CustomOp, Tape, Tensor, Var};

/// Which cross-task regularizer feeds `L_D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    None,
    Cd,
    Ed,
    Com,
}

impl RegMode {
    pub fn uses_cd(self) -> bool {
        matches!(self, RegMode::Cd | RegMode::Com)
    }

    pub fn uses_ed(self) -> bool {
        matches!(self, RegMode::Ed | RegMode::Com)
    }
}

/// Batch reduction of the embedding-alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdReduction {
    /// `1 − mean_i cos_i`: zero at perfect alignment for any batch size.
    #[default]
    Mean,
    /// `1 − Σ_i cos_i`, the unnormalised form.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f32,
    pub mu: f32,
    pub mode: RegMode,
    #[serde(default)]
    pub ed_reduction: EdReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.002,
            mu: 2.0,
            mode: RegMode::None,
            ed_reduction: EdReduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        check_mu(self.mu)
    }
}

fn check_mu(mu: f32) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::config(format!("temperature mu must be > 0, got {mu}")));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn batch_rows<'a>(t: &'a Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(Error::shape(format!("{what} must be [N, D], got {:?}", t.shape()))),
    }
}

/// Combined objective `L_R + λ·L_D`.
pub fn loss_total(l_r: f32, l_d: f32, lambda: f32) -> f32 {
    l_r + lambda * l_d
}

// ---------------------------------------------------------------------------
// Heatmap regression

/// Squared Frobenius distance per sample, averaged over the batch (leading
/// axis) only.
pub fn loss_regression(pred: &Tensor, target: &Tensor) -> Result<f32> {
    same_shape(pred, target, "regression loss")?;
    let n = pred.shape()[0] as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = (*p - *t) as f64;
            d * d
        })
        .sum();
    Ok((total / n) as f32)
}

struct RegressionOp {
    target: Tensor,
}

impl CustomOp for RegressionOp {
    fn name(&self) -> &'static str {
        "loss_regression"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let pred = inputs[0];
        let scale = 2.0 * g.item()? / pred.shape()[0] as f32;
        let data = pred
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(p, t)| scale * (p - t))
            .collect();
        Ok(vec![Some(Tensor::new(pred.shape().to_vec(), data)?)])
    }
}

pub fn regression(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let value = loss_regression(tape.value(pred), target)?;
    let op = RegressionOp {
        target: target.clone(),
    };
    Ok(tape.custom(vec![pred], &[], Tensor::scalar(value), Box::new(op)))
}

// ---------------------------------------------------------------------------
// Classifier-output distillation

fn softmax_rows(logits: &Tensor, mu: f32) -> Vec<f32> {
    let c = logits.shape()[1];
    let mut p = logits.data().to_vec();
    for row in p.chunks_exact_mut(c) {
        softmax_row_in_place(row, mu);
    }
    p
}

/// `(1/N)·Σ_i ‖softmax(s_i/μ) − softmax(t_i/μ)‖²`.
pub fn loss_cd(source_logits: &Tensor, target_logits: &Tensor, mu: f32) -> Result<f32> {
    check_mu(mu)?;
    same_shape(source_logits, target_logits, "classifier distillation")?;
    let (n, _) = batch_rows(target_logits, "logits")?;
    let ps = softmax_rows(source_logits, mu);
    let pt = softmax_rows(target_logits, mu);
    let total: f64 = ps
        .iter()
        .zip(&pt)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok((total / n as f64) as f32)
}

struct CdOp {
    mu: f32,
}

impl CustomOp for CdOp {
    fn name(&self) -> &'static str {
        "loss_cd"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (target, source) = (inputs[0], inputs[1]);
        let (n, c) = batch_rows(target, "logits")?;
        let pt = softmax_rows(target, self.mu);
        let ps = softmax_rows(source, self.mu);
        let scale = 2.0 * g.item()? / n as f32;
        let mut dz = vec![0.0; n * c];
        for i in 0..n {
            let row = i * c..(i + 1) * c;
            let p = &pt[row.clone()];
            let dp: Vec<f32> = p
                .iter()
                .zip(&ps[row.clone()])
                .map(|(a, b)| scale * (a - b))
                .collect();
            let dot: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (j, d) in dz[row].iter_mut().enumerate() {
                *d = p[j] * (dp[j] - dot) / self.mu;
            }
        }
        Ok(vec![Some(Tensor::new(target.shape().to_vec(), dz)?), None])
    }
}

/// Records `loss_cd`; gradients flow into `target_logits` only.
pub fn cd(tape: &mut Tape, source_logits: Var, target_logits: Var, mu: f32) -> Result<Var> {
    let value = loss_cd(tape.value(source_logits), tape.value(target_logits), mu)?;
    Ok(tape.custom(
        vec![target_logits, source_logits],
        &[source_logits],
        Tensor::scalar(value),
        Box::new(CdOp { mu }),
    ))
}

// ---------------------------------------------------------------------------
// Embedding alignment

/// Value of the embedding-alignment loss plus the samples whose cosine was
/// undefined (a zero-norm embedding) and was taken as 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdValue {
    pub value: f32,
    pub zero_norm: Vec<bool>,
}

fn cosines(source: &Tensor, target: &Tensor) -> Result<(Vec<f64>, Vec<bool>)> {
    same_shape(source, target, "embedding alignment")?;
    let (n, d) = batch_rows(target, "embeddings")?;
    let mut cos = Vec::with_capacity(n);
    let mut zero = Vec::with_capacity(n);
    for i in 0..n {
        let s = &source.data()[i * d..(i + 1) * d];
        let t = &target.data()[i * d..(i + 1) * d];
        let dot: f64 = s.iter().zip(t).map(|(a, b)| *a as f64 * *b as f64).sum();
        let ns: f64 = s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let nt: f64 = t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if ns == 0.0 || nt == 0.0 {
            cos.push(0.0);
            zero.push(true);
        } else {
            cos.push(dot / (ns * nt));
            zero.push(false);
        }
    }
    Ok((cos, zero))
}

pub fn loss_ed(source: &Tensor, target: &Tensor, reduction: EdReduction) -> Result<EdValue> {
    let (cos, zero_norm) = cosines(source, target)?;
    let sum: f64 = cos.iter().sum();
    let value = match reduction {
        EdReduction::Mean => 1.0 - sum / cos.len() as f64,
        EdReduction::Sum => 1.0 - sum,
    };
    Ok(EdValue {
        value: value as f32,
        zero_norm,
    })
}

struct EdOp {
    reduction: EdReduction,
}

impl CustomOp for EdOp {
    fn name(&self) -> &'static str {
        "loss_ed"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (target, source) = (inputs[0], inputs[1]);
        let (n, d) = batch_rows(target, "embeddings")?;
        let weight = match self.reduction {
            EdReduction::Mean => g.item()? as f64 / n as f64,
            EdReduction::Sum => g.item()? as f64,
        };
        let mut dt = vec![0.0f32; n * d];
        for i in 0..n {
            let row = i * d..(i + 1) * d;
            let s = &source.data()[row.clone()];
            let t = &target.data()[row.clone()];
            let dot: f64 = s.iter().zip(t).map(|(a, b)| *a as f64 * *b as f64).sum();
            let ns: f64 = s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let nt2: f64 = t.iter().map(|v| (*v as f64).powi(2)).sum();
            let nt = nt2.sqrt();
            if ns == 0.0 || nt == 0.0 {
                continue;
            }
            let cos = dot / (ns * nt);
            for (j, out) in dt[row].iter_mut().enumerate() {
                let dcos = s[j] as f64 / (ns * nt) - cos * t[j] as f64 / nt2;
                *out = (-weight * dcos) as f32;
            }
        }
        Ok(vec![Some(Tensor::new(target.shape().to_vec(), dt)?), None])
    }
}

/// Records `loss_ed`; gradients flow into `target` embeddings only.
pub fn ed(tape: &mut Tape, source: Var, target: Var, reduction: EdReduction) -> Result<(Var, EdValue)> {
    let value = loss_ed(tape.value(source), tape.value(target), reduction)?;
    let var = tape.custom(
        vec![target, source],
        &[source],
        Tensor::scalar(value.value),
        Box::new(EdOp { reduction }),
    );
    Ok((var, value))
}

// ---------------------------------------------------------------------------
// Source classification

/// Mean softmax cross-entropy of `[N, C]` logits against class indices.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, c) = batch_rows(logits, "logits")?;
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(Error::shape(format!(
            "labels {labels:?} do not match {n} rows of {c} classes"
        )));
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
        total += lse - row[label] as f64;
    }
    Ok((total / n as f64) as f32)
}

struct CrossEntropyOp {
    labels: Vec<usize>,
}

impl CustomOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let (n, _) = batch_rows(logits, "logits")?;
        let mut p = softmax_rows(logits, 1.0);
        let c = logits.shape()[1];
        let scale = g.item()? / n as f32;
        for (i, &label) in self.labels.iter().enumerate() {
            p[i * c + label] -= 1.0;
        }
        p.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::new(logits.shape().to_vec(), p)?)])
    }
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let value = loss_cross_entropy(tape.value(logits), labels)?;
    let op = CrossEntropyOp {
        labels: labels.to_vec(),
    };
    Ok(tape.custom(vec![logits], &[], Tensor::scalar(value), Box::new(op)))
}
