//! Training objectives on tape variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Kld,
    Att,
    Hid,
    AttKld,
    IpqSdq,
}

impl LossVariant {
    pub fn needs_teacher(self) -> bool {
        self != LossVariant::Ce
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    /// Drops the `1/d_y` factor from the cross-entropy.
    pub conventional_ce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 100.0,
            tau: 2.0,
            conventional_ce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("loss_config", format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("loss_config", format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("loss_config", format!("tau {} must be finite and > 0", self.tau)));
        }
        Ok(())
    }
}

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} >= classes {classes}")));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `−(1/d_y) Σ y·ln(p)` averaged over rows; `conventional` drops the `1/d_y`.
pub fn cross_entropy<'t, T: Scalar>(probs: &Var<'t, T>, labels: &[usize], conventional: bool) -> Result<Var<'t, T>> {
    let p = probs.value();
    let (rows, classes) = p
        .dims2()
        .ok_or_else(|| Error::invalid("cross_entropy", format!("rank-2 probabilities required, got {:?}", p.shape())))?;
    if rows != labels.len() || rows == 0 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{rows} probability rows for {} labels", labels.len()),
        ));
    }
    for (i, row) in p.data().chunks(classes).enumerate() {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("row {i} is not a probability distribution (sums to {total})"),
            ));
        }
    }
    let y = probs.tape().constant(one_hot(labels, classes)?);
    let per_class = if conventional { 1.0 } else { 1.0 / classes as f64 };
    let loglik = y.mul(&probs.ln(T::from_f64_lossy(LOG_FLOOR)))?.sum();
    Ok(loglik.scale(T::from_f64_lossy(-per_class / rows as f64)))
}

/// `Σ y_T (ln y_T − ln y_S)` averaged over rows.
pub fn kld<'t, T: Scalar>(student: &Var<'t, T>, teacher: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (s, t) = (student.value(), teacher.value());
    if s.shape() != t.shape() || s.rank() != 2 {
        return Err(Error::Shape {
            op: "kld_distill",
            left: s.shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    let rows = s.shape()[0].max(1);
    let floor = T::from_f64_lossy(LOG_FLOOR);
    let gap = teacher.ln(floor).sub(&student.ln(floor))?;
    Ok(teacher.mul(&gap)?.sum().scale(T::from_f64_lossy(1.0 / rows as f64)))
}

/// KL divergence between the temperature-`tau` softmaxes of two logit sets.
pub fn kld_distill<'t, T: Scalar>(
    student_logits: &Var<'t, T>,
    teacher_logits: &Var<'t, T>,
    tau: T,
) -> Result<Var<'t, T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("kld_distill", format!("temperature must be positive, got {tau}")));
    }
    let s = student_logits.softmax(1, tau)?;
    let t = teacher_logits.softmax(1, tau)?;
    kld(&s, &t)
}

/// Mean over all layers and heads of the per-head elementwise MSE.
pub fn attention_distill<'t, T: Scalar>(student: &[Vec<Var<'t, T>>], teacher: &[Vec<Var<'t, T>>]) -> Result<Var<'t, T>> {
    let shape_err = || Error::invalid("attention_distill", "student and teacher traces differ in structure");
    if student.len() != teacher.len() || student.is_empty() {
        return Err(shape_err());
    }
    let mut terms = Vec::new();
    for (ls, lt) in student.iter().zip(teacher) {
        if ls.len() != lt.len() {
            return Err(shape_err());
        }
        for (a, b) in ls.iter().zip(lt) {
            terms.push(a.mse(b)?);
        }
    }
    mean_of(&terms).ok_or_else(shape_err)
}

/// Mean over layers of the elementwise MSE between layer outputs.
pub fn hidden_distill<'t, T: Scalar>(student: &[Var<'t, T>], teacher: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::invalid("hidden_distill", "student and teacher expose different layer counts"));
    }
    let terms = student
        .iter()
        .zip(teacher)
        .map(|(a, b)| a.mse(b))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&terms).ok_or_else(|| Error::invalid("hidden_distill", "no layers"))
}

fn sum_of<'t, T: Scalar>(terms: &[Var<'t, T>]) -> Option<Var<'t, T>> {
    let (first, rest) = terms.split_first()?;
    Some(rest.iter().fold(*first, |acc, t| acc.add(t).expect("scalar terms")))
}

fn mean_of<'t, T: Scalar>(terms: &[Var<'t, T>]) -> Option<Var<'t, T>> {
    sum_of(terms).map(|s| s.scale(T::from_f64_lossy(1.0 / terms.len() as f64)))
}

/// Loss components computed from one batch; distillation terms are optional.
#[derive(Clone, Copy, Debug)]
pub struct Components<'t, T: Scalar> {
    pub ce: Var<'t, T>,
    pub kld: Option<Var<'t, T>>,
    pub att: Option<Var<'t, T>>,
    pub hid: Option<Var<'t, T>>,
}

pub fn compose_sdq<'t, T: Scalar>(variant: LossVariant, c: &Components<'t, T>, config: &LossConfig) -> Result<Var<'t, T>> {
    config.validate()?;
    let need = |v: Option<Var<'t, T>>, what: &str| {
        v.ok_or_else(|| Error::invalid("compose_sdq", format!("{variant:?} needs a {what} term (is a teacher configured?)")))
    };
    let kld_weight = T::from_f64_lossy(f64::from(config.alpha) * f64::from(config.tau).powi(2));
    let beta = T::from_f64_lossy(f64::from(config.beta));
    match variant {
        LossVariant::Ce => Ok(c.ce),
        LossVariant::Kld => c.ce.add(&need(c.kld, "kld")?.scale(kld_weight)),
        LossVariant::Att => c.ce.add(&need(c.att, "attention")?.scale(beta)),
        LossVariant::Hid => c.ce.add(&need(c.hid, "hidden-state")?.scale(beta)),
        LossVariant::AttKld => c
            .ce
            .add(&need(c.kld, "kld")?.scale(kld_weight))?
            .add(&need(c.att, "attention")?.scale(beta)),
        LossVariant::IpqSdq => Err(Error::invalid("compose_sdq", "use sdq_ipq_loss for the iPQ objective")),
    }
}

/// Terms of one codebook-quantized layer.
pub struct IpqLayer<'a, 't, T: Scalar> {
    /// `(W, W̃)` for every quantized matrix of the layer.
    pub weights: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub student_att: &'a [Var<'t, T>],
    pub teacher_att: &'a [Var<'t, T>],
}

/// `Σ_l [Σ ‖W − W̃‖² + β/(L−F) Σ_h MSE(A^S_lh, A^T_lh)]` over the `L − F`
/// quantized layers. With nothing quantized the result is a zero constant.
pub fn sdq_ipq_loss<'t, T: Scalar>(
    tape: &'t crate::tensor::Tape<T>,
    layers: &[IpqLayer<'_, 't, T>],
    beta: f32,
    total_layers: usize,
    finetuned: usize,
) -> Result<Var<'t, T>> {
    if finetuned > total_layers || layers.len() != total_layers - finetuned {
        return Err(Error::invalid(
            "sdq_ipq_loss",
            format!(
                "expected {} quantized layers (L = {total_layers}, F = {finetuned}), got {}",
                total_layers.saturating_sub(finetuned),
                layers.len()
            ),
        ));
    }
    if layers.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let att_weight = T::from_f64_lossy(f64::from(beta) / layers.len() as f64);
    let mut terms = Vec::new();
    for layer in layers {
        for (w, approx) in &layer.weights {
            let d = w.sub(approx)?;
            terms.push(d.mul(&d)?.sum());
        }
        if layer.student_att.len() != layer.teacher_att.len() {
            return Err(Error::invalid("sdq_ipq_loss", "attention traces differ in head count"));
        }
        for (a, b) in layer.student_att.iter().zip(layer.teacher_att) {
            terms.push(a.mse(b)?.scale(att_weight));
        }
    }
    Ok(sum_of(&terms).unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::<f64>::new();
        let exact = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        assert_eq!(cross_entropy(&exact, &[0], false).unwrap().value().item(), Some(0.0));
        let half = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let v = cross_entropy(&half, &[0], false).unwrap().value().item().unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-12);
        let conv = cross_entropy(&half, &[0], true).unwrap().value().item().unwrap();
        assert!((conv - 2f64.ln()).abs() < 1e-12);
        let better = tape.constant(t(&[1, 2], &[0.7, 0.3]));
        assert!(cross_entropy(&better, &[0], false).unwrap().value().item().unwrap() < v);
        let bad = tape.constant(t(&[1, 2], &[0.7, 0.7]));
        assert!(cross_entropy(&bad, &[0], false).is_err());
    }

    #[test]
    fn kld_cases() {
        let tape = Tape::<f64>::new();
        let yt = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let ys = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let v = kld(&ys, &yt).unwrap().value().item().unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kld(&ys, &ys).unwrap().value().item(), Some(0.0));
        let z = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        assert!(kld_distill(&z, &z, 0.0).is_err());
    }

    #[test]
    fn kld_gradient_is_scaled_probability_gap() {
        let tape = Tape::<f64>::new();
        let zs = tape.leaf(t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, -0.5]));
        let zt = tape.constant(t(&[2, 3], &[1.0, 0.0, 0.2, -2.0, 1.0, 0.4]));
        let tau = 2.0;
        let loss = kld_distill(&zs, &zt, tau).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ps = zs.softmax(1, tau).unwrap().value();
        let pt = zt.softmax(1, tau).unwrap().value();
        for i in 0..6 {
            // sum over 2 rows is averaged, hence the factor 2
            let g = grads.wrt(&zs).data()[i] * tau * 2.0;
            assert!((g - (ps.data()[i] - pt.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_and_hidden_averaging() {
        let tape = Tape::<f64>::new();
        let base = || tape.constant(t(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let shifted = tape.constant(t(&[1, 2, 2], &[0.6, 0.7, 0.8, 0.9]));
        let s = vec![vec![shifted, base()], vec![base(), base()]];
        let te = vec![vec![base(), base()], vec![base(), base()]];
        let v = attention_distill(&s, &te).unwrap().value().item().unwrap();
        assert!((v - 0.25 / 4.0).abs() < 1e-12);
        let single = attention_distill(&[vec![shifted]], &[vec![base()]]).unwrap();
        assert!((single.value().item().unwrap() - 0.25).abs() < 1e-12);
        assert!(attention_distill(&s[..1], &te).is_err());

        let h = hidden_distill(&[shifted, base()], &[base(), base()]).unwrap();
        assert!((h.value().item().unwrap() - 0.25 / 2.0).abs() < 1e-12);
        let neg = tape.constant(t(&[1, 2, 2], &[-0.4, -0.3, -0.2, -0.1]));
        let h2 = hidden_distill(&[neg, base()], &[base(), base()]).unwrap();
        assert!((h2.value().item().unwrap() - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn composition_arithmetic() {
        let tape = Tape::<f64>::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let parts = Components {
            ce: c(1.0),
            kld: Some(c(0.1)),
            att: Some(c(0.01)),
            hid: Some(c(0.5)),
        };
        let cfg = LossConfig {
            alpha: 0.5,
            beta: 10.0,
            tau: 2.0,
            ..LossConfig::default()
        };
        let total = compose_sdq(LossVariant::AttKld, &parts, &cfg).unwrap();
        assert!((total.value().item().unwrap() - 1.3).abs() < 1e-12);
        let hid = compose_sdq(LossVariant::Hid, &parts, &cfg).unwrap();
        assert!((hid.value().item().unwrap() - 6.0).abs() < 1e-12);
        let zero = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg.clone()
        };
        for v in [LossVariant::Ce, LossVariant::Kld, LossVariant::Att, LossVariant::AttKld] {
            assert_eq!(compose_sdq(v, &parts, &zero).unwrap().value().item(), Some(1.0));
        }
        let bare = Components {
            kld: None,
            ..parts
        };
        assert!(compose_sdq(LossVariant::Kld, &bare, &cfg).is_err());
        let bad = LossConfig { alpha: 1.5, ..cfg };
        assert!(compose_sdq(LossVariant::Ce, &parts, &bad).is_err());
    }

    #[test]
    fn ipq_objective() {
        let tape = Tape::<f64>::new();
        let w = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let approx = tape.constant(t(&[1, 2], &[0.0, 3.0]));
        let a = vec![tape.constant(t(&[1, 1, 1], &[0.5]))];
        let b = vec![tape.constant(t(&[1, 1, 1], &[0.0]))];
        let layer = |beta| {
            sdq_ipq_loss(
                &tape,
                &[IpqLayer {
                    weights: vec![(w, approx)],
                    student_att: &a,
                    teacher_att: &b,
                }],
                beta,
                2,
                1,
            )
            .unwrap()
            .value()
            .item()
            .unwrap()
        };
        assert!((layer(0.0) - 2.0).abs() < 1e-12);
        assert!((layer(1.0) - 2.25).abs() < 1e-12);
        assert!((layer(2.0) - 2.5).abs() < 1e-12);
        let none = sdq_ipq_loss::<f64>(&tape, &[], 1.0, 2, 2).unwrap();
        assert_eq!(none.value().item(), Some(0.0));
        assert!(sdq_ipq_loss::<f64>(&tape, &[], 1.0, 2, 1).is_err());
    }
}
