//! Sign-gradient attacks on continuous inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttackConfig, AttackMode};
use crate::autodiff::{Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::{Pipeline, Transform};
use crate::tensor::Tensor;

/// Something that returns a summed loss and its gradient with respect to a
/// raw input batch.
pub trait InputGradient {
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

impl InputGradient for Model {
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.input_gradient(x, labels)
    }
}

impl<F> InputGradient for F
where
    F: Fn(&Tensor, &[usize]) -> Result<(f64, Tensor)>,
{
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self(x, labels)
    }
}

/// A model behind a pipeline of differentiable stages, seen by an attacker
/// who may differentiate through all of it.
#[derive(Clone, Copy, Debug)]
pub struct WhiteBox<'a> {
    model: &'a Model,
    pipeline: Option<&'a Pipeline>,
}

impl<'a> WhiteBox<'a> {
    /// Fails when `mode` hides the pipeline or when a stage has no useful
    /// derivative (quantization and encodings).
    pub fn new(model: &'a Model, pipeline: Option<&'a Pipeline>, mode: AttackMode) -> Result<Self> {
        let pipeline = pipeline.filter(|p| !p.is_empty());
        match (mode, pipeline) {
            (AttackMode::Blind, Some(_)) => {
                return Err(Error::Unsupported(
                    "no input gradient crosses a blind pre-processing boundary".into(),
                ))
            }
            (AttackMode::Bpda, _) => {
                return Err(Error::Unsupported("surrogate gradients go through bpda_attack".into()))
            }
            _ => {}
        }
        if let Some(p) = pipeline {
            if p.levels().is_some() {
                return Err(Error::Unsupported(
                    "quantized pipelines are not differentiable; use lspga or bpda".into(),
                ));
            }
        }
        Ok(WhiteBox { model, pipeline })
    }
}

/// Records the continuous stages of `transforms` on `g`.
pub(crate) fn record_continuous(g: &mut Graph, transforms: &[Transform], mut x: Var) -> Result<Var> {
    for t in transforms {
        x = match *t {
            Transform::TanhFilter { scale } => {
                let (lo, hi) = ((-scale * 0.5).tanh(), (scale * 0.5).tanh());
                let y = g.affine(x, scale, -scale * 0.5);
                let y = g.tanh(y);
                g.affine(y, 1.0 / (hi - lo), -lo / (hi - lo))
            }
            Transform::SigmoidFilter { scale } => {
                let s = |v: f64| 1.0 / (1.0 + (-v).exp());
                let (lo, hi) = (s(-scale * 0.5), s(scale * 0.5));
                let y = g.affine(x, scale, -scale * 0.5);
                let y = g.sigmoid(y);
                g.affine(y, 1.0 / (hi - lo), -lo / (hi - lo))
            }
            Transform::BatchNorm { eps } => g.batch_norm(x, eps),
            Transform::MaxSmooth { window } => g.smooth(x, crate::autodiff::kernels::WindowReduce::Max, window)?,
            Transform::AvgSmooth { window } => g.smooth(x, crate::autodiff::kernels::WindowReduce::Mean, window)?,
            _ => return Err(Error::Unsupported(format!("{t:?} has no useful derivative"))),
        };
    }
    Ok(x)
}

impl InputGradient for WhiteBox<'_> {
    fn loss_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let stages = self.pipeline.map_or(&[][..], |p| p.transforms());
        let z = record_continuous(&mut g, stages, xv)?;
        let (logits, _) = self.model.forward(&mut g, z, false)?;
        let loss = g.softmax_cross_entropy_with(logits, labels, Reduction::Sum)?;
        g.backward(loss)?;
        let grad = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((g.value(loss).item()?, grad))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp(x + eps * sign(grad), 0, 1)`.
pub fn fgsm(target: &impl InputGradient, batch: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let (_, grad) = target.loss_gradient(batch, labels)?;
    batch.zip_map(&grad, |x, g| (x + epsilon * sign(g)).clamp(0.0, 1.0))
}

/// Iterated sign-gradient ascent projected onto the clipped ball around
/// `batch`, optionally from a uniform random start.
pub fn pgd_continuous(
    target: &impl InputGradient,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    pgd_with(target, batch, labels, cfg, cfg.seed, |_| {})
}

pub(crate) fn pgd_with(
    target: &impl InputGradient,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    mut observe: impl FnMut(&Tensor),
) -> Result<Tensor> {
    let eps = cfg.epsilon;
    let lo = batch.map(|x| (x - eps).max(0.0));
    let hi = batch.map(|x| (x + eps).min(1.0));
    let project = |v: &mut Tensor| {
        for ((v, &l), &h) in v.data_mut().iter_mut().zip(lo.data()).zip(hi.data()) {
            *v = v.clamp(l, h);
        }
    };
    let mut x = batch.clone();
    if cfg.random_start && cfg.steps > 0 && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::uniform(batch.shape(), -eps, eps, &mut rng);
        x = x.zip_map(&noise, |a, b| a + b)?;
        project(&mut x);
    }
    for _ in 0..cfg.steps {
        let (_, grad) = target.loss_gradient(&x, labels)?;
        x = x.zip_map(&grad, |v, g| v + cfg.step_size * sign(g))?;
        project(&mut x);
        observe(&x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Layer, NUM_CLASSES};
    use rand::SeedableRng;

    fn toy_model() -> Model {
        let arch = Architecture {
            input: [1, 4, 4],
            layers: vec![Layer::Flatten, Layer::Dense { out: NUM_CLASSES }],
        };
        Model::build(arch, 5).unwrap()
    }

    fn batch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[3, 1, 4, 4], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let flat = |x: &Tensor, _: &[usize]| Ok((1.0, Tensor::zeros(x.shape())));
        let x = batch(0);
        assert_eq!(fgsm(&flat, &x, &[0, 0, 0], 0.3).unwrap(), x);
    }

    #[test]
    fn linear_loss_moves_everything_up() {
        let linear = |x: &Tensor, _: &[usize]| Ok((2.0 * x.sum(), Tensor::full(x.shape(), 2.0)));
        let x = batch(1);
        let y = fgsm(&linear, &x, &[0, 0, 0], 0.3).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, (a + 0.3).min(1.0));
        }
    }

    #[test]
    fn fgsm_stays_in_ball() {
        let m = toy_model();
        for s in 0..100 {
            let x = batch(s);
            let y = fgsm(&m, &x, &[1, 2, 3], 0.1).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() <= 0.1 + 1e-15);
        }
    }

    #[test]
    fn one_step_pgd_is_fgsm() {
        let m = toy_model();
        let x = batch(3);
        let cfg = AttackConfig {
            epsilon: 0.2,
            steps: 1,
            step_size: 0.2,
            random_start: false,
            ..AttackConfig::default()
        };
        assert_eq!(
            pgd_continuous(&m, &x, &[4, 5, 6], &cfg).unwrap(),
            fgsm(&m, &x, &[4, 5, 6], 0.2).unwrap()
        );
    }

    #[test]
    fn pgd_iterates_stay_in_ball() {
        let m = toy_model();
        let x = batch(4);
        let cfg = AttackConfig {
            epsilon: 0.05,
            steps: 10,
            step_size: 0.02,
            ..AttackConfig::default()
        };
        let mut steps = 0;
        pgd_with(&m, &x, &[0, 1, 2], &cfg, 9, |it| {
            steps += 1;
            assert!(it.max_abs_diff(&x).unwrap() <= 0.05 + 1e-12);
            assert!(it.data().iter().all(|v| (0.0..=1.0).contains(v)));
        })
        .unwrap();
        assert_eq!(steps, 10);
    }

    #[test]
    fn pgd_beats_fgsm_on_quadratic() {
        // L = -(x0 - 0.7)^2 - (x1 - 0.2)^2, maximized at (0.7, 0.2).
        let target = [0.7, 0.2];
        let quad = |x: &Tensor, _: &[usize]| {
            let d = x.data();
            let loss = -(0..2).map(|i| (d[i] - target[i]).powi(2)).sum::<f64>();
            let g = (0..2).map(|i| -2.0 * (d[i] - target[i])).collect();
            Ok((loss, Tensor::new(vec![1, 2], g)?))
        };
        let x0 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let eval = |x: &Tensor| quad(x, &[]).unwrap().0;
        let one = fgsm(&quad, &x0, &[0], 0.3).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.3,
            steps: 20,
            step_size: 0.05,
            random_start: false,
            ..AttackConfig::default()
        };
        let many = pgd_continuous(&quad, &x0, &[0], &cfg).unwrap();
        assert!(eval(&many) >= eval(&one));
        // Sign steps of 0.05 end within one step of the optimum per axis.
        assert!(eval(&many) >= -2.0 * 0.05 * 0.05 - 1e-12, "{}", eval(&many));
    }

    #[test]
    fn blind_pipeline_has_no_input_gradient() {
        let m = toy_model();
        let p = Pipeline::new(vec![Transform::TanhFilter { scale: 4.0 }]).unwrap();
        assert!(matches!(
            WhiteBox::new(&m, Some(&p), AttackMode::Blind),
            Err(Error::Unsupported(_))
        ));
        let q = Pipeline::thermometer(15).unwrap();
        assert!(matches!(
            WhiteBox::new(&m, Some(&q), AttackMode::FullWhiteBox),
            Err(Error::Unsupported(_))
        ));
        assert!(WhiteBox::new(&m, None, AttackMode::Blind).is_ok());
    }

    #[test]
    fn white_box_gradient_matches_finite_differences() {
        let m = toy_model();
        let p = Pipeline::new(vec![
            Transform::TanhFilter { scale: 4.0 },
            Transform::AvgSmooth { window: 3 },
            Transform::BatchNorm { eps: 1e-5 },
        ])
        .unwrap();
        let wb = WhiteBox::new(&m, Some(&p), AttackMode::FullWhiteBox).unwrap();
        let x = batch(6);
        let labels = [1, 4, 7];
        let (_, grad) = wb.loss_gradient(&x, &labels).unwrap();
        let loss_at = |t: &Tensor| -> f64 {
            let enc = p.apply(t).unwrap().data;
            let (l, _) = m.loss_and_predictions(&enc, &labels).unwrap();
            l.iter().sum()
        };
        let h = 1e-5;
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
            let err = crate::gradcheck::relative_error(grad.data()[i], num);
            assert!(err < 1e-4, "coordinate {i}: {} vs {num}", grad.data()[i]);
        }
    }
}
