//! Finite-difference verification of the hand-written backward rules.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{Cache, LayerSpec};
use crate::nn::Seq;
use crate::tensor::Tensor;

/// Scalar objective on the fragment output, returning the value and its gradient.
pub type Objective = Box<dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>)>;

/// `L = Σ r_i · y_i` for fixed weights `r`.
pub fn projection(weights: Vec<f64>) -> Objective {
    Box::new(move |y| {
        assert_eq!(y.len(), weights.len(), "projection length");
        let v = y.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        (
            v,
            Tensor::new(y.shape().to_vec(), weights.clone()).expect("same shape"),
        )
    })
}

/// Mean negative log-likelihood of probability rows (the output of a Softmax layer).
pub fn nll_of_probabilities(targets: Vec<usize>) -> Objective {
    Box::new(move |p| {
        let k = p.shape()[1];
        let n = targets.len() as f64;
        let mut g = vec![0.0; p.len()];
        let mut v = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let pi = p.data()[i * k + t];
            v -= pi.ln() / n;
            g[i * k + t] = -1.0 / (pi * n);
        }
        (v, Tensor::new(p.shape().to_vec(), g).expect("same shape"))
    })
}

/// A differentiable graph fragment: a layer sequence, optionally wrapped in
/// a residual connection, followed by a scalar objective.
pub struct Fragment {
    pub seq: Seq<f64>,
    pub residual: bool,
    pub objective: Objective,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    /// `(tensor name, max relative error)`, the input first.
    pub errors: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

pub const FD_STEP: f64 = 1e-5;
/// Inputs to clipping activations closer than this to a kink are resampled.
pub const KINK_MARGIN: f64 = 1e-3;
/// Elements checked per tensor; larger tensors are subsampled.
const MAX_CHECKED: usize = 256;

impl Fragment {
    fn output(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Cache<f64>>)> {
        let mut s = self.seq.clone();
        let (mut y, caches) = s.forward_train(x)?;
        if self.residual {
            for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
                *a += *b;
            }
        }
        Ok((y, caches))
    }

    pub fn loss(&self, x: &Tensor<f64>) -> Result<f64> {
        Ok((self.objective)(&self.output(x)?.0).0)
    }

    /// Smallest distance from any clipping-activation input to its kinks.
    pub fn kink_distance(&self, x: &Tensor<f64>) -> Result<f64> {
        let (_, caches) = self.output(x)?;
        let mut d = f64::INFINITY;
        for (layer, cache) in self.seq.layers.iter().zip(&caches) {
            let hi = match layer.spec {
                LayerSpec::Relu6 => 6.0,
                LayerSpec::Pact { .. } => layer.params[0].data()[0],
                _ => continue,
            };
            if let Cache::Input(t) | Cache::Clip { input: t, .. } = cache {
                for &v in t.data() {
                    d = d.min(v.abs()).min((v - hi).abs());
                }
            }
        }
        Ok(d)
    }

    /// Analytic gradients: `(input grad, per-parameter grads)`.
    pub fn analytic(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Vec<f64>>)> {
        let mut s = self.seq.clone();
        s.zero_grad();
        let (mut y, caches) = s.forward_train(x)?;
        if self.residual {
            for (a, b) in y.data_mut().iter_mut().zip(x.data()) {
                *a += *b;
            }
        }
        let (_, dy) = (self.objective)(&y);
        let mut dx = s.backward(&caches, &dy)?;
        if self.residual {
            for (a, b) in dx.data_mut().iter_mut().zip(dy.data()) {
                *a += *b;
            }
        }
        let grads = s
            .layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(|p| {
                p.grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect();
        Ok((dx, grads))
    }
}

fn rel_errors(analytic: &[f64], numeric: &[(usize, f64)]) -> f64 {
    let scale = numeric.iter().map(|n| n.1.abs()).fold(0.0, f64::max);
    numeric
        .iter()
        .map(|&(i, n)| {
            let a = analytic[i];
            (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale).max(1e-12)
        })
        .fold(0.0, f64::max)
}

fn checked_indices(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= MAX_CHECKED {
        (0..len).collect()
    } else {
        (0..MAX_CHECKED).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Compares analytic gradients of the input and of every parameter tensor
/// against central differences at float64.
pub fn gradient_check(
    frag: &Fragment,
    x: &Tensor<f64>,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradReport> {
    let (dx, grads) = frag.analytic(x)?;
    let mut errors = Vec::new();

    let mut numeric = Vec::new();
    let mut xp = x.clone();
    for i in checked_indices(x.len(), rng) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = frag.loss(&xp)?;
        xp.data_mut()[i] = orig - FD_STEP;
        let down = frag.loss(&xp)?;
        xp.data_mut()[i] = orig;
        numeric.push((i, (up - down) / (2.0 * FD_STEP)));
    }
    errors.push(("input".to_string(), rel_errors(dx.data(), &numeric)));

    let mut probe = Fragment {
        seq: frag.seq.clone(),
        residual: frag.residual,
        objective: Box::new(|_| unreachable!()),
    };
    let mut flat = 0;
    for li in 0..frag.seq.layers.len() {
        for pi in 0..frag.seq.layers[li].params.len() {
            let len = frag.seq.layers[li].params[pi].len();
            let mut numeric = Vec::new();
            for i in checked_indices(len, rng) {
                let orig = frag.seq.layers[li].params[pi].data()[i];
                let mut eval = |v: f64| -> Result<f64> {
                    probe.seq.layers[li].params[pi].data_mut()[i] = v;
                    let (y, _) = probe.output(x)?;
                    Ok((frag.objective)(&y).0)
                };
                let up = eval(orig + FD_STEP)?;
                let down = eval(orig - FD_STEP)?;
                eval(orig)?;
                numeric.push((i, (up - down) / (2.0 * FD_STEP)));
            }
            let name = format!("{}.{pi}", frag.seq.layers[li].name);
            errors.push((name, rel_errors(&grads[flat], &numeric)));
            flat += 1;
        }
    }
    let passed = errors.iter().all(|e| e.1 < tolerance);
    Ok(GradReport {
        errors,
        tolerance,
        passed,
    })
}

/// Draws inputs from `sample` until every clipping activation is at least
/// [`KINK_MARGIN`] away from its kinks, then checks gradients there.
pub fn gradient_check_smooth<R: Rng>(
    frag: &Fragment,
    mut sample: impl FnMut(&mut R) -> Tensor<f64>,
    tolerance: f64,
    rng: &mut R,
    max_tries: usize,
) -> Result<Option<GradReport>> {
    for _ in 0..max_tries {
        let x = sample(rng);
        if frag.kink_distance(&x)? >= KINK_MARGIN {
            return gradient_check(frag, &x, tolerance, rng).map(Some);
        }
    }
    Ok(None)
}
