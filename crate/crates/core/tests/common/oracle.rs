use eedet::hpo::{run_study, Assignment, Sampler, SearchSpace, Study, TrialEval};
use eedet::image::{PixelBox, Rect};
use eedet::rng::substream;
use rand::Rng;

/// Exit accuracy with "empty" predicted when `p >= tau`.
pub fn accuracy(p: &[f64], y: &[u8], tau: f64) -> f64 {
    let correct = p
        .iter()
        .zip(y)
        .filter(|(&pi, &yi)| (pi >= tau) == (yi == 1))
        .count();
    correct as f64 / p.len() as f64
}

/// Best accuracy over every threshold 0.500, 0.501, ..., 1.000.
pub fn grid_maximum(p: &[f64], y: &[u8]) -> f64 {
    (0..=500)
        .map(|k| accuracy(p, y, (500 + k) as f64 / 1000.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Two overlapping score populations; every third seed snaps scores onto
/// grid points to exercise the `>=` edge.
pub fn score_set(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = substream(seed, "scores");
    let n = rng.random_range(10..300);
    let snap = seed.is_multiple_of(3);
    let mut p = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let empty = u8::from(i % 2 == 0 || rng.random_bool(0.3));
        let centre = if empty == 1 { 0.8 } else { 0.45 };
        let mut v: f64 = (centre + rng.random_range(-0.45..0.45f64)).clamp(0.0, 1.0);
        if snap {
            v = (v * 1000.0).round() / 1000.0;
        }
        p.push(v);
        y.push(empty);
    }
    (p, y)
}

/// Positive-area overlap between a box and a pixel rectangle.
pub fn touches(b: &PixelBox, r: &Rect) -> bool {
    let w = b.xmax.min((r.x + r.width) as f64) - b.xmin.max(r.x as f64);
    let h = b.ymax.min((r.y + r.height) as f64) - b.ymin.max(r.y as f64);
    w > 0.0 && h > 0.0
}

pub fn study(
    space: &SearchSpace,
    sampler: &Sampler,
    trials: usize,
    seed: u64,
    f: fn(&Assignment) -> f64,
) -> Study {
    run_study(space, sampler, trials, seed, None, &mut |a, _| {
        Ok(TrialEval {
            objective: f(a),
            ..Default::default()
        })
    })
    .unwrap()
}

pub fn best(s: &Study) -> f64 {
    s.best().unwrap().objective.unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}
