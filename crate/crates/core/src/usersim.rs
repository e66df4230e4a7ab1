//! Simulated user.
//!
//! At test time the simulated user clicks the center of the largest error
//! region. The center is the region pixel farthest from the region's
//! complement, where pixels outside the image count as complement. At train
//! time corrections are sampled from the ground truth.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{Click, CorrectionState, Label};
use crate::segnet::Prediction;
use crate::tensor::{Tensor, TensorError};

/// A 4-connected set of mislabelled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRegion {
    /// Pixels in row-major discovery order; the first is the top-left one.
    pub pixels: Vec<(usize, usize)>,
    /// Majority ground-truth label of the region's pixels.
    pub label: Label,
}

impl ErrorRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

const FAR: i64 = i64::MAX / 4;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sep = |q: usize, p: usize| -> f64 {
        let (fq, fp) = (f[q] as f64, f[p] as f64);
        ((fq + (q * q) as f64) - (fp + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        if f[q] >= FAR {
            continue;
        }
        if f[v[k]] >= FAR {
            v[k] = q;
            continue;
        }
        let mut s = sep(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = sep(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]] >= FAR {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest pixel
/// with `feature == true`; `i64::MAX / 4` when there is none.
pub fn squared_distance_transform(feature: &[bool], height: usize, width: usize) -> Vec<i64> {
    assert_eq!(feature.len(), height * width);
    let mut grid: Vec<i64> = feature.iter().map(|&f| if f { 0 } else { FAR }).collect();
    let n = height.max(width);
    let mut f = vec![0i64; n];
    let mut out = vec![0i64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidShape {
            op,
            shape: a.shape().to_vec(),
            reason: "expected [H, W]".into(),
        }
        .into());
    }
    b.expect_shape(op, a.shape())?;
    Ok((a.shape()[0], a.shape()[1]))
}

/// 4-connected components of `pred XOR gt`, in row-major order of their
/// top-left pixel.
pub fn error_regions(pred: &Tensor, gt: &Tensor) -> Result<Vec<ErrorRegion>> {
    let (h, w) = check_pair(pred, gt, "error_regions")?;
    let wrong: Vec<bool> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p >= 0.5) != (g >= 0.5))
        .collect();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !wrong[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let mut positives = 0usize;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            if gt.data()[i] >= 0.5 {
                positives += 1;
            }
            let mut visit = |j: usize| {
                if wrong[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        let label = if 2 * positives >= pixels.len() { Label::Positive } else { Label::Negative };
        regions.push(ErrorRegion { pixels, label });
    }
    Ok(regions)
}

/// Region pixel farthest from the complement (row-major first on ties).
pub fn region_center(region: &ErrorRegion, height: usize, width: usize) -> (usize, usize) {
    // One pixel of padding so the image border acts as complement.
    let (ph, pw) = (height + 2, width + 2);
    let mut feature = vec![true; ph * pw];
    for &(r, c) in &region.pixels {
        feature[(r + 1) * pw + c + 1] = false;
    }
    let dist = squared_distance_transform(&feature, ph, pw);
    let mut best = region.pixels[0];
    let mut best_d = -1;
    let mut ordered = region.pixels.clone();
    ordered.sort_unstable();
    for (r, c) in ordered {
        let d = dist[(r + 1) * pw + c + 1];
        if d > best_d {
            best_d = d;
            best = (r, c);
        }
    }
    best
}

/// Click on the center of the largest error region, or `None` when the
/// prediction already matches the ground truth.
pub fn simulate_click(pred: &Prediction, gt: &Tensor) -> Result<Option<Click>> {
    let (h, w) = check_pair(&pred.binary, gt, "simulate_click")?;
    let regions = error_regions(&pred.binary, gt)?;
    // max_by_key keeps the last maximum; iterate in reverse to prefer the first.
    let Some(largest) = regions.iter().rev().max_by_key(|r| r.area()) else {
        return Ok(None);
    };
    let (row, col) = region_center(largest, h, w);
    Ok(Some(Click::new(row, col, Label::from_mask_value(gt.at2(row, col)))))
}

/// Negative click sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeStrategy {
    /// Uniform over background pixels in a distance band around the object.
    Band,
    /// Uniform over pixels of other objects.
    OtherObjects,
    /// Equally spaced along the contour of the dilated object.
    Contour,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainClickConfig {
    pub max_pos: usize,
    pub max_neg: usize,
    pub d_near: usize,
    pub d_far: usize,
    pub d_mid: usize,
}

impl Default for TrainClickConfig {
    fn default() -> Self {
        Self {
            max_pos: 5,
            max_neg: 5,
            d_near: 5,
            d_far: 40,
            d_mid: 10,
        }
    }
}

fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Samples stage-one training corrections from a ground-truth mask.
pub fn sample_train_corrections<R: Rng + ?Sized>(
    gt: &Tensor,
    other_objects: Option<&Tensor>,
    rng: &mut R,
    cfg: &TrainClickConfig,
) -> Result<CorrectionState> {
    let (h, w) = check_pair(gt, gt, "sample_train_corrections")?;
    if let Some(o) = other_objects {
        o.expect_shape("sample_train_corrections", gt.shape())?;
    }
    let object: Vec<bool> = gt.data().iter().map(|&v| v >= 0.5).collect();
    let fg: Vec<usize> = (0..h * w).filter(|&i| object[i]).collect();
    if fg.is_empty() {
        return Err(Error::EmptyObject);
    }
    if cfg.max_pos == 0 {
        return Err(Error::Config("max_pos must be at least 1".into()));
    }

    let k_pos = rng.random_range(1..=cfg.max_pos);
    let mut clicks: Vec<Click> = sample_distinct(rng, &fg, k_pos)
        .into_iter()
        .map(|i| Click::positive(i / w, i % w))
        .collect();

    let k_neg = rng.random_range(0..=cfg.max_neg);
    let strategy = match rng.random_range(0..3) {
        0 => NegativeStrategy::Band,
        1 => NegativeStrategy::OtherObjects,
        _ => NegativeStrategy::Contour,
    };
    let negatives = sample_negatives(&object, h, w, other_objects, strategy, k_neg, rng, cfg);
    clicks.extend(negatives.into_iter().map(|i| Click::negative(i / w, i % w)));
    CorrectionState::with_initial(clicks, h, w)
}

#[allow(clippy::too_many_arguments)]
fn sample_negatives<R: Rng + ?Sized>(
    object: &[bool],
    h: usize,
    w: usize,
    other_objects: Option<&Tensor>,
    strategy: NegativeStrategy,
    k: usize,
    rng: &mut R,
    cfg: &TrainClickConfig,
) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let dist = squared_distance_transform(object, h, w);
    let background: Vec<usize> = (0..h * w).filter(|&i| !object[i]).collect();
    if background.is_empty() {
        return Vec::new();
    }
    let (near, far) = ((cfg.d_near * cfg.d_near) as i64, (cfg.d_far * cfg.d_far) as i64);
    let band = || -> Vec<usize> {
        let b: Vec<usize> = background
            .iter()
            .copied()
            .filter(|&i| dist[i] >= near && dist[i] <= far)
            .collect();
        if b.is_empty() {
            background.clone()
        } else {
            b
        }
    };
    match strategy {
        NegativeStrategy::Band => sample_distinct(rng, &band(), k),
        NegativeStrategy::OtherObjects => {
            let pool: Vec<usize> = match other_objects {
                Some(o) => background.iter().copied().filter(|&i| o.data()[i] >= 0.5).collect(),
                None => Vec::new(),
            };
            if pool.is_empty() {
                sample_distinct(rng, &band(), k)
            } else {
                sample_distinct(rng, &pool, k)
            }
        }
        NegativeStrategy::Contour => {
            let mid = (cfg.d_mid * cfg.d_mid) as i64;
            let outside = |r: isize, c: isize| {
                r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && dist[r as usize * w + c as usize] > mid
            };
            let mut contour: Vec<usize> = background
                .iter()
                .copied()
                .filter(|&i| {
                    let (r, c) = ((i / w) as isize, (i % w) as isize);
                    dist[i] <= mid
                        && (outside(r - 1, c) || outside(r + 1, c) || outside(r, c - 1) || outside(r, c + 1))
                })
                .collect();
            if contour.is_empty() {
                return sample_distinct(rng, &band(), k);
            }
            let (mut cr, mut cc) = (0.0, 0.0);
            let count = object.iter().filter(|&&o| o).count() as f64;
            for (i, _) in object.iter().enumerate().filter(|(_, &o)| o) {
                cr += (i / w) as f64;
                cc += (i % w) as f64;
            }
            let (cr, cc) = (cr / count, cc / count);
            let angle = |i: usize| ((i / w) as f64 - cr).atan2((i % w) as f64 - cc);
            contour.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)).then(a.cmp(&b)));
            let n = contour.len();
            let k = k.min(n);
            let spacing = n as f64 / k as f64;
            let offset = rng.random_range(0.0..spacing);
            (0..k)
                .map(|j| contour[((offset + j as f64 * spacing) as usize).min(n - 1)])
                .collect()
        }
    }
}

/// One round of iterative training-time correction: either reset to the
/// initial clicks (with probability `reset_prob`) or add a simulated click.
pub fn iterative_correction_round<R: Rng + ?Sized>(
    state: &CorrectionState,
    pred: &Prediction,
    gt: &Tensor,
    rng: &mut R,
    reset_prob: f64,
) -> Result<CorrectionState> {
    let mut next = state.clone();
    if rng.random::<f64>() < reset_prob {
        next.reset();
    } else if let Some(click) = simulate_click(pred, gt)? {
        next.push(click)?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::new(
            vec![h, w],
            (0..h * w).map(|i| if on(i / w, i % w) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    fn pred_of(m: &Tensor) -> Prediction {
        Prediction::from_probabilities(m)
    }

    #[test]
    fn no_error_no_click() {
        let gt = mask(16, 16, |r, c| r < 5 && c < 7);
        assert_eq!(simulate_click(&pred_of(&gt), &gt).unwrap(), None);
    }

    #[test]
    fn square_error_center() {
        let gt = mask(64, 64, |r, c| (10..15).contains(&r) && (20..25).contains(&c));
        let pred = mask(64, 64, |_, _| false);
        let click = simulate_click(&pred_of(&pred), &gt).unwrap().unwrap();
        assert_eq!(click, Click::positive(12, 22));
    }

    #[test]
    fn picks_largest_region() {
        // false positive of area 3, false negative of area 7
        let pred = mask(20, 20, |r, c| r == 2 && (2..5).contains(&c));
        let gt = mask(20, 20, |r, c| r == 10 && (5..12).contains(&c));
        let click = simulate_click(&pred_of(&pred), &gt).unwrap().unwrap();
        assert_eq!(click.row, 10);
        assert!((5..12).contains(&click.col));
        assert_eq!(click.label, Label::Positive);
    }

    #[test]
    fn equal_area_tie_prefers_first_region() {
        let pred = mask(10, 10, |r, c| (r == 7 && c < 3) || (r == 1 && (6..9).contains(&c)));
        let gt = mask(10, 10, |_, _| false);
        let click = simulate_click(&pred_of(&pred), &gt).unwrap().unwrap();
        assert_eq!((click.row, click.col, click.label), (1, 6, Label::Negative));
    }

    #[test]
    fn distance_transform_small() {
        let mut f = vec![false; 25];
        f[12] = true;
        let d = squared_distance_transform(&f, 5, 5);
        assert_eq!(d[12], 0);
        assert_eq!(d[0], 8);
        assert_eq!(d[2], 4);
        let none = squared_distance_transform(&[false; 4], 2, 2);
        assert!(none.iter().all(|&v| v >= FAR));
    }

    #[test]
    fn train_clicks_respect_labels() {
        let gt = mask(64, 64, |r, c| (20..40).contains(&r) && (15..35).contains(&c));
        let others = mask(64, 64, |r, c| (45..55).contains(&r) && (45..60).contains(&c));
        let cfg = TrainClickConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = sample_train_corrections(&gt, Some(&others), &mut rng, &cfg).unwrap();
            let pos = s.clicks().iter().filter(|c| c.label == Label::Positive).count();
            let neg = s.len() - pos;
            assert!((1..=5).contains(&pos));
            assert!(neg <= 5);
            for c in s.clicks() {
                let v = gt.at2(c.row, c.col);
                match c.label {
                    Label::Positive => assert_eq!(v, 1.0),
                    Label::Negative => assert_eq!(v, 0.0),
                }
            }
            assert_eq!(s.initial_clicks(), s.clicks());
        }
    }

    #[test]
    fn train_clicks_deterministic() {
        let gt = mask(32, 32, |r, c| (8..20).contains(&r) && (8..20).contains(&c));
        let cfg = TrainClickConfig::default();
        let a = sample_train_corrections(&gt, None, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        let b = sample_train_corrections(&gt, None, &mut ChaCha8Rng::seed_from_u64(4), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_clicks_need_object() {
        let gt = mask(8, 8, |_, _| false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_train_corrections(&gt, None, &mut rng, &TrainClickConfig::default()),
            Err(Error::EmptyObject)
        ));
    }

    #[test]
    fn contour_negatives_lie_on_dilated_boundary() {
        let gt = mask(64, 64, |r, c| (25..35).contains(&r) && (25..35).contains(&c));
        let object: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
        let dist = squared_distance_transform(&object, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrainClickConfig::default();
        let picks = sample_negatives(&object, 64, 64, None, NegativeStrategy::Contour, 4, &mut rng, &cfg);
        assert_eq!(picks.len(), 4);
        for i in picks {
            assert!(dist[i] <= 100 && dist[i] > 64, "distance² {}", dist[i]);
        }
    }

    #[test]
    fn correction_round_paths() {
        let gt = mask(16, 16, |r, c| r < 8 && c < 8);
        let wrong = pred_of(&mask(16, 16, |_, _| false));
        let init = CorrectionState::with_initial(vec![Click::positive(2, 2)], 16, 16).unwrap();
        let mut grown = init.clone();
        grown.push(Click::positive(5, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        let reset = iterative_correction_round(&grown, &wrong, &gt, &mut rng, 1.0).unwrap();
        assert_eq!(reset, init);

        let next = iterative_correction_round(&init, &wrong, &gt, &mut rng, 0.0).unwrap();
        assert_eq!(next.len(), init.len() + 1);

        let perfect = pred_of(&gt);
        let same = iterative_correction_round(&init, &perfect, &gt, &mut rng, 0.0).unwrap();
        assert_eq!(same, init);
    }
}
