//! Metrics, datasets and the experiment driver.

mod dataset;
mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dataset::{load_dataset, mask_to_gray, rgb_to_tensor, save_dataset, tensor_to_rgb, Dataset, Sample};
pub use synth::{synth_dataset, SynthSpec, DOMAIN_B_NOISE};

use crate::adapt::{combined_adapt, default_importance, AdaptConfig, AdaptLog, Anchor, Mode, Phase, SequenceItem};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_shape("iou", b.shape())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Smallest `k` whose IoU reaches `q`, or `budget` when none does.
/// `curve[k]` is the IoU after `k` clicks and must hold `budget + 1` values.
pub fn clicks_at_q(curve: &[f64], q: f64, budget: usize) -> Result<usize> {
    if curve.len() != budget + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "clicks_at_q",
            expected: vec![budget + 1],
            found: vec![curve.len()],
        }
        .into());
    }
    if curve.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("IoU values must lie in [0, 1]".into()));
    }
    Ok(curve.iter().position(|&v| v >= q).unwrap_or(budget))
}

/// Pads a curve to `budget + 1` entries by repeating its last value.
pub fn fill_curve(curve: &[f64], budget: usize) -> Vec<f64> {
    let mut out: Vec<f64> = curve.iter().copied().take(budget + 1).collect();
    let last = out.last().copied().unwrap_or(0.0);
    out.resize(budget + 1, last);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    /// Clicks needed to reach the target IoU (budget when never reached).
    pub clicks: usize,
    pub final_iou: f64,
    /// IoU after `k` clicks, `k = 0..=budget`.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Ids in the order the sequence was processed.
    pub order: Vec<String>,
    /// Results sorted by id.
    pub images: Vec<ImageResult>,
    pub mean_clicks: f64,
    pub mean_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub target_iou: f64,
    pub budget: usize,
    pub config: AdaptConfig,
    pub checkpoint_id: String,
    pub dataset: String,
    pub images: usize,
    pub seeds: Vec<SeedReport>,
    /// Mean clicks over every image of every seed.
    pub mean_clicks: f64,
    /// Standard deviation of the per-seed means (zero for one seed).
    pub std_clicks: f64,
    pub mean_curve: Vec<f64>,
    /// Gradient steps taken by single-image adaptation.
    pub ia_steps: usize,
    /// Gradient steps taken by sequence adaptation.
    pub sa_steps: usize,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    report.save(path)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    EvalReport::load(path)
}

/// Writes the mean IoU@k curve of each report as CSV (`k,<mode>...`).
pub fn write_curve_csv(reports: &[EvalReport], mut out: impl std::io::Write) -> Result<()> {
    let budget = reports.iter().map(|r| r.budget).max().unwrap_or(0);
    write!(out, "k")?;
    for r in reports {
        write!(out, ",{}", r.mode.as_str())?;
    }
    writeln!(out)?;
    for k in 0..=budget {
        write!(out, "{k}")?;
        for r in reports {
            let v = r.mean_curve.get(k).or(r.mean_curve.last()).copied().unwrap_or(0.0);
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Short content hash identifying a checkpoint.
pub fn checkpoint_id(ckpt: &Checkpoint) -> Result<String> {
    let digest = Sha256::digest(ckpt.to_bytes()?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_curves<'a>(curves: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> Vec<f64> {
    (0..len).map(|k| mean(curves.clone().map(|c| c[k]))).collect()
}

/// Runs the simulated-user protocol on `dataset` once per seed.
///
/// Adaptive sequence modes process a seed-dependent shuffle of the images;
/// frozen and IA modes keep the dataset order. Results are aggregated by id,
/// so frozen evaluation does not depend on the order of the dataset.
pub fn evaluate_sequence(
    dataset: &Dataset,
    ckpt: &Checkpoint,
    mode: Mode,
    cfg: &AdaptConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    evaluate_sequence_logged(dataset, ckpt, mode, cfg, seeds).map(|(r, _)| r)
}

/// [`evaluate_sequence`] that also returns the adaptation log.
pub fn evaluate_sequence_logged(
    dataset: &Dataset,
    ckpt: &Checkpoint,
    mode: Mode,
    cfg: &AdaptConfig,
    seeds: &[u64],
) -> Result<(EvalReport, AdaptLog)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    cfg.validate()?;
    let importance = match &ckpt.importance {
        Some(omega) => omega.clone(),
        None => {
            log::warn!("checkpoint carries no importance weights; estimating them on the evaluation images");
            default_importance(&ckpt.net, dataset, 32, cfg.disk_radius)?
        }
    };
    let anchor = Anchor::new(&ckpt.net, importance)?;
    let budget = cfg.click_budget;
    let mut log = AdaptLog::default();
    let mut seed_reports = Vec::with_capacity(seeds.len());

    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        if mode.uses_sa() {
            order.shuffle(&mut rng);
        }
        let items: Vec<SequenceItem<'_>> = order
            .iter()
            .map(|&i| {
                let s = &dataset.samples()[i];
                SequenceItem {
                    id: &s.id,
                    image: &s.image,
                    gt: &s.mask,
                }
            })
            .collect();
        let run = combined_adapt(&items, &anchor, mode, cfg, &mut rng, false)?;
        log.entries.extend(run.log.entries);

        let mut images: Vec<ImageResult> = items
            .iter()
            .zip(&run.outcomes)
            .map(|(item, out)| {
                let curve = fill_curve(&out.iou_curve, budget);
                Ok(ImageResult {
                    id: item.id.to_string(),
                    clicks: clicks_at_q(&curve, cfg.target_iou, budget)?,
                    final_iou: out.final_iou.unwrap_or(0.0),
                    curve,
                })
            })
            .collect::<Result<_>>()?;
        images.sort_by(|a, b| a.id.cmp(&b.id));
        seed_reports.push(SeedReport {
            seed,
            order: items.iter().map(|i| i.id.to_string()).collect(),
            mean_clicks: mean(images.iter().map(|r| r.clicks as f64)),
            mean_curve: mean_curves(images.iter().map(|r| r.curve.as_slice()), budget + 1),
            images,
        });
    }

    let all = || seed_reports.iter().flat_map(|s| s.images.iter());
    let seed_mean = mean(seed_reports.iter().map(|s| s.mean_clicks));
    let std_clicks = if seed_reports.len() > 1 {
        let var = seed_reports.iter().map(|s| (s.mean_clicks - seed_mean).powi(2)).sum::<f64>()
            / (seed_reports.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    let report = EvalReport {
        mode,
        target_iou: cfg.target_iou,
        budget,
        config: cfg.clone(),
        checkpoint_id: checkpoint_id(ckpt)?,
        dataset: dataset.domain().to_string(),
        images: dataset.len(),
        mean_clicks: mean(all().map(|r| r.clicks as f64)),
        std_clicks,
        mean_curve: mean_curves(all().map(|r| r.curve.as_slice()), budget + 1),
        ia_steps: log.count(Phase::Ia),
        sa_steps: log.count(Phase::Sa),
        seeds: seed_reports,
    };
    Ok((report, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(rows: std::ops::Range<usize>) -> Tensor {
        let mut data = vec![0.0; 6 * 4];
        for r in rows {
            for c in 0..4 {
                data[r * 4 + c] = 1.0;
            }
        }
        Tensor::new(vec![6, 4], data).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = stripes(0..4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&stripes(0..2), &stripes(3..6)).unwrap(), 0.0);
        assert!((iou(&a, &stripes(2..6)).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&Tensor::zeros(&[3, 3]), &Tensor::zeros(&[3, 3])).unwrap(), 1.0);
        assert!(iou(&a, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn clicks_at_q_cases() {
        let mut curve = vec![0.2, 0.5, 0.91];
        curve.extend(std::iter::repeat_n(0.95, 18));
        assert_eq!(clicks_at_q(&curve, 0.9, 20).unwrap(), 2);
        assert_eq!(clicks_at_q(&[0.5; 21], 0.9, 20).unwrap(), 20);
        assert_eq!(clicks_at_q(&[0.95; 21], 0.9, 20).unwrap(), 0);
        assert!(clicks_at_q(&[0.5; 20], 0.9, 20).is_err());
        assert!(clicks_at_q(&[1.5; 21], 0.9, 20).is_err());
    }

    #[test]
    fn fill_forward() {
        assert_eq!(fill_curve(&[0.1, 0.95], 3), vec![0.1, 0.95, 0.95, 0.95]);
    }

    #[test]
    fn curve_csv_layout() {
        let report = EvalReport {
            mode: Mode::Sa,
            target_iou: 0.9,
            budget: 2,
            config: AdaptConfig::default(),
            checkpoint_id: "x".into(),
            dataset: "d".into(),
            images: 1,
            seeds: vec![],
            mean_clicks: 1.0,
            std_clicks: 0.0,
            mean_curve: vec![0.5, 0.75, 1.0],
            ia_steps: 0,
            sa_steps: 1,
        };
        let mut buf = Vec::new();
        write_curve_csv(&[report], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,sa\n0,0.5\n1,0.75\n2,1\n");
    }
}
