use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::image::write_pgm;
use crate::matrixgen::{object_masks, MatrixProblem};
use crate::model::{Pass, Stsn};
use crate::numeric::{Graph, ParamStore};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::MetricsLog;
use super::train::{problem_tensor, stream, Trainer, EVAL_SEED};

/// Per-panel decoder output on the host: `recons[k][c·hw + p]`,
/// `masks[k][p]`, composite `image[c·hw + p]`.
#[derive(Clone, Debug)]
pub struct PanelRender {
    pub image: Vec<f32>,
    pub recons: Vec<Vec<f32>>,
    pub masks: Vec<Vec<f32>>,
}

/// Runs the reconstruction branch on a problem's 16 panels with the fixed
/// evaluation randomness.
pub fn render_problem(
    model: &Stsn,
    store: &ParamStore<f32>,
    config: &TrainConfig,
    index: usize,
    problem: &MatrixProblem,
) -> Result<Vec<PanelRender>> {
    let x = problem_tensor(&problem.images, config)?;
    let mut rng = stream(EVAL_SEED, index as u64);
    let mut g = Graph::new();
    let out = model.reconstruct(&mut g, store, &x, &mut Pass { rng: &mut rng, train: false })?;
    let k = model.config.effective_slots();
    let c = config.image_channels;
    let hw = config.image_size * config.image_size;
    let recons = g.value(out.render.recons).data();
    let masks = g.value(out.composite.masks).data();
    let image = g.value(out.composite.image).data();
    Ok((0..problem.images.len())
        .map(|b| PanelRender {
            image: image[b * c * hw..(b + 1) * c * hw].to_vec(),
            recons: (0..k).map(|s| recons[(b * k + s) * c * hw..(b * k + s + 1) * c * hw].to_vec()).collect(),
            masks: (0..k).map(|s| masks[(b * k + s) * hw..(b * k + s + 1) * hw].to_vec()).collect(),
        })
        .collect())
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Segmentation quality of the slot masks against rendered object masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SegmentationReport {
    /// Mean over objects of the best IoU between the object's mask and any
    /// slot's argmax region.
    pub mean_iou: f64,
    pub objects: usize,
    /// Mean soft-mask mass (fraction of pixels) of slots that are the best
    /// match for no segment, background included.
    pub unused_mass: f64,
    /// Largest such mass seen on any panel.
    pub max_unused_mass: f64,
    pub unused_slots: usize,
}

/// IoU and unused-slot mass for one panel. Ground-truth segments are the
/// objects plus the background; a slot is used when it best matches at
/// least one segment.
pub fn panel_segmentation(render: &PanelRender, objects: &[Vec<bool>]) -> (Vec<f64>, Vec<f64>) {
    let hw = render.masks.first().map_or(0, Vec::len);
    let k = render.masks.len();
    let owner: Vec<usize> = (0..hw)
        .map(|p| (0..k).fold(0, |best, s| if render.masks[s][p] > render.masks[best][p] { s } else { best }))
        .collect();
    let regions: Vec<Vec<bool>> = (0..k).map(|s| owner.iter().map(|&o| o == s).collect()).collect();
    let background: Vec<bool> = (0..hw).map(|p| !objects.iter().any(|m| m[p])).collect();
    let mut used = vec![false; k];
    let mut best_for = |segment: &[bool]| -> f64 {
        let (s, v) = (0..k)
            .map(|s| (s, iou(segment, &regions[s])))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        used[s] = true;
        v
    };
    let ious: Vec<f64> = objects.iter().map(|m| best_for(m)).collect();
    if background.iter().any(|&b| b) {
        best_for(&background);
    }
    let unused = (0..k)
        .filter(|&s| !used[s])
        .map(|s| render.masks[s].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .collect();
    (ious, unused)
}

/// Aggregates [`panel_segmentation`] over every panel of `problems`.
pub fn segmentation(trainer: &Trainer, problems: &[MatrixProblem]) -> Result<SegmentationReport> {
    let (mut ious, mut unused) = (Vec::new(), Vec::new());
    let size = trainer.config.image_size;
    for (i, p) in problems.iter().enumerate() {
        let renders = render_problem(&trainer.model, &trainer.store, &trainer.config, i, p)?;
        for (panel, r) in p.context.iter().chain(&p.candidates).zip(&renders) {
            let (a, b) = panel_segmentation(r, &object_masks(panel, size, size));
            ious.extend(a);
            unused.extend(b);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SegmentationReport {
        mean_iou: mean(&ious),
        objects: ious.len(),
        unused_mass: mean(&unused),
        max_unused_mass: unused.iter().copied().fold(0.0, f64::max),
        unused_slots: unused.len(),
    })
}

/// Grayscale view of channel-major pixels (channel mean).
fn gray(data: &[f32], channels: usize) -> Vec<f32> {
    let hw = data.len() / channels;
    (0..hw).map(|p| (0..channels).map(|c| data[c * hw + p]).sum::<f32>() / channels as f32).collect()
}

/// Image grid with one row per panel and `K + 2` columns: original,
/// composite, then each slot's reconstruction weighted by its mask over a
/// white ground. Returns `(width, height, pixels)`.
pub fn slot_grid(problem: &MatrixProblem, renders: &[PanelRender], size: usize) -> (usize, usize, Vec<f32>) {
    let k = renders.first().map_or(0, |r| r.masks.len());
    let cols = k + 2;
    let (w, h) = (cols * size, renders.len() * size);
    let mut px = vec![1.0f32; w * h];
    for (row, (im, r)) in problem.images.iter().zip(renders).enumerate() {
        let ch = im.channels;
        let mut tiles = vec![gray(&im.data, ch), gray(&r.image, ch)];
        for s in 0..k {
            let rec = gray(&r.recons[s], ch);
            tiles.push(rec.iter().zip(&r.masks[s]).map(|(v, m)| m * v + (1.0 - m)).collect());
        }
        for (col, tile) in tiles.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    px[(row * size + y) * w + col * size + x] = tile[y * size + x].clamp(0.0, 1.0);
                }
            }
        }
    }
    (w, h, px)
}

/// Writes `steps.csv`, `epochs.csv`, `metrics.json`, one slot grid per
/// sample problem and `summary.txt` into `dir`.
pub fn emit_report(dir: &Path, log: &MetricsLog, ckpt: &Checkpoint, samples: &[MatrixProblem]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let put = |written: &mut Vec<PathBuf>, name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put(&mut written, "steps.csv", &log.steps_csv())?;
    put(&mut written, "epochs.csv", &log.epochs_csv())?;
    put(&mut written, "metrics.json", &serde_json::to_string_pretty(log)?)?;

    let trainer = Trainer::from_checkpoint(ckpt)?;
    let size = trainer.config.image_size;
    for (i, p) in samples.iter().enumerate() {
        let renders = render_problem(&trainer.model, &trainer.store, &trainer.config, i, p)?;
        let (w, h, px) = slot_grid(p, &renders, size);
        let path = dir.join(format!("slots_{i:03}.pgm"));
        write_pgm(&path, w, h, &px)?;
        written.push(path);
    }
    let eval = trainer.evaluate(samples)?;
    let seg = if samples.is_empty() { None } else { Some(segmentation(&trainer, samples)?) };

    let mut s = String::new();
    let _ = writeln!(s, "steps logged        {}", log.steps.len());
    let _ = writeln!(s, "epochs logged       {}", log.epochs.len());
    if let Some(last) = log.steps.last() {
        let _ = writeln!(s, "final loss          {:.6} (recon {:.6}, task {:.6})", last.total, last.recon, last.task);
    }
    if let Some(a) = log.final_train_accuracy() {
        let _ = writeln!(s, "final train acc     {a:.4}");
    }
    if let Some(a) = log.best_val_accuracy() {
        let _ = writeln!(s, "best val acc        {a:.4}");
    }
    for (t, a) in &log.test_accuracy {
        let _ = writeln!(s, "test acc {t:<10} {a:.4}");
    }
    if !samples.is_empty() {
        let _ = writeln!(s, "sample acc          {:.4} on {}", eval.accuracy(), eval.total());
        for (t, (c, n)) in &eval.per_type {
            let _ = writeln!(s, "  {t:<17} {c}/{n}");
        }
    }
    if let Some(r) = eval.mean_recon {
        let _ = writeln!(s, "sample recon mse    {r:.6}");
    }
    if let Some(seg) = seg {
        let _ = writeln!(s, "mean best IoU       {:.4} over {} objects", seg.mean_iou, seg.objects);
        let _ = writeln!(s, "unused slot mass    {:.4} mean, {:.4} max", seg.unused_mass, seg.max_unused_mass);
    }
    put(&mut written, "summary.txt", &s)?;
    Ok(written)
}
