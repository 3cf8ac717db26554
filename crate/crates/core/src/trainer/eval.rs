use crate::events::DepthMap;
use crate::model::{Model, WindowInputs};
use crate::nn::{ForwardCtx, Tape};
use crate::objectives::{log_depth_denormalize, DepthLossConfig};

use super::data::{ClfDataset, DepthDataset};
use super::TrainError;

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Predicted class (first maximum of the logits) for every example.
pub fn predict_clf(model: &Model, data: &ClfDataset) -> Result<Vec<usize>, TrainError> {
    (0..data.len())
        .map(|i| Ok(argmax(&model.logits(&data.windows(i)?)?)))
        .collect()
}

fn accuracy(pred: &[usize], data: &ClfDataset) -> f64 {
    let hits = pred
        .iter()
        .zip(&data.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Fraction of examples whose predicted class equals the label.
pub fn evaluate_clf(model: &Model, data: &ClfDataset) -> Result<f64, TrainError> {
    Ok(accuracy(&predict_clf(model, data)?, data))
}

/// Accuracy when the memory is reset before every window.
pub fn evaluate_clf_memoryless(model: &Model, data: &ClfDataset) -> Result<f64, TrainError> {
    let pred = (0..data.len())
        .map(|i| {
            let mut tape = Tape::new(&model.params);
            let out = model.forward_clf_memoryless(
                &mut tape,
                &mut ForwardCtx::inference(),
                &data.windows(i)?,
            )?;
            Ok(argmax(tape.value(out).data()))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(accuracy(&pred, data))
}

fn mae_per_cutoff(
    data: &DepthDataset,
    cutoffs: &[f64],
    mut predict: impl FnMut(&[WindowInputs]) -> Result<Vec<f64>, TrainError>,
) -> Result<Vec<Option<f64>>, TrainError> {
    let mut sums = vec![(0.0, 0usize); cutoffs.len()];
    for ex in &data.examples {
        let pred = predict(&ex.windows)?;
        for (c, &cut) in cutoffs.iter().enumerate() {
            let (err, n) = ex
                .depth
                .iter()
                .zip(&pred)
                .filter(|(&d, _)| DepthMap::is_valid(d) && (d as f64) < cut)
                .fold((0.0, 0usize), |(s, n), (&d, &p)| {
                    (s + (p - d as f64).abs(), n + 1)
                });
            if n > 0 {
                sums[c].0 += err / n as f64;
                sums[c].1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Mean absolute depth error in meters for each cutoff: per example, the
/// mean over valid pixels with ground truth below the cutoff, then averaged
/// over the examples that have such pixels. `None` when a cutoff excludes
/// every pixel.
pub fn evaluate_depth(
    model: &Model,
    data: &DepthDataset,
    cutoffs: &[f64],
    loss: &DepthLossConfig,
) -> Result<Vec<Option<f64>>, TrainError> {
    mae_per_cutoff(data, cutoffs, |w| {
        Ok(model
            .depth_map(w)?
            .into_iter()
            .map(|v| log_depth_denormalize(v, loss))
            .collect())
    })
}

/// [`evaluate_depth`] for a predictor that outputs `depth_m` everywhere.
pub fn evaluate_depth_constant(
    data: &DepthDataset,
    depth_m: f64,
    cutoffs: &[f64],
) -> Vec<Option<f64>> {
    let n = data.height * data.width;
    mae_per_cutoff(data, cutoffs, |_| Ok(vec![depth_m; n])).expect("constant predictor cannot fail")
}
