//! Classification and part-segmentation scores.

use crate::error::{Error, Result};

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need equal nonempty prediction/label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy restricted to each class (None for classes without samples).
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Option<f64>>> {
    check_lengths(preds, labels)?;
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= classes {
            return Err(Error::Data {
                index: l,
                msg: format!("label {l} is not below the class count {classes}"),
            });
        }
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    Ok(seen
        .iter()
        .zip(&hit)
        .map(|(&s, &h)| (s > 0).then(|| h as f64 / s as f64))
        .collect())
}

/// IoU = TP / (TP + FP + FN) for every part of one object; None for parts
/// absent from both prediction and truth.
pub fn part_ious(preds: &[usize], labels: &[usize], parts: usize) -> Result<Vec<Option<f64>>> {
    check_lengths(preds, labels)?;
    let mut tp = vec![0usize; parts];
    let mut fp = vec![0usize; parts];
    let mut fn_ = vec![0usize; parts];
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if l >= parts || p >= parts {
            return Err(Error::Data {
                index: i,
                msg: format!("part id {} is not below the part count {parts}", l.max(p)),
            });
        }
        if p == l {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    Ok((0..parts)
        .map(|k| {
            let denom = tp[k] + fp[k] + fn_[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect())
}

/// Mean IoU over the parts present in one object.
pub fn object_miou(preds: &[usize], labels: &[usize], parts: usize) -> Result<f64> {
    let ious: Vec<f64> = part_ious(preds, labels, parts)?.into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Segmentation scores over a set of objects.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    /// Mean over objects.
    pub instance_miou: f64,
    /// Mean over classes of the per-class object mean.
    pub class_miou: f64,
    /// Per class: (mean object mIoU, object count); None if no objects.
    pub per_class: Vec<Option<(f64, usize)>>,
}

/// `objects` holds (class id, predictions, labels); `parts[c]` is the part
/// count of class c.
pub fn segmentation_scores(
    objects: &[(usize, Vec<usize>, Vec<usize>)],
    parts: &[usize],
) -> Result<SegmentationScores> {
    if objects.is_empty() {
        return Err(Error::InvalidInput("no objects to score".into()));
    }
    let mut sums = vec![(0.0, 0usize); parts.len()];
    let mut total = 0.0;
    for (i, (class, preds, labels)) in objects.iter().enumerate() {
        let count = *parts.get(*class).ok_or_else(|| Error::Data {
            index: i,
            msg: format!("class {class} has no part count"),
        })?;
        let m = object_miou(preds, labels, count)?;
        total += m;
        sums[*class].0 += m;
        sums[*class].1 += 1;
    }
    let per_class: Vec<Option<(f64, usize)>> = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| (s / n as f64, n)))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().map(|(m, _)| *m).collect();
    Ok(SegmentationScores {
        instance_miou: total / objects.len() as f64,
        class_miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}
