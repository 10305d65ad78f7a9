use flsc_tensor::{ModelWeights, Tensor};

use crate::data::Image;
use crate::error::{invalid, CoreError, Result};
use crate::hvt::argmax;

/// `Σ_k (n_k / n)·w_k`, applied to every tensor including tracked buffers.
pub fn fedavg_aggregate(participants: &[(&ModelWeights, usize)]) -> Result<ModelWeights> {
    let (first, _) = participants
        .first()
        .ok_or_else(|| invalid("fedavg_aggregate", "no participants"))?;
    for (w, n) in participants {
        first.check_aggregable(w)?;
        if *n == 0 {
            return Err(invalid("fedavg_aggregate", "participant with zero samples"));
        }
    }
    let total: usize = participants.iter().map(|(_, n)| n).sum();
    let mut out = ModelWeights::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0; t.numel()];
        for (w, n) in participants {
            let share = *n as f64 / total as f64;
            let src = w.require(name)?.data();
            acc.iter_mut().zip(src).for_each(|(a, v)| *a += share * v);
        }
        out.insert(name.to_string(), Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// Mean of per-device score vectors, then argmax (lowest index on ties).
pub fn aggregate_results_classification(scores: &[Vec<f64>]) -> Result<usize> {
    Ok(argmax(&mean_scores(scores)?))
}

pub fn mean_scores(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = scores
        .first()
        .ok_or_else(|| invalid("aggregate_results_classification", "no score vectors"))?;
    let k = first.len();
    for s in scores {
        if s.len() != k {
            return Err(CoreError::Shape {
                op: "aggregate_results_classification",
                expected: format!("{k} scores"),
                actual: s.len().to_string(),
            });
        }
        let total: f64 = s.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "aggregate_results_classification",
                format!("score vector sums to {total}, not 1"),
            ));
        }
    }
    let mut mean = vec![0.0; k];
    for s in scores {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= scores.len() as f64);
    Ok(mean)
}

#[derive(Clone, Debug)]
pub struct Panorama {
    pub image: Image,
    /// Canvas pixels (per spatial position) no view covers; left at zero.
    pub empty_pixels: usize,
}

/// Places each view at its known `(x, y)` offset on a canvas sized to the
/// union of placements, averaging wherever views overlap.
pub fn aggregate_results_reconstruction(views: &[Image], offsets: &[(usize, usize)]) -> Result<Panorama> {
    let first = views
        .first()
        .ok_or_else(|| invalid("aggregate_results_reconstruction", "no views"))?;
    if views.len() != offsets.len() {
        return Err(invalid(
            "aggregate_results_reconstruction",
            format!("{} views but {} offsets", views.len(), offsets.len()),
        ));
    }
    if let Some(v) = views.iter().find(|v| !v.same_shape(first)) {
        return Err(CoreError::Shape {
            op: "aggregate_results_reconstruction",
            expected: format!("{}x{}x{}", first.channels, first.height, first.width),
            actual: format!("{}x{}x{}", v.channels, v.height, v.width),
        });
    }
    let (c, h, w) = (first.channels, first.height, first.width);
    let width = offsets.iter().map(|o| o.0 + w).max().unwrap_or(w);
    let height = offsets.iter().map(|o| o.1 + h).max().unwrap_or(h);
    let mut sum = Image::filled(c, height, width, 0.0);
    let mut count = vec![0usize; height * width];
    for (v, &(x0, y0)) in views.iter().zip(offsets) {
        for y in 0..h {
            for x in 0..w {
                count[(y0 + y) * width + x0 + x] += 1;
                for ch in 0..c {
                    let cur = sum.at(ch, y0 + y, x0 + x);
                    sum.set(ch, y0 + y, x0 + x, cur + v.at(ch, y, x));
                }
            }
        }
    }
    let mut empty = 0;
    for y in 0..height {
        for x in 0..width {
            let n = count[y * width + x];
            if n == 0 {
                empty += 1;
                continue;
            }
            for ch in 0..c {
                let v = sum.at(ch, y, x);
                sum.set(ch, y, x, v / n as f64);
            }
        }
    }
    Ok(Panorama {
        image: sum,
        empty_pixels: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_weights(v: f64) -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("a", Tensor::scalar(v));
        w
    }

    #[test]
    fn weighted_mean_by_sample_count() {
        let ws = [scalar_weights(0.0), scalar_weights(0.0), scalar_weights(1.0)];
        let agg = fedavg_aggregate(&[(&ws[0], 1), (&ws[1], 1), (&ws[2], 2)]).unwrap();
        assert_eq!(agg.get("a").unwrap().item(), 0.5);
        assert!(fedavg_aggregate(&[]).is_err());
        let mut other = ModelWeights::new();
        other.insert("b", Tensor::scalar(0.0));
        assert!(fedavg_aggregate(&[(&ws[0], 1), (&other, 1)]).is_err());
    }

    #[test]
    fn classification_hand_example() {
        assert_eq!(aggregate_results_classification(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap(), 1);
        assert_eq!(aggregate_results_classification(&[vec![0.5, 0.5]]).unwrap(), 0);
        assert!(aggregate_results_classification(&[]).is_err());
        assert!(aggregate_results_classification(&[vec![0.6, 0.6]]).is_err());
    }

    #[test]
    fn gap_between_views_is_reported() {
        let a = Image::filled(1, 2, 2, 1.0);
        let p = aggregate_results_reconstruction(&[a.clone(), a], &[(0, 0), (3, 0)]).unwrap();
        assert_eq!(p.image.width, 5);
        assert_eq!(p.empty_pixels, 2);
        assert_eq!(p.image.at(0, 0, 2), 0.0);
    }
}
