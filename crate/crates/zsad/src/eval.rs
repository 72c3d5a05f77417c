//! Image-level AUROC/AP and pixel-level AUROC/AUPRO.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Per-dataset metric bundle.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub pixel_auroc: f64,
    pub aupro: f64,
    pub n_images: usize,
    pub fingerprint: String,
}

/// AUROC as the normalized Mann-Whitney U statistic; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Step-interpolated PR area: sum of precision at each positive hit divided
/// by the number of positives. Ties are broken by original index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Pixel-level AUROC: flatten all maps and masks, single AUROC code path.
pub fn pixel_auroc(maps: &[Array2<f64>], masks: &[Array2<f64>]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::Input("map/mask shape mismatch".into()));
        }
        scores.extend(map.iter().cloned());
        labels.extend(mask.iter().map(|&v| (v > 0.0) as u8));
    }
    auroc(&scores, &labels)
}

/// 8-connected components of a binary mask; returns per-region pixel lists.
pub fn connected_components(mask: &Array2<f64>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut regions = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] <= 0.0 || seen[(y, x)] == 1 {
                continue;
            }
            let mut region = Vec::new();
            let mut queue = vec![(y, x)];
            seen[(y, x)] = 1;
            while let Some((cy, cx)) = queue.pop() {
                region.push((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[(ny, nx)] > 0.0 && seen[(ny, nx)] == 0 {
                            seen[(ny, nx)] = 1;
                            queue.push((ny, nx));
                        }
                    }
                }
            }
            regions.push(region);
        }
    }
    regions
}

/// Area under the per-region-overlap curve vs false-positive rate, up to
/// `fpr_limit` and normalized by it.
///
/// Thresholds sweep all distinct pooled score values when there are at most
/// `n_thresholds` of them, otherwise `n_thresholds` evenly spaced quantiles.
pub fn aupro(
    maps: &[Array2<f64>],
    masks: &[Array2<f64>],
    fpr_limit: f64,
    n_thresholds: usize,
) -> Result<f64> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::Input("aupro: need matching non-empty map/mask sets".into()));
    }
    if !(0.0..=1.0).contains(&fpr_limit) || fpr_limit == 0.0 {
        return Err(Error::Input("fpr_limit must be in (0, 1]".into()));
    }

    // Regions across the whole set, tagged with their image index.
    let mut regions: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    let mut n_normal = 0usize;
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.dim() != mask.dim() {
            return Err(Error::Input("aupro: map/mask shape mismatch".into()));
        }
        for region in connected_components(mask) {
            regions.push((i, region));
        }
        n_normal += mask.iter().filter(|&&v| v <= 0.0).count();
    }
    if regions.is_empty() {
        return Err(Error::UndefinedMetric(
            "aupro needs at least one anomalous region".into(),
        ));
    }
    if n_normal == 0 {
        return Err(Error::UndefinedMetric(
            "aupro needs at least one normal pixel".into(),
        ));
    }

    let mut pooled: Vec<f64> = maps.iter().flat_map(|m| m.iter().cloned()).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    pooled.dedup();
    let thresholds: Vec<f64> = if pooled.len() <= n_thresholds {
        pooled
    } else {
        (0..n_thresholds)
            .map(|i| {
                let q = i as f64 / (n_thresholds - 1) as f64;
                pooled[((q * (pooled.len() - 1) as f64).round()) as usize]
            })
            .collect()
    };

    // Curve from high to low threshold; starts at the empty prediction.
    let mut curve = vec![(0.0f64, 0.0f64)];
    for &t in thresholds.iter().rev() {
        let mut pro_sum = 0.0;
        for (img, region) in &regions {
            let hit = region
                .iter()
                .filter(|&&(y, x)| maps[*img][(y, x)] >= t)
                .count();
            pro_sum += hit as f64 / region.len() as f64;
        }
        let pro = pro_sum / regions.len() as f64;
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|(map, mask)| {
                ndarray::Zip::from(map)
                    .and(mask)
                    .fold(0usize, |acc, &s, &m| acc + ((m <= 0.0 && s >= t) as usize))
            })
            .sum();
        let fpr = fp as f64 / n_normal as f64;
        curve.push((fpr, pro));
    }

    Ok(area_under_curve(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area of an (x, y) curve with x non-decreasing, clipped at
/// `x_limit` by linear interpolation.
pub fn area_under_curve(points: &[(f64, f64)], x_limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x1 <= x_limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else if x0 < x_limit {
            let ye = y0 + (y1 - y0) * (x_limit - x0) / (x1 - x0);
            area += (x_limit - x0) * (y0 + ye) / 2.0;
            break;
        } else {
            break;
        }
    }
    area
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auroc_handles_ties_with_half_credit() {
        let v = auroc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_auroc_is_undefined() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn average_precision_without_positives_is_undefined() {
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn perfect_ranking_gives_unit_scores() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert!((auroc(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
        assert!((average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aupro_needs_regions_and_normal_pixels() {
        let map = array![[0.1, 0.9], [0.2, 0.8]];
        let empty_mask = array![[0.0, 0.0], [0.0, 0.0]];
        assert!(matches!(
            aupro(&[map.clone()], &[empty_mask], 0.3, 10),
            Err(Error::UndefinedMetric(_))
        ));
        let full_mask = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            aupro(&[map], &[full_mask], 0.3, 10),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn area_under_curve_interpolates_at_limit() {
        // y = x up to 1: area to 0.5 is 0.125.
        let curve = [(0.0, 0.0), (1.0, 1.0)];
        assert!((area_under_curve(&curve, 0.5) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn diagonal_region_is_one_component_under_8_connectivity() {
        let mask = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(connected_components(&mask).len(), 1);
    }
}
