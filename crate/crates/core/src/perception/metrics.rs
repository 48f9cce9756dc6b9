use super::InstanceMask;

/// Intersection over union of two masks of the same image.
pub fn mask_iou(a: &InstanceMask, b: &InstanceMask) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a == 0 && area_b == 0 {
        return 0.0;
    }
    let inter = if a.area() <= b.area() {
        a.pixels().filter(|&(x, y)| b.get(x as i64, y as i64)).count()
    } else {
        b.pixels().filter(|&(x, y)| a.get(x as i64, y as i64)).count()
    };
    inter as f64 / (area_a + area_b - inter) as f64
}

/// Mask average precision at one IoU threshold for a single image.
pub fn ap_at_iou(predictions: &[InstanceMask], ground_truth: &[InstanceMask], iou_thr: f64) -> f64 {
    ap_at_iou_images(&[(predictions, ground_truth)], iou_thr)
}

/// Average precision pooled over several images.
///
/// Predictions are visited by descending confidence (ties by image, then
/// index) and greedily matched to the unmatched ground truth of the same
/// image with the highest IoU at or above `iou_thr`. The precision-recall
/// curve is interpolated at 101 recall points.
pub fn ap_at_iou_images(images: &[(&[InstanceMask], &[InstanceMask])], iou_thr: f64) -> f64 {
    let total_gt: usize = images.iter().map(|(_, gt)| gt.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(img, (preds, _))| (0..preds.len()).map(move |i| (img, i)))
        .collect();
    order.sort_by(|&(ia, a), &(ib, b)| {
        images[ib].0[b]
            .confidence
            .total_cmp(&images[ia].0[a].confidence)
            .then(ia.cmp(&ib))
            .then(a.cmp(&b))
    });

    let mut matched: Vec<Vec<bool>> = images.iter().map(|(_, gt)| vec![false; gt.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for (img, i) in order {
        let pred = &images[img].0[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in images[img].1.iter().enumerate() {
            if matched[img][g] {
                continue;
            }
            let iou = mask_iou(pred, gt);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    let mut sum = 0.0;
    for r in 0..=100 {
        let recall = r as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rc, _)| *rc >= recall - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rect(id: usize, conf: f64, x0: u32, y0: u32, w: u32, h: u32) -> InstanceMask {
        let px: Vec<_> = (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (x, y))).collect();
        InstanceMask::from_pixels(id, conf, 200, 200, &px)
    }

    #[test]
    fn iou_cases() {
        let a = rect(0, 1.0, 0, 0, 10, 10);
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert_eq!(mask_iou(&a, &rect(1, 1.0, 50, 50, 10, 10)), 0.0);
        let b = rect(1, 1.0, 0, 5, 10, 10);
        assert_relative_eq!(mask_iou(&a, &b), 50.0 / 150.0, epsilon = 1e-12);
        assert_eq!(mask_iou(&a, &b), mask_iou(&b, &a));
    }

    #[test]
    fn ap_trivial_cases() {
        let gt = vec![rect(0, 1.0, 0, 0, 10, 10), rect(1, 1.0, 20, 0, 10, 10)];
        for thr in [0.5, 0.8, 0.9] {
            assert_relative_eq!(ap_at_iou(&gt, &gt, thr), 1.0, epsilon = 1e-12);
        }
        assert_eq!(ap_at_iou(&[], &gt, 0.5), 0.0);
        assert_eq!(ap_at_iou(&gt, &[], 0.5), 0.0);
    }

    #[test]
    fn ap_with_leading_false_positive() {
        let gt = vec![rect(0, 1.0, 0, 0, 10, 10), rect(1, 1.0, 20, 0, 10, 10), rect(2, 1.0, 40, 0, 10, 10)];
        let preds = vec![
            rect(9, 0.95, 100, 100, 10, 10),
            rect(0, 0.9, 0, 0, 10, 10),
            rect(1, 0.8, 20, 0, 10, 10),
        ];
        // PR points (1/3, 1/2), (2/3, 2/3): interpolated precision 2/3 for
        // the 67 recall points 0.00..=0.66, zero beyond.
        assert_relative_eq!(ap_at_iou(&preds, &gt, 0.5), 67.0 / 101.0 * 2.0 / 3.0, epsilon = 1e-12);
    }
}
