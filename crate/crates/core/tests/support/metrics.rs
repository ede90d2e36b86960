#![allow(dead_code)]

use ovseg_core::metrics::{ConfusionMatrix, PanopticAccumulator, PanopticSegment};

pub fn seg(class: u32, pixels: std::ops::Range<usize>) -> PanopticSegment {
    PanopticSegment {
        class,
        pixels: pixels.collect(),
    }
}

pub fn two_by_two_miou() {
    let mut m = ConfusionMatrix::new(2);
    m.add(&[0, 0, 1, 1], &[0, 1, 1, 1], None).unwrap();
    let r = m.iou();
    assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((r.miou.unwrap() - 7.0 / 12.0).abs() < 1e-12);
}

pub fn miou_roles_are_asymmetric() {
    // Class 2 is predicted but absent from the ground truth.
    let (a, b) = ([0, 0, 2, 2], [0, 0, 1, 1]);
    let mut m = ConfusionMatrix::new(3);
    m.add(&a, &b, None).unwrap();
    let mut t = ConfusionMatrix::new(3);
    t.add(&b, &a, None).unwrap();
    assert_eq!(m.iou().miou, Some(0.5));
    assert_eq!(t.iou().miou, Some(0.5));
    assert_ne!(m.iou().per_class_iou, t.iou().per_class_iou);
    let (a, b) = ([0, 1, 1, 1], [0, 0, 0, 1]);
    let mut m = ConfusionMatrix::new(2);
    m.add(&a, &b, None).unwrap();
    let mut t = ConfusionMatrix::new(2);
    t.add(&b, &a, None).unwrap();
    assert_eq!(m.iou().per_class_iou, t.iou().per_class_iou);
    let mut m = ConfusionMatrix::new(3);
    m.add(&[0, 0, 2, 2], &[0, 0, 0, 0], None).unwrap();
    let mut t = ConfusionMatrix::new(3);
    t.add(&[0, 0, 0, 0], &[0, 0, 2, 2], None).unwrap();
    assert_eq!(m.iou().miou, Some(0.5));
    assert_eq!(t.iou().miou, Some(0.25));
}

pub fn identical_maps_and_ignored_pixels() {
    let mut m = ConfusionMatrix::new(3);
    m.add(&[0, 1, 2, 1], &[0, 1, 2, 1], None).unwrap();
    assert_eq!(m.iou().miou, Some(1.0));
    let mut m = ConfusionMatrix::new(3);
    m.add(&[0, 1], &[255, 255], Some(255)).unwrap();
    assert_eq!(m.total(), 0);
    assert_eq!(m.iou().miou, None);
    assert!(m.add(&[3], &[0], None).is_err());
}

pub fn panoptic_examples() {
    // Ten gt pixels, eight of them predicted: IoU 0.8.
    let mut a = PanopticAccumulator::default();
    a.add(&[seg(1, 0..8)], &[seg(1, 0..10)]).unwrap();
    let r = a.report();
    assert!((r.pq - 0.8).abs() < 1e-12);
    assert!((r.sq - 0.8).abs() < 1e-12);
    assert_eq!(r.rq, 1.0);

    let mut a = PanopticAccumulator::default();
    a.add(&[seg(0, 0..5), seg(2, 5..9)], &[seg(0, 0..5), seg(2, 5..9)])
        .unwrap();
    let r = a.report();
    assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));

    let mut a = PanopticAccumulator::default();
    a.add(&[], &[seg(0, 0..5)]).unwrap();
    let r = a.report();
    assert_eq!((r.pq, r.sq, r.rq), (0.0, 0.0, 0.0));

    // Exactly one half does not match.
    let mut a = PanopticAccumulator::default();
    a.add(&[seg(0, 0..5)], &[seg(0, 0..10)]).unwrap();
    assert_eq!((a.tp, a.fp, a.fn_), (0, 1, 1));

    let mut a = PanopticAccumulator::default();
    assert!(a.add(&[seg(0, 0..5), seg(1, 4..8)], &[]).is_err());
}

pub fn random_segments(labels: &[u8]) -> Vec<PanopticSegment> {
    let mut out = Vec::new();
    for c in 0..4u8 {
        let px: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !px.is_empty() {
            out.push(PanopticSegment {
                class: c as u32 % 2,
                pixels: px,
            });
        }
    }
    out
}

pub fn unlabelled_predictions_count_as_misses() {
    let mut m = ConfusionMatrix::new(2);
    m.add(&[0, 255, 1, 1], &[0, 0, 1, 255], Some(255)).unwrap();
    assert_eq!(m.unlabelled(0), 1);
    assert_eq!(m.total(), 3);
    assert_eq!(m.iou().per_class_iou, vec![Some(0.5), Some(1.0)]);
}
