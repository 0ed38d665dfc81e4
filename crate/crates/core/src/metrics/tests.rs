use super::*;
use proptest::prelude::*;

fn block(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Mask {
    let mut d = vec![false; h * w];
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            d[y * w + x] = true;
        }
    }
    Mask::new(h, w, d).unwrap()
}

#[test]
fn overlap_fixtures() {
    let a = block(4, 4, 1, 0, 2, 2);
    let b = block(4, 4, 1, 1, 2, 2);
    let (d, j) = overlap_metrics(&a, &b).unwrap();
    assert_eq!(d, 0.5);
    assert!((j - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(overlap_metrics(&a, &a).unwrap(), (1.0, 1.0));
    let far = block(4, 4, 0, 3, 1, 1);
    assert_eq!(overlap_metrics(&a, &far).unwrap(), (0.0, 0.0));
    let empty = Mask::new(4, 4, vec![false; 16]).unwrap();
    assert_eq!(overlap_metrics(&empty, &empty).unwrap(), (1.0, 1.0));
}

#[test]
fn surface_fixtures() {
    let a = block(8, 8, 0, 0, 1, 1);
    let b = block(8, 8, 3, 4, 1, 1);
    assert_eq!(surface_metrics(&a, &b).unwrap(), Some((5.0, 5.0)));
    let c = block(8, 8, 2, 2, 3, 4);
    assert_eq!(surface_metrics(&c, &c).unwrap(), Some((0.0, 0.0)));
    let empty = Mask::new(8, 8, vec![false; 64]).unwrap();
    assert_eq!(surface_metrics(&c, &empty).unwrap(), None);
}

#[test]
fn boundary_uses_four_neighbours_and_border() {
    let full = Mask::new(3, 3, vec![true; 9]).unwrap();
    assert_eq!(full.boundary().len(), 8);
    let inner = block(5, 5, 1, 1, 3, 3);
    assert_eq!(inner.boundary().len(), 8);
    assert!(!inner.boundary().contains(&(2, 2)));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let a = block(4, 4, 0, 0, 1, 1);
    let b = block(4, 5, 0, 0, 1, 1);
    assert!(matches!(
        overlap_metrics(&a, &b),
        Err(EtcError::Dimension(_))
    ));
    assert!(matches!(
        surface_metrics(&a, &b),
        Err(EtcError::Dimension(_))
    ));
    assert!(Mask::new(2, 2, vec![true; 3]).is_err());
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.35), 12 * 12)
        .prop_map(|d| Mask::new(12, 12, d).unwrap())
}

fn shifted(m: &Mask, dy: usize, dx: usize) -> Mask {
    let (h, w) = (m.height() + dy, m.width() + dx);
    let mut d = vec![false; h * w];
    for y in 0..m.height() {
        for x in 0..m.width() {
            d[(y + dy) * w + x + dx] = m.data()[y * m.width() + x];
        }
    }
    Mask::new(h, w, d).unwrap()
}

fn padded(m: &Mask, dy: usize, dx: usize) -> Mask {
    // same content, larger canvas, no translation
    let (h, w) = (m.height() + dy, m.width() + dx);
    let mut d = vec![false; h * w];
    for y in 0..m.height() {
        for x in 0..m.width() {
            d[y * w + x] = m.data()[y * m.width() + x];
        }
    }
    Mask::new(h, w, d).unwrap()
}

proptest! {
    #[test]
    fn metric_properties(a in mask_strategy(), b in mask_strategy()) {
        let (d, j) = overlap_metrics(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(d >= j);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert_eq!(overlap_metrics(&b, &a).unwrap(), (d, j));
        let s = surface_metrics(&a, &b).unwrap();
        prop_assert_eq!(surface_metrics(&b, &a).unwrap(), s);
        if let Some((asd, hd)) = s {
            prop_assert!(asd <= hd + 1e-9);
            prop_assert!(asd >= 0.0);
        }
    }

    #[test]
    fn translation_invariance(a in mask_strategy(), b in mask_strategy(), dy in 0usize..4, dx in 0usize..4) {
        // translate inside a canvas big enough that no pixel leaves it,
        // and compare with the untranslated pair on the same canvas
        let (pa, pb) = (padded(&a, 4, 4), padded(&b, 4, 4));
        let (ta, tb) = (shifted(&a, dy, dx), shifted(&b, dy, dx));
        let (ta, tb) = (padded(&ta, 4 - dy, 4 - dx), padded(&tb, 4 - dy, 4 - dx));
        prop_assert_eq!(overlap_metrics(&pa, &pb).unwrap(), overlap_metrics(&ta, &tb).unwrap());
        prop_assert_eq!(surface_metrics(&pa, &pb).unwrap(), surface_metrics(&ta, &tb).unwrap());
    }
}

#[test]
fn accumulator_averages_samples_and_classes() {
    let (h, w) = (4, 4);
    let truth: Vec<usize> = (0..16)
        .map(|i| {
            if i < 4 {
                1
            } else if i >= 12 {
                2
            } else {
                0
            }
        })
        .collect();
    let mut acc = MetricAccumulator::new(3);
    acc.add(&truth, &truth, h, w).unwrap();
    let mut wrong = truth.clone();
    for v in wrong.iter_mut() {
        if *v == 2 {
            *v = 0;
        }
    }
    acc.add(&wrong, &truth, h, w).unwrap();
    let r = acc.finish();
    assert_eq!(r.per_class["class_1"].dsc, 1.0);
    assert_eq!(r.per_class["class_2"].dsc, 0.5);
    assert_eq!(r.mean.dsc, 0.75);
    assert_eq!(acc.excluded(), 1);
    assert_eq!(r.per_class["class_2"].asd, Some(0.0));
    assert!(acc.add(&truth[..4], &truth, h, w).is_err());
}

#[test]
fn report_json_layout() {
    let mut acc = MetricAccumulator::new(2);
    acc.add(&[0, 1, 1, 0], &[0, 1, 0, 0], 2, 2).unwrap();
    let mut branches = BTreeMap::new();
    for name in ["ecb", "epb", "efb", "ensemble"] {
        branches.insert(name.to_string(), acc.finish());
    }
    let report = MetricReport {
        branches,
        excluded_surface_cases: 0,
    };
    let v = report.to_json();
    assert!(v["ensemble"]["class_1"]["dsc"].is_f64());
    assert!(v["ecb"]["mean"]["hd95"].is_f64());
    assert_eq!(v["excluded_surface_cases"], 0);
    assert_eq!(v.as_object().unwrap().len(), 5);
}
