use std::collections::HashMap;

use fluff_core::synth::{generate_dataset, ScaleClass, SceneSpec};

// small/medium bounds are 32 and 96 pixel sides at 300 px, scaled to the image
fn scale_by_side(spec: &SceneSpec, pixel_area: usize) -> ScaleClass {
    let f = spec.image_size as f64 / 300.0;
    let a = pixel_area as f64;
    if a < (32.0 * f) * (32.0 * f) {
        ScaleClass::Small
    } else if a < (96.0 * f) * (96.0 * f) {
        ScaleClass::Medium
    } else {
        ScaleClass::Large
    }
}

#[test]
fn default_mixture_over_ten_thousand_boxes() {
    let spec = SceneSpec::new(64, 31);
    let ds = generate_dataset(&spec, 5200).unwrap();
    let objects: Vec<_> = ds.annotations.iter().flat_map(|a| &a.objects).collect();
    assert!(objects.len() >= 10_000, "only {} boxes", objects.len());

    let mut counts: HashMap<ScaleClass, usize> = HashMap::new();
    for o in &objects {
        let s = scale_by_side(&spec, o.pixel_area());
        assert_eq!(s, o.scale);
        *counts.entry(s).or_default() += 1;
    }
    let n = objects.len() as f64;
    for (class, want) in [(ScaleClass::Small, 0.415), (ScaleClass::Medium, 0.343), (ScaleClass::Large, 0.242)] {
        let got = counts.get(&class).copied().unwrap_or(0) as f64 / n;
        assert!((got - want).abs() <= 0.02, "{class:?}: {got:.4} vs {want}");
    }
}

#[test]
fn classes_are_balanced() {
    let spec = SceneSpec::new(64, 9);
    let ds = generate_dataset(&spec, 800).unwrap();
    let mut counts = vec![0usize; spec.classes.len() + 1];
    for o in ds.annotations.iter().flat_map(|a| &a.objects) {
        assert!(o.label >= 1 && o.label <= spec.classes.len());
        assert_eq!(spec.classes[o.label - 1], o.shape);
        counts[o.label] += 1;
    }
    let n: usize = counts.iter().sum();
    assert!(n >= 1000, "only {n} objects");
    let uniform = 1.0 / spec.classes.len() as f64;
    for (label, &c) in counts.iter().enumerate().skip(1) {
        let f = c as f64 / n as f64;
        assert!((f - uniform).abs() <= 0.05, "label {label}: {f:.4}");
    }
}

#[test]
fn object_counts_stay_in_range() {
    let spec = SceneSpec {
        min_objects: 2,
        max_objects: 4,
        ..SceneSpec::new(96, 5)
    };
    let ds = generate_dataset(&spec, 200).unwrap();
    let mut seen = [false; 5];
    for a in &ds.annotations {
        let k = a.objects.len();
        assert!((2..=4).contains(&k));
        seen[k] = true;
        assert_eq!((a.width, a.height), (96, 96));
    }
    assert!(seen[2] && seen[3] && seen[4]);
}
