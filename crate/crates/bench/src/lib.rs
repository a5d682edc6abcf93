//! Shared fixtures for the criterion benchmarks in `benches/`.

use driftbench_core::{make_synthetic_stream, Dataset, LabeledExample, SyntheticSpec};

/// A 3-class synthetic image set of `count` items at `size`×`size`.
pub fn images(count: usize, size: usize) -> Dataset {
    let spec = SyntheticSpec {
        height: size,
        width: size,
        count,
        test_count: 0,
        ..Default::default()
    };
    make_synthetic_stream(&spec).expect("valid synthetic spec").0
}

/// The first `per_class` examples of each class.
pub fn per_class(data: &Dataset, per_class: usize) -> Vec<Vec<LabeledExample>> {
    (0..data.num_classes)
        .map(|c| data.examples.iter().filter(|e| e.label == c).take(per_class).cloned().collect())
        .collect()
}
