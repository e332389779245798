use overprune::bench::prepare_split;
use overprune::data::{apply_scaler, generate_teacher, split, split_indices, standardize, TeacherSpec};
use overprune::numerics::{mean, sample_variance};
use overprune::{Dataset, Matrix, NetworkShape, RngState};
use proptest::prelude::*;

fn linear(n: usize) -> Dataset {
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    Dataset::new(Matrix::from_vec(n, 1, x).unwrap(), y).unwrap()
}

#[test]
fn scaler_ignores_test_outliers() {
    let train = linear(30);
    let (scaler, _) = standardize(&train);
    let mut test = linear(5);
    test.x.as_mut_slice().iter_mut().for_each(|v| *v = 1e9);
    test.y.iter_mut().for_each(|v| *v = -1e9);
    let scaled = apply_scaler(&scaler, &test);
    assert_eq!(scaled.scaler.as_ref(), Some(&scaler));
    let (again, _) = standardize(&train);
    assert_eq!(again, scaler);
}

#[test]
fn prepared_splits_use_train_statistics() {
    let raw = linear(50);
    let (tr, te) = prepare_split(&raw, 0.2, 3).unwrap();
    assert_eq!((tr.len(), te.len()), (40, 10));
    assert_eq!(tr.scaler, te.scaler);
    assert!(mean(&tr.y).abs() < 1e-12);
    let back = te.unstandardized();
    for i in 0..back.len() {
        assert!((back.y[i] - (2.0 * back.x[(i, 0)] + 1.0)).abs() < 1e-9);
    }
}

#[test]
fn teacher_weights_follow_the_prior() {
    let mut spec = TeacherSpec::default_synthetic();
    spec.shape = NetworkShape::new(2, 5).unwrap();
    let mut all = Vec::new();
    for seed in 0..10_000u64 {
        let (_, p) = generate_teacher(&spec, 1, &mut RngState::new(seed)).unwrap();
        all.extend(p.to_flat());
    }
    let n = all.len() as f64;
    let m = mean(&all);
    let v = sample_variance(&all);
    assert!(m.abs() < 3.0 / n.sqrt(), "mean {m}");
    assert!((v - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "variance {v}");
}

#[test]
fn teacher_is_deterministic_per_seed() {
    let spec = TeacherSpec::default_synthetic();
    let a = generate_teacher(&spec, 20, &mut RngState::new(4)).unwrap();
    let b = generate_teacher(&spec, 20, &mut RngState::new(4)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert!(a.0.x.as_slice().iter().all(|v| (-4.0..4.0).contains(v)));
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 1usize..300, f in 0.0f64..1.0, seed in any::<u64>()) {
        let (tr, te) = split_indices(n, f, seed).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(te.len(), (n as f64 * f + 1e-9).floor() as usize);
    }

    #[test]
    fn split_datasets_keep_rows(n in 2usize..60, seed in any::<u64>()) {
        let raw = linear(n);
        let (tr, te) = split(&raw, 0.25, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), n);
        for d in [&tr, &te] {
            for i in 0..d.len() {
                prop_assert_eq!(d.y[i], 2.0 * d.x[(i, 0)] + 1.0);
            }
        }
    }
}
