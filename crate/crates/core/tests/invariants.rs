use std::collections::BTreeMap;

use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use vibefm::augment::{horizontal_flip, negate, scaling};
use vibefm::datamodel::{default_specs, DomainTag, ModalitySpec, Signals};
use vibefm::focal::info_nce;
use vibefm::preprocess::{compute_norm_stats, denormalize, normalize, segment_stream, signal_stft, StreamInfo};
use vibefm::store::{read_dataset, write_dataset};
use vibefm::synthgen::{generate_dataset, SynthSpec};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        runs_per_class: 2,
        duration_s: 4.0,
        seed,
        ..SynthSpec::default()
    }
}

fn signal(rows: usize, values: &[f32]) -> Array2<f32> {
    Array2::from_shape_vec((rows, values.len() / rows), values.to_vec()).unwrap()
}

#[test]
fn synth_is_reproducible_and_seeded() {
    let a = generate_dataset(&small_spec(3), DomainTag::SynthA).unwrap();
    let b = generate_dataset(&small_spec(3), DomainTag::SynthA).unwrap();
    let c = generate_dataset(&small_spec(4), DomainTag::SynthA).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), c.len());
    assert_ne!(a, c);
    assert_eq!(a.len(), 4 * 2 * 2);
}

#[test]
fn shifted_domain_keeps_layout() {
    let a = generate_dataset(&small_spec(0), DomainTag::SynthA).unwrap();
    let b = generate_dataset(&small_spec(0), DomainTag::SynthB).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.label, y.label);
        assert_eq!(x.start_time_s, y.start_time_s);
        assert_eq!(y.domain, DomainTag::SynthB);
        for (name, s) in &x.signals {
            assert_eq!(s.dim(), y.signals[name].dim());
        }
    }
}

#[test]
fn store_round_trips_a_dataset() {
    let data = generate_dataset(&small_spec(1), DomainTag::SynthA).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let mut back = read_dataset(dir.path()).unwrap();
    let key = |s: &vibefm::datamodel::Segment| (s.run_id.clone(), (s.start_time_s * 1e6) as i64);
    back.sort_by_key(key);
    let mut expected = data.clone();
    expected.sort_by_key(key);
    assert_eq!(back, expected);
}

#[test]
fn stream_segmentation_counts_windows() {
    let specs = default_specs();
    for (seconds, expected) in [(2.0, 1), (3.5, 1), (3.6, 2), (10.0, 6)] {
        let waveforms: Signals = specs
            .iter()
            .map(|s| {
                let n = (seconds * s.sample_rate_hz as f64).round() as usize;
                (s.name.clone(), Array2::zeros((s.channels, n)))
            })
            .collect();
        let info = StreamInfo::unlabeled("run", DomainTag::ModUnlabeled);
        let segs = segment_stream(&waveforms, &specs, 2.0, 0.2, &info).unwrap();
        assert_eq!(segs.len(), expected, "{seconds} s");
        for (i, s) in segs.iter().enumerate() {
            assert_relative_eq!(s.start_time_s, i as f64 * 1.6, epsilon = 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stft_is_linear(
        x in prop::collection::vec(-4.0f32..4.0, 64),
        y in prop::collection::vec(-4.0f32..4.0, 64),
    ) {
        let sum: Vec<f32> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let fx = signal_stft("m", signal(1, &x).view(), 4).unwrap();
        let fy = signal_stft("m", signal(1, &y).view(), 4).unwrap();
        let fs = signal_stft("m", signal(1, &sum).view(), 4).unwrap();
        for ((a, b), c) in fx.re.iter().zip(fy.re.iter()).zip(fs.re.iter()) {
            prop_assert!((a + b - c).abs() < 1e-4);
        }
        for ((a, b), c) in fx.im.iter().zip(fy.im.iter()).zip(fs.im.iter()) {
            prop_assert!((a + b - c).abs() < 1e-4);
        }
    }

    #[test]
    fn negated_signal_has_negated_spectrum(x in prop::collection::vec(-4.0f32..4.0, 32)) {
        let s = signal(2, &x);
        let f = signal_stft("m", s.view(), 2).unwrap();
        let g = signal_stft("m", negate(&s).view(), 2).unwrap();
        for (a, b) in f.re.iter().zip(g.re.iter()) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn flip_commutes_with_negate_and_scaling(
        x in prop::collection::vec(-4.0f32..4.0, 24),
        factor in 0.1f64..3.0,
    ) {
        let s = signal(3, &x);
        prop_assert_eq!(horizontal_flip(&negate(&s)), negate(&horizontal_flip(&s)));
        prop_assert_eq!(
            horizontal_flip(&scaling(&s, factor).unwrap()),
            scaling(&horizontal_flip(&s), factor).unwrap()
        );
    }

    #[test]
    fn normalization_round_trips(
        x in prop::collection::vec(-4.0f32..4.0, 64),
        y in prop::collection::vec(-4.0f32..4.0, 64),
    ) {
        let specs: Vec<ModalitySpec> = default_specs();
        let name = specs[1].name.clone();
        let planes: Vec<BTreeMap<String, _>> = [x, y]
            .iter()
            .map(|v| [(name.clone(), signal_stft(&name, signal(1, v).view(), 4).unwrap())].into())
            .collect();
        let stats = compute_norm_stats(&planes).unwrap();
        let spec = &planes[0][&name];
        let back = denormalize(&normalize(spec, &stats).unwrap(), &stats).unwrap();
        for (a, b) in spec.re.iter().zip(back.re.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        for (a, b) in spec.im.iter().zip(back.im.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn info_nce_is_bounded_and_scale_free(
        rows in prop::collection::vec(prop::collection::vec(0.1f64..2.0, 6), 2..6),
        scale in 0.5f64..20.0,
        tau in 0.05f64..1.0,
    ) {
        let b = rows.len();
        let positives: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let loss = info_nce(&rows, &positives, tau).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= (b as f64).ln() + 2.0 / tau + 1e-9);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let again = info_nce(&scaled, &positives, tau).unwrap();
        prop_assert!((loss - again).abs() <= 1e-9 * (1.0 + loss));
    }
}
