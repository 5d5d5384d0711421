use approx::assert_abs_diff_eq;
use duralign::kernel::{align, attention_probability, cumulative_duration, length_probability};
use duralign::oracle::{oracle_length, oracle_values};
use duralign::{DurationParams, HiddenSequence};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_strategy() -> impl Strategy<Value = (Array2<f64>, usize)> {
    (1usize..=4, 1usize..=5, 1usize..=12).prop_flat_map(|(n, m, t)| {
        (
            prop::collection::vec(0.0f64..=1.0, n * m)
                .prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap()),
            Just(t),
        )
    })
}

proptest! {
    #[test]
    fn kernel_matches_enumeration((p, t) in params_strategy()) {
        let params = DurationParams::new(p).unwrap();
        let l = length_probability(&params);
        let q = cumulative_duration(&l, t).unwrap();
        let s = attention_probability(&l, &q).unwrap();
        let reference = oracle_values(&oracle_length(&params).unwrap(), t).unwrap();
        for (a, b) in q.view().iter().zip(reference.q.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in s.view().iter().zip(reference.s.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for (a, b) in s.coverage().iter().zip(reference.coverage.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn fair_coin_two_trials() {
    let h = HiddenSequence::new(array![[1.0, -2.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = align(Array2::zeros((1, 2)).view(), &h, 2, 0.0, &mut rng).unwrap();
    assert_abs_diff_eq!(
        a.attention.view(),
        array![[0.75, 0.25]].view(),
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(
        a.expanded.view(),
        array![[0.75, -1.5], [0.25, -0.5]].view(),
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(a.expected[0], 1.0, epsilon = 1e-15);
}

#[test]
fn seeded_noisy_alignment_is_bit_reproducible() {
    let logits = array![[0.3, -1.2, 2.0], [1.5, 0.0, -0.4]];
    let h = HiddenSequence::new(array![[1.0, 0.5], [-0.5, 2.0]]).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        align(logits.view(), &h, 5, 1.0, &mut rng).unwrap()
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert_eq!(a.preactivation, b.preactivation);
    assert_eq!(a.attention.view(), b.attention.view());
    assert_eq!(a.expanded.view(), b.expanded.view());
    assert_ne!(a.preactivation, c.preactivation);
}
