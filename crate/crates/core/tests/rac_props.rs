mod common;

use argchange::argmetrics::{rac, rac_labels, rac_neutral, NeutralBand, PolaritySequence};
use common::rac_oracle;
use proptest::prelude::*;

fn labels() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..2, 1..60)
}

proptest! {
    #[test]
    fn rac_matches_oracle_and_is_bounded(l in labels()) {
        let v = rac_labels(&l).unwrap();
        prop_assert_eq!(v, rac_oracle(&l));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn rac_invariant_under_complement_and_reversal(l in labels()) {
        let v = rac_labels(&l).unwrap();
        let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
        let reversed: Vec<u8> = l.iter().rev().copied().collect();
        prop_assert_eq!(rac_labels(&flipped).unwrap(), v);
        prop_assert_eq!(rac_labels(&reversed).unwrap(), v);
    }

    #[test]
    fn probabilities_threshold_at_one_half(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let seq = PolaritySequence::from_probabilities(p.clone()).unwrap();
        let want: Vec<u8> = p.iter().map(|&x| u8::from(x >= 0.5)).collect();
        prop_assert_eq!(seq.labels(), want.as_slice());
        prop_assert_eq!(rac(&seq), rac_oracle(&want));
    }

    #[test]
    fn neutral_band_equals_oracle_on_kept_sentences(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let band = NeutralBand::default();
        let kept: Vec<u8> = p
            .iter()
            .filter(|&&x| !(0.4..=0.6).contains(&x))
            .map(|&x| u8::from(x >= 0.5))
            .collect();
        prop_assert_eq!(rac_neutral(&p, band).unwrap(), rac_oracle(&kept));
        let outside: Vec<f64> = p.iter().copied().filter(|&x| !(0.4..=0.6).contains(&x)).collect();
        if !outside.is_empty() {
            let std = rac(&PolaritySequence::from_probabilities(outside.clone()).unwrap());
            prop_assert_eq!(rac_neutral(&outside, band).unwrap(), std);
        }
    }
}

#[test]
fn edge_cases() {
    assert_eq!(rac_labels(&[1]).unwrap(), 0.0);
    assert_eq!(rac_labels(&[0, 0, 0, 0]).unwrap(), 0.0);
    assert_eq!(rac_labels(&[0, 1, 0, 1, 0]).unwrap(), 1.0);
    assert!(rac_labels(&[]).is_err());
    assert!(rac_labels(&[0, 2]).is_err());
    assert!(PolaritySequence::from_probabilities(vec![1.5]).is_err());
    assert!(NeutralBand::new(0.5, 0.6).is_err());
}
