use mvlstm::archive::{decode, encode};
use mvlstm::model::{Classifier, ModelConfig, Readout, TauPolicy};
use mvlstm::{CellOptions, Error, ParamSet, Variant};
use proptest::prelude::*;

fn classifier() -> impl Strategy<Value = Classifier> {
    (
        prop_oneof![Just(Variant::Lstm), Just(Variant::Modevar), Just(Variant::ModevarCrosscell)],
        (any::<bool>(), any::<bool>(), any::<bool>()),
        prop_oneof![Just(Readout::Last), Just(Readout::Mean)],
        prop_oneof![Just(TauPolicy::FirstFrame), Just(TauPolicy::RandomPerSequence), (0usize..50).prop_map(TauPolicy::Fixed)],
        (1usize..5, 1usize..6, 2usize..5),
        any::<u64>(),
    )
        .prop_map(|(variant, (d, b, u), readout, tau, (d_x, d_h, classes), seed)| {
            let cfg = ModelConfig {
                variant,
                hidden_dim: d_h,
                options: CellOptions {
                    diagonal_peephole: d,
                    bias_cell_dynamics_gates: b,
                    untied_crosscell: u,
                },
                readout,
            };
            let mut clf = Classifier::init(&cfg, d_x, classes, tau, seed).unwrap();
            // spread values over many exponents, including signed zero and subnormals
            let mut flat = clf.params.to_flat();
            for (i, v) in flat.iter_mut().enumerate() {
                *v = match i % 5 {
                    0 => -0.0,
                    1 => f64::MIN_POSITIVE / 3.0,
                    2 => *v * 1e200,
                    _ => *v,
                };
            }
            clf.params.set_flat(&flat);
            clf
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn archives_round_trip_bit_exactly(clf in classifier()) {
        let back = decode(&encode(&clf)).unwrap();
        let bits = |c: &Classifier| c.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&clf));
        prop_assert_eq!(back.params.names(), clf.params.names());
        prop_assert_eq!((back.readout, back.tau), (clf.readout, clf.tau));
        prop_assert_eq!(back.params.cell.options(), clf.params.cell.options());
    }

    #[test]
    fn any_single_bit_flip_is_rejected(clf in classifier(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&clf);
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn truncated_archives_are_rejected(clf in classifier(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&clf);
        let n = cut.index(bytes.len());
        let err = decode(&bytes[..n]).unwrap_err();
        prop_assert!(matches!(err, Error::Format(_) | Error::Checksum { .. }), "{err}");
    }
}
