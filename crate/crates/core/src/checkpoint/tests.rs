use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::envs::{Env, EnvKind};
use crate::trainer::{evaluate, EvalOptions, Method};

fn sample() -> Checkpoint {
    Checkpoint {
        tensors: vec![
            (
                "a".into(),
                Matrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 3e300]]).unwrap(),
            ),
            ("b.bias".into(), Matrix::zeros(1, 3)),
        ],
        config: "env = two_goal\n".into(),
        rng_state: [7; 32],
    }
}

#[test]
fn layout_is_exact() {
    let ck = Checkpoint {
        tensors: vec![("w".into(), Matrix::from_rows(&[vec![1.0]]).unwrap())],
        config: "x".into(),
        rng_state: [9; 32],
    };
    let bytes = encode(&ck).unwrap();
    let mut expected = b"CATPOL01".to_vec();
    expected.extend(1u32.to_le_bytes());
    expected.extend(1u32.to_le_bytes());
    expected.extend(b"w");
    expected.extend(1u32.to_le_bytes());
    expected.extend(1u32.to_le_bytes());
    expected.extend(1.0f64.to_le_bytes());
    expected.extend(1u32.to_le_bytes());
    expected.extend(b"x");
    expected.extend([9; 32]);
    assert_eq!(bytes, expected);
}

#[test]
fn round_trip_is_byte_identical() {
    let bytes = encode(&sample()).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(back, sample());
    assert_eq!(encode(&back).unwrap(), bytes);
}

#[test]
fn empty_table_loads() {
    let ck = Checkpoint {
        tensors: vec![],
        config: String::new(),
        rng_state: [0; 32],
    };
    let bytes = encode(&ck).unwrap();
    assert_eq!(bytes.len(), 8 + 4 + 4 + 32);
    assert_eq!(decode(&bytes).unwrap(), ck);
}

#[test]
fn corrupt_inputs_are_rejected() {
    let mut bytes = encode(&sample()).unwrap();
    assert!(matches!(decode(&bytes[..5]), Err(CheckpointError::BadMagic)));
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));

    let bytes = encode(&sample()).unwrap();
    // Cut inside the first tensor's values.
    let err = decode(&bytes[..8 + 4 + 4 + 1 + 8 + 12]).unwrap_err();
    assert!(
        matches!(&err, CheckpointError::Truncated(w) if w.contains("\"a\"")),
        "{err}"
    );
    assert!(err.to_string().contains("tensor \"a\""));
    let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(&err, CheckpointError::Truncated(w) if w == "generator state"));

    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode(&longer), Err(CheckpointError::TrailingBytes(1))));

    let mut dup = sample();
    dup.tensors[1].0 = "a".into();
    assert!(matches!(encode(&dup), Err(CheckpointError::NameCollision(n)) if n == "a"));
}

#[test]
fn duplicate_names_in_a_file_are_rejected() {
    let mut ck = sample();
    ck.tensors[1].0 = "c".into();
    let mut bytes = encode(&ck).unwrap();
    // Rename "c" to "a" in place; both names have length one.
    let pos = bytes.iter().rposition(|&b| b == b'c').unwrap();
    bytes[pos] = b'a';
    assert!(matches!(decode(&bytes), Err(CheckpointError::NameCollision(n)) if n == "a"));
}

#[test]
fn huge_declared_sizes_fail_without_allocating() {
    let mut bytes = b"CATPOL01".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(b"w");
    bytes.extend(u32::MAX.to_le_bytes());
    bytes.extend(u32::MAX.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(CheckpointError::Truncated(_))));
}

fn snapshot(method: Method) -> Snapshot {
    let config = TrainConfig {
        method,
        hidden: 8,
        n_factors: 2,
        n_classes: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let (policy, value) = config.init_models().unwrap();
    Snapshot {
        config,
        policy,
        value,
        rng: rng::stream(3, rng::EVAL),
    }
}

#[test]
fn snapshot_round_trip_preserves_models_and_generator() {
    for method in Method::ALL {
        let snap = snapshot(method);
        let ck = snap.to_checkpoint();
        assert!(ck
            .tensors
            .iter()
            .all(|(n, _)| n.starts_with("policy.") || n.starts_with("value.")));
        let back = Snapshot::from_checkpoint(&decode(&encode(&ck).unwrap()).unwrap()).unwrap();
        assert_eq!(back.config, snap.config);
        assert_eq!(back.policy, snap.policy);
        assert_eq!(back.value.mlp, snap.value.mlp);
        let (mut a, mut b) = (snap.rng.clone(), back.rng.clone());
        for _ in 0..100 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
        let env = Env::new(EnvKind::TwoGoal);
        let opts = EvalOptions {
            stochastic: true,
            freeze_mode: false,
        };
        let before = evaluate(&snap.policy, &env, 4, &mut snap.rng.clone(), opts).unwrap();
        let after = evaluate(&back.policy, &env, 4, &mut back.rng.clone(), opts).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn snapshot_rejects_mismatched_tables() {
    let ck = snapshot(Method::Ste).to_checkpoint();

    let mut missing = ck.clone();
    missing.tensors.pop();
    assert!(
        matches!(Snapshot::from_checkpoint(&missing), Err(CheckpointError::Tensor { msg, .. }) if msg == "missing")
    );

    let mut extra = ck.clone();
    extra.tensors.push(("policy.bonus".into(), Matrix::zeros(1, 1)));
    assert!(
        matches!(Snapshot::from_checkpoint(&extra), Err(CheckpointError::Tensor { name, .. }) if name == "policy.bonus")
    );

    let mut reshaped = ck.clone();
    reshaped.tensors[0].1 = Matrix::zeros(1, 1);
    assert!(matches!(
        Snapshot::from_checkpoint(&reshaped),
        Err(CheckpointError::Tensor { .. })
    ));

    let mut bad_config = ck;
    bad_config.config = "env = mars".into();
    assert!(matches!(
        Snapshot::from_checkpoint(&bad_config),
        Err(CheckpointError::Config(_))
    ));
}

fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
    let tensor = ("[a-z.0-9]{0,12}", 0usize..4, 0usize..4).prop_flat_map(|(name, r, c)| {
        prop::collection::vec(any::<f64>(), r * c).prop_map(move |v| (name.clone(), Matrix::new(r, c, v).unwrap()))
    });
    (prop::collection::vec(tensor, 0..5), ".{0,40}", any::<[u8; 32]>()).prop_map(|(mut tensors, config, rng_state)| {
        let mut seen = BTreeSet::new();
        tensors.retain(|(n, _)| seen.insert(n.clone()));
        Checkpoint {
            tensors,
            config,
            rng_state,
        }
    })
}

fn bits(ck: &Checkpoint) -> Vec<Vec<u64>> {
    ck.tensors
        .iter()
        .map(|(_, m)| m.as_slice().iter().map(|v| v.to_bits()).collect())
        .collect()
}

proptest! {
    #[test]
    fn encode_decode_round_trips(ck in arb_checkpoint()) {
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(&back.config, &ck.config);
        prop_assert_eq!(back.rng_state, ck.rng_state);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
        let mut framed = MAGIC.to_vec();
        framed.extend(&bytes);
        let _ = decode(&framed);
    }

    #[test]
    fn every_truncation_is_an_error(ck in arb_checkpoint(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&ck).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..at]).is_err());
    }
}
