use proptest::prelude::*;
use secr::checkpoint::{from_bytes, load, read_metadata, save, to_bytes};
use secr::gradcheck::tiny_config;
use secr::params::ParamGroup;
use secr::{Model, ModelBundle};

fn staged() -> Model {
    let mut m: Model = ModelBundle::new(&tiny_config(), 11).unwrap();
    m.stages = vec![0, 1];
    m.freeze(ParamGroup::Vision);
    m.freeze(ParamGroup::MlpConnector);
    m
}

#[test]
fn file_roundtrip_keeps_weights_stages_and_freezes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.secr");
    let m = staged();
    let run = serde_json::json!({ "seed": 11 });
    save(&m, Some(run.clone()), &path).unwrap();
    let (back, meta) = load(&path).unwrap();
    assert_eq!(back.store, m.store);
    assert_eq!(back.stages, vec![0, 1]);
    assert_eq!(back.frozen, m.frozen);
    assert_eq!(meta.run_config, Some(run.clone()));
    assert_eq!(meta.checksums, m.store.checksums());
    assert_eq!(std::fs::read(&path).unwrap(), to_bytes(&back, Some(run)).unwrap());
    assert!(!path.with_extension("tmp").exists());
}

#[test]
fn a_changed_frozen_group_is_rejected() {
    let mut m = staged();
    let id = m.store.iter().find(|(_, p)| p.group == ParamGroup::Vision).unwrap().0;
    m.store.get_mut(id).data_mut()[0] += 1.0;
    assert!(m.check_frozen().is_err());
    let err = from_bytes(&to_bytes(&m, None).unwrap()).unwrap_err().to_string();
    assert!(err.contains("frozen group vision"), "{err}");
}

#[test]
fn header_damage_is_diagnosed() {
    let bytes = to_bytes(&staged(), None).unwrap();
    assert!(from_bytes(&bytes[..10]).unwrap_err().to_string().contains("too short"));
    let mut long_meta = bytes.clone();
    long_meta[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    assert!(from_bytes(&long_meta).unwrap_err().to_string().contains("truncated metadata"));
    let mut garbled = bytes.clone();
    garbled[16] = b'#';
    assert!(from_bytes(&garbled).unwrap_err().to_string().contains("malformed metadata"));
    let dir = tempfile::tempdir().unwrap();
    assert!(load(&dir.path().join("missing.secr")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_flipped_payload_byte_is_rejected(pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let bytes = to_bytes(&staged(), None).unwrap();
        let (meta, start) = read_metadata(&bytes).unwrap();
        let t = &meta.tensors[pick.index(meta.tensors.len())];
        let at = start + t.offset + pick.index(t.length);
        let mut bad = bytes.clone();
        bad[at] ^= 1 << bit;
        prop_assert!(from_bytes(&bad).is_err());
    }
}
