mod common;

use bridgetune::cli::{
    bundle_checkpoint, bundle_from_checkpoint, hypernet_checkpoint, hypernet_from_checkpoint, load_bundle,
    lora_checkpoint, lora_from_checkpoint, read_header, save_bundle, ti_checkpoint, ti_from_checkpoint, Checkpoint,
    Header, MAGIC,
};
use bridgetune::finetune::{hn_build, lora_attach, ti_extend_vocab, HnActivation, HnInit};
use bridgetune::networks::ParamStore;
use bridgetune::tensor::{RngStream, Tensor};
use bridgetune::Error;
use proptest::prelude::*;

fn split(bytes: &[u8]) -> (Header, Vec<u8>) {
    let text_end = bytes.iter().position(|&b| b == b'\n').unwrap();
    let len_end = text_end + 1 + bytes[text_end + 1..].iter().position(|&b| b == b'\n').unwrap();
    let len: usize = std::str::from_utf8(&bytes[text_end + 1..len_end]).unwrap().parse().unwrap();
    let start = len_end + 1;
    let header = serde_json::from_slice(&bytes[start..start + len]).unwrap();
    (header, bytes[start + len..].to_vec())
}

fn join(header: &Header, payload: &[u8]) -> Vec<u8> {
    let h = serde_json::to_vec(header).unwrap();
    let mut out = format!("{MAGIC}\n{}\n", h.len()).into_bytes();
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    out
}

fn two_tensors() -> Checkpoint {
    let mut p = ParamStore::new();
    p.insert("a".into(), Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 0.25]).unwrap());
    p.insert("b".into(), Tensor::from_f64(&[3], &[9.0, 8.0, 7.0]).unwrap());
    Checkpoint::new(p).with_meta("kind", "test")
}

#[test]
fn bundle_round_trip_is_exact() {
    let b = common::tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundle.ckpt");
    save_bundle(&b, &path).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(back.config, b.config);
    assert_eq!(back.vocab.tokens(), b.vocab.tokens());
    assert_eq!((back.vae_steps, back.denoiser_steps), (1, 1));
    for (name, t) in &b.params {
        assert!(t.bit_eq(&back.params[name]), "{name}");
    }
    let first = std::fs::read(&path).unwrap();
    save_bundle(&back, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn bundle_rejects_missing_or_reshaped_tensor() {
    let b = common::tiny_bundle();
    let mut c = bundle_checkpoint(&b).unwrap();
    let name = c.tensors.keys().next().unwrap().clone();
    let t = c.tensors.remove(&name).unwrap();
    assert!(bundle_from_checkpoint(&c).is_err());
    c.tensors.insert(name, t.reshape(&[1, t.numel()]).unwrap());
    assert!(bundle_from_checkpoint(&c).is_err());
}

#[test]
fn ti_container_holds_one_named_vector() {
    let mut b = common::tiny_bundle();
    let art = ti_extend_vocab(&mut b, "<the core bridge>", "bridge").unwrap();
    let c = ti_checkpoint(&art);
    let header = read_header(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(header.tensors.len(), 1);
    assert_eq!(header.tensors[0].name, "<the core bridge>");
    assert_eq!(header.tensors[0].shape, vec![1, b.config.d_txt]);
    assert_eq!(header.metadata["token_id"], 256);
    let back = ti_from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back, art);
}

#[test]
fn adapter_containers_round_trip() {
    let b = common::tiny_bundle();
    let rng = RngStream::new(4, 4);
    let lora = lora_attach(&b, "aki", 4, 4.0, 0.01, &rng).unwrap();
    let c = Checkpoint::from_bytes(&lora_checkpoint(&lora).to_bytes().unwrap()).unwrap();
    assert_eq!(lora_from_checkpoint(&c).unwrap(), lora);
    assert!(hypernet_from_checkpoint(&c).is_err());

    let hn = hn_build(&b, "coral_shell_bridge", &[1.0, 2.0, 1.0], HnActivation::Identity, HnInit::Normal, &rng).unwrap();
    let c = Checkpoint::from_bytes(&hypernet_checkpoint(&hn).to_bytes().unwrap()).unwrap();
    assert_eq!(hypernet_from_checkpoint(&c).unwrap(), hn);
    assert!(lora_from_checkpoint(&c).is_err());
}

#[test]
fn truncated_payload_is_reported() {
    let bytes = two_tensors().to_bytes().unwrap();
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 5]) {
        Err(Error::TruncatedPayload { expected, found }) => assert_eq!((expected, found), (28, 23)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn overlapping_offsets_are_reported() {
    let (mut h, payload) = split(&two_tensors().to_bytes().unwrap());
    h.tensors[1].offset = 8;
    let bytes = join(&h, &payload[..24]);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::OverlappingOffsets(_))));
}

#[test]
fn header_tampering_is_corrupt() {
    let good = two_tensors().to_bytes().unwrap();
    let (h, payload) = split(&good);
    assert_eq!(Checkpoint::from_bytes(&join(&h, &payload)).unwrap(), two_tensors());

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptHeader(_))));

    let mut wrong_len = h.clone();
    wrong_len.tensors[0].length = 12;
    assert!(Checkpoint::from_bytes(&join(&wrong_len, &payload)).is_err());

    let mut dtype = h.clone();
    dtype.tensors[0].dtype = "f16".into();
    assert!(matches!(Checkpoint::from_bytes(&join(&dtype, &payload)), Err(Error::CorruptHeader(_))));

    let mut version = h.clone();
    version.format_version = 2;
    assert!(matches!(Checkpoint::from_bytes(&join(&version, &payload)), Err(Error::CorruptHeader(_))));

    let mut trailing = payload.clone();
    trailing.extend_from_slice(&[0; 4]);
    assert!(matches!(Checkpoint::from_bytes(&join(&h, &trailing)), Err(Error::CorruptHeader(_))));

    let garbage = format!("{MAGIC}\n5\n{{nope");
    assert!(matches!(Checkpoint::from_bytes(garbage.as_bytes()), Err(Error::CorruptHeader(_))));
}

proptest! {
    #[test]
    fn arbitrary_stores_round_trip_bitwise(
        tensors in prop::collection::btree_map("[a-z.]{1,10}", prop::collection::vec(any::<f32>(), 1..20), 0..6)
    ) {
        let mut p = ParamStore::new();
        for (name, data) in &tensors {
            p.insert(name.clone(), Tensor::new(vec![data.len()], data.clone()).unwrap());
        }
        let c = Checkpoint::new(p).with_meta("kind", "prop");
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.metadata, c.metadata.clone());
        for (name, t) in &c.tensors {
            let b = &back.tensors[name];
            prop_assert_eq!(b.shape(), t.shape());
            prop_assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
