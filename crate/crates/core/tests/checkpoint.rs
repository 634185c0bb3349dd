// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container: byte-exact round trips and rejection of damaged
//! or inconsistent files.

mod common;

use emotion_steer::checkpoint::{self, from_bytes, to_bytes, MAGIC};
use emotion_steer::synthdata::{gen_corpus, CorpusKind};
use emotion_steer::training::{run_regime, Init, Regime, TrainedCheckpoint};

fn pair() -> (TrainedCheckpoint, TrainedCheckpoint) {
    let mut config = common::small_run_config();
    config.train.pretrain.epochs = 1;
    config.train.finetune.epochs = 1;
    let spec = config.emotions.spec().unwrap();
    let pre = gen_corpus(&spec, &config.corpus, CorpusKind::Pretraining, 1).unwrap();
    let emo = gen_corpus(&spec, &config.corpus, CorpusKind::Emotional, 1).unwrap();
    let mut base = run_regime(&config.train_config(Regime::Pretrain), &pre, Init::Fresh(&config.model))
        .unwrap()
        .checkpoint;
    base.meta.run_config = Some(config.clone());
    let steered = run_regime(&config.train_config(Regime::Emoshift), &emo, Init::From(&base))
        .unwrap()
        .checkpoint;
    (base, steered)
}

fn tensor_names(bytes: &[u8]) -> Vec<String> {
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut names = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        names.push(String::from_utf8(bytes[pos + 4..pos + 4 + len].to_vec()).unwrap());
        let rank = u32::from_le_bytes(bytes[pos + 5 + len..pos + 9 + len].try_into().unwrap()) as usize;
        pos += 4 + len + 1 + 4 + 8 * rank + 8;
    }
    names
}

#[test]
fn save_load_save_is_byte_identical() {
    let (base, steered) = pair();
    let dir = tempfile::tempdir().unwrap();
    for ckpt in [&base, &steered] {
        let path = dir.path().join(format!("{}.emsh", ckpt.meta.regime));
        checkpoint::save(ckpt, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert_eq!(&loaded, ckpt);
        let again = dir.path().join("again.emsh");
        checkpoint::save(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn header_layout_and_tensor_names() {
    let (base, steered) = pair();
    let bytes = to_bytes(&base).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let names = tensor_names(&bytes);
    assert!(names.iter().all(|n| !n.starts_with("steer.")), "{names:?}");
    assert_eq!(names[0], "tok_emb");

    let names = tensor_names(&to_bytes(&steered).unwrap());
    let steer: Vec<&String> = names.iter().filter(|n| n.starts_with("steer.")).collect();
    assert_eq!(
        steer,
        [
            "steer.W.0",
            "steer.W.1",
            "steer.W.2",
            "steer.W.3",
            "steer.W.4",
            "steer.epsilon"
        ]
    );
}

#[test]
fn damaged_files_are_rejected() {
    let (_, steered) = pair();
    let good = to_bytes(&steered).unwrap();
    let mut cases: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut b = good.clone();
    b[0] = b'X';
    cases.push(("magic", b));
    let mut b = good.clone();
    b[4] = 2;
    cases.push(("version", b));
    cases.push(("truncated", good[..good.len() / 2].to_vec()));
    let mut b = good.clone();
    b.push(0);
    cases.push(("trailing", b));
    // Flip one payload byte of the first tensor: the backbone hash no
    // longer matches.
    let header_end = {
        let names = tensor_names(&good);
        let mut pos = 12;
        for _ in &names {
            let len = u32::from_le_bytes(good[pos..pos + 4].try_into().unwrap()) as usize;
            let rank = u32::from_le_bytes(good[pos + 5 + len..pos + 9 + len].try_into().unwrap()) as usize;
            pos += 4 + len + 1 + 4 + 8 * rank + 8;
        }
        pos
    };
    let mut b = good.clone();
    b[header_end + 1] ^= 0x40;
    cases.push(("payload", b));
    for (what, bytes) in cases {
        assert!(from_bytes(&bytes).is_err(), "{what} accepted");
    }

    // A recorded epsilon that disagrees with the tensor.
    let mut other = steered.clone();
    other.meta.train.epsilon = 0.002;
    let bytes = to_bytes(&other).unwrap();
    assert!(from_bytes(&bytes).unwrap_err().to_string().contains("epsilon"));

    let missing = std::path::Path::new("/nonexistent/ckpt.emsh");
    assert!(checkpoint::load(missing).is_err());
}
