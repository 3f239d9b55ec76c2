use revknn_core::datastore::build;
use revknn_core::inference::greedy_decode;
use revknn_core::toymodel::{ModelDims, SentencePair, EOS};
use revknn_core::{translate, Corpus, DecodeConfig, ToyModel};

fn setup() -> (ToyModel, Corpus) {
    let dims = ModelDims { src_vocab: 20, tgt_vocab: 20, emb_dim: 5, repr_dim: 10, window: 3 };
    let corpus = Corpus::new(
        "t",
        vec![
            SentencePair { src: vec![3, 4, 5, 6], tgt: vec![7, 8, 9, 10, EOS] },
            SentencePair { src: vec![11, 12], tgt: vec![13, 14, EOS] },
            SentencePair { src: vec![15, 16, 17], tgt: vec![18, 19, 7, EOS] },
        ],
    );
    (ToyModel::init(dims, 8).unwrap(), corpus)
}

#[test]
fn pure_retrieval_reproduces_the_stored_translation() {
    let (m, c) = setup();
    let ds = build(&m, &c).unwrap();
    let cfg = DecodeConfig { lambda: 1.0, n_k: 1, ..DecodeConfig::default() };
    for p in &c.pairs {
        assert_eq!(translate(&m, &ds, &p.src, &cfg).unwrap(), p.tgt[..p.tgt.len() - 1]);
    }
}

#[test]
fn lambda_zero_is_greedy_decoding() {
    let (m, c) = setup();
    let ds = build(&m, &c).unwrap();
    let cfg = DecodeConfig { lambda: 0.0, max_len: 6, ..DecodeConfig::default() };
    for p in &c.pairs {
        assert_eq!(translate(&m, &ds, &p.src, &cfg).unwrap(), greedy_decode(&m, &p.src, 6).unwrap());
    }
}

#[test]
fn output_length_is_capped() {
    let (m, c) = setup();
    let ds = build(&m, &c).unwrap();
    for max_len in [0, 1, 2] {
        let cfg = DecodeConfig { lambda: 0.3, max_len, ..DecodeConfig::default() };
        assert!(translate(&m, &ds, &[3, 4], &cfg).unwrap().len() <= max_len);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let (m, c) = setup();
    let ds = build(&m, &c).unwrap();
    assert!(translate(&m, &ds, &[], &DecodeConfig::default()).is_err());
    assert!(translate(&m, &ds, &[3], &DecodeConfig { lambda: 1.5, ..DecodeConfig::default() }).is_err());
    assert!(translate(&m, &ds, &[99], &DecodeConfig::default()).is_err());
}
