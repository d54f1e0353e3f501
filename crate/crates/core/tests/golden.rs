//! Golden forward pass. Set `CLFORGE_BLESS=1` to rewrite the fixture after an intended change.

use std::fs;
use std::path::PathBuf;

use clforge::adapters::LoraAdapter;
use clforge::model::{BiModalSegmenter, ModelConfig};
use clforge::rng::{stream_rng, Stream};
use clforge::taskgen::pretext_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const PROMPT: &str = "two crossed plus cross shape";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Golden {
    model_seed: u64,
    sample: (u64, usize),
    prompt: String,
    sha256: String,
    sum: f64,
    first: Vec<f64>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/forward_logits.json")
}

fn compute() -> Golden {
    let model = BiModalSegmenter::init(ModelConfig::default(), 2024);
    let mut rng = stream_rng(2024, Stream::AdapterInit, 0);
    let mut adapter = LoraAdapter::new(0, &model.lora_targets(), 8, 16.0, &mut rng).unwrap();
    for (_, t) in adapter.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    let sample = pretext_sample(7, 3);
    let logits = model.forward(&sample.image, PROMPT, Some(&adapter)).unwrap();
    let bytes: Vec<u8> = logits.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    Golden {
        model_seed: 2024,
        sample: (7, 3),
        prompt: PROMPT.into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        sum: logits.data().iter().sum(),
        first: logits.data()[..8].to_vec(),
    }
}

#[test]
fn forward_logits_match_committed_checksum() {
    let got = compute();
    if std::env::var_os("CLFORGE_BLESS").is_some() {
        fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
        fs::write(fixture_path(), serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Golden = serde_json::from_str(&fs::read_to_string(fixture_path()).unwrap()).unwrap();
    assert_eq!(got, want);
}
