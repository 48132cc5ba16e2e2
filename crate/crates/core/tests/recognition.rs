use std::process::Command;

use linequant::dataset::{generate_corpus, write_corpus, AugmentationConfig, CorpusSpec, Split, EOS};
use linequant::eval::evaluate_model;
use linequant::finetune::{run_finetuning, FinetuneConfig, InitSource};
use linequant::model::{save_checkpoint, DecoderConfig, EncoderConfig, ModelConfig, ModelParams, StemConfig};

fn micro(spec: &CorpusSpec) -> ModelConfig {
    let encoder = EncoderConfig { layers: 1, heads: 2, dim: 32, mlp_ratio: 2, stem: StemConfig::small() };
    let decoder = DecoderConfig { layers: 1, heads: 2, dim: 32, mlp_ratio: 2, vocab: 0, max_len: 16 };
    ModelConfig::recognizer(encoder, decoder, spec.alphabet.clone())
}

#[test]
fn fresh_model_is_near_random() {
    let spec = CorpusSpec::toy(0, 40, 0, 11);
    let val = generate_corpus(&spec).unwrap();
    for seed in 0..3 {
        let params = ModelParams::init(micro(&spec), seed).unwrap();
        let report = evaluate_model(&params, &val, 12, 16).unwrap();
        assert!(report.cer >= 0.9, "seed {seed}: cer {}", report.cer);
    }
}

#[test]
fn eos_only_model_deletes_everything() {
    let spec = CorpusSpec::toy(0, 20, 0, 12);
    let val = generate_corpus(&spec).unwrap();
    let mut params = ModelParams::init(micro(&spec), 0).unwrap();
    params.get_mut("decoder.out.bias").unwrap().data_mut()[EOS as usize] = 1e4;
    let report = evaluate_model(&params, &val, 12, 16).unwrap();
    assert_eq!(report.cer, 1.0);
    assert!(report.lines.iter().all(|l| l.hypothesis.is_empty() && l.edits == l.reference.chars().count()));
}

#[test]
fn eval_command_reports_zero_on_memorized_lines() {
    let spec = CorpusSpec { max_len: 5, ..CorpusSpec::toy(16, 0, 0, 3) };
    let train = generate_corpus(&spec).unwrap();
    let config = FinetuneConfig {
        batch_size: 8,
        lr: 2e-3,
        halving_points: vec![400],
        augmentation: AugmentationConfig::identity(),
        eval_interval: 100,
        max_decode_len: 10,
        ..FinetuneConfig::for_iterations(600)
    };
    let outcome = run_finetuning(&config, &micro(&spec), &InitSource::Scratch, &train, &train, |_| {}).unwrap();
    assert_eq!(outcome.best_cer, 0.0, "memorization did not converge");

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&train, dir.path()).unwrap();
    let ckpt = dir.path().join("best.ckpt");
    save_checkpoint(&outcome.best, &ckpt).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_linequant"))
        .args(["--out", dir.path().join("eval").to_str().unwrap()])
        .args(["--set", "finetune.max_decode_len=10"])
        .args(["eval", "--split", "train", "--manifest", manifest.to_str().unwrap()])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().last(), Some("CER 0.0000"));
    assert!(train.iter().all(|s| s.split == Split::Train));
}
