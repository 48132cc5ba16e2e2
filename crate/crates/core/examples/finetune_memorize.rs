//! Fine-tunes a small recognizer until it memorizes a 32-line corpus, then
//! greedy-decodes a few lines.
//!
//! `cargo run --release --example finetune_memorize -- [steps]`

use std::time::Instant;

use linequant::dataset::{generate_corpus, AugmentationConfig, CorpusSpec};
use linequant::finetune::{run_finetuning, FinetuneConfig, InitSource, Progress};
use linequant::model::{greedy_decode, DecoderConfig, EncoderConfig, ModelConfig, StemConfig};

fn main() -> linequant::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let spec = CorpusSpec::toy(32, 0, 0, 3);
    let lines = generate_corpus(&spec)?;
    let encoder = EncoderConfig { layers: 1, heads: 2, dim: 32, mlp_ratio: 2, stem: StemConfig::small() };
    let decoder = DecoderConfig { layers: 1, heads: 2, dim: 32, mlp_ratio: 2, vocab: 0, max_len: 16 };
    let model = ModelConfig::recognizer(encoder, decoder, spec.alphabet.clone());
    let config = FinetuneConfig {
        batch_size: 8,
        lr: 2e-3,
        halving_points: vec![steps * 2 / 3],
        augmentation: AugmentationConfig::identity(),
        eval_interval: 250,
        max_decode_len: 12,
        ..FinetuneConfig::for_iterations(steps)
    };
    let start = Instant::now();
    let out = run_finetuning(&config, &model, &InitSource::Scratch, &lines, &lines, |p| {
        if let Progress::Metrics(m) = p {
            println!("iter {:>5}  val CER {:.4}  ({:.0}s)", m.iter, m.val_cer, start.elapsed().as_secs_f64());
        }
    })?;
    println!("best CER {:.4} at iteration {}", out.best_cer, out.best.iteration);
    for s in lines.iter().take(4) {
        println!("{:>10} -> {}", s.text, greedy_decode(&out.best.params, &s.image, 12)?);
    }
    Ok(())
}
