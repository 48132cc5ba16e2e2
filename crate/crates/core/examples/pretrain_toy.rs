//! Masked label pre-training on a small synthetic corpus: fit a 32-cluster
//! codebook on random-stem features, label every line, then train a
//! two-layer encoder to predict the labels of masked patches.
//!
//! `cargo run --release --example pretrain_toy -- [steps]`

use std::time::Instant;

use linequant::dataset::{generate_corpus, CorpusSpec, Split};
use linequant::model::{EncoderConfig, ModelConfig, ModelParams, StemConfig};
use linequant::pretrain::{run_pretraining, PretrainConfig};
use linequant::quantizer::{fit_codebook, label_samples, ExtractorSpec, FeatureExtractor, KMeansConfig};

fn main() -> linequant::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let start = Instant::now();
    let samples = generate_corpus(&CorpusSpec::toy(2000, 200, 0, 7))?;
    let (train, held): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);

    let fx = FeatureExtractor::new(ExtractorSpec::random(StemConfig::small(), 64, 1))?;
    let codebook = fit_codebook(&train, &fx, &KMeansConfig { k: 32, max_iters: 50, tol: 1e-4, seed: 1 }, 2000)?;
    let mut store = label_samples(&train, &fx, &codebook)?;
    store.extend(label_samples(&held, &fx, &codebook)?);
    println!("labels ready in {:.1}s", start.elapsed().as_secs_f64());

    let encoder = EncoderConfig { layers: 2, heads: 4, dim: 128, mlp_ratio: 4, stem: StemConfig::small() };
    let params = ModelParams::init(ModelConfig::pretraining(encoder, 32), 0)?;
    let config = PretrainConfig { seed: 0, ..PretrainConfig::for_iterations(steps) };
    let out = run_pretraining(&config, &train, &held, &store, params, |m| {
        println!(
            "iter {:>5}  loss {:.4}  masked acc {:.3}  p {:.2}  lr {:.1e}  ({:.0}s)",
            m.iter,
            m.loss,
            m.masked_acc.unwrap_or(f64::NAN),
            m.p,
            m.lr,
            start.elapsed().as_secs_f64()
        )
    })?;
    let last = out.metrics.last().and_then(|m| m.masked_acc).unwrap_or(0.0);
    println!("held-out masked accuracy {last:.3} (chance {:.3})", 1.0 / 32.0);
    Ok(())
}
