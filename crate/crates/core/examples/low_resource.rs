//! Low-resource comparison: fine-tune on 500 labeled lines starting from a
//! masked-label pre-trained encoder or from scratch, over three seeds.
//!
//! `cargo run --release --example low_resource -- [finetune_steps] [pretrain_steps] [cache.ckpt]`

use std::path::PathBuf;
use std::time::Instant;

use linequant::dataset::{generate_corpus, CorpusSpec, LineSample, Split};
use linequant::finetune::{run_finetuning, FinetuneConfig, InitSource, Progress, Strategy};
use linequant::model::{load_checkpoint, save_checkpoint, DecoderConfig, EncoderConfig, ModelConfig, ModelParams};
use linequant::pretrain::{run_pretraining, PretrainConfig};
use linequant::quantizer::{fit_codebook, label_samples, ExtractorSpec, FeatureExtractor, KMeansConfig};
use linequant::model::StemConfig;

fn split(samples: Vec<LineSample>) -> (Vec<LineSample>, Vec<LineSample>) {
    samples.into_iter().partition(|s| s.split == Split::Train)
}

fn pretrained(steps: u64) -> linequant::Result<ModelParams> {
    let (train, held) = split(generate_corpus(&CorpusSpec::toy(2000, 200, 0, 7))?);
    let fx = FeatureExtractor::new(ExtractorSpec::random(StemConfig::small(), 64, 1))?;
    let cb = fit_codebook(&train, &fx, &KMeansConfig { k: 32, max_iters: 50, tol: 1e-4, seed: 1 }, 2000)?;
    let mut store = label_samples(&train, &fx, &cb)?;
    store.extend(label_samples(&held, &fx, &cb)?);
    let params = ModelParams::init(ModelConfig::pretraining(EncoderConfig::toy(), 32), 0)?;
    let config = PretrainConfig { eval_interval: 500, ..PretrainConfig::for_iterations(steps) };
    let out = run_pretraining(&config, &train, &held, &store, params, |m| {
        println!("pretrain iter {:>5}  masked acc {:.3}", m.iter, m.masked_acc.unwrap_or(f64::NAN))
    })?;
    Ok(out.checkpoint.params)
}

fn main() -> linequant::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ft_steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let pt_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cache = args.get(3).map(PathBuf::from);
    let start = Instant::now();
    let encoder = match &cache {
        Some(p) if p.exists() => load_checkpoint(p)?.params,
        _ => {
            let params = pretrained(pt_steps)?;
            if let Some(p) = &cache {
                save_checkpoint(&linequant::model::Checkpoint { params: params.clone(), iteration: pt_steps, rng: None }, p)?;
            }
            params
        }
    };
    // labeled lines come from a different seed than the pre-training text
    let spec = CorpusSpec::toy(500, 200, 0, 99);
    let (train, val) = split(generate_corpus(&spec)?);
    let model = ModelConfig::recognizer(EncoderConfig::toy(), DecoderConfig::toy(0), spec.alphabet.clone());
    let runs = [
        ("scratch", InitSource::Scratch, Strategy::Full),
        ("pretrained", InitSource::PretrainedEncoder(encoder.clone()), Strategy::Full),
        ("pretrained+decoder stage", InitSource::PretrainedEncoder(encoder), Strategy::DecoderStage),
    ];
    for (name, init, strategy) in &runs {
        let mut cers = Vec::new();
        for seed in 0..3 {
            let config = FinetuneConfig { seed, strategy: *strategy, eval_interval: 250, ..FinetuneConfig::for_iterations(ft_steps) };
            let out = run_finetuning(&config, &model, init, &train, &val, |p| {
                if let Progress::Metrics(m) = p {
                    println!("{name} seed {seed} iter {:>5} val CER {:.4} ({:.0}s)", m.iter, m.val_cer, start.elapsed().as_secs_f64());
                }
            })?;
            cers.push(out.best_cer);
        }
        cers.sort_by(f64::total_cmp);
        println!("{name:>26}: best val CER per seed {cers:.4?}, median {:.4}", cers[1]);
    }
    Ok(())
}
