//! Fits a K-Means codebook on frozen random-stem patch features and turns
//! lines into sequences of discrete labels.
//!
//! `cargo run --release --example codebook_labels -- [k]`

use linequant::dataset::{generate_corpus, CorpusSpec};
use linequant::model::StemConfig;
use linequant::quantizer::{assign_labels, fit_codebook, Codebook, ExtractorSpec, FeatureExtractor, KMeansConfig};

fn main() -> linequant::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let samples = generate_corpus(&CorpusSpec::toy(300, 0, 0, 2))?;
    let fx = FeatureExtractor::new(ExtractorSpec::random(StemConfig::small(), 64, 1))?;
    let cb = fit_codebook(&samples, &fx, &KMeansConfig { k, max_iters: 50, tol: 1e-4, seed: 0 }, 300)?;
    println!(
        "k={} dim={} fitted on {} vectors in {} iterations, inertia {:.3}",
        cb.k(),
        cb.dim(),
        cb.meta.n_fit_vectors,
        cb.meta.iterations,
        cb.meta.inertia
    );
    let bytes = cb.to_bytes()?;
    assert_eq!(Codebook::from_bytes(&bytes)?, cb);
    println!("serialized codebook: {} bytes", bytes.len());
    for s in samples.iter().take(5) {
        let labels = assign_labels(&s.image, &fx, &cb)?;
        println!("{:>10} -> {labels:?}", s.text);
    }
    Ok(())
}
