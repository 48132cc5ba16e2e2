//! Checks that frequent label trigrams pick out visually identical patches.
//! Lines are rendered without jitter and with a 24 px advance, so every patch
//! covers a known third of a known glyph.
//!
//! `cargo run --release --example trigram_coherence -- [lines] [k] [corpora]`

use std::collections::HashMap;

use linequant::dataset::{generate_corpus, CorpusSpec, FontSpec, Jitter, PATCH_WIDTH};
use linequant::model::StemConfig;
use linequant::quantizer::{fit_codebook, label_samples, trigram_report, ExtractorSpec, FeatureExtractor, KMeansConfig};

const ADVANCE: usize = 24;

/// Glyph and third of the glyph under `patch`.
fn truth(text: &[char], patch: usize) -> (char, usize) {
    let x = patch * PATCH_WIDTH;
    (text[x / ADVANCE], (x % ADVANCE) / PATCH_WIDTH)
}

fn main() -> linequant::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let lines = args.next().flatten().unwrap_or(400);
    let k = args.next().flatten().unwrap_or(64);
    let corpora = args.next().flatten().unwrap_or(3) as u64;

    let fx = FeatureExtractor::new(ExtractorSpec::random(StemConfig::small(), 64, 1))?;
    let (mut coherent, mut total) = (0, 0);
    for seed in 1..=corpora {
        let spec = CorpusSpec {
            fonts: vec![FontSpec { seed: 1, advance: ADVANCE, jitter: Jitter::none() }],
            ..CorpusSpec::toy(lines, 0, 0, seed)
        };
        let samples = generate_corpus(&spec)?;
        let codebook = fit_codebook(&samples, &fx, &KMeansConfig { k, max_iters: 50, tol: 1e-4, seed: 1 }, lines)?;
        let store = label_samples(&samples, &fx, &codebook)?;
        let texts: HashMap<&str, Vec<char>> = samples.iter().map(|s| (s.id.as_str(), s.text.chars().collect())).collect();

        println!("corpus seed {seed}");
        for g in trigram_report(&store, &samples, 10)? {
            let triples: Vec<Vec<(char, usize)>> = g
                .crops
                .iter()
                .map(|c| (0..3).map(|t| truth(&texts[c.id.as_str()], c.patch + t)).collect())
                .collect();
            let same = triples.windows(2).all(|w| w[0] == w[1]);
            coherent += same as usize;
            total += 1;
            let shown: String = triples[0].iter().map(|(c, p)| format!("{c}{p} ")).collect();
            println!("  {:?} x{:<5} {}  {}", g.key, g.count, if same { "same " } else { "mixed" }, shown.trim_end());
        }
    }
    println!("coherent groups {coherent}/{total} ({:.0}%)", 100.0 * coherent as f64 / total as f64);
    Ok(())
}
