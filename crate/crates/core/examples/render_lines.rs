//! Renders a few synthetic lines, prints where each glyph landed and writes
//! a small corpus (PGM images plus manifest) to a directory.
//!
//! `cargo run --release --example render_lines -- [out_dir]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use linequant::dataset::{make_corpus, render_line_with_layout, CorpusSpec, FontSpec, GlyphAtlas, Jitter, PATCH_WIDTH};

fn main() -> linequant::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/render".into());
    let spec = CorpusSpec::toy(8, 2, 2, 1);
    let atlas = GlyphAtlas::synthetic(&spec.alphabet, FontSpec { seed: 1, advance: 16, jitter: Jitter::handwriting() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for text in ["abc", "hello pop", "dog"] {
        let (img, spans) = render_line_with_layout(text, &atlas, &mut rng)?;
        let layout: Vec<String> = spans.iter().map(|s| format!("{}@{}..{}", s.ch, s.x0, s.x1)).collect();
        println!("{text:>10}: {}x{} px, {} patches, {}", img.height(), img.width(), img.width() / PATCH_WIDTH, layout.join(" "));
    }
    let manifest = make_corpus(&spec, std::path::Path::new(&out))?;
    println!("wrote {} lines -> {}", spec.len(), manifest.display());
    Ok(())
}
