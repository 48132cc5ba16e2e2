//! Drives every `linequant` subcommand in-process on a tiny configuration:
//! gen-data, fit-quantizer, label, pretrain, finetune, eval, trigrams, plot.
//!
//! `cargo run --release --example cli_pipeline -- [out_dir]`

use linequant::cli::main_with_args;

const RUN: &str = r#"
[data]
train = 120
val = 20
test = 20

[quantizer]
k = 16

[model.encoder]
layers = 1
dim = 64

[model.decoder]
layers = 1
dim = 64

[pretrain]
iterations = 100
halving_points = [20, 60]
eval_interval = 50

[finetune]
iterations = 100
halving_points = [50]
eval_interval = 50
max_decode_len = 12
"#;

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/pipeline".into());
    std::fs::create_dir_all(&out).expect("output directory");
    let config = format!("{out}/run.toml");
    std::fs::write(&config, RUN).expect("write run file");
    let p = |name: &str| format!("{out}/{name}");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into()],
        vec!["fit-quantizer".into(), "--manifest".into(), p("manifest.jsonl")],
        vec!["label".into(), "--manifest".into(), p("manifest.jsonl"), "--codebook".into(), p("codebook.lqkm")],
        vec!["pretrain".into(), "--manifest".into(), p("manifest.jsonl"), "--labels".into(), p("labels.jsonl")],
        vec![
            "finetune".into(),
            "--manifest".into(),
            p("manifest.jsonl"),
            "--init".into(),
            "pretrained".into(),
            "--checkpoint".into(),
            p("pretrain.ckpt"),
        ],
        vec!["eval".into(), "--manifest".into(), p("manifest.jsonl"), "--checkpoint".into(), p("finetune_best.ckpt")],
        vec!["trigrams".into(), "--manifest".into(), p("manifest.jsonl"), "--labels".into(), p("labels.jsonl")],
        vec!["plot".into(), p("finetune_metrics.jsonl")],
    ];
    for step in steps {
        println!("$ linequant {}", step.join(" "));
        let mut args = vec!["linequant".to_string(), "--config".into(), config.clone(), "--out".into(), out.clone()];
        args.extend(step);
        let code = main_with_args(args);
        if code != 0 {
            std::process::exit(code);
        }
    }
}
