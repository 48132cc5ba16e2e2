//! Character error rate over a handful of transcriptions, printed as the
//! JSON report written by `linequant eval`.
//!
//! `cargo run --example cer_report`

use linequant::eval::{cer, edit_distance};

fn main() -> linequant::Result<()> {
    println!("d(kitten, sitting) = {}", edit_distance("kitten", "sitting"));
    let pairs = [("hello world", "helo world"), ("abc", "abc"), ("pen", "open"), ("a", "b")];
    let report = cer(&pairs)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    println!("CER {:.4}", report.cer);
    Ok(())
}
