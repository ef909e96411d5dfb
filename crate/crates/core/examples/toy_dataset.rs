//! Writes a synthetic dataset (flat scenes with darkened shapes) in the ISTD
//! directory layout: `toy_dataset <root> [train_count] [test_count] [size]`.

use std::path::PathBuf;

use unshadow::datasets::synthetic::{toy_triplets, write_dataset, ToySpec};
use unshadow::datasets::{Layout, SplitName};

fn main() -> unshadow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = PathBuf::from(args.first().map(String::as_str).unwrap_or("toy_data"));
    let arg = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (train, test, size) = (arg(1, 8), arg(2, 4), arg(3, 64));
    for (split, count, seed) in [(SplitName::Train, train, 7), (SplitName::Test, test, 8)] {
        let spec = ToySpec {
            count,
            size,
            seed,
            ..ToySpec::default()
        };
        write_dataset(&root, Layout::Istd, split, &toy_triplets(&spec))?;
    }
    println!("{}", root.display());
    Ok(())
}
