//! Generate the synthetic shape corpus used in the docs and tests.
//!
//!     cargo run -p lgvq --example gen_corpus -- DIR [SEED] [COUNT] [SIZE]

use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir: PathBuf = match args.next() {
        Some(d) => d.into(),
        None => {
            eprintln!("usage: gen_corpus DIR [SEED] [COUNT] [SIZE]");
            std::process::exit(2);
        }
    };
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("SEED is an integer"));
    let count: usize = args.next().map_or(32, |s| s.parse().expect("COUNT is an integer"));
    let size: usize = args.next().map_or(64, |s| s.parse().expect("SIZE is an integer"));
    match lgvq::data::generate_corpus(&dir, seed, count, size) {
        Ok(manifest) => println!("{}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(3);
        }
    }
}
