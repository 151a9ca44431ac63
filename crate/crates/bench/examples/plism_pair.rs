//! Times one PLISM-scale slide pair: `cargo run --release -p tilerobust-bench --example plism_pair [n] [dim]`.

use std::time::Instant;

use tilerobust_bench::{perturbed, random_slide};
use tilerobust_core::metrics::{top_k_accuracy, DEFAULT_KS};

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let n = args.next().unwrap_or(16_278);
    let dim = args.next().unwrap_or(768);
    let a = random_slide(n, dim, 1);
    let b = perturbed(&a, 0.5, 2);
    let start = Instant::now();
    let m = top_k_accuracy(&a, &b, &DEFAULT_KS).expect("valid pair");
    println!(
        "n={n} dim={dim} mean_cosine={:.4} top10={:.4} elapsed={:.2?}",
        m.mean_cosine,
        m.topk_accuracy[&10],
        start.elapsed()
    );
}
