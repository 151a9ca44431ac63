//! Times the profiled path on one cross block: `cargo run --release -p tilerobust-bench --example cross_block [n] [dim] [reps]`.

use std::time::Instant;

use tilerobust_bench::{perturbed, random_slide};
use tilerobust_core::metrics::{pair_ranks_profiled, WithinSlideProfile};

fn main() {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let n = args.next().unwrap_or(1024);
    let dim = args.next().unwrap_or(768);
    let reps = args.next().unwrap_or(20);
    let a = random_slide(n, dim, 1);
    let b = perturbed(&a, 0.3, 2);
    let t = Instant::now();
    let pa = WithinSlideProfile::build(&a).unwrap();
    let pb = WithinSlideProfile::build(&b).unwrap();
    println!("profiles {:.3?}", t.elapsed() / 2);
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(pair_ranks_profiled(&pa, &pb).unwrap());
    }
    let per = t.elapsed().as_secs_f64() / reps as f64;
    println!("pair {:.4} s, {:.1} GFMA/s", per, (n * n * dim) as f64 / per / 1e9);
}
