//! Phase-breakdown benchmark across the three scenario fixtures: the
//! eight migration sub-steps, timed over repeated honest runs. Expect
//! SC-CFI and ELF Conf to grow with application complexity.
//!
//! ```bash
//! cargo run --release -p talos --example bench_phases
//! ```

use talos::harness::bench::run_benchmark;

fn main() {
    let iterations = 20;
    for scenario in 1..=3u8 {
        let report = run_benchmark(scenario, iterations).expect("benchmark");
        print!("{}", report.render());
        println!();
    }

    let s1 = run_benchmark(1, iterations).expect("benchmark");
    let s3 = run_benchmark(3, iterations).expect("benchmark");
    let sc_cfi_1 = s1.row("SC-CFI").unwrap().mean_ms;
    let sc_cfi_3 = s3.row("SC-CFI").unwrap().mean_ms;
    println!("SC-CFI mean: scenario 1 = {sc_cfi_1:.3} ms, scenario 3 = {sc_cfi_3:.3} ms");
    assert!(
        sc_cfi_3 >= sc_cfi_1,
        "the richer reload trace cannot be cheaper"
    );
}
