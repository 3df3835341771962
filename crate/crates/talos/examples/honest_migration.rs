//! One honest in-memory migration, narrated: two enrolled nodes, a
//! scenario-1 guest running on the source, the full four-phase protocol,
//! and the registry/audit state afterwards.
//!
//! ```bash
//! cargo run -p talos --example honest_migration
//! ```

use talos::harness::adversary::Adversary;
use talos::harness::memory::run_migration;
use talos::harness::TestBed;

fn main() {
    let bed = TestBed::new(1).expect("test bed");
    println!("application measurement: {}", bed.measurement.hex());
    println!(
        "source runs the app: {}, target runs it: {}",
        bed.source.app_running(&bed.measurement),
        bed.target.app_running(&bed.measurement)
    );

    let mut adversary = Adversary::passive();
    let result = run_migration(&bed.target, &bed.source, &bed.measurement, &mut adversary)
        .expect("migration run");

    println!("\nwire flow (direction, msg_type):");
    for (direction, msg_type) in &result.delivered {
        println!("  {direction:?} 0x{msg_type:02x}");
    }

    println!("\nsource outcome: {:?}", result.source_outcome);
    println!("target outcome: {:?}", result.target_outcome);
    println!(
        "source registry: {:?}",
        bed.source
            .registry()
            .status(&bed.measurement)
            .map(|s| s.status)
    );
    println!(
        "target registry: {:?}",
        bed.target
            .registry()
            .status(&bed.measurement)
            .map(|s| s.status)
    );
    println!(
        "instance now on: source={} target={}",
        bed.source.app_running(&bed.measurement),
        bed.target.app_running(&bed.measurement)
    );

    bed.audit
        .verify_single_instance()
        .expect("single-instance audit");
    println!("\nsingle-instance audit over both registries: ok");

    // The restored guest finishes its script on the target.
    let remaining = bed
        .target
        .with_running(&bed.measurement, |instance| {
            let steps = instance.run_to_end().expect("resume execution");
            (steps, instance.post_marker_trace().len())
        })
        .expect("imported instance");
    println!(
        "target resumed and ran {} remaining steps ({} post-marker events)",
        remaining.0, remaining.1
    );
}
