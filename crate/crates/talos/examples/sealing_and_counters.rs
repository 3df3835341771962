//! The mock TEE primitives on their own: policy-bound sealing, tamper
//! detection, attestation quotes, and the counter-offset scheme that
//! keeps monotonic counters non-decreasing across a migration.
//!
//! ```bash
//! cargo run -p talos --example sealing_and_counters
//! ```

use talos::crypto::NodeKeyPair;
use talos::state::{CounterOffsetTable, EffectiveCounters};
use talos::tee::{
    measure_enclave, quote_generate, quote_verify, seal, unseal, unseal_expecting,
    PlatformRootSecret, SealPolicy, SignerMeasurement,
};

fn main() {
    let root = PlatformRootSecret::generate();
    println!("platform root (id only, secret never leaves the mock hardware): {root:?}");

    // Sealing binds data to a policy; the header is authenticated.
    let signer = SignerMeasurement([7u8; 32]);
    let policy = SealPolicy::bind_to_signer(&signer);
    let blob = seal(&root, &policy, b"enclave volatile state").expect("seal");
    println!("sealed blob: {} wire bytes", blob.to_bytes().len());
    assert_eq!(
        unseal(&root, &blob).expect("unseal"),
        b"enclave volatile state"
    );

    let mut tampered = blob.clone();
    tampered.ciphertext[0] ^= 1;
    println!(
        "tampered ciphertext unseal: {:?}",
        unseal(&root, &tampered).unwrap_err()
    );

    let other = SealPolicy::bind_to_signer(&SignerMeasurement([8u8; 32]));
    println!(
        "unseal under the wrong signer policy: {:?}",
        unseal_expecting(&root, &other, &blob).unwrap_err()
    );

    // Attestation quotes: platform-signed measurement + report data.
    let platform = NodeKeyPair::generate().expect("platform key");
    let measurement = measure_enclave(b"application persistent content").expect("measurement");
    let quote = quote_generate(&platform, &measurement, &[0u8; 64]);
    println!(
        "quote verifies under the platform key: {}",
        quote_verify(&platform.public_key(), &quote)
    );
    let rogue = NodeKeyPair::generate().expect("rogue key");
    println!(
        "quote under a different key: {}",
        quote_verify(&rogue.public_key(), &quote)
    );

    // Counter offsets: source values + freshly zeroed target counters.
    let id = *b"ctr-0001";
    let source_value = 5u64;
    println!("\nsource counter at export: {source_value}");
    let mut effective = EffectiveCounters::new();
    effective
        .apply_offsets(&CounterOffsetTable {
            offsets: vec![(id, source_value)],
        })
        .expect("first application");
    let mut reads = vec![effective.read(id).expect("read")];
    reads.push(effective.increment(id).expect("increment"));
    reads.push(effective.increment(id).expect("increment"));
    println!("effective reads on the target: {reads:?}");
    assert!(reads.windows(2).all(|w| w[0] <= w[1]), "non-decreasing");

    println!(
        "second offset application rejected: {:?}",
        effective
            .apply_offsets(&CounterOffsetTable::default())
            .unwrap_err()
    );
}
