//! Game: volatile-state integrity. The adversary flips bytes of the
//! in-flight masked state (ciphertext, MAC, or AEAD nonce). The target
//! must detect every mutation before decrypting; an occasional control
//! trial checks the honest path still confirms.
//!
//! ```bash
//! cargo run -p talos --example state_integrity_game
//! ```

use talos::harness::games::{run_game, GameId};

fn main() {
    let report = run_game(GameId::IV, 60, 7).expect("game run");
    print!("{}", report.render());
    print!("{}", report.to_tsv());
    assert_eq!(report.adversary_wins, 0);
}
