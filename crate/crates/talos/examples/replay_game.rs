//! Game: replay. The adversary records a completed migration's state
//! package and attestation digest, then replays them — rebound to a fresh
//! session — into the next migration of the same application. Freshness
//! (per-session keys and nonce) must reject every attempt.
//!
//! ```bash
//! cargo run -p talos --example replay_game
//! ```

use talos::harness::games::{run_game, GameId};

fn main() {
    let report = run_game(GameId::I, 50, 7).expect("game run");
    print!("{}", report.render());
    print!("{}", report.to_tsv());
    assert_eq!(report.adversary_wins, 0);
}
