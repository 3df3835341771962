//! Game: cloning. A migration service the orchestrator never approved
//! presents forged certificates (self-signed, third-party-signed, or
//! re-targeted) and asks for the application. No certificate may verify
//! and no migration may start toward it.
//!
//! ```bash
//! cargo run -p talos --example cloning_game
//! ```

use talos::harness::games::{run_game, GameId};

fn main() {
    let report = run_game(GameId::II, 50, 7).expect("game run");
    print!("{}", report.render());
    print!("{}", report.to_tsv());
    assert_eq!(report.adversary_wins, 0);
}
