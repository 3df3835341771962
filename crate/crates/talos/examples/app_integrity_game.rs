//! Game: application integrity. The target node's on-disk application
//! (symbol table, segment permissions) or its stored reference graph is
//! tampered with. The local launch succeeds — the point is that the
//! source's digest verification catches every alteration.
//!
//! ```bash
//! cargo run -p talos --example app_integrity_game
//! ```

use talos::harness::games::{run_game, GameId};

fn main() {
    let report = run_game(GameId::V, 18, 7).expect("game run");
    print!("{}", report.render());
    print!("{}", report.to_tsv());
    assert_eq!(report.adversary_wins, 0);
}
