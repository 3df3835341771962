//! Game: fork bomb. Dozens of concurrent migration attempts for the same
//! measurement hammer one source node; the pigeonhole registry must hand
//! out at most one migration slot, and the audit log must never see two
//! Active instances.
//!
//! ```bash
//! cargo run -p talos --example fork_bomb_game
//! ```

use talos::harness::games::run_fork_bomb;

fn main() {
    let report = run_fork_bomb(5, 50, 7).expect("game run");
    print!("{}", report.render());
    print!("{}", report.to_tsv());
    assert_eq!(report.adversary_wins, 0);
}
