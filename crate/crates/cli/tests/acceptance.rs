//! One line per criterion; exits non-zero if any fails.

use std::process::ExitCode;

use kolmo_cli::{checks, presets, Selector};

fn main() -> ExitCode {
    let seed = presets::by_name(presets::DEFAULT).unwrap().seed;
    let mut failed = Vec::new();
    for id in checks::ids(Selector::All) {
        let row = checks::run_one(id, seed);
        println!("{}", row.line());
        if !row.pass {
            failed.push(row.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", checks::IDS.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
