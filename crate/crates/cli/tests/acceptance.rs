//! Runs the twelve acceptance criteria over the shipped scenario pack and
//! prints one line per criterion. Exits non-zero if any of them fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use bdsde_cli::{run, Command, Inputs, RunOptions};

fn main() -> ExitCode {
    let pack = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let out = tempfile::tempdir().expect("temporary output directory");
    let start = Instant::now();
    let inputs = match Inputs::load(&pack) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("cannot load {}: {e}", pack.display());
            return ExitCode::FAILURE;
        }
    };
    let opts = RunOptions {
        out: Some(out.path().to_path_buf()),
        ..RunOptions::default()
    };
    let result = run(Command::Verify, &inputs, &opts);
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(_) => {
            println!("acceptance: all criteria passed in {secs:.0} s");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("acceptance: FAILED after {secs:.0} s: {e}");
            ExitCode::FAILURE
        }
    }
}
