//! Command-line surface; placeholder while the subcommands are built out.

pub fn run() -> i32 {
    eprintln!("not yet implemented");
    1
}
