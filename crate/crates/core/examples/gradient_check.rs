//! Finite-difference verification of every hand-written backward pass.

use lct::gradcheck::{self, Faults, Scope};

fn main() -> lct::Result<()> {
    for scope in [Scope::Layers, Scope::Blocks, Scope::EndToEnd] {
        println!("-- {scope:?}");
        let reports = gradcheck::run(scope, Faults::default())?;
        for r in &reports {
            println!("{r}");
        }
        if let Some(f) = gradcheck::first_failure(&reports) {
            eprintln!("failed: {}", f.unit);
            std::process::exit(1);
        }
    }
    Ok(())
}
