//! Regenerates the fixture files checked into `crates/cli/tests/fixtures`.

use std::path::PathBuf;

use tarot_bench::{copy_fixture, linear_datamodel, write_datamodel, write_pair};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("crates/cli/tests/fixtures"));
    // 200 candidates, half of them copies of the 50 targets
    let f = copy_fixture(200, 50, 8, 0.5, 7);
    write_pair(&f.candidates, &f.targets, &root.join("two_cluster"))?;
    let labels: String = f.in_distribution.iter().map(|&b| if b { "1\n" } else { "0\n" }).collect();
    std::fs::write(root.join("two_cluster/in_distribution.txt"), labels)?;
    write_datamodel(&linear_datamodel(10, 500, 100, 0.05, 11), &root.join("datamodel"))?;
    println!("fixtures written to {}", root.display());
    Ok(())
}
