//! Regenerates the embedded quantile tables in `assets/`. Run in release
//! mode from the crate root:
//!
//! ```text
//! cargo run --release -p isothresh --example gen_tables
//! ```

use isothresh::limits::{
    tabulate_chernoff, tabulate_lr_limit, DEFAULT_CHERNOFF_HALF_WIDTH, DEFAULT_CHERNOFF_PATHS,
    DEFAULT_CHERNOFF_STEP, DEFAULT_LR_INNER_N, DEFAULT_LR_OUTER,
};

const CHERNOFF_SEED: u64 = 7_241;
const LR_LIMIT_SEED: u64 = 9_363;

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");

    let z = tabulate_chernoff(
        DEFAULT_CHERNOFF_PATHS,
        DEFAULT_CHERNOFF_HALF_WIDTH,
        DEFAULT_CHERNOFF_STEP,
        CHERNOFF_SEED,
    )
    .expect("chernoff tabulation");
    std::fs::write(dir.join("chernoff_table.json"), z.to_json_string() + "\n").unwrap();
    println!(
        "chernoff: q(0.5)={:+.4} q(0.975)={:.4} q(0.995)={:.4}",
        z.quantile(0.5).unwrap(),
        z.quantile(0.975).unwrap(),
        z.quantile(0.995).unwrap()
    );

    let d = tabulate_lr_limit(DEFAULT_LR_OUTER, DEFAULT_LR_INNER_N, LR_LIMIT_SEED)
        .expect("lr limit tabulation");
    std::fs::write(dir.join("lr_limit_table.json"), d.to_json_string() + "\n").unwrap();
    println!(
        "lr_limit: q(0.5)={:.4} q(0.95)={:.4} q(0.99)={:.4}",
        d.quantile(0.5).unwrap(),
        d.quantile(0.95).unwrap(),
        d.quantile(0.99).unwrap()
    );
}
