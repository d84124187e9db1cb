//! Parameter and multiply-accumulate counts for the full-size separators.
//!
//! Run with `cargo run --example model_size`.

use dtcn::cli::count_report;
use dtcn::dtcn::DtcnConfig;

fn main() {
    let input_len = 8000;
    for (x, r) in DtcnConfig::full_layouts() {
        let cfg = DtcnConfig::full(x, r);
        println!(
            "X={x} R={r}: receptive field {} frames ({:.2} s)",
            cfg.receptive_field_frames(),
            cfg.receptive_field_seconds()
        );
    }
    println!();
    println!("{:<12} {:>12} {:>16}", "variant", "params", "MACs per 1 s");
    for (name, params, macs) in count_report(&DtcnConfig::full(8, 3), input_len) {
        println!("{name:<12} {params:>12} {macs:>16}");
    }
}
