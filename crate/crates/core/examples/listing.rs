//! Print schedule listings.
//!
//! ```text
//! cargo run -p qsec --example listing -- qsec 40e-6 2
//! cargo run -p qsec --example listing -- cpmg 4 0.6e-6
//! ```

use qsec::dynamics::HamiltonianParams;
use qsec::experiments;
use qsec::sequences::{self, GateSet, SignalSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let schedule = match arg(0).unwrap_or("qsec") {
        "qsec" => {
            let t = arg(1).and_then(|s| s.parse().ok()).unwrap_or(40e-6);
            let n_ec = arg(2).and_then(|s| s.parse().ok()).unwrap_or(2);
            let g = GateSet::ideal(HamiltonianParams::default());
            experiments::qsec_schedule(&g, 100e3, t, n_ec, &[])
        }
        "cpmg" => {
            let n = arg(1).and_then(|s| s.parse().ok()).unwrap_or(4);
            let delay = arg(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
            let signal = SignalSpec {
                amplitude: 10e3,
                frequency: 100e3,
                phase: 0.0,
            };
            sequences::cpmg_block(n, sequences::resonant_spacing(100e3), &signal, 0.0, delay)
        }
        other => {
            eprintln!("unknown listing `{other}`; use `qsec` or `cpmg`");
            std::process::exit(1);
        }
    };
    match schedule {
        Ok(s) => print!("{}", s.listing()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
