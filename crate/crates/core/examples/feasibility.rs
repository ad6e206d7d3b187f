//! How many frames and what sub-pixel shifts a ×s reconstruction needs, and
//! whether a given set of shifts covers the phase grid.

use burstsr::imaging::{phase_coverage, required_samples, required_shift};

fn main() -> burstsr::Result<()> {
    for s in [2.0, 3.0, 4.0] {
        println!(
            "x{s}: at least {} frames, shift step {:.3} LR px",
            required_samples(s),
            required_shift(s)
        );
    }
    let bursts: [(&str, Vec<(f64, f64)>); 3] = [
        (
            "quarter-phase",
            vec![(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)],
        ),
        ("static", vec![(0.0, 0.0); 4]),
        (
            "x-only",
            vec![(0.0, 0.0), (0.5, 0.0), (1.5, 0.0), (2.0, 0.0)],
        ),
    ];
    for (name, shifts) in bursts {
        let c = phase_coverage(&shifts, 2)?;
        println!("{name:<14} counts {:?} feasible {}", c.counts, c.feasible);
    }
    Ok(())
}
