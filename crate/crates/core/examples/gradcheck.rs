//! Finite-difference check of every differentiable loss.

use emocodec::trainer::gradcheck::{grad_check, LOSSES};

fn main() -> emocodec::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for loss in LOSSES {
        let t = std::time::Instant::now();
        let r = grad_check(loss, seed)?;
        println!("{loss:<22} max rel err {:.3e}  ({:.1}s)", r.max_rel_err, t.elapsed().as_secs_f64());
        for c in &r.cases {
            println!("    {:<24} {:.3e} over {} entries, worst {:?}", c.case, c.max_rel_err, c.entries, c.worst);
        }
    }
    Ok(())
}
