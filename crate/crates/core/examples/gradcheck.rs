use qsynth::trainer::{gradcheck, GradcheckConfig};

fn main() -> qsynth::Result<()> {
    let report = gradcheck(&GradcheckConfig::default())?;
    for c in &report.checks {
        println!(
            "{:<8} {:<10} coords={:<5} kinks={:<3} max_rel_err={:.2e} {}  worst {:?} {:?}",
            c.loss,
            c.phase,
            c.coordinates,
            c.kinks,
            c.max_rel_err,
            if c.passed { "ok" } else { "FAIL" },
            c.worst,
            c.worst_values,
        );
    }
    println!("passed={} in {:.1}s", report.passed, report.wall_time_s);
    Ok(())
}
