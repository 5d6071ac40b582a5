//! Runs every acceptance criterion through the presets and prints one line per criterion.

use std::path::Path;
use std::process::ExitCode;

use krf_core::estimates::EstimateReport;
use krflab::{presets, RunSummary};

struct Line {
    ok: bool,
    title: &'static str,
    detail: String,
}

fn run(name: &str, root: &Path) -> RunSummary {
    let cfg = presets::find(name).expect("preset exists").config();
    krflab::run(&cfg, &root.join(name), Path::new("."), 1).unwrap_or_else(|e| panic!("{name}: {e:#}"))
}

fn one<'a>(s: &'a RunSummary, id: &str) -> &'a EstimateReport {
    let v = s.by_theorem(id);
    assert_eq!(v.len(), 1, "{id} in {}", s.manifest.name);
    v[0]
}

fn c(r: &EstimateReport, key: &str) -> f64 {
    *r.constants.get(key).unwrap_or(&f64::NAN)
}

fn min_margin(rs: &[&EstimateReport]) -> f64 {
    rs.iter().filter_map(|r| r.margin).fold(f64::INFINITY, f64::min)
}

fn value_at(r: &EstimateReport, name: &str, t: f64) -> f64 {
    let ts = &r.series["t"];
    let k = ts.iter().position(|x| (x - t).abs() < 1e-9).unwrap_or_else(|| panic!("t = {t} not sampled"));
    r.series[name][k]
}

fn exact_regression(ex: &RunSummary) -> Line {
    let r = one(ex, "exact_regression");
    Line {
        ok: r.holds() && c(r, "max_error") <= 5e-3,
        title: "exact-solution regression",
        detail: format!(
            "sup error {:.2e} <= 5e-3, dt-halving ratios in [{:.3}, {:.3}] within 2 +- 25%",
            c(r, "max_error"),
            c(r, "min_halving_ratio"),
            c(r, "max_halving_ratio")
        ),
    }
}

fn obstruction(ex: &RunSummary) -> Line {
    let r = one(ex, "t_max_obstruction");
    Line {
        ok: r.holds(),
        title: "T_max obstruction",
        detail: format!(
            "phi_t(0) + t log j spread {:.4} over j = 10..1000 at t = 0.5: {:.1}% of the drift t log(100) (gate 10%), {:.1}% of its mean; divergence detected",
            c(r, "offset_spread"),
            100.0 * c(r, "drift_normalized_variation"),
            100.0 * c(r, "relative_variation")
        ),
    }
}

fn comparison(sw: &RunSummary) -> Line {
    let rs = sw.by_theorem("comparison");
    let m = min_margin(&rs);
    Line {
        ok: rs.len() == 20 && rs.iter().all(|r| r.holds()) && m >= -1e-8,
        title: "comparison principle",
        detail: format!("{} seeded ordered pairs, worst ordering margin {m:.2e} >= -1e-8", rs.len()),
    }
}

fn upper_bounds(sw: &RunSummary) -> Line {
    let up = sw.by_theorem("upper_bound");
    let der = sw.by_theorem("derivative_upper");
    let (mu, md) = (min_margin(&up), min_margin(&der));
    Line {
        ok: up.len() == 20 && der.len() == 20 && up.iter().chain(&der).all(|r| r.holds()) && mu >= -1e-6 && md >= -1e-6,
        title: "upper and derivative bounds",
        detail: format!("20 smooth data: upper-bound margin {mu:.2e}, derivative margin {md:.2e}, both >= -1e-6"),
    }
}

fn lelong(ld: &RunSummary) -> Line {
    let r = one(ld, "lelong_decay");
    let mut ok = r.holds();
    let mut parts = Vec::new();
    for t in [0.05, 0.1, 0.15] {
        let nu = value_at(r, "nu", t);
        ok &= nu >= 0.4 - 2.0 * t - 0.02;
        parts.push(format!("nu({t}) = {nu:.4}"));
    }
    let nu15 = value_at(r, "nu", 0.15);
    ok &= nu15 >= 0.02;
    let coarse = value_at(r, "sup_norm", 0.25);
    let fine = c(r, "sup_norm_fine_t0.25");
    ok &= (coarse - fine).abs() <= 1e-2 * coarse.max(1.0);
    let dom = c(r, "domination_margin");
    ok &= dom >= -1e-4;
    Line {
        ok,
        title: "Lelong decay envelope",
        detail: format!(
            "{}; sup|phi_0.25| {coarse:.4} coarse vs {fine:.4} fine; domination margin {dom:.2e}",
            parts.join(", ")
        ),
    }
}

fn independence(ld: &RunSummary) -> Line {
    let r = one(ld, "sequence_independence");
    Line {
        ok: r.holds() && c(r, "max_distance") <= 1e-4,
        title: "sequence independence",
        detail: format!("two approximant families differ by {:.2e} <= 1e-4 at t = 0.1, 0.3", c(r, "max_distance")),
    }
}

fn estimate_suite(suite: &RunSummary, ex: &RunSummary) -> Line {
    let ids = ["c0_lower", "dot_lower", "c2", "more_estimates"];
    let mut ok = suite.failures().is_empty();
    let mut parts = Vec::new();
    for id in ids {
        let r = one(suite, id);
        ok &= r.holds() && r.refinement_stable == Some(true);
        parts.push(format!("{id} {}", if r.holds() { "holds" } else { "fails" }));
    }
    let mut skipped = 0;
    for id in ids {
        let r = one(ex, id);
        if r.skip_reason().is_some_and(|s| !s.is_empty()) {
            skipped += 1;
        }
    }
    ok &= skipped == ids.len() && ex.failures().is_empty();
    Line {
        ok,
        title: "C0/C2/derivative estimate suite",
        detail: format!(
            "{} with 2x slack under refinement; {skipped}/{} skipped with reason on the example family",
            parts.join(", "),
            ids.len()
        ),
    }
}

fn capacity(cap: &RunSummary) -> Line {
    let exact = one(cap, "capacity_exactness");
    let mono = one(cap, "capacity_monotone");
    let ext = one(cap, "kolodziej_extinction");
    let wit = one(cap, "kolodziej_witness");
    Line {
        ok: exact.holds() && c(exact, "error") <= 1e-6 && mono.holds() && c(mono, "pairs") == 20.0 && ext.holds() && wit.holds(),
        title: "capacity",
        detail: format!(
            "|Cap(all) - mass| = {:.1e}; 20 nested pairs monotone (margin {:.1e}); extinction verified by t = {}; e^-t gives a witness",
            c(exact, "error"),
            mono.margin.unwrap_or(f64::NAN),
            c(ext, "t_star")
        ),
    }
}

fn stability(st: &RunSummary) -> Line {
    let r = one(st, "stability");
    let last = |k: &str| r.series.get(k).and_then(|v| v.last().copied()).unwrap_or(f64::NAN);
    Line {
        ok: r.holds(),
        title: "stability",
        detail: format!(
            "at j = 64: sup distance {:.2e}, C2 distance {:.2e}, both monotone in j and <= 1e-3",
            last("sup_distance"),
            last("c2_distance")
        ),
    }
}

fn zero(zc: &RunSummary, hf: &RunSummary) -> Line {
    let rs = zc.by_theorem("zero_convergence");
    let h = one(hf, "h_f_convergence");
    let mut ok = rs.len() == 2 && h.holds();
    let mut parts = Vec::new();
    for r in rs.iter().chain([&h]) {
        ok &= r.holds() && c(r, "sup_last") <= 1e-2;
        let d2 = c(r, "d2_last");
        if !d2.is_nan() {
            ok &= d2 <= 1e-2;
        }
        let label = r.notes.iter().find_map(|n| n.strip_prefix("datum: ")).unwrap_or("h_f");
        let d2 = if d2.is_nan() { "n/a (continuous datum)".to_string() } else { format!("{d2:.1e}") };
        parts.push(format!("{label}: sup {:.1e}, D2 {d2}", c(r, "sup_last")));
    }
    let all: Vec<&EstimateReport> = rs.iter().copied().chain([h]).collect();
    let m = min_margin(&all);
    ok &= m >= -1e-8;
    Line {
        ok,
        title: "convergence at zero",
        detail: format!("k = 6, monotone-sequence margin {m:.2e}; {}", parts.join("; ")),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let ex = run("example-5-1", root);
    let sw = run("comparison-sweep", root);
    let ld = run("lelong-decay", root);
    let suite = run("c0-c2-suite", root);
    let cap = run("capacity-decay", root);
    let st = run("stability-sweep", root);
    let zc = run("zero-convergence", root);
    let hf = run("h-f-convergence", root);
    let lines = [
        exact_regression(&ex),
        obstruction(&ex),
        comparison(&sw),
        upper_bounds(&sw),
        lelong(&ld),
        independence(&ld),
        estimate_suite(&suite, &ex),
        capacity(&cap),
        stability(&st),
        zero(&zc, &hf),
    ];
    let mut failed = 0;
    for (k, l) in lines.iter().enumerate() {
        println!("criterion {:>2} {} {}: {}", k + 1, if l.ok { "PASS" } else { "FAIL" }, l.title, l.detail);
        failed += usize::from(!l.ok);
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
