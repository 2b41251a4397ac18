use hstar_core::domains::{make_gauge_ball, AnnulusProblem};
use hstar_core::exact::PExponent;
use hstar_core::heis::{AmbientParams, Point};
use hstar_core::io::{load_checkpoint, save_checkpoint, save_ply, CheckpointMeta};
use hstar_core::solver::{build_grid, solve, SolveOptions};
use hstar_core::verify::{extract_level_surface, level_starshape, sign_certificate};
use hstar_core::Error;

fn problem(p: f64) -> AnnulusProblem {
    AnnulusProblem::new(
        make_gauge_ball(Point::origin(1), 0.4).unwrap(),
        make_gauge_ball(Point::origin(1), 1.0).unwrap(),
        PExponent::new(p).unwrap(),
        AmbientParams::default(),
    )
    .unwrap()
}

#[test]
fn solve_checkpoint_reload_certify() {
    let prob = problem(3.0);
    let grid = build_grid(&prob, [33; 3]).unwrap();
    let opts = SolveOptions::default();
    let (field, report) = solve(&prob, &grid, &opts).unwrap();
    assert!(report.converged && report.final_residual <= opts.tolerance);

    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("field.bin");
    let mut meta = CheckpointMeta::for_field(&field);
    meta.problem = Some(prob.clone());
    meta.options = Some(opts.clone());
    meta.report = Some(report.clone());
    save_checkpoint(&bin, &field, &meta).unwrap();
    let (back, meta_back) = load_checkpoint(&bin).unwrap();
    assert_eq!(back, field);
    assert_eq!(meta_back.report.unwrap(), report);

    let cert = sign_certificate(&back, 2).unwrap();
    assert!(cert.pass);
    // at p = 3 the 0.8 level lies one cell outside the inner ball, inside the uncertified layer
    assert!(matches!(extract_level_surface(&back, 0.8), Err(Error::EmptySurface(_))));
    for t in [0.2, 0.5] {
        let s = extract_level_surface(&back, t).unwrap();
        assert!(level_starshape(&s).unwrap().pass());
        let ply = dir.path().join(format!("level_{t}.ply"));
        save_ply(&ply, &s, &[]).unwrap();
        assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply\nformat ascii 1.0\n"));
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let prob = problem(1.5);
    let grid = build_grid(&prob, [21; 3]).unwrap();
    let (a, ra) = solve(&prob, &grid, &SolveOptions::default()).unwrap();
    let (b, rb) = solve(&prob, &grid, &SolveOptions::default()).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(ra.energy_history, rb.energy_history);
}

#[test]
fn iteration_cap_returns_partial_result() {
    let prob = problem(3.0);
    let grid = build_grid(&prob, [21; 3]).unwrap();
    let opts = SolveOptions { max_iterations: 1, ..SolveOptions::default() };
    match solve(&prob, &grid, &opts) {
        Err(Error::NotConverged(partial)) => {
            assert!(!partial.report.converged);
            assert_eq!(partial.report.iterations, 1);
            assert_eq!(partial.field.grid(), &grid);
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|r| r.1)),
    }
}
