use std::fs;

use guidance_interval::prelude::*;
use guidance_interval::problem::Problem;
use guidance_interval::search::*;
use tempfile::TempDir;

fn evaluator(problem: Problem, steps: usize) -> Evaluator {
    let schedule = rho_schedule(&RhoScheduleParams::edm(steps)).unwrap();
    Evaluator::new(problem, schedule, Solver::Heun).unwrap()
}

fn small_grid(metric: Metric) -> SweepGrid {
    SweepGrid {
        w: vec![2.0, 3.0],
        hi: vec![0, 3, 5],
        lo: vec![7, 10],
        metric,
        n: 300,
        seed: 4,
    }
}

#[test]
fn sweep_reports_do_not_depend_on_workers() {
    let ev = evaluator(Problem::one_d(), 10);
    let grid = small_grid(Metric::Wasserstein1);
    let runs: Vec<String> = [Some(1), Some(3), None]
        .into_iter()
        .map(|workers| {
            let opts = SweepOptions { workers, ..Default::default() };
            grid_sweep(&ev, &grid, &opts).unwrap().report.to_json()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn sweep_rows_match_direct_evaluation() {
    let ev = evaluator(Problem::one_d(), 10);
    let grid = small_grid(Metric::Frechet);
    let report = grid_sweep(&ev, &grid, &SweepOptions::default()).unwrap().report;
    assert_eq!(report.rows.len(), 1 + 2 * 6);
    for row in &report.rows {
        let direct = ev.evaluate(&row.cell().guidance(ev.schedule()).unwrap(), 300, 4, Metric::Frechet).unwrap();
        assert_eq!(row.loss, Some(direct.loss));
        assert_eq!(row.nfe, Some(direct.nfe));
    }
    let best = report.best_row().unwrap();
    assert!(report.rows.iter().all(|r| r.loss.unwrap() >= best.loss.unwrap()));
}

#[test]
fn resumed_sweep_equals_uninterrupted_sweep() {
    let dir = TempDir::new().unwrap();
    let ev = evaluator(Problem::one_d(), 10);
    let grid = small_grid(Metric::Frechet);
    let whole = grid_sweep(&ev, &grid, &SweepOptions::default()).unwrap().report;

    let journal = dir.path().join("j.jsonl");
    let first = SweepOptions {
        journal: Some(journal.clone()),
        max_cells: Some(4),
        ..Default::default()
    };
    let part = grid_sweep(&ev, &grid, &first).unwrap();
    assert!(!part.complete);
    assert_eq!(part.report.rows.len(), 4);

    let mut text = fs::read_to_string(&journal).unwrap();
    text.push_str("{\"w\":2.0,");
    fs::write(&journal, text).unwrap();

    let rest = SweepOptions {
        journal: Some(journal.clone()),
        resume: true,
        workers: Some(2),
        ..Default::default()
    };
    let done = grid_sweep(&ev, &grid, &rest).unwrap();
    assert!(done.complete);
    assert_eq!(done.resumed, 4);
    assert_eq!(done.report.to_json(), whole.to_json());
    assert_eq!(done.report.to_csv().unwrap(), whole.to_csv().unwrap());

    let again = grid_sweep(&ev, &grid, &rest).unwrap();
    assert_eq!(again.resumed, whole.rows.len());
    assert!(again.timings.is_empty());
}

#[test]
fn mismatched_or_corrupt_journals_are_refused() {
    let dir = TempDir::new().unwrap();
    let ev = evaluator(Problem::one_d(), 10);
    let grid = small_grid(Metric::Frechet);
    let journal = dir.path().join("j.jsonl");
    let opts = SweepOptions {
        journal: Some(journal.clone()),
        max_cells: Some(3),
        ..Default::default()
    };
    grid_sweep(&ev, &grid, &opts).unwrap();
    let resume = SweepOptions { resume: true, ..opts.clone() };

    assert!(matches!(grid_sweep(&ev, &grid, &opts), Err(Error::ResumeConflict { .. })));
    let other = SweepGrid { seed: 5, ..grid.clone() };
    assert!(matches!(grid_sweep(&ev, &other, &resume), Err(Error::ResumeConflict { .. })));
    let other_k = evaluator(Problem::one_d(), 10).with_k(5);
    assert!(matches!(grid_sweep(&other_k, &grid, &resume), Err(Error::ResumeConflict { .. })));

    let text = fs::read_to_string(&journal).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = &lines[1][..lines[1].len() / 2];
    fs::write(&journal, lines.join("\n") + "\n").unwrap();
    assert!(matches!(grid_sweep(&ev, &grid, &resume), Err(Error::ResumeConflict { .. })));
}

#[test]
fn screening_keeps_the_full_winner() {
    let ev = evaluator(Problem::one_d(), 10);
    let grid = SweepGrid { n: 2000, ..small_grid(Metric::Wasserstein1) };
    let full = grid_sweep(&ev, &grid, &SweepOptions::default()).unwrap().report;
    let winner = full.best_row().unwrap().cell();
    let screen = screen_then_confirm(&ev, &grid, 400, 2000, 0.25, &SweepOptions::default()).unwrap();
    assert_eq!(screen.shortlist.len(), 4);
    assert!(screen.shortlist.contains(&winner));
    assert_eq!(screen.winner().unwrap().cell(), winner);
    // Confirmation rows are the full-size rows of the shortlisted cells.
    for row in &screen.confirm.rows {
        assert_eq!(Some(row), full.row(&row.cell()));
    }
}

#[test]
fn phase_one_loss_is_u_shaped_on_the_leaky_toy() {
    let ev = evaluator(Problem::two_d_leaky(), 16);
    let opts = TwoPhaseOptions {
        hi: None,
        lo: None,
        metric: Metric::Frechet,
        n: 2000,
        seed: 7,
        strategy: PhaseStrategy::Scan,
    };
    let result = two_phase_search(&ev, 3.0, &opts).unwrap();
    let trail: Vec<f64> = result.phase1.iter().map(|p| p.loss.unwrap()).collect();
    let best = trail.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < trail[0] && best < *trail.last().unwrap(), "{trail:?}");
    assert!(result.hi > 0 && result.hi < 15);
    assert!(result.lo > result.hi);
}

#[test]
fn two_phase_search_lands_near_the_grid_optimum() {
    let ev = evaluator(Problem::two_d_leaky(), 12);
    let sched = ev.schedule().clone();
    let grid = SweepGrid { w: vec![3.0], ..SweepGrid::default_for(&sched, Metric::Frechet, 2000, 7) };
    let report = grid_sweep(&ev, &grid, &SweepOptions::default()).unwrap().report;
    let opts = TwoPhaseOptions {
        hi: None,
        lo: None,
        metric: Metric::Frechet,
        n: 2000,
        seed: 7,
        strategy: PhaseStrategy::Scan,
    };
    let mut result = two_phase_search(&ev, 3.0, &opts).unwrap();
    let gap = result.compare_to(&report).unwrap();
    let optimum = report.best_at_w(3.0).unwrap().loss.unwrap();
    assert!(gap <= 0.05 * optimum, "search {} vs grid {optimum}", result.loss);
    // Each phase costs at most one evaluation per candidate.
    assert!(result.evaluations <= 2 * 12);
}

#[test]
fn bisection_strategy_spends_fewer_evaluations() {
    let ev = evaluator(Problem::two_d_leaky(), 24);
    let base = TwoPhaseOptions {
        hi: None,
        lo: None,
        metric: Metric::Frechet,
        n: 1000,
        seed: 3,
        strategy: PhaseStrategy::Scan,
    };
    let scan = two_phase_search(&ev, 3.0, &base).unwrap();
    let fast = two_phase_search(&ev, 3.0, &TwoPhaseOptions { strategy: PhaseStrategy::Bisection { stride: 4 }, ..base }).unwrap();
    assert!(fast.evaluations < scan.evaluations);
}

#[test]
fn golden_section_finds_every_unimodal_argmin() {
    for target in 0..32usize {
        let mut calls = 0;
        let r = golden_section_argmin(0..32, |i| {
            calls += 1;
            Ok((i as f64 - target as f64).abs())
        })
        .unwrap();
        assert_eq!(r.index, target);
        assert!(calls <= 9 && r.evaluations <= 9, "target {target}: {calls} calls");
    }
}

#[test]
fn ablation_is_consistent_with_direct_runs() {
    let ev = evaluator(Problem::one_d(), 8);
    let report = step_importance_ablation(&ev, 3.0, Metric::Wasserstein1, 500, 2).unwrap();
    assert_eq!(report.steps.len(), 8);
    let sched = ev.schedule();
    let full = ev.evaluate(&GuidanceSpec::constant(sched, 3.0).unwrap(), 500, 2, Metric::Wasserstein1).unwrap();
    let base = ev.evaluate(&GuidanceSpec::unguided(sched), 500, 2, Metric::Wasserstein1).unwrap();
    assert_eq!(report.full_loss, full.loss);
    assert_eq!(report.baseline_loss, base.loss);
    let one = GuidanceSpec::from_interval(sched, 3.0, SnappedInterval::from_indices(4, 5)).unwrap();
    let step4 = ev.evaluate(&one, 500, 2, Metric::Wasserstein1).unwrap();
    assert_eq!(report.steps[4].enable_loss, Some(step4.loss));
    assert_eq!(report.steps[4].enable_delta, Some(step4.loss - base.loss));
}

#[test]
fn recall_metric_rejects_precision_collapse() {
    let ev = evaluator(Problem::two_d_leaky(), 10);
    let sched = ev.schedule().clone();
    let floor = ev.precision_floor(1000, 1).unwrap();
    let base = ev.evaluate(&GuidanceSpec::unguided(&sched), 1000, 1, Metric::Recall).unwrap();
    assert_eq!(base.loss, -base.metrics.recall.unwrap());
    assert!((floor - (base.metrics.precision.unwrap() - PRECISION_SLACK)).abs() < 1e-15);
}
