use acs::bench::{self, Arm, Execution, ExperimentGrid, Format, MetricRow, RunOptions, CSV_COLUMNS};

fn small_grid(reps: usize) -> ExperimentGrid {
    let arms = vec![
        Arm::new("cs", "cs:knn[k=5]").unwrap(),
        Arm::new("refit", "refit:knn[k=5][L=5]").unwrap(),
        Arm::new("div", "div:knn[k=5][lambda=0.3,L=5]").unwrap(),
    ];
    let mut g = ExperimentGrid::single(1, 40, 30, 0.1, 0.2, reps, arms);
    g.sigmas = vec![0.1, 0.5];
    g
}

fn run(grid: &ExperimentGrid, execution: Execution) -> Vec<MetricRow> {
    bench::run_grid(grid, 11, &RunOptions { execution, trace_dir: None }).unwrap()
}

#[test]
fn serial_and_parallel_agree() {
    let g = small_grid(3);
    let serial = run(&g, Execution::Serial);
    assert_eq!(serial.len(), 6);
    assert_eq!(serial, run(&g, Execution::Parallel));
    let arms: Vec<_> = serial.iter().map(|r| (r.arm.as_str(), r.sigma)).collect();
    assert_eq!(arms[0], ("cs", 0.1));
    assert_eq!(arms[3], ("cs", 0.5));
}

#[test]
fn one_replication_gives_one_row_per_arm() {
    let mut g = small_grid(1);
    g.sigmas = vec![0.1];
    let rows = run(&g, Execution::Serial);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.power_hat) && (0.0..=1.0).contains(&r.fdr_hat)));
    assert_eq!(rows[0].mean_t, None);
    assert!(rows[1].mean_t.is_some());
}

#[test]
fn json_round_trip_and_csv_header() {
    let rows = run(&small_grid(2), Execution::Serial);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.json");
    bench::emit(&rows, &path, Format::for_path(&path)).unwrap();
    let back = bench::load_json(&path).unwrap();
    assert_eq!(back, rows.iter().map(MetricRow::rounded).collect::<Vec<_>>());

    let mut buf = Vec::new();
    bench::emit_to(&[], &mut buf, Format::Csv).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_COLUMNS.join(","));

    let mut buf = Vec::new();
    bench::emit_to(&rows, &mut buf, Format::Csv).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), rows.len() + 1);
}

#[test]
fn toml_grid() {
    let text = r#"
        sigmas = [0.2]
        ns = [30, 40]
        alpha = 0.1
        reps = 2
        reveal_labels = true

        [sim]
        setting = 2
        m = 20

        [[arms]]
        name = "aug"
        method = "aug:knn[k=5][L=5]"

        [[arms]]
        name = "cs"
        method = "cs:knn[k=5]"
    "#;
    let g = ExperimentGrid::from_toml(text).unwrap();
    assert_eq!(g.cells(), vec![(0.2, 30), (0.2, 40)]);
    assert!(g.reveal_labels);
    let rows = run(&g, Execution::Parallel);
    assert_eq!(rows.len(), 4);
    assert!(ExperimentGrid::from_toml(&text.replace("reps = 2", "reps = 0")).is_err());
    assert!(ExperimentGrid::from_toml(&text.replace("aug:knn", "nope:knn")).is_err());
}

#[test]
fn traces_are_written() {
    let mut g = small_grid(2);
    g.sigmas = vec![0.1];
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions { execution: Execution::Serial, trace_dir: Some(dir.path().to_path_buf()) };
    bench::run_grid(&g, 1, &options).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 6);
}

#[test]
fn hypergeometric_bound_holds_up_to_fifteen() {
    let r = bench::hypergeom_bound_check(15, 15);
    assert_eq!(r.cases, (1..=15).flat_map(|m| (1..=15).map(move |n| m + n + 1)).sum::<usize>());
    assert_eq!(r.violations, 0);
    assert!(r.tight_at_full_draw);
    assert!(r.min_slack > -1e-12);
}
