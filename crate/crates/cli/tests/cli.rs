use std::fs;
use std::path::Path;
use std::process::Command;

use locomt_cli::{cmd_cost, cmd_gen_data, cmd_gradcheck, cmd_gradcheck_with, cmd_mask, cmd_strategy, Status};
use locomt_core::config::RunConfig;
use locomt_core::costmodel::verify_ordering;
use locomt_core::model::FusionPattern;
use locomt_core::numerics::Rng;
use locomt_core::viewconfig::Strategy as Plan;
use proptest::prelude::*;

fn locomt(args: &[&str], dir: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_locomt"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn csv_value(csv: &str, pattern: &str) -> String {
    csv.lines()
        .find(|l| l.starts_with(&format!("{pattern},")))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn cost_rows_for_two_equal_modalities() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.cfg"),
        "data.lengths = 4,4\ndata.feature_dims = 1,1\nmodel.d = 2\n",
    )
    .unwrap();
    let (code, _, _) = locomt(&["--config", "c.cfg", "--out", "o", "cost"], dir.path());
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.path().join("o/cost.csv")).unwrap();
    let got: Vec<String> = ["self", "cross", "multi", "bottleneck", "locomt"]
        .iter()
        .map(|p| csv_value(&csv, p))
        .collect();
    assert_eq!(got, ["64", "64", "128", "100", "64"]);
    assert_eq!(csv_value(&csv, "gap"), "0");
}

#[test]
fn cost_for_unequal_modalities() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.cfg"),
        "data.lengths = 2,6\ndata.feature_dims = 1,1\nmodel.d = 2\n",
    )
    .unwrap();
    let (code, _, _) = locomt(&["--config", "c.cfg", "--out", "o", "cost"], dir.path());
    assert_eq!(code, 0);
    let csv = fs::read_to_string(dir.path().join("o/cost.csv")).unwrap();
    assert_eq!(csv_value(&csv, "self"), "80");
    assert_eq!(csv_value(&csv, "locomt"), "64");
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "model.frequencies = 2,1\n").unwrap();
    let (code, _, err) = locomt(&["--config", "bad.cfg", "cost"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("frequenc"));
    fs::write(dir.path().join("unknown.cfg"), "model.depth = 3\n").unwrap();
    assert_eq!(locomt(&["--config", "unknown.cfg", "cost"], dir.path()).0, 2);
    assert_eq!(locomt(&["frobnicate"], dir.path()).0, 2);
    assert_eq!(locomt(&["--config", "missing.cfg", "cost"], dir.path()).0, 2);
}

#[test]
fn cost_exit_status_agrees_with_the_ordering_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(2024);
    let mut violated = 0;
    for i in 0..100 {
        let m = 2 + rng.index(2);
        let lengths: Vec<String> = (0..m).map(|_| (1 + rng.index(16)).to_string()).collect();
        let heads = 1 + rng.index(4);
        let views = 1 + m * (m - 1) / 2;
        let mut freqs = vec![0usize; views];
        for _ in 0..heads {
            freqs[rng.index(views)] += 1;
        }
        let freqs: Vec<String> = freqs.iter().map(|f| f.to_string()).collect();
        let text = format!(
            "data.lengths = {}\ndata.feature_dims = {}\nmodel.heads = {heads}\nmodel.d = {}\nmodel.frequencies = {}\nmodel.bottleneck_tokens = {}\n",
            lengths.join(","),
            vec!["1"; m].join(","),
            heads * (1 + rng.index(3)),
            freqs.join(","),
            1 + rng.index(6),
        );
        let name = format!("f{i}.cfg");
        fs::write(dir.path().join(&name), &text).unwrap();
        let cfg = RunConfig::parse(&text).unwrap();
        let holds = verify_ordering(&cfg.cost_queries().unwrap()[0]).unwrap().chain_holds();
        violated += usize::from(!holds);
        let (code, _, _) = locomt(&["--config", &name, "--out", "o", "cost"], dir.path());
        assert_eq!(code, if holds { 0 } else { 1 }, "{text}");
    }
    // Large bottlenecks relative to short sequences break the chain sometimes.
    assert!(violated > 0);
}

#[test]
fn strategy_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (Plan::Spread, "0,9,3\n1,6,6\n2,3,9\n3,0,12\n"),
        (Plan::Bottleneck, "0,9,3\n1,6,6\n2,6,6\n3,9,3\n"),
        (Plan::Alternating, "0,12,0\n1,0,12\n2,12,0\n3,0,12\n"),
    ];
    for (kind, body) in cases {
        cmd_strategy(kind, 12, 4, 0, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("strategy.csv")).unwrap();
        assert_eq!(csv, format!("layer,p0,p12\n{body}"));
    }
    let (code, out, _) = locomt(
        &[
            "--seed",
            "5",
            "--out",
            "o",
            "strategy",
            "--kind",
            "random",
            "--heads",
            "6",
            "--fusion-layers",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert_eq!(
        out,
        locomt(
            &[
                "--seed",
                "5",
                "--out",
                "o",
                "strategy",
                "--kind",
                "random",
                "--heads",
                "6",
                "--fusion-layers",
                "3"
            ],
            dir.path()
        )
        .1
    );
    assert!(cmd_strategy(Plan::Spread, 0, 4, 0, dir.path()).is_err());
}

#[test]
fn self_pattern_masks_are_block_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        "data.lengths = 2,3\ndata.feature_dims = 1,1\nmodel.pattern = self\nmodel.frequencies =\nmodel.layers = 1\n",
    )
    .unwrap();
    cmd_mask(&cfg, dir.path()).unwrap();
    let grid = fs::read_to_string(dir.path().join("masks/layer0_head0.txt")).unwrap();
    assert_eq!(grid, "##...\n##...\n..###\n..###\n..###\n");
    let pgm = fs::read(dir.path().join("masks/layer0_head0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
    assert_eq!(pgm.len(), b"P5\n5 5\n255\n".len() + 25);
}

#[test]
fn locomt_masks_differ_per_head_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("data.lengths = 2,2\ndata.feature_dims = 1,1\nmodel.layers = 1\n").unwrap();
    cmd_mask(&cfg, dir.path()).unwrap();
    let read = |h: usize| fs::read_to_string(dir.path().join(format!("masks/layer0_head{h}.txt"))).unwrap();
    assert_eq!(read(0), "##..\n##..\n..##\n..##\n");
    assert_eq!(read(1), "..##\n..##\n##..\n##..\n");
    let first = fs::read(dir.path().join("masks/layer0_head1.pgm")).unwrap();
    cmd_mask(&cfg, dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("masks/layer0_head1.pgm")).unwrap(), first);
}

#[test]
fn bottleneck_masks_mark_bottleneck_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(
        "data.lengths = 2,1\ndata.feature_dims = 1,1\nmodel.pattern = bottleneck\nmodel.frequencies =\nmodel.layers = 1\n",
    )
    .unwrap();
    cmd_mask(&cfg, dir.path()).unwrap();
    let grid = fs::read_to_string(dir.path().join("masks/layer0_head0.txt")).unwrap();
    assert_eq!(grid, "##.B\n##.B\n..#B\nBBBB\n");
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("model.d = 4\nmodel.d_ff = 8\n").unwrap();
    assert_eq!(cmd_gradcheck(&cfg, dir.path()).unwrap().status, Status::Ok);
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().count() > 10);
    let bad = cmd_gradcheck_with(&cfg, dir.path(), |g| g.tensors[0].data_mut()[0] += 0.5).unwrap();
    assert_eq!(bad.status, Status::Violated);
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse("data.train_samples = 50\ndata.test_samples = 10\n").unwrap();
    cmd_gen_data(&cfg, &dir.path().join("a")).unwrap();
    let (code, _, _) = locomt(&["--out", "b", "gen-data"], dir.path());
    assert_eq!(code, 0);
    cmd_gen_data(&cfg, &dir.path().join("c")).unwrap();
    let a = fs::read(dir.path().join("a/dataset.bin")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("c/dataset.bin")).unwrap());
    assert!(fs::read(dir.path().join("b/dataset.bin")).unwrap().len() > a.len());
}

#[test]
fn thread_cap_is_honoured_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_locomt"))
            .args(["--out", "o", "cost"])
            .env("LOCOMT_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap()
            .status
            .code()
            .unwrap()
    };
    assert_eq!(run("1"), 0);
    assert_eq!(run("0"), 2);
    assert_eq!(run("many"), 2);
}

#[test]
fn cost_needs_frequencies_and_reports_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        RunConfig::parse("model.heads = 4\nmodel.layers = 3\nmodel.fusion_layers = 2\nmodel.frequencies = 3,1;0,4\n")
            .unwrap();
    let out = cmd_cost(&cfg, dir.path()).unwrap();
    assert_eq!(out.status, Status::Ok);
    let csv = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("locomt,")).count(), 2);
    let plain = RunConfig::parse("model.pattern = multi\nmodel.frequencies =\n").unwrap();
    assert!(cmd_cost(&plain, dir.path()).is_err());
}

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        prop::collection::vec(1usize..9, 2..=3),
        1usize..4,
        0usize..=2,
        prop::sample::select(FusionPattern::ALL.to_vec()),
        0.0f64..2.0,
        1e-4f64..1.0,
        prop::option::of(4usize..32),
    )
        .prop_map(|(seed, lengths, heads, fusion, pattern, noise, lr, d_ff)| {
            let m = lengths.len();
            let mut cfg = RunConfig {
                seed,
                ..RunConfig::default()
            };
            cfg.data.feature_dims = lengths.iter().map(|l| l % 3 + 1).collect();
            cfg.data.lengths = lengths;
            cfg.data.noise = noise;
            cfg.heads = heads;
            cfg.d = 2 * heads;
            cfg.layers = 2;
            cfg.fusion_layers = fusion;
            cfg.pattern = pattern;
            cfg.d_ff = d_ff;
            cfg.train.base_lr = lr;
            let mut f = vec![0; 1 + m * (m - 1) / 2];
            f[0] = heads;
            cfg.frequencies = Some(vec![f]);
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_text_round_trips(cfg in run_config()) {
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn committed_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = fs::read_to_string(root.join("default.cfg")).unwrap();
    assert_eq!(RunConfig::parse(&default).unwrap(), RunConfig::default());
    let late = RunConfig::parse(&fs::read_to_string(root.join("late_fusion.cfg")).unwrap()).unwrap();
    assert_eq!(late.fusion_layers, 0);
    assert_eq!(late.train, RunConfig::default().train);
}
