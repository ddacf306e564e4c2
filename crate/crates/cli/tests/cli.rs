use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use astra_core::esdf::{compress_grid, format_esdf, parse_occupancy, signed_esdf};
use astra_core::localization::{goal_localize, localize, GroundTruthOracle, LocalizationConfig, LocalizationQuery};
use astra_core::odometry::{dead_reckon, metrics, synthetic_run, FusionWeights, NoiseModel};
use astra_core::planner::{sample, PlanningCondition, VectorFieldModel};
use astra_core::rewards::{coarse_reward, CoarseGroundTruth, CoarseOutput, RewardWeights};
use astra_core::sim::{generate_world, run_episode, EpisodeConfig, EpisodeGoal, LocalPlanner, World, WorldConfig};
use astra_core::topomap::TopoMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

fn astra(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astra"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn small_world(dir: &Path) -> World {
    let w = generate_world(
        3,
        &WorldConfig {
            size: 32,
            ..Default::default()
        },
    )
    .unwrap();
    w.save(&dir.join("w")).unwrap();
    w
}

#[test]
fn map_validate_and_path() {
    let tmp = TempDir::new().unwrap();
    let w = small_world(tmp.path());
    let out = astra(&["map", "validate", "w/map.json"], tmp.path());
    assert_eq!(ok_json(&out), serde_json::to_value(w.map.validate()).unwrap());

    let out = astra(
        &["map", "path", "w/map.json", "--from", "n000", "--to", "n005"],
        tmp.path(),
    );
    let expect = w.map.shortest_path("n000", "n005").unwrap();
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());

    let out = astra(
        &["map", "path", "w/map.json", "--from", "n000", "--to", "zzz"],
        tmp.path(),
    );
    assert_eq!(err_json(&out, 1)["error"], "map");
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let out = astra(&["frobnicate"], tmp.path());
    assert_eq!(err_json(&out, 2)["error"], "usage");

    let out = astra(&["--set", "train.lrr=1", "map", "validate", "x.json"], tmp.path());
    let e = err_json(&out, 2);
    assert!(e["message"].as_str().unwrap().contains("train.lrr"));

    fs::write(tmp.path().join("c.json"), r#"{"seed": 1, "bogus": 2}"#).unwrap();
    let out = astra(&["--config", "c.json", "map", "validate", "x.json"], tmp.path());
    assert!(err_json(&out, 2)["message"].as_str().unwrap().contains("bogus"));

    fs::write(tmp.path().join("c.json"), r#"{"params": {"episode.nope": 2}}"#).unwrap();
    let out = astra(&["--config", "c.json", "map", "validate", "x.json"], tmp.path());
    assert!(err_json(&out, 2)["message"].as_str().unwrap().contains("episode.nope"));
}

#[test]
fn missing_file_is_domain_error() {
    let tmp = TempDir::new().unwrap();
    let out = astra(&["map", "validate", "missing.json"], tmp.path());
    assert_eq!(err_json(&out, 1)["error"], "map");
    let out = astra(&["esdf", "compute", "missing.occ"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_map_reports_violations() {
    let tmp = TempDir::new().unwrap();
    let w = small_world(tmp.path());
    let mut v: Value = serde_json::from_str(&w.map.to_json()).unwrap();
    v["landmarks"][0]["node_ids"] = json!([]);
    fs::write(tmp.path().join("bad.json"), v.to_string()).unwrap();
    let out = astra(&["map", "validate", "bad.json"], tmp.path());
    assert_eq!(err_json(&out, 1)["error"], "invalid-map");
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["valid"], false);
    assert!(!report["violations"].as_array().unwrap().is_empty());
}

#[test]
fn esdf_compute_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let w = small_world(tmp.path());
    let a = astra(&["esdf", "compute", "w/grid.occ"], tmp.path());
    let b = astra(&["esdf", "compute", "w/grid.occ"], tmp.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let grid = parse_occupancy(&fs::read_to_string(tmp.path().join("w/grid.occ")).unwrap()).unwrap();
    assert_eq!(
        String::from_utf8(a.stdout).unwrap(),
        format_esdf(&signed_esdf(&compress_grid(&grid)))
    );
    assert_eq!(grid, w.grid);

    let node = w.map.nodes().next().unwrap().planar_pose();
    let traj = json!([[node.x, node.y, 0.0], [node.x + 1.0, node.y, 0.0]]);
    fs::write(tmp.path().join("t.json"), traj.to_string()).unwrap();
    let masked = astra(
        &[
            "esdf",
            "compute",
            "w/grid.occ",
            "--mask",
            "t.json",
            "--alpha",
            "0.5",
            "--dilation",
            "0.3",
        ],
        tmp.path(),
    );
    assert!(masked.status.success());
    assert!(String::from_utf8(masked.stdout).unwrap().starts_with("ESDF 32 32"));
}

#[test]
fn localize_and_goal_match_library() {
    let tmp = TempDir::new().unwrap();
    let w = small_world(tmp.path());
    let node = w
        .map
        .nodes()
        .find(|n| !n.landmark_ids.is_empty())
        .unwrap()
        .planar_pose();
    let (observations, query_ctx) = w.observe(&node);
    let q = LocalizationQuery {
        query_ctx,
        observations,
    };
    fs::write(tmp.path().join("q.json"), serde_json::to_string(&q).unwrap()).unwrap();
    let out = astra(&["localize", "--map", "w/map.json", "--query", "q.json"], tmp.path());
    let cfg = LocalizationConfig::default();
    let expect = localize(
        &q.observations,
        &q.query_ctx,
        &w.map,
        &GroundTruthOracle::default(),
        &cfg,
    );
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());

    let cat = w.map.landmarks().next().unwrap().category.clone();
    let out = astra(&["goal", "--map", "w/map.json", "--at", "1.0,1.5", &cat], tmp.path());
    let expect = goal_localize(
        std::slice::from_ref(&cat),
        &w.map,
        &[1.0, 1.5, 0.0],
        cfg.r0,
        cfg.r_step,
        cfg.r_max,
    )
    .unwrap();
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());

    let out = astra(&["goal", "--map", "w/map.json", "spaceship"], tmp.path());
    assert_eq!(err_json(&out, 1)["error"], "localization");
}

#[test]
fn reward_eval_matches_library() {
    let tmp = TempDir::new().unwrap();
    let pred = json!({
        "format_valid": true,
        "predicted_landmarks": [{"category": "couch", "visual_attributes": {"color": "red"}}, {"category": "lamp"}],
        "predicted_ids": ["a", "b"],
        "extra_poses": [[1.0, 0.0, 0.0]]
    });
    let gt = json!({
        "landmarks": [{"category": "sofa", "visual_attributes": {"color": "red"}}, {"category": "tv"}],
        "ids": ["a", "c"],
        "pose": [0.0, 0.0, 0.0]
    });
    fs::write(tmp.path().join("p.json"), pred.to_string()).unwrap();
    fs::write(tmp.path().join("g.json"), gt.to_string()).unwrap();
    let out = astra(&["reward", "eval", "--pred", "p.json", "--gt", "g.json"], tmp.path());
    let pred: CoarseOutput = serde_json::from_value(pred).unwrap();
    let gt: CoarseGroundTruth = serde_json::from_value(gt).unwrap();
    let cfg = LocalizationConfig::default();
    let expect = coarse_reward(&pred, &gt, &RewardWeights::default(), &cfg.synonyms).unwrap();
    let got = ok_json(&out);
    assert_eq!(got, serde_json::to_value(expect).unwrap());
    assert_eq!(got["landmark"], 0.5);

    fs::write(tmp.path().join("w.json"), r#"{"w_d": 0.9, "w_theta": 0.9}"#).unwrap();
    let out = astra(
        &[
            "reward",
            "eval",
            "--pred",
            "p.json",
            "--gt",
            "g.json",
            "--weights",
            "w.json",
        ],
        tmp.path(),
    );
    assert_eq!(err_json(&out, 1)["error"], "reward");
}

#[test]
fn odom_eval_matches_library() {
    let tmp = TempDir::new().unwrap();
    let (gt, incs) = synthetic_run(4, 150, 0.1, &NoiseModel::default());
    let log: String = incs.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect();
    fs::write(tmp.path().join("run.jsonl"), log).unwrap();
    fs::write(tmp.path().join("gt.json"), serde_json::to_string(&gt).unwrap()).unwrap();
    let out = astra(&["odom", "eval", "--log", "run.jsonl", "--gt", "gt.json"], tmp.path());
    let est = dead_reckon(&incs, gt.poses[0], &FusionWeights::default()).unwrap();
    assert_eq!(
        ok_json(&out),
        serde_json::to_value(metrics(&est, &gt).unwrap()).unwrap()
    );

    fs::write(tmp.path().join("run.jsonl"), "{\"dt\": 0.1}\nnot json\n").unwrap();
    let out = astra(&["odom", "eval", "--log", "run.jsonl", "--gt", "gt.json"], tmp.path());
    let e = err_json(&out, 1);
    assert_eq!(e["error"], "odometry");
    assert!(e["message"].as_str().unwrap().contains(":2"));
}

#[test]
fn plan_pipeline() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = astra(
        &[
            "--seed",
            "2",
            "plan",
            "data",
            "--out",
            "d.jsonl",
            "--worlds",
            "2",
            "--per-world",
            "4",
            "--kind",
            "corridor",
        ],
        dir,
    );
    assert_eq!(ok_json(&out)["samples"], 8);
    let train_args = [
        "--seed",
        "2",
        "--set",
        "train.epochs=2",
        "--set",
        "train.hidden=[8]",
        "plan",
        "train",
        "--data",
        "d.jsonl",
        "--out",
        "m.json",
    ];
    let log = ok_json(&astra(&train_args, dir));
    assert_eq!(log["log"].as_array().unwrap().len(), 2);
    let first = fs::read(dir.join("m.json")).unwrap();
    ok_json(&astra(&train_args, dir));
    assert_eq!(first, fs::read(dir.join("m.json")).unwrap());

    let line = fs::read_to_string(dir.join("d.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    fs::write(dir.join("c.json"), rec["cond"].to_string()).unwrap();
    let out = astra(
        &[
            "--seed", "7", "plan", "sample", "--model", "m.json", "--cond", "c.json", "--steps", "5",
        ],
        dir,
    );
    let model = VectorFieldModel::from_json(&String::from_utf8(first).unwrap()).unwrap();
    let cond: PlanningCondition = serde_json::from_value(rec["cond"].clone()).unwrap();
    let expect = sample(&model, &cond, 5, &mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());

    fs::write(
        dir.join("c.json"),
        r#"{"goal": [1, 0, 0], "velocity": [0, 0], "occ_features": [0.0]}"#,
    )
    .unwrap();
    let out = astra(&["plan", "sample", "--model", "m.json", "--cond", "c.json"], dir);
    assert_eq!(err_json(&out, 1)["error"], "planner");

    ok_json(&astra(
        &[
            "--seed", "5", "sim", "gen", "--out", "ws", "--count", "2", "--kind", "corridor",
        ],
        dir,
    ));
    let out = astra(
        &[
            "--seed",
            "1",
            "plan",
            "eval",
            "--model",
            "m.json",
            "--worlds",
            "ws",
            "--cases",
            "2",
            "--samples",
            "2",
        ],
        dir,
    );
    let r = ok_json(&out);
    assert_eq!(r["cases"], 4);
    assert_eq!(r["samples"], 8);
}

#[test]
fn sim_run_and_eval() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = astra(
        &["--seed", "11", "--set", "world.size=32", "sim", "gen", "--out", "w"],
        dir,
    );
    assert_eq!(ok_json(&out)["seed"], 11);
    let world = World::load(&dir.join("w")).unwrap();
    let nodes: Vec<_> = world.map.nodes().map(|n| n.planar_pose()).collect();
    let (start, goal) = (nodes[0], nodes[nodes.len() - 1]);
    let ep = json!({ "start": start, "goal": { "pose": goal } });
    fs::write(dir.join("g.json"), ep.to_string()).unwrap();
    let out = astra(&["--seed", "4", "sim", "run", "--world", "w", "--goal", "g.json"], dir);
    let cfg = EpisodeConfig::default();
    let expect = run_episode(&world, start, &EpisodeGoal::Pose(goal), LocalPlanner::Oracle, &cfg, 4);
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());

    let args = [
        "--seed",
        "9",
        "sim",
        "eval",
        "--worlds",
        "w",
        "--episodes",
        "3",
        "--csv",
        "s.csv",
    ];
    let a = astra(&args, dir);
    let b = astra(&args, dir);
    assert_eq!(a.stdout, b.stdout);
    let r = ok_json(&a);
    let reports = r["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    let ok = reports.iter().filter(|x| x["success"] == true).count();
    assert_eq!(r["successes"], ok);
    let csv = fs::read_to_string(dir.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn config_file_supplies_seed_and_paths() {
    let tmp = TempDir::new().unwrap();
    let w = small_world(tmp.path());
    let cfg = json!({ "seed": 3, "paths": { "map": "w/map.json" }, "params": { "localization.r0": 2.0 } });
    fs::write(tmp.path().join("c.json"), cfg.to_string()).unwrap();
    let cat = w.map.landmarks().next().unwrap().category.clone();
    let out = astra(&["--config", "c.json", "goal", "--at", "1.0,1.5", &cat], tmp.path());
    let expect = goal_localize(&[cat], &w.map, &[1.0, 1.5, 0.0], 2.0, 10.0, 100.0).unwrap();
    assert_eq!(ok_json(&out), serde_json::to_value(expect).unwrap());
    assert_eq!(TopoMap::load(&tmp.path().join("w/map.json")).unwrap(), w.map);
}
