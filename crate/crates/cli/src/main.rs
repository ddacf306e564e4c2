//! `astra`: command-line front end. Reports go to stdout as JSON; failures
//! print `{"error": kind, "message": ...}` to stderr and exit 1 (domain) or
//! 2 (usage).

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use astra_core::esdf::{compress_grid, format_esdf, make_mask, mask_esdf, parse_occupancy, signed_esdf, EsdfError};
use astra_core::geom::{Pose2, PoseTrajectory};
use astra_core::localization::{
    goal_localize, localize, GroundTruthOracle, HeuristicOracle, LocalizationError, LocalizationQuery,
};
use astra_core::odometry::{dead_reckon, metrics, parse_jsonl, OdometryError};
use astra_core::planner::{sample, train, PlannerError, PlanningCondition, VectorFieldModel};
use astra_core::rewards::{coarse_reward, CoarseGroundTruth, CoarseOutput, RewardError, RewardWeights};
use astra_core::sim::{
    eval_suite, eval_worlds, format_dataset, generate_dataset, generate_world, parse_dataset, pick_episode, plan_cases,
    plan_eval, run_episode, EpisodeGoal, LocalPlanner, SimError, World, WorldKind,
};
use astra_core::topomap::{MapError, TopoMap};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use config::{parse_set, GlobalConfig, Params, Usage};

#[derive(Parser)]
#[command(name = "astra", version, about = "Topological navigation toolkit")]
struct Cli {
    /// Master seed threaded through every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Global JSON config: `{seed, paths, params}`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter override, e.g. `--set train.lr=0.05`.
    #[arg(long = "set", global = true, value_parser = parse_set)]
    set: Vec<(String, Value)>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Topological map checks and queries.
    #[command(subcommand)]
    Map(MapCmd),
    /// Localize a query against a map.
    Localize(LocalizeArgs),
    /// Find the goal node for an instruction.
    Goal(GoalArgs),
    #[command(subcommand)]
    Reward(RewardCmd),
    #[command(subcommand)]
    Esdf(EsdfCmd),
    #[command(subcommand)]
    Plan(PlanCmd),
    #[command(subcommand)]
    Odom(OdomCmd),
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Subcommand)]
enum MapCmd {
    Validate {
        file: PathBuf,
    },
    Path {
        file: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleKind {
    Gt,
    Heuristic,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gt")]
    oracle: OracleKind,
}

#[derive(Args)]
struct GoalArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    /// Current position `x,y`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    at: Vec<f64>,
    /// Instruction terms, e.g. `red chair`.
    #[arg(required = true)]
    terms: Vec<String>,
}

#[derive(Subcommand)]
enum RewardCmd {
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EsdfCmd {
    /// Print the signed distance field of an occupancy grid.
    Compute {
        grid: PathBuf,
        /// Trajectory `[[x, y, theta], ...]` whose corridor is attenuated.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.3)]
        dilation: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Rooms,
    Corridor,
}

#[derive(Subcommand)]
enum PlanCmd {
    /// Generate expert demonstrations as JSON lines.
    Data {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        worlds: usize,
        #[arg(long, default_value_t = 50)]
        per_world: usize,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Open-loop collision rate of sampled plans in saved worlds.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        worlds: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
}

#[derive(Subcommand)]
enum OdomCmd {
    Eval {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Generate and save worlds.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Number of worlds; more than one writes `world_<k>` subdirectories.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    Run {
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        goal: Option<PathBuf>,
        /// Learned planner; the oracle planner is used when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Eval {
        /// Saved worlds; fresh seeded worlds are generated when absent.
        #[arg(long)]
        worlds: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write a one-line-per-episode CSV summary.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct InvalidMap(usize);

impl std::fmt::Display for InvalidMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "map has {} invariant violation(s)", self.0)
    }
}

impl std::error::Error for InvalidMap {}

/// Episode file for `sim run`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFile {
    #[serde(default)]
    start: Option<Pose2>,
    goal: EpisodeGoal,
}

struct Ctx {
    seed: u64,
    global: GlobalConfig,
    params: Params,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn load_model(path: &Path) -> Result<VectorFieldModel> {
    Ok(VectorFieldModel::from_json(&read(path)?)?)
}

/// A saved world directory, or a directory of them.
fn load_worlds(dir: &Path) -> Result<Vec<World>> {
    if dir.join("world.json").is_file() {
        return Ok(vec![World::load(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("world.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(SimError::Format(format!("no worlds under {}", dir.display())).into());
    }
    subdirs.iter().map(|d| World::load(d).map_err(Into::into)).collect()
}

fn apply_kind(params: &mut Params, kind: Option<Kind>) {
    match kind {
        Some(Kind::Corridor) => {
            params.world = astra_core::sim::WorldConfig {
                footprint_radius: params.world.footprint_radius,
                ..astra_core::sim::WorldConfig::corridor()
            }
        }
        Some(Kind::Rooms) => params.world.kind = WorldKind::Rooms,
        None => {}
    }
}

fn run(cli: Cli) -> Result<Value> {
    let global = match &cli.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::default(),
    };
    let mut overrides: BTreeMap<String, Value> = global.params.clone();
    overrides.extend(cli.set.iter().cloned());
    let params = Params::with_overrides(&overrides)?;
    let mut ctx = Ctx {
        seed: cli.seed.or(global.seed).unwrap_or(0),
        global,
        params,
    };
    match cli.cmd {
        Cmd::Map(c) => map_cmd(c),
        Cmd::Localize(a) => {
            let map = TopoMap::load(&ctx.global.path(a.map, "map")?)?;
            let q: LocalizationQuery = read_json(&ctx.global.path(a.query, "query")?)?;
            let res = match a.oracle {
                OracleKind::Gt => localize(
                    &q.observations,
                    &q.query_ctx,
                    &map,
                    &GroundTruthOracle::default(),
                    &ctx.params.localization,
                ),
                OracleKind::Heuristic => localize(
                    &q.observations,
                    &q.query_ctx,
                    &map,
                    &HeuristicOracle::default(),
                    &ctx.params.localization,
                ),
            };
            to_json(&res)
        }
        Cmd::Goal(a) => {
            let map = TopoMap::load(&ctx.global.path(a.map, "map")?)?;
            let at = match a.at.as_slice() {
                [x, y] => [*x, *y, 0.0],
                [] => [0.0; 3],
                _ => return Err(Usage("--at takes x,y".into()).into()),
            };
            let l = &ctx.params.localization;
            to_json(&goal_localize(&a.terms, &map, &at, l.r0, l.r_step, l.r_max)?)
        }
        Cmd::Reward(RewardCmd::Eval { pred, gt, weights }) => {
            let pred: CoarseOutput = read_json(&ctx.global.path(pred, "pred")?)?;
            let gt: CoarseGroundTruth = read_json(&ctx.global.path(gt, "gt")?)?;
            let w: RewardWeights = match weights.or_else(|| ctx.global.paths.get("weights").cloned()) {
                Some(p) => read_json(&p)?,
                None => ctx.params.reward,
            };
            to_json(&coarse_reward(&pred, &gt, &w, &ctx.params.localization.synonyms)?)
        }
        Cmd::Esdf(EsdfCmd::Compute {
            grid,
            mask,
            alpha,
            dilation,
        }) => {
            let occ = parse_occupancy(&read(&grid)?)?;
            let phi = signed_esdf(&compress_grid(&occ));
            let out = match mask {
                Some(p) => {
                    let traj: PoseTrajectory = read_json(&p)?;
                    let m = make_mask(&traj, phi.geometry, dilation)?;
                    for w in &m.warnings {
                        eprintln!("warning: {w}");
                    }
                    mask_esdf(&phi, &m.mask, alpha)?
                }
                None => phi,
            };
            Ok(Value::String(format_esdf(&out)))
        }
        Cmd::Plan(c) => plan_cmd(c, &mut ctx),
        Cmd::Odom(OdomCmd::Eval { log, gt }) => {
            let log_path = ctx.global.path(log, "log")?;
            let incs = parse_jsonl(&read(&log_path)?).map_err(|(line, msg)| {
                OdometryError::InvalidIncrement(format!("{}:{line}: {msg}", log_path.display()))
            })?;
            let gt: PoseTrajectory = read_json(&ctx.global.path(gt, "gt")?)?;
            let start = *gt.poses.first().ok_or(OdometryError::TooShort)?;
            let est = dead_reckon(&incs, start, &ctx.params.fusion)?;
            to_json(&metrics(&est, &gt)?)
        }
        Cmd::Sim(c) => sim_cmd(c, &mut ctx),
    }
}

fn map_cmd(c: MapCmd) -> Result<Value> {
    match c {
        MapCmd::Validate { file } => {
            let report = TopoMap::load(&file)?.validate();
            if !report.valid {
                let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report)?);
                return Err(InvalidMap(report.violations.len()).into());
            }
            to_json(&report)
        }
        MapCmd::Path { file, from, to } => to_json(&TopoMap::load(&file)?.shortest_path(&from, &to)?),
    }
}

fn plan_cmd(c: PlanCmd, ctx: &mut Ctx) -> Result<Value> {
    match c {
        PlanCmd::Data {
            out,
            worlds,
            per_world,
            kind,
        } => {
            apply_kind(&mut ctx.params, kind);
            let out = ctx.global.path(out, "out")?;
            let data = generate_dataset(ctx.seed, worlds, &ctx.params.world, per_world, &ctx.params.dataset)?;
            write(&out, &format_dataset(&data))?;
            Ok(json!({ "samples": data.len(), "out": out }))
        }
        PlanCmd::Train { data, out } => {
            let data = parse_dataset(&read(&ctx.global.path(data, "data")?)?)?;
            let out = ctx.global.path(out, "out")?;
            let mut cfg = ctx.params.train.clone();
            cfg.seed = ctx.seed;
            let trained = train(&data, &cfg)?;
            write(&out, &trained.model.to_json())?;
            Ok(json!({
                "samples": data.len(),
                "param_count": trained.model.param_count(),
                "out": out,
                "log": trained.log,
            }))
        }
        PlanCmd::Sample { model, cond, steps } => {
            let model = load_model(&ctx.global.path(model, "model")?)?;
            let cond: PlanningCondition = read_json(&ctx.global.path(cond, "cond")?)?;
            model.vf_eval(&vec![0.0; 3 * model.n_actions], 1.0, &cond)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            to_json(&sample(&model, &cond, steps, &mut rng))
        }
        PlanCmd::Eval {
            model,
            worlds,
            cases,
            samples,
        } => {
            let model = load_model(&ctx.global.path(model, "model")?)?;
            let worlds = load_worlds(&ctx.global.path(worlds, "worlds")?)?;
            let all: Vec<_> = worlds
                .iter()
                .flat_map(|w| plan_cases(w, cases, ctx.seed ^ w.seed, &ctx.params.dataset))
                .collect();
            let e = &ctx.params.episode;
            to_json(&plan_eval(
                &model,
                &all,
                samples,
                e.euler_steps,
                &e.perception,
                ctx.seed,
            ))
        }
    }
}

fn sim_cmd(c: SimCmd, ctx: &mut Ctx) -> Result<Value> {
    match c {
        SimCmd::Gen {
            out,
            size,
            density,
            kind,
            count,
        } => {
            apply_kind(&mut ctx.params, kind);
            if let Some(s) = size {
                ctx.params.world.size = s;
            }
            if let Some(d) = density {
                ctx.params.world.obstacle_density = d;
            }
            let out = ctx.global.path(out, "out")?;
            let mut metas = Vec::new();
            for k in 0..count.max(1) {
                let seed = ctx.seed.wrapping_add(k as u64);
                let world = generate_world(seed, &ctx.params.world)?;
                let dir = if count > 1 {
                    out.join(format!("world_{k:03}"))
                } else {
                    out.clone()
                };
                world.save(&dir)?;
                metas.push(json!({
                    "dir": dir,
                    "seed": seed,
                    "nodes": world.map.node_count(),
                    "edges": world.map.edge_count(),
                    "landmarks": world.map.landmark_count(),
                }));
            }
            Ok(if count > 1 {
                Value::Array(metas)
            } else {
                metas.remove(0)
            })
        }
        SimCmd::Run { world, goal, model } => {
            let world = World::load(&ctx.global.path(world, "world")?)?;
            let ep: EpisodeFile = read_json(&ctx.global.path(goal, "goal")?)?;
            let cfg = &ctx.params.episode;
            let start = match ep.start {
                Some(s) => s,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
                    pick_episode(&world, cfg, 0.0, &mut rng)
                        .ok_or_else(|| SimError::Unsatisfiable("no localizable start".into()))?
                        .0
                }
            };
            let model = match model.or_else(|| ctx.global.paths.get("model").cloned()) {
                Some(p) => Some(load_model(&p)?),
                None => None,
            };
            let planner = model
                .as_ref()
                .map_or(LocalPlanner::Oracle, |m| LocalPlanner::Learned(m));
            to_json(&run_episode(&world, start, &ep.goal, planner, cfg, ctx.seed))
        }
        SimCmd::Eval {
            worlds,
            episodes,
            model,
            csv,
        } => {
            let model = match model.or_else(|| ctx.global.paths.get("model").cloned()) {
                Some(p) => Some(load_model(&p)?),
                None => None,
            };
            let planner = model
                .as_ref()
                .map_or(LocalPlanner::Oracle, |m| LocalPlanner::Learned(m));
            let cfg = &ctx.params.episode;
            let report = match worlds.or_else(|| ctx.global.paths.get("worlds").cloned()) {
                Some(dir) => eval_worlds(ctx.seed, episodes, &load_worlds(&dir)?, cfg, planner)?,
                None => eval_suite(ctx.seed, episodes, &ctx.params.world, cfg, planner)?,
            };
            if let Some(path) = csv {
                let mut s = String::from("episode,success,reason,fallbacks,planner_calls,collisions,steps,path_length,mean_velocity,final_error\n");
                for (k, r) in report.reports.iter().enumerate() {
                    let reason = serde_json::to_value(r.reason)?;
                    s.push_str(&format!(
                        "{k},{},{},{},{},{},{},{},{},{}\n",
                        r.success,
                        reason.as_str().unwrap_or_default(),
                        r.fallback_count,
                        r.planner_calls,
                        r.collision_count,
                        r.steps,
                        r.path_length,
                        r.mean_velocity,
                        r.final_error
                    ));
                }
                write(&path, &s)?;
            }
            to_json(&report)
        }
    }
}

fn error_kind(e: &anyhow::Error) -> String {
    if let Some(s) = e.downcast_ref::<SimError>() {
        return s.kind().to_string();
    }
    let kinds: [(&str, bool); 9] = [
        ("invalid-map", e.downcast_ref::<InvalidMap>().is_some()),
        ("map", e.downcast_ref::<MapError>().is_some()),
        ("localization", e.downcast_ref::<LocalizationError>().is_some()),
        ("reward", e.downcast_ref::<RewardError>().is_some()),
        ("esdf", e.downcast_ref::<EsdfError>().is_some()),
        ("planner", e.downcast_ref::<PlannerError>().is_some()),
        ("odometry", e.downcast_ref::<OdometryError>().is_some()),
        ("io", e.downcast_ref::<std::io::Error>().is_some()),
        ("format", e.downcast_ref::<serde_json::Error>().is_some()),
    ];
    kinds
        .iter()
        .find(|(_, hit)| *hit)
        .map_or("error", |(k, _)| k)
        .to_string()
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return fail("usage", e.to_string().trim_end().to_string(), 2),
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(v) => {
            let text = match v {
                Value::String(text) => text,
                v => serde_json::to_string_pretty(&v).expect("value serializes") + "\n",
            };
            // A closed pipe downstream is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) if e.downcast_ref::<Usage>().is_some() => fail("usage", format!("{e:#}"), 2),
        Err(e) => fail(&error_kind(&e), format!("{e:#}"), 1),
    }
}
