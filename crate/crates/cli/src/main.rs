//! One binary, one subcommand per pipeline stage, so every intermediate
//! artifact is an inspectable file. `pipeline` chains all stages from a
//! single JSON config.
//!
//! Exit codes: 0 success, 2 configuration/validation problems (including
//! bad flags), 1 runtime failures. Every run writes `run_meta.json` under
//! `--out` with the seeds, config hash, and version needed to reproduce it
//! (the output directory itself is not part of the reproducibility
//! contract and is excluded from the recorded arguments).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use arbomap::coarsegeo;
use arbomap::epimodel::{self, EpiConfig, EpiState, PatchGraph, SourcePin, SteadyOptions};
use arbomap::error::{Error, Result};
use arbomap::flux::{self, FluxMatrix, TextMapping};
use arbomap::geo;
use arbomap::homeloc::{self, CascadeConfig};
use arbomap::ingest::{self, SynthConfig};
use arbomap::riskmap::{self, ShareUnit};

#[derive(Parser)]
#[command(name = "arbomap", version, about = "Disease importation risk at county and neighborhood scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with planted ground truth.
    SynthData(SynthDataArgs),
    /// Walk a follower graph from seed users by zone membership.
    Snowball(SnowballArgs),
    /// Fit the text-to-zone classifier on a labeled corpus.
    FitZones(FitZonesArgs),
    /// Estimate population flux from the source zone into each patch.
    FluxEstimate(FluxEstimateArgs),
    /// Integrate the patch model to steady state and score county risk.
    CountyRisk(CountyRiskArgs),
    /// Cluster each user's geo-tagged events.
    Cluster(ClusterArgs),
    /// Extract per-cluster feature records (optionally labeled from truth).
    Features(FeaturesArgs),
    /// Train the prune/score/verify home-location cascade.
    TrainCascade(TrainCascadeArgs),
    /// Predict a home location (or unknown) for every user.
    PredictHomes(PredictHomesArgs),
    /// Aggregate neighborhood share tables and the two-criteria risk set.
    NeighborhoodRisk(NeighborhoodRiskArgs),
    /// Run every stage end-to-end from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// JSON config (SynthConfig shape).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnowballArgs {
    /// Follower graph as newline-delimited JSON.
    #[arg(long)]
    graph: PathBuf,
    /// Profiles CSV used by the keep predicate.
    #[arg(long)]
    profiles: PathBuf,
    /// Seed user ids (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<String>,
    /// Zone labels whose residents the walk expands through.
    #[arg(long, value_delimiter = ',', required = true)]
    keep_zones: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitZonesArgs {
    /// CSV corpus with header `zone_label,text`.
    #[arg(long)]
    corpus: PathBuf,
    /// l2 regularization strength.
    #[arg(long, default_value_t = 1.0)]
    reg: f64,
    #[arg(long, default_value_t = 5000)]
    max_epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FluxEstimateArgs {
    #[arg(long)]
    events: PathBuf,
    /// Patch GeoJSON including the source zone.
    #[arg(long)]
    zones: PathBuf,
    #[arg(long)]
    source_zone: String,
    /// Air-traffic CSV `source,dest_region,persons_per_day`.
    #[arg(long)]
    air_traffic: PathBuf,
    /// Restrict the air volume to one destination region label.
    #[arg(long)]
    dest_region: Option<String>,
    /// Zone model for mapping text-only events.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    min_confidence: f64,
    #[arg(long, default_value_t = 1.0)]
    return_factor: f64,
    /// Restrict to these users (one id per line).
    #[arg(long)]
    users: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountyRiskArgs {
    #[arg(long)]
    zones: PathBuf,
    /// Flux matrix CSV `from,to,rate_per_day`.
    #[arg(long)]
    alpha: PathBuf,
    /// EpiConfig JSON (rates plus pin_source / source_prevalence).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 50_000.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Initial state JSON (per patch); all-susceptible when omitted.
    #[arg(long, conflicts_with = "init_susceptible")]
    init: Option<PathBuf>,
    /// Start every patch fully susceptible with vectors at capacity (the
    /// default; spelled out for explicitness).
    #[arg(long)]
    init_susceptible: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 100.0)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    min_pts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    events: PathBuf,
    /// Ground-truth JSON for labeling records.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Local-time offset in hours; defaults to -4 with a warning.
    #[arg(long, allow_hyphen_values = true)]
    tz_offset: Option<i32>,
    #[arg(long, default_value_t = 100.0)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    min_pts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCascadeArgs {
    /// Labeled records CSV `user_id,f1..f10,label`.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Optional CascadeConfig JSON overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictHomesArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Worker threads; output is independent of this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NeighborhoodRiskArgs {
    /// Events of the visitor population.
    #[arg(long)]
    visitors: PathBuf,
    /// Profiles CSV; with --source-zone, filters visitors to source-zone
    /// residents. Without it the events are taken as pre-filtered.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    source_zone: Option<String>,
    /// Home predictions JSON from predict-homes.
    #[arg(long)]
    homes: PathBuf,
    #[arg(long)]
    neighborhoods: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Count each visitor once per neighborhood instead of every event.
    #[arg(long)]
    per_user: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Snowball(a) => cmd_snowball(a),
        Command::FitZones(a) => cmd_fit_zones(a),
        Command::FluxEstimate(a) => cmd_flux_estimate(a),
        Command::CountyRisk(a) => cmd_county_risk(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Features(a) => cmd_features(a),
        Command::TrainCascade(a) => cmd_train_cascade(a),
        Command::PredictHomes(a) => cmd_predict_homes(a),
        Command::NeighborhoodRisk(a) => cmd_neighborhood_risk(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

// ---------------------------------------------------------------------------
// run_meta.json
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunMeta {
    command: String,
    /// argv with the --out value removed; outputs go wherever the caller
    /// points them without affecting reproducibility.
    args: Vec<String>,
    seeds: BTreeMap<String, u64>,
    config_hash: String,
    version: String,
}

fn write_run_meta(
    out: &Path,
    command: &str,
    seeds: &BTreeMap<String, u64>,
    config_paths: &[&Path],
) -> Result<()> {
    let mut args: Vec<String> = Vec::new();
    let mut skip_next = false;
    for (i, arg) in std::env::args().enumerate() {
        if i == 0 {
            continue;
        }
        if skip_next {
            skip_next = false;
            continue;
        }
        if arg == "--out" {
            skip_next = true;
            continue;
        }
        if arg.starts_with("--out=") {
            continue;
        }
        args.push(arg);
    }
    let mut hasher = Sha256::new();
    for path in config_paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        hasher.update(&bytes);
    }
    let meta = RunMeta {
        command: command.to_string(),
        args,
        seeds: seeds.clone(),
        config_hash: hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = out.join("run_meta.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(path.display().to_string(), e))
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

fn write_synth_outputs(out: &Path, data: &ingest::SynthOutput) -> Result<()> {
    ingest::write_events(out.join("events.jsonl"), &data.events)?;
    ingest::write_profiles(out.join("profiles.csv"), &data.profiles)?;
    ingest::write_graph(out.join("graph.jsonl"), &data.graph)?;
    data.truth.save(out.join("truth.json"))?;
    coarsegeo::write_corpus(out.join("corpus.csv"), &data.corpus)?;
    Ok(())
}

fn cmd_synth_data(a: SynthDataArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let mut cfg: SynthConfig = read_json(&a.config)?;
    resolve_relative(&mut cfg, a.config.parent().unwrap_or(Path::new(".")));
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = ingest::synth_generate(&cfg)?;
    write_synth_outputs(&a.out, &data)?;
    println!(
        "generated {} events for {} users ({} corpus lines)",
        data.events.len(),
        cfg.n_users,
        data.corpus.len()
    );
    let seeds = BTreeMap::from([("seed".to_string(), cfg.seed)]);
    write_run_meta(&a.out, "synth-data", &seeds, &[a.config.as_path()])
}

fn resolve_relative(cfg: &mut SynthConfig, base: &Path) {
    if cfg.zones_geojson.is_relative() {
        cfg.zones_geojson = base.join(&cfg.zones_geojson);
    }
    if let Some(p) = &cfg.neighborhoods_geojson {
        if p.is_relative() {
            cfg.neighborhoods_geojson = Some(base.join(p));
        }
    }
}

fn cmd_snowball(a: SnowballArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let graph = ingest::load_graph(&a.graph)?;
    let profiles = ingest::load_profiles(&a.profiles)?;
    let home_of: BTreeMap<&str, &str> = profiles
        .iter()
        .filter_map(|p| p.profile_home.as_deref().map(|h| (p.user_id.as_str(), h)))
        .collect();
    let keep = |user: &str| {
        home_of
            .get(user)
            .is_some_and(|h| a.keep_zones.iter().any(|z| z == h))
    };
    let users = ingest::snowball_sample(&graph, &a.seeds, keep)?;
    let listing: String = users.iter().map(|u| format!("{u}\n")).collect();
    let path = a.out.join("users.txt");
    std::fs::write(&path, listing).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("snowball kept {} users", users.len());
    write_run_meta(&a.out, "snowball", &BTreeMap::new(), &[])
}

fn cmd_fit_zones(a: FitZonesArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let corpus = coarsegeo::load_corpus(&a.corpus)?;
    let opts = coarsegeo::FitOptions {
        reg: a.reg,
        max_epochs: a.max_epochs,
        ..coarsegeo::FitOptions::default()
    };
    let (model, report) = coarsegeo::fit_with(&corpus, &opts)?;
    model.save(a.out.join("zone_model.json"))?;
    println!(
        "fitted {} zones over {} docs in {} epochs (grad norm {:.3e})",
        model.zone_labels.len(),
        corpus.len(),
        report.epochs,
        report.final_grad_norm
    );
    write_run_meta(&a.out, "fit-zones", &BTreeMap::new(), &[])
}

fn load_user_filter(path: &Path) -> Result<std::collections::BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn cmd_flux_estimate(a: FluxEstimateArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let mut events = ingest::load_events(&a.events)?.events;
    if let Some(users_path) = &a.users {
        let keep = load_user_filter(users_path)?;
        events.retain(|e| keep.contains(&e.user_id));
    }
    let zones = geo::load_patches(&a.zones)?;
    let model = a.model.as_deref().map(coarsegeo::ZoneModel::load).transpose()?;
    let mapping = model.as_ref().map(|m| TextMapping {
        model: m,
        min_confidence: a.min_confidence,
    });
    let visit_sets = flux::build_visit_sets(&events, &zones, mapping)?;

    let air = ingest::load_air_traffic(&a.air_traffic)?;
    let air_volume: f64 = air
        .iter()
        .filter(|((source, dest), _)| {
            source == &a.source_zone && a.dest_region.as_ref().is_none_or(|d| d == dest)
        })
        .map(|(_, v)| v)
        .sum();

    let dest_ids: Vec<String> = zones
        .iter()
        .filter(|p| p.id != a.source_zone)
        .map(|p| p.id.clone())
        .collect();
    let estimate = flux::estimate_source_flux(&visit_sets, &a.source_zone, &dest_ids, air_volume)?;
    flux::save_flux_vector_csv(a.out.join("flux.csv"), &a.source_zone, &estimate.flux)?;
    let alpha = flux::to_rate_matrix(&estimate.flux, &zones, &a.source_zone, a.return_factor)?;
    alpha.save_csv(a.out.join("alpha.csv"))?;
    println!(
        "flux from {} users in sample; air volume {air_volume} persons/day",
        estimate.users_in_sample
    );
    write_run_meta(&a.out, "flux-estimate", &BTreeMap::new(), &[])
}

#[derive(Serialize)]
struct CountyRiskMeta {
    tol: f64,
    t_max: f64,
    dt: f64,
    t_elapsed: f64,
    residual: f64,
    converged: bool,
}

#[derive(Deserialize)]
struct PatchStateInit {
    s_h: f64,
    e_h: f64,
    i_h: f64,
    a_h: f64,
    r_h: f64,
    s_v: f64,
    i_v: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_county_risk(
    zones: &[geo::Patch],
    alpha: FluxMatrix,
    epi: &EpiConfig,
    tol: f64,
    t_max: f64,
    dt: f64,
    init: Option<&BTreeMap<String, PatchStateInit>>,
    out: &Path,
) -> Result<(epimodel::RiskScores, PatchGraph)> {
    let graph = PatchGraph::new(zones.to_vec(), alpha)?;
    let mut state = EpiState::all_susceptible(&graph);
    if let Some(init) = init {
        for (patch_id, s) in init {
            let i = graph
                .index_of(patch_id)
                .ok_or_else(|| Error::Config(format!("init references unknown patch {patch_id:?}")))?;
            state.s_h[i] = s.s_h;
            state.e_h[i] = s.e_h;
            state.i_h[i] = s.i_h;
            state.a_h[i] = s.a_h;
            state.r_h[i] = s.r_h;
            state.s_v[i] = s.s_v;
            state.i_v[i] = s.i_v;
        }
    }
    let pin = epi
        .pin_source
        .as_deref()
        .map(|id| SourcePin::resolve(&graph, id, epi.source_prevalence))
        .transpose()?;
    let opts = SteadyOptions {
        tol,
        t_max,
        dt,
        pin,
        ..SteadyOptions::default()
    };
    let steady = epimodel::integrate_to_steady(&state, &graph, &epi.params, &opts)?;
    let meta = CountyRiskMeta {
        tol,
        t_max,
        dt,
        t_elapsed: steady.t_elapsed,
        residual: steady.residual,
        converged: steady.converged,
    };
    let meta_path = out.join("county_risk_meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let risks = epimodel::risk_scores(&steady, &graph)?;
    epimodel::save_risk_csv(out.join("county_risk.csv"), &risks)?;
    Ok((risks, graph))
}

fn cmd_county_risk(a: CountyRiskArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let zones = geo::load_patches(&a.zones)?;
    let ids: Vec<String> = zones.iter().map(|p| p.id.clone()).collect();
    let alpha = FluxMatrix::load_csv(&a.alpha, &ids)?;
    let epi = match &a.params {
        Some(p) => EpiConfig::load(p)?,
        None => EpiConfig::default(),
    };
    let init = a
        .init
        .as_deref()
        .map(read_json::<BTreeMap<String, PatchStateInit>>)
        .transpose()?;
    let (risks, _) = run_county_risk(&zones, alpha, &epi, a.tol, a.t_max, a.dt, init.as_ref(), &a.out)?;
    let top = epimodel::rank_patches(&risks);
    let top_dest = top.iter().find(|(id, _)| Some(id) != epi.pin_source.as_ref());
    if let Some((id, risk)) = top_dest {
        println!("highest risk: {id} ({risk:.4})");
    }
    let configs: Vec<&Path> = a.params.iter().map(PathBuf::as_path).collect();
    write_run_meta(&a.out, "county-risk", &BTreeMap::new(), &configs)
}

#[derive(Serialize)]
struct ClusterSummary {
    user_id: String,
    lat: f64,
    lon: f64,
    size: usize,
}

fn group_by_user(events: &[ingest::ActivityEvent]) -> BTreeMap<&str, Vec<ingest::ActivityEvent>> {
    let mut by_user: BTreeMap<&str, Vec<ingest::ActivityEvent>> = BTreeMap::new();
    for ev in events {
        by_user.entry(ev.user_id.as_str()).or_default().push(ev.clone());
    }
    by_user
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let events = ingest::load_events(&a.events)?.events;
    let mut summaries = Vec::new();
    for (user, evs) in group_by_user(&events) {
        if evs.iter().filter(|e| e.geo.is_some()).count() < homeloc::MIN_GEO_EVENTS {
            continue;
        }
        for c in homeloc::dbscan_user(&evs, a.eps, a.min_pts) {
            summaries.push(ClusterSummary {
                user_id: user.to_string(),
                lat: c.centroid.lat,
                lon: c.centroid.lon,
                size: c.member_indices.len(),
            });
        }
    }
    let path = a.out.join("clusters.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&summaries).map_err(|e| Error::Format(e.to_string()))?,
    )
    .map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("{} clusters", summaries.len());
    write_run_meta(&a.out, "cluster", &BTreeMap::new(), &[])
}

fn extract_all_records(
    events: &[ingest::ActivityEvent],
    eps: f64,
    min_pts: usize,
    tz_offset: i32,
    truth: Option<&ingest::GroundTruth>,
) -> Vec<homeloc::ClusterRecord> {
    let index = homeloc::LocationIndex::build(events);
    let mut records = Vec::new();
    for (_, evs) in group_by_user(events) {
        if evs.iter().filter(|e| e.geo.is_some()).count() < homeloc::MIN_GEO_EVENTS {
            continue;
        }
        let clusters = homeloc::dbscan_user(&evs, eps, min_pts);
        records.extend(homeloc::extract_records(&evs, &clusters, &index, tz_offset));
    }
    if let Some(truth) = truth {
        homeloc::label_records(&mut records, truth, homeloc::DEFAULT_EPS_M);
    }
    records
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let events = ingest::load_events(&a.events)?.events;
    let tz_offset = match a.tz_offset {
        Some(tz) => tz,
        None => {
            log::warn!("--tz-offset not given; defaulting local time to UTC-4");
            -4
        }
    };
    let truth = a.truth.as_deref().map(ingest::GroundTruth::load).transpose()?;
    let records = extract_all_records(&events, a.eps, a.min_pts, tz_offset, truth.as_ref());
    homeloc::write_records(a.out.join("records.csv"), &records)?;
    println!("{} records", records.len());
    write_run_meta(&a.out, "features", &BTreeMap::new(), &[])
}

fn cmd_train_cascade(a: TrainCascadeArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let records = homeloc::load_records(&a.records)?;
    let cfg: CascadeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CascadeConfig::default(),
    };
    let model = homeloc::train_cascade(&records, &cfg, a.seed)?;
    model.save(a.out.join("cascade_model.json"))?;
    println!("cascade trained on {} records", records.len());
    let seeds = BTreeMap::from([("seed".to_string(), a.seed)]);
    let configs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    write_run_meta(&a.out, "train-cascade", &seeds, &configs)
}

fn cmd_predict_homes(a: PredictHomesArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let events = ingest::load_events(&a.events)?.events;
    let model = homeloc::CascadeModel::load(&a.model)?;
    let predictions = homeloc::predict_homes(&events, &model, a.jobs)?;
    homeloc::save_predictions(a.out.join("predictions.json"), &predictions)?;
    let homes = predictions
        .iter()
        .filter(|p| matches!(p.verdict, homeloc::Verdict::Home(_)))
        .count();
    println!("{homes} homes / {} users", predictions.len());
    write_run_meta(&a.out, "predict-homes", &BTreeMap::new(), &[])
}

fn cmd_neighborhood_risk(a: NeighborhoodRiskArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let mut events = ingest::load_events(&a.visitors)?.events;
    if let (Some(profiles_path), Some(source)) = (&a.profiles, &a.source_zone) {
        let profiles = ingest::load_profiles(profiles_path)?;
        let residents: std::collections::BTreeSet<&str> = profiles
            .iter()
            .filter(|p| p.profile_home.as_deref() == Some(source.as_str()))
            .map(|p| p.user_id.as_str())
            .collect();
        events.retain(|e| residents.contains(e.user_id.as_str()));
    }
    let neighborhoods = geo::load_neighborhoods(&a.neighborhoods)?;
    let unit = if a.per_user { ShareUnit::Users } else { ShareUnit::Events };
    let visitors = riskmap::visitor_shares_by(&events, &neighborhoods, unit)?;
    let predictions = homeloc::load_predictions(&a.homes)?;
    let residents = riskmap::resident_shares(&predictions, &neighborhoods)?;
    let risk_set = riskmap::intersect_high_risk(&visitors, &residents, a.top_k);

    let empty = epimodel::RiskScores {
        entries: Vec::new(),
        relative: true,
    };
    riskmap::emit_report(&empty, &[], &[&visitors, &residents], &risk_set, &a.out)?;
    println!(
        "high risk by both criteria: {:?}",
        risk_set.neighborhoods.iter().collect::<Vec<_>>()
    );
    write_run_meta(&a.out, "neighborhood-risk", &BTreeMap::new(), &[])
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct PipelineConfig {
    seed: u64,
    synth: SynthConfig,
    source_zone: String,
    air_traffic: PathBuf,
    #[serde(default)]
    dest_region: Option<String>,
    #[serde(default)]
    snowball: Option<SnowballSection>,
    #[serde(default = "default_min_confidence")]
    min_confidence: f64,
    #[serde(default = "default_return_factor")]
    return_factor: f64,
    #[serde(default)]
    epi: EpiConfig,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default = "default_t_max")]
    t_max: f64,
    #[serde(default)]
    cascade: CascadeConfig,
    #[serde(default = "default_top_k")]
    top_k: usize,
}

#[derive(Deserialize)]
struct SnowballSection {
    seeds: Vec<String>,
    keep_zones: Vec<String>,
}

fn default_min_confidence() -> f64 {
    0.5
}
fn default_return_factor() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-7
}
fn default_t_max() -> f64 {
    50_000.0
}
fn default_top_k() -> usize {
    5
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    ensure_out(&a.out)?;
    let mut cfg: PipelineConfig = read_json(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    resolve_relative(&mut cfg.synth, &base);
    if cfg.air_traffic.is_relative() {
        cfg.air_traffic = base.join(&cfg.air_traffic);
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.synth.seed = cfg.seed;

    // 1. Synthesize the dataset.
    let data_dir = a.out.join("data");
    ensure_out(&data_dir)?;
    let data = ingest::synth_generate(&cfg.synth)?;
    write_synth_outputs(&data_dir, &data)?;
    log::info!("pipeline: {} events generated", data.events.len());

    // 2. Optional snowball selection of the user universe.
    let mut events = data.events.clone();
    if let Some(sb) = &cfg.snowball {
        let home_of: BTreeMap<&str, &str> = data
            .profiles
            .iter()
            .filter_map(|p| p.profile_home.as_deref().map(|h| (p.user_id.as_str(), h)))
            .collect();
        let keep = |user: &str| {
            home_of
                .get(user)
                .is_some_and(|h| sb.keep_zones.iter().any(|z| z == h))
        };
        let kept = ingest::snowball_sample(&data.graph, &sb.seeds, keep)?;
        let listing: String = kept.iter().map(|u| format!("{u}\n")).collect();
        std::fs::write(a.out.join("snowball_users.txt"), listing)
            .map_err(|e| Error::io("snowball_users.txt", e))?;
        events.retain(|e| kept.contains(&e.user_id));
        log::info!("pipeline: snowball kept {} users", kept.len());
    }

    // 3. Zone classifier.
    let model = coarsegeo::fit(&data.corpus)?;
    model.save(a.out.join("zone_model.json"))?;

    // 4. Flux estimation.
    let zones = geo::load_patches(&cfg.synth.zones_geojson)?;
    let mapping = Some(TextMapping {
        model: &model,
        min_confidence: cfg.min_confidence,
    });
    let visit_sets = flux::build_visit_sets(&events, &zones, mapping)?;
    let air = ingest::load_air_traffic(&cfg.air_traffic)?;
    let air_volume: f64 = air
        .iter()
        .filter(|((source, dest), _)| {
            source == &cfg.source_zone && cfg.dest_region.as_ref().is_none_or(|d| d == dest)
        })
        .map(|(_, v)| v)
        .sum();
    let dest_ids: Vec<String> = zones
        .iter()
        .filter(|p| p.id != cfg.source_zone)
        .map(|p| p.id.clone())
        .collect();
    let estimate = flux::estimate_source_flux(&visit_sets, &cfg.source_zone, &dest_ids, air_volume)?;
    flux::save_flux_vector_csv(a.out.join("flux.csv"), &cfg.source_zone, &estimate.flux)?;
    let alpha = flux::to_rate_matrix(&estimate.flux, &zones, &cfg.source_zone, cfg.return_factor)?;
    alpha.save_csv(a.out.join("alpha.csv"))?;

    // 5. County risk. Importation needs an infectious source: default the
    // pin to the source zone when the config does not set one.
    let mut epi = cfg.epi.clone();
    if epi.pin_source.is_none() {
        epi.pin_source = Some(cfg.source_zone.clone());
    }
    let (risks, _graph) = run_county_risk(&zones, alpha, &epi, cfg.tol, cfg.t_max, 0.1, None, &a.out)?;

    // 6. Home-location cascade, trained on truth-labeled records.
    let mut cascade_cfg = cfg.cascade.clone();
    cascade_cfg.tz_offset_hours = cfg.synth.tz_offset_hours;
    let records = extract_all_records(
        &events,
        cascade_cfg.eps_m,
        cascade_cfg.min_pts,
        cascade_cfg.tz_offset_hours,
        Some(&data.truth),
    );
    homeloc::write_records(a.out.join("records.csv"), &records)?;
    let cascade = homeloc::train_cascade(&records, &cascade_cfg, cfg.seed)?;
    cascade.save(a.out.join("cascade_model.json"))?;
    let predictions = homeloc::predict_homes(&events, &cascade, a.jobs)?;
    homeloc::save_predictions(a.out.join("predictions.json"), &predictions)?;

    // 7. Neighborhood aggregation and the final report.
    let neighborhoods_path = cfg.synth.neighborhoods_geojson.as_ref().ok_or_else(|| {
        Error::Config("pipeline needs synth.neighborhoods_geojson for the neighborhood stage".into())
    })?;
    let neighborhoods = geo::load_neighborhoods(neighborhoods_path)?;
    let residents_of_source: std::collections::BTreeSet<&str> = data
        .profiles
        .iter()
        .filter(|p| p.profile_home.as_deref() == Some(cfg.source_zone.as_str()))
        .map(|p| p.user_id.as_str())
        .collect();
    let visitor_events: Vec<ingest::ActivityEvent> = events
        .iter()
        .filter(|e| residents_of_source.contains(e.user_id.as_str()))
        .cloned()
        .collect();
    let visitor_table = riskmap::visitor_shares(&visitor_events, &neighborhoods)?;
    let resident_table = riskmap::resident_shares(&predictions, &neighborhoods)?;
    let risk_set = riskmap::intersect_high_risk(&visitor_table, &resident_table, cfg.top_k);
    riskmap::emit_report(&risks, &zones, &[&visitor_table, &resident_table], &risk_set, &a.out)?;

    let ranked = epimodel::rank_patches(&risks);
    let top_dest = ranked.iter().find(|(id, _)| Some(id) != epi.pin_source.as_ref());
    if let Some((id, risk)) = top_dest {
        println!("top county risk: {id} ({risk:.4})");
    }
    println!(
        "high-risk neighborhoods (both criteria): {:?}",
        risk_set.neighborhoods.iter().collect::<Vec<_>>()
    );
    let seeds = BTreeMap::from([("seed".to_string(), cfg.seed)]);
    write_run_meta(&a.out, "pipeline", &seeds, &[a.config.as_path()])
}
