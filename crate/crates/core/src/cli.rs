//! The `confab` command line.
//!
//! State lives under the store directory:
//!
//! ```text
//! <store>/artifacts/        components and schemas
//! <store>/configurations/   packages and snapshots
//! <store>/commissions/      one record document per commission
//! <store>/rollouts/         one plan document per rollout
//! <store>/inbox/            commission documents waiting for `serve`
//! <store>/events.ndjson     event log appended by `serve`
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::commission::{resolve_targets, Commission, CommissionRecord, CommissionStatus};
use crate::config::{CliConfig, ConfigError};
use crate::doc::{read_json, to_canonical_string, write_json, DocError};
use crate::factory::{build, FactoryConfig, FactoryInputs};
use crate::package::ConfigurationPackage;
use crate::phase::Phase;
use crate::registry::{FleetBootstrap, FleetError, Registry};
use crate::scheduler::PolicyKind;
use crate::shipping::{FleetFacts, Rollouts, StaticFleet, Strategy, TransmissionPlan};
use crate::sim::{write_ndjson, ComponentsRef, Event, FleetRef, RunFile, Settings, World, WorldError};
use crate::store::{ArtifactStore, ConfigurationStore, DiskBackend, MemoryBackend, StoreError};
use crate::value::Tick;

#[derive(Parser, Debug)]
#[command(name = "confab", version, about = "Autonomous configuration service for industrial IoT local clouds")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyKind>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fleet bootstrap document.
    #[arg(long, global = true)]
    pub fleet: Option<PathBuf>,
    #[arg(long, global = true)]
    pub store_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub components_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    #[command(subcommand)]
    Commission(CommissionCmd),
    #[command(subcommand)]
    Transform(TransformCmd),
    #[command(subcommand)]
    Store(StoreCmd),
    #[command(subcommand)]
    Rollout(RolloutCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Run the orchestration loop, taking commissions from the inbox.
    Serve {
        /// Stop after this many ticks; runs until interrupted otherwise.
        #[arg(long)]
        ticks: Option<Tick>,
        #[arg(long, default_value_t = 100)]
        tick_ms: u64,
        /// Run file supplying fleet, components, strategy and agents.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    #[command(subcommand)]
    Factory(FactoryCmd),
}

#[derive(Subcommand, Debug)]
pub enum CommissionCmd {
    /// Validate a commission document and queue it for the service.
    Submit { doc: PathBuf },
    Status { id: String },
}

#[derive(Subcommand, Debug)]
pub enum TransformCmd {
    List,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectKind {
    Packages,
    Snapshots,
    Components,
}

#[derive(Subcommand, Debug)]
pub enum StoreCmd {
    Ls {
        #[arg(long, value_enum, default_value = "packages")]
        kind: ObjectKind,
    },
    Show {
        id: String,
    },
    /// Delete snapshots no live commission can still revert to.
    Gc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyKind {
    Pull,
    Push,
    Seed,
}

#[derive(clap::Args, Debug)]
pub struct RolloutArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyKind,
    /// Origin transfers per tick (push, seed).
    #[arg(long, default_value_t = 1)]
    pub fanout: u32,
    #[arg(long, default_value_t = 1)]
    pub seeder_fanout: u32,
    #[arg(long, default_value_t = 50)]
    pub min_seed_charge: u8,
    #[arg(long, default_value_t = 2)]
    pub min_seed_cores: u64,
    #[arg(long, default_value_t = 5)]
    pub poll_period: Tick,
    #[arg(long, default_value_t = 1000)]
    pub max_ticks: Tick,
    /// Package ids; every stored package when empty.
    pub packages: Vec<String>,
}

impl RolloutArgs {
    fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::Pull => Strategy::Pull {
                poll_period: self.poll_period,
            },
            StrategyKind::Push => Strategy::Push {
                origin_fanout: self.fanout,
            },
            StrategyKind::Seed => Strategy::Seed {
                origin_fanout: self.fanout,
                seeder_fanout: self.seeder_fanout,
                min_seed_charge_pct: self.min_seed_charge,
                min_seed_cores: self.min_seed_cores,
            },
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum RolloutCmd {
    Run(RolloutArgs),
    Status { id: String },
}

#[derive(Subcommand, Debug)]
pub enum SimCmd {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ticks: Tick,
        /// Event log path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum MetricsCmd {
    /// Per-tick transfer counts and per-node bytes as CSV.
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Simulate this run file instead of reading stored rollouts.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        ticks: Tick,
    },
}

#[derive(Subcommand, Debug)]
pub enum FactoryCmd {
    /// Build one package from a serialized input document.
    Build {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 0)]
        now: Tick,
        /// Also write the encoded package here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure with a machine-parsable category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error: {}: {}", self.category, self.message)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::new(e.category(), e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new("config", e.to_string())
    }
}

impl From<FleetError> for CliError {
    fn from(e: FleetError) -> Self {
        let category = match e {
            FleetError::Io { .. } => "io",
            FleetError::Parse { .. } => "parse",
            FleetError::Registry(_) => "invalid",
            FleetError::UnsafeStart(_) => "safety",
        };
        CliError::new(category, e.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Fleet(f) => f.into(),
            WorldError::Store(s) => s.into(),
            other => CliError::new("invalid", other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

fn doc_err(path: &Path, e: DocError) -> CliError {
    match e {
        DocError::Io(io) => CliError::new("io", format!("{}: {io}", path.display())),
        DocError::Parse(p) => CliError::new("parse", format!("{}: {p}", path.display())),
    }
}

fn load_doc<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    read_json(path).map_err(|e| doc_err(path, e))
}

fn save_doc<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_json(path, value).map_err(|e| doc_err(path, e))
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            1
        }
    }
}

struct Context {
    cfg: CliConfig,
    seed_flag: Option<u64>,
    policy_flag: Option<PolicyKind>,
}

impl Context {
    fn new(cli: &Cli) -> Result<Context, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(f) = &cli.fleet {
            cfg.fleet = Some(f.clone());
        }
        if let Some(d) = &cli.store_dir {
            cfg.store_dir = Some(d.clone());
        }
        if let Some(d) = &cli.components_dir {
            cfg.components_dir = Some(d.clone());
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(p) = cli.policy {
            cfg.policy.kind = p;
        }
        cfg.validate()?;
        Ok(Context {
            cfg,
            seed_flag: cli.seed,
            policy_flag: cli.policy,
        })
    }

    fn store_dir(&self) -> PathBuf {
        self.cfg.store_dir.clone().unwrap_or_else(|| PathBuf::from("confab-store"))
    }

    fn fleet(&self) -> Result<FleetBootstrap, CliError> {
        let path = self
            .cfg
            .fleet
            .as_ref()
            .ok_or_else(|| CliError::new("config", "no fleet configured (use --fleet or the config file)"))?;
        Ok(FleetBootstrap::load(path)?)
    }

    fn registry(&self) -> Result<Registry, CliError> {
        Ok(self.fleet()?.into_registry(self.cfg.staleness_threshold, 0)?)
    }

    fn configs(&self) -> Result<ConfigurationStore, CliError> {
        let backend = DiskBackend::open(&self.store_dir().join("configurations"))?;
        Ok(ConfigurationStore::open(Box::new(backend), crate::store::DEFAULT_PACKAGE_CAPACITY)?)
    }

    fn artifacts(&self) -> Result<ArtifactStore, CliError> {
        let backend = DiskBackend::open(&self.store_dir().join("artifacts"))?;
        Ok(ArtifactStore::open(Box::new(backend))?)
    }

    fn factory_config(&self) -> FactoryConfig {
        FactoryConfig {
            required_charge_pct: self.cfg.required_charge_pct,
            shipping_budget: self.cfg.shipping_budget,
            ..FactoryConfig::default()
        }
    }

    fn commissions_dir(&self) -> PathBuf {
        self.store_dir().join("commissions")
    }

    fn inbox_dir(&self) -> PathBuf {
        self.store_dir().join("inbox")
    }

    fn records(&self) -> Result<Vec<CommissionRecord>, CliError> {
        let dir = self.commissions_dir();
        let mut out = Vec::new();
        if !dir.exists() {
            return Ok(out);
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(Result::ok).map(|e| e.path()).collect();
        files.sort();
        for f in files.iter().filter(|f| f.extension().is_some_and(|x| x == "json")) {
            out.push(load_doc(f)?);
        }
        Ok(out)
    }

    fn event_log(&self) -> PathBuf {
        self.store_dir().join("events.ndjson")
    }

    /// Appends one operator action to the event log, stamped with the last
    /// tick the log has seen.
    fn record(&self, phase: Phase, kind: &str, fill: impl FnOnce(Event) -> Event) -> Result<(), CliError> {
        let path = self.event_log();
        let tick = fs::read_to_string(&path)
            .ok()
            .and_then(|text| {
                let last = text.lines().rev().find(|l| !l.trim().is_empty())?.to_string();
                serde_json::from_str::<serde_json::Value>(&last).ok()?["tick"].as_u64()
            })
            .unwrap_or(0);
        fs::create_dir_all(self.store_dir())?;
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        write_ndjson(&[fill(Event::new(tick, phase, kind))], &mut file)?;
        Ok(())
    }

    /// Applies `--seed` and `--policy` to a run file.
    fn override_run(&self, run: &mut RunFile) {
        if let Some(s) = self.seed_flag {
            run.seed = s;
        }
        if let Some(p) = self.policy_flag {
            run.policy.kind = p;
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::new(&cli)?;
    match cli.command {
        Command::Commission(CommissionCmd::Submit { doc }) => commission_submit(&ctx, &doc, out),
        Command::Commission(CommissionCmd::Status { id }) => commission_status(&ctx, &id, out),
        Command::Transform(TransformCmd::List) => transform_list(&ctx, out),
        Command::Store(cmd) => store_cmd(&ctx, cmd, out),
        Command::Rollout(RolloutCmd::Run(args)) => rollout_run(&ctx, &args, out),
        Command::Rollout(RolloutCmd::Status { id }) => rollout_status(&ctx, &id, out),
        Command::Sim(SimCmd::Run {
            scenario,
            ticks,
            out: path,
        }) => sim_run(&ctx, &scenario, ticks, path.as_deref(), out),
        Command::Metrics(MetricsCmd::Export {
            out: path,
            scenario,
            ticks,
        }) => metrics_export(&ctx, &path, scenario.as_deref(), ticks, out),
        Command::Serve {
            ticks,
            tick_ms,
            scenario,
        } => serve(&ctx, ticks, tick_ms, scenario.as_deref(), out),
        Command::Factory(FactoryCmd::Build {
            inputs,
            now,
            out: path,
        }) => factory_build(&ctx, &inputs, now, path.as_deref(), out),
    }
}

fn commission_submit(ctx: &Context, doc: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let c: Commission = load_doc(doc)?;
    let registry = ctx.registry()?;
    let problems = c.validate(registry.ofm());
    if !problems.is_empty() {
        return Err(CliError::new("rejected", problems.join("; ")));
    }
    resolve_targets(&c.targets, &registry)
        .map_err(|missing| CliError::new("unresolved-target", missing.join(", ")))?;
    crate::store::check_key(&c.commission_id)?;
    let inbox = ctx.inbox_dir().join(format!("{}.json", c.commission_id));
    let record = ctx.commissions_dir().join(format!("{}.json", c.commission_id));
    if inbox.exists() || record.exists() {
        return Err(CliError::new("conflict", format!("commission {} already submitted", c.commission_id)));
    }
    save_doc(&inbox, &c)?;
    ctx.record(Phase::Intake, "inbox-queued", |e| e.with("commission", &c.commission_id))?;
    writeln!(out, "{}", c.commission_id)?;
    Ok(())
}

fn commission_status(ctx: &Context, id: &str, out: &mut dyn Write) -> Result<(), CliError> {
    crate::store::check_key(id)?;
    let path = ctx.commissions_dir().join(format!("{id}.json"));
    if !path.exists() {
        if ctx.inbox_dir().join(format!("{id}.json")).exists() {
            writeln!(out, "{id} queued")?;
            return Ok(());
        }
        return Err(CliError::new("not-found", format!("commission {id}")));
    }
    let record: CommissionRecord = load_doc(&path)?;
    writeln!(out, "{id} {}", record.status)?;
    for t in &record.log {
        match &t.note {
            Some(n) => writeln!(out, "  {} {} {} {n}", t.tick, t.phase, t.status)?,
            None => writeln!(out, "  {} {} {}", t.tick, t.phase, t.status)?,
        }
    }
    for (device, outcome) in &record.outcomes {
        writeln!(out, "  device {device} {outcome}")?;
    }
    for n in &record.notes {
        writeln!(out, "  note {} {}", n.tick, n.text)?;
    }
    Ok(())
}

fn transform_list(ctx: &Context, out: &mut dyn Write) -> Result<(), CliError> {
    let store = match &ctx.cfg.components_dir {
        Some(dir) => {
            let mut s = ArtifactStore::open(Box::new(MemoryBackend::new()))?;
            s.load_dir(dir)?;
            s
        }
        None => ctx.artifacts()?,
    };
    for c in store.components() {
        writeln!(out, "{} {} {}", c.name, c.key(), c.os.versions)?;
    }
    Ok(())
}

fn store_cmd(ctx: &Context, cmd: StoreCmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        StoreCmd::Ls { kind } => {
            let ids = match kind {
                ObjectKind::Packages => ctx.configs()?.package_ids()?,
                ObjectKind::Snapshots => ctx.configs()?.snapshot_ids()?,
                ObjectKind::Components => ctx.artifacts()?.components().iter().map(|c| c.name.clone()).collect(),
            };
            for id in ids {
                writeln!(out, "{id}")?;
            }
        }
        StoreCmd::Show { id } => {
            let configs = ctx.configs()?;
            let text = match configs.peek_package(&id) {
                Ok(p) => to_canonical_string(&p.package).map_err(|e| CliError::new("invalid", e.to_string()))?,
                Err(StoreError::NotFound { .. }) => {
                    let s = configs.get_snapshot(&id)?;
                    to_canonical_string(&s).map_err(|e| CliError::new("invalid", e.to_string()))?
                }
                Err(e) => return Err(e.into()),
            };
            write!(out, "{text}")?;
        }
        StoreCmd::Gc => {
            let mut configs = ctx.configs()?;
            let mut protected = BTreeSet::new();
            for r in ctx.records()? {
                let done = match r.status {
                    CommissionStatus::Reverted | CommissionStatus::Expired => true,
                    CommissionStatus::Completed => r.commission.revert_at.is_none() || r.revert_id.is_some(),
                    _ => false,
                };
                if !done {
                    protected.extend(r.snapshots.values().cloned());
                }
            }
            let removed = configs.gc_snapshots(&protected)?;
            if !removed.is_empty() {
                ctx.record(Phase::Reverts, "snapshots-collected", |e| e.with("snapshots", &removed))?;
            }
            for id in removed {
                writeln!(out, "{id}")?;
            }
        }
    }
    Ok(())
}

fn static_fleet(registry: &Registry) -> StaticFleet {
    let mut fleet = StaticFleet::default();
    for id in registry.device_ids() {
        let entry = registry.entry(id).expect("listed");
        let mut facts = FleetFacts {
            online: entry.state.online,
            charge_pct: entry.state.charge_pct,
            ..FleetFacts::default()
        };
        if let Ok(f) = entry.description.features() {
            facts.supply = f.power.supply;
            facts.cores = u64::from(f.computational.cores);
        }
        fleet.devices.insert(id.to_string(), facts);
    }
    fleet
}

fn rollout_run(ctx: &Context, args: &RolloutArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let registry = ctx.registry()?;
    let configs = ctx.configs()?;
    let ids = if args.packages.is_empty() {
        configs.package_ids()?
    } else {
        args.packages.clone()
    };
    let mut packages = Vec::new();
    for id in &ids {
        packages.push(configs.peek_package(id)?.package);
    }
    let strategy = args.strategy();
    let mut h = Sha256::new();
    h.update(strategy.name().as_bytes());
    for id in &ids {
        h.update([0]);
        h.update(id.as_bytes());
    }
    let rollout_id = format!("rollout-{}", &hex::encode(h.finalize())[..12]);
    let fleet = static_fleet(&registry);
    let mut plan = TransmissionPlan::plan(rollout_id.clone(), &packages, strategy, 0, &fleet)
        .map_err(|e| CliError::new("invalid", e.to_string()))?;
    let mut tick = 0;
    while !plan.is_shipped() && tick < args.max_ticks {
        tick += 1;
        plan.advance(tick, &fleet);
    }
    save_doc(&ctx.store_dir().join("rollouts").join(format!("{rollout_id}.json")), &plan)?;
    ctx.record(Phase::Rollout, "rollout-run", |e| {
        e.with("rollout", &rollout_id)
            .with("strategy", strategy.name())
            .with("delivered", plan.delivered_count())
    })?;
    writeln!(out, "{rollout_id}")?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in plan.assignments.values() {
        *counts.entry(format!("{:?}", a.status).to_lowercase()).or_default() += 1;
    }
    let summary: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(
        out,
        "strategy={} ticks={tick} transfers={} {}",
        strategy.name(),
        plan.successful_transfers(),
        summary.join(" ")
    )?;
    Ok(())
}

fn rollout_status(ctx: &Context, id: &str, out: &mut dyn Write) -> Result<(), CliError> {
    crate::store::check_key(id)?;
    let path = ctx.store_dir().join("rollouts").join(format!("{id}.json"));
    if !path.exists() {
        return Err(CliError::new("not-found", format!("rollout {id}")));
    }
    let plan: TransmissionPlan = load_doc(&path)?;
    writeln!(out, "{} {} created@{}", plan.rollout_id, plan.strategy, plan.created_at)?;
    for a in plan.assignments.values() {
        let status = serde_json::to_value(a.status).expect("status serializes");
        let at = a.delivered_at.map(|t| format!(" delivered@{t}")).unwrap_or_default();
        writeln!(out, "  {} {} {}{at}", a.device_id, a.package_id, status.as_str().unwrap_or("?"))?;
    }
    Ok(())
}

fn load_run(ctx: &Context, scenario: &Path) -> Result<RunFile, CliError> {
    let mut run = RunFile::load(scenario).map_err(|e| CliError::new("invalid", e.to_string()))?;
    ctx.override_run(&mut run);
    Ok(run)
}

fn sim_run(
    ctx: &Context,
    scenario: &Path,
    ticks: Tick,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let run = load_run(ctx, scenario)?;
    let mut world = World::new(run)?;
    world.run(ticks);
    match path {
        Some(p) => {
            let file = fs::File::create(p)?;
            write_ndjson(world.events(), std::io::BufWriter::new(file))?;
            let completed = world
                .book()
                .records()
                .filter(|r| r.status == CommissionStatus::Completed)
                .count();
            writeln!(
                out,
                "ticks={} events={} commissions={} completed={completed}",
                world.now(),
                world.events().len(),
                world.book().len()
            )?;
        }
        None => write_ndjson(world.events(), &mut *out)?,
    }
    match world.halted() {
        Some(diag) => Err(CliError::new("safety", diag.to_string())),
        None => Ok(()),
    }
}

fn metrics_export(
    ctx: &Context,
    path: &Path,
    scenario: Option<&Path>,
    ticks: Tick,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let csv = match scenario {
        Some(s) => {
            let mut world = World::new(load_run(ctx, s)?)?;
            world.run(ticks);
            world.rollouts().metrics_csv()
        }
        None => {
            let mut rollouts = Rollouts::default();
            let dir = ctx.store_dir().join("rollouts");
            if dir.exists() {
                let mut files: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(Result::ok).map(|e| e.path()).collect();
                files.sort();
                for f in files {
                    rollouts.insert(load_doc(&f)?);
                }
            }
            rollouts.metrics_csv()
        }
    };
    fs::write(path, csv)?;
    writeln!(out, "{}", path.display())?;
    Ok(())
}

fn serve_run_file(ctx: &Context, scenario: Option<&Path>) -> Result<RunFile, CliError> {
    if let Some(s) = scenario {
        return load_run(ctx, s);
    }
    let components = match &ctx.cfg.components_dir {
        Some(d) => {
            let mut s = ArtifactStore::open(Box::new(MemoryBackend::new()))?;
            s.load_dir(d)?;
            s.components().to_vec()
        }
        None => Vec::new(),
    };
    Ok(RunFile {
        fleet: FleetRef::Inline(ctx.fleet()?),
        components: ComponentsRef::Inline(components),
        commissions: Vec::new(),
        faults: Vec::new(),
        strategy: ctx.cfg.strategy,
        policy: ctx.cfg.policy.clone(),
        seed: ctx.cfg.seed,
        agents: Default::default(),
        settings: Settings {
            staleness_threshold: ctx.cfg.staleness_threshold,
            retry_budget: ctx.cfg.retry_budget,
            factory: ctx.factory_config(),
            ..Settings::default()
        },
        rules: Vec::new(),
        random_faults: None,
    })
}

/// Moves every inbox document into the world; malformed ones go to
/// `inbox/rejected/` and come back as `inbox-rejected` events.
fn drain_inbox(ctx: &Context, world: &mut World, out: &mut dyn Write) -> Result<Vec<Event>, CliError> {
    let inbox = ctx.inbox_dir();
    fs::create_dir_all(inbox.join("accepted"))?;
    fs::create_dir_all(inbox.join("rejected"))?;
    let mut files: Vec<PathBuf> = fs::read_dir(&inbox)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut rejected = Vec::new();
    for f in files {
        let name = f.file_name().expect("file").to_owned();
        match read_json::<Commission>(&f) {
            Ok(c) => {
                log::info!("inbox: {}", c.commission_id);
                world.submit(c);
                fs::rename(&f, inbox.join("accepted").join(name))?;
            }
            Err(e) => {
                writeln!(out, "error: parse: {}: {e}", f.display())?;
                let event = Event::new(world.now(), Phase::Intake, "inbox-rejected")
                    .with("file", name.to_string_lossy())
                    .with("reason", e.to_string());
                rejected.push(event);
                fs::rename(&f, inbox.join("rejected").join(name))?;
            }
        }
    }
    Ok(rejected)
}

fn serve(
    ctx: &Context,
    ticks: Option<Tick>,
    tick_ms: u64,
    scenario: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let store = ctx.store_dir();
    fs::create_dir_all(&store)?;
    let run = serve_run_file(ctx, scenario)?;
    let mut world = World::with_backends(
        run,
        Box::new(DiskBackend::open(&store.join("artifacts"))?),
        Box::new(DiskBackend::open(&store.join("configurations"))?),
    )?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(ctx.event_log())?;
    let mut persisted: BTreeMap<String, usize> = BTreeMap::new();
    let mut done = 0;
    while ticks.is_none_or(|n| done < n) {
        let rejected = drain_inbox(ctx, &mut world, out)?;
        write_ndjson(&rejected, &mut log)?;
        let events = world.tick().to_vec();
        write_ndjson(&events, &mut log)?;
        for r in world.book().records() {
            if persisted.get(r.id()) != Some(&r.log.len()) {
                save_doc(&ctx.commissions_dir().join(format!("{}.json", r.id())), r)?;
                persisted.insert(r.id().to_string(), r.log.len());
            }
        }
        for e in events.iter().filter(|e| e.kind == "status") {
            writeln!(out, "{}", e.to_line())?;
        }
        if let Some(diag) = world.halted() {
            return Err(CliError::new("safety", diag.to_string()));
        }
        done += 1;
        if tick_ms > 0 {
            std::thread::sleep(Duration::from_millis(tick_ms));
        }
    }
    Ok(())
}

fn factory_build(
    ctx: &Context,
    inputs: &Path,
    now: Tick,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let inputs: FactoryInputs = load_doc(inputs)?;
    let (pkg, snap) =
        build(&inputs, now, &ctx.factory_config()).map_err(|e| CliError::new("build-failed", e.to_string()))?;
    if let Some(p) = path {
        fs::write(p, pkg.encode())?;
    }
    writeln!(out, "package {}", pkg.package_id)?;
    writeln!(out, "snapshot {}", snap.snapshot_id)?;
    writeln!(out, "checksum {}", pkg.checksum)?;
    Ok(())
}

/// Decodes an encoded package file; used by tests and tooling.
pub fn read_package(path: &Path) -> Result<ConfigurationPackage, CliError> {
    let bytes = fs::read(path)?;
    ConfigurationPackage::decode(&bytes).map_err(|e| CliError::new("corruption", e.to_string()))
}
