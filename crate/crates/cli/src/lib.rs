//! Scenario-driven front end: parses scenario files, runs the solvers and
//! writes CSV/JSON artifacts plus a run manifest.

pub mod commands;
pub mod error;
pub mod io;
pub mod scenario;
pub mod verify;

use std::path::{Path, PathBuf};

use error::{io_err, CliError, CliResult};
use io::{EmbeddedScenario, RunManifest};
use scenario::{Format, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Ladder,
    Field,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ladder => "ladder",
            Command::Field => "field",
            Command::Verify => "verify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Command::Simulate, Command::Ladder, Command::Field, Command::Verify]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub workers: Option<usize>,
    pub format: Option<Format>,
    /// Criterion ids for `verify`; all when empty.
    pub criteria: Vec<u8>,
}

/// What `--scenario` pointed at.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub scenarios: Vec<EmbeddedScenario>,
    /// Set when re-running from a manifest.
    pub manifest: Option<RunManifest>,
}

impl Inputs {
    /// A `.toml` file, a directory of them, or a `manifest.json` from an
    /// earlier run.
    pub fn load(path: &Path) -> CliResult<Self> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(io_err(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "toml"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Config(format!("no .toml scenarios in {}", path.display())));
            }
            let scenarios = files
                .iter()
                .map(|f| read_scenario(f))
                .collect::<CliResult<_>>()?;
            return Ok(Self { scenarios, manifest: None });
        }
        if path.extension().is_some_and(|e| e == "json") {
            let m = RunManifest::load(path)?;
            for s in &m.scenarios {
                if io::sha256_hex(&s.text) != s.sha256 {
                    return Err(CliError::Config(format!("manifest scenario {} does not match its hash", s.file)));
                }
            }
            return Ok(Self {
                scenarios: m.scenarios.clone(),
                manifest: Some(m),
            });
        }
        Ok(Self {
            scenarios: vec![read_scenario(path)?],
            manifest: None,
        })
    }
}

fn read_scenario(path: &Path) -> CliResult<EmbeddedScenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read scenario {}: {e}", path.display())))?;
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(EmbeddedScenario::new(&file, &text))
}

fn parse(e: &EmbeddedScenario) -> CliResult<Scenario> {
    Scenario::from_toml_str(&e.text).map_err(|err| match err {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", e.file)),
        other => other,
    })
}

/// Runs `cmd`, writes its artifacts and manifest, and returns the manifest.
/// Acceptance failures are reported after everything is written.
pub fn run(cmd: Command, inputs: &Inputs, opts: &RunOptions) -> CliResult<RunManifest> {
    let mut opts = opts.clone();
    if let Some(m) = &inputs.manifest {
        if m.command != cmd.name() {
            return Err(CliError::Config(format!(
                "manifest records command `{}`, not `{}`",
                m.command,
                cmd.name()
            )));
        }
        opts.seed_override = opts.seed_override.or(m.seed_override);
        opts.format = opts.format.or(m.formats.first().copied());
        if opts.criteria.is_empty() {
            opts.criteria = m.criteria.clone();
        }
    }
    match opts.workers {
        Some(0) => Err(CliError::Config("--workers must be positive".into())),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?;
            pool.install(|| run_inner(cmd, inputs, &opts))
        }
        None => run_inner(cmd, inputs, &opts),
    }
}

fn run_inner(cmd: Command, inputs: &Inputs, opts: &RunOptions) -> CliResult<RunManifest> {
    let mut m = RunManifest::new(cmd.name(), inputs.scenarios.clone());
    m.seed_override = opts.seed_override;
    m.workers = opts.workers;
    m.criteria = opts.criteria.clone();

    if cmd == Command::Verify {
        let out = opts.out.clone().unwrap_or_else(|| PathBuf::from("out/verify"));
        let formats = opts.format.map(|f| vec![f]).unwrap_or_else(|| vec![Format::Csv]);
        m.formats = formats.clone();
        let pack = inputs
            .scenarios
            .iter()
            .map(|e| {
                let sc = parse(e)?;
                Ok((e.clone(), opts.seed_override.map_or(sc.clone(), |s| sc.with_seed(s))))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let report = verify::verify(&pack, &out, &formats, &opts.criteria, &mut m)?;
        m.write(&out)?;
        return match report.failures() {
            f if f.is_empty() => Ok(m),
            f => Err(CliError::Acceptance(format!("criteria {f:?} failed"))),
        };
    }

    let [one] = inputs.scenarios.as_slice() else {
        return Err(CliError::Config(format!(
            "`{}` takes exactly one scenario, got {}",
            cmd.name(),
            inputs.scenarios.len()
        )));
    };
    let mut sc = parse(one)?;
    if let Some(s) = opts.seed_override {
        sc = sc.with_seed(s);
    }
    let out = opts.out.clone().unwrap_or_else(|| PathBuf::from(&sc.outputs.directory));
    let formats = opts.format.map(|f| vec![f]).unwrap_or_else(|| sc.outputs.formats.clone());
    m.formats = formats.clone();
    let art = match cmd {
        Command::Simulate => commands::simulate(&sc, &mut m)?.1,
        Command::Ladder => commands::ladder(&sc, &mut m)?.1,
        Command::Field => commands::field(&sc, &mut m)?.1,
        Command::Verify => unreachable!(),
    };
    m.outputs = art.write(&out, &formats)?;
    m.write(&out)?;
    Ok(m)
}
