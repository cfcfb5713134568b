mod args;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use forgeval_core::config::{self, FieldError};
use forgeval_core::fingerprint::fingerprint_of;
use forgeval_core::pipeline::{
    self, AttackConfig, CalibrateConfig, DetectRequest, EvaluateConfig, JobSpec, PipelineError, TrainLmConfig,
};
use forgeval_core::progress::Observer;
use forgeval_core::reporting::{self, ComparisonTable};
use forgeval_core::BuildSpec;
use serde_json::{json, Map, Value};

use args::{Cli, Cmd, CompareFormat, RegistryCmd, ReportCmd};

pub const HOME_ENV: &str = "FORGEVAL_HOME";

/// Logs to stderr, prefixed with the stage name.
struct Stderr {
    stage: &'static str,
    quiet: bool,
}

impl Observer for Stderr {
    fn log(&self, line: &str) {
        if !self.quiet {
            eprintln!("[{}] {line}", self.stage);
        }
    }
}

fn home() -> PathBuf {
    std::env::var_os(HOME_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("forgeval-home"))
}

/// Output used when neither the flags nor the config name one.
fn default_out(stage: &str, config: &Value) -> PathBuf {
    home().join(stage).join(&fingerprint_of(config)[..12])
}

fn read_object(path: Option<&Path>) -> Result<Map<String, Value>, PipelineError> {
    match path {
        None => Ok(Map::new()),
        Some(p) => match config::load_file::<Value>(p)? {
            Value::Object(m) => Ok(m),
            _ => Err(PipelineError::Config(vec![FieldError::new("(root)", "config must be a table")])),
        },
    }
}

fn set(map: &mut Map<String, Value>, key: &str, value: Option<impl Into<Value>>) {
    if let Some(v) = value {
        map.insert(key.to_string(), v.into());
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::from(p.display().to_string()))
}

fn typed<T: serde::de::DeserializeOwned>(map: Map<String, Value>) -> Result<T, PipelineError> {
    config::from_value(Value::Object(map)).map_err(PipelineError::Config)
}

fn scorer_value(lm: &Option<PathBuf>, command: &Option<String>, url: &Option<String>) -> Option<Value> {
    if let Some(p) = lm {
        Some(json!({"kind": "lm", "path": p}))
    } else if let Some(c) = command {
        Some(json!({"kind": "process", "command": c.split_whitespace().collect::<Vec<_>>()}))
    } else {
        url.as_ref().map(|u| json!({"kind": "http", "url": u}))
    }
}

fn detectors_value(file: &Option<PathBuf>) -> Result<Option<Value>, PipelineError> {
    match file {
        None => Ok(None),
        Some(p) => {
            let mut m = read_object(Some(p))?;
            Ok(Some(m.remove("detectors").unwrap_or_else(|| Value::Array(vec![]))))
        }
    }
}

fn out_of(map: &Map<String, Value>, key: &str) -> Option<PathBuf> {
    map.get(key).and_then(Value::as_str).map(PathBuf::from)
}

enum Outcome {
    Summary(Value),
    Text(String),
}

fn run(cli: &Cli) -> Result<Outcome, PipelineError> {
    let quiet = cli.quiet || cli.json;
    match &cli.cmd {
        Cmd::Build(a) => {
            let mut m = read_object(Some(&a.config))?;
            set(&mut m, "seed", a.seed);
            set(&mut m, "parallelism", a.parallelism);
            set(&mut m, "output_dir", path_value(&a.out));
            let out = out_of(&m, "output_dir");
            let spec: BuildSpec = typed(m)?;
            let out = out.unwrap_or_else(|| default_out("build", &json!(spec.snapshot())));
            let job = JobSpec::Build(spec);
            stage(cli, job, &out, Stderr { stage: "build", quiet })
        }
        Cmd::Attack(a) => {
            let mut m = read_object(a.config.as_deref())?;
            set(&mut m, "input", path_value(&a.input));
            if let Some(f) = &a.attacks {
                let mut file = read_object(Some(f))?;
                set(&mut m, "attacks", file.remove("attacks"));
                if let Some(mode) = file.remove("mode") {
                    m.entry("mode").or_insert(mode);
                }
            }
            set(&mut m, "mode", a.mode.clone());
            set(&mut m, "seed", a.seed);
            set(&mut m, "parallelism", a.parallelism);
            set(&mut m, "out", path_value(&a.out));
            let out = out_of(&m, "out");
            let cfg: AttackConfig = typed(m)?;
            let out = out.unwrap_or_else(|| default_out("attack", &json!(cfg)));
            stage(cli, JobSpec::Attack(cfg), &out, Stderr { stage: "attack", quiet })
        }
        Cmd::Calibrate(a) => {
            let mut m = read_object(a.config.as_deref())?;
            set(&mut m, "detector", a.detector.clone());
            set(&mut m, "detectors", detectors_value(&a.detectors)?);
            set(&mut m, "train", path_value(&a.train));
            set(&mut m, "val", path_value(&a.val));
            set(&mut m, "policy", a.policy.clone());
            set(&mut m, "l2_lambda", a.l2_lambda);
            set(&mut m, "sample_k", a.sample_k);
            set(&mut m, "seed", a.seed);
            set(&mut m, "scorer", scorer_value(&a.lm, &a.scorer_command, &a.scorer_url));
            set(&mut m, "lm_order", a.lm_order);
            set(&mut m, "lm_alpha", a.lm_alpha);
            set(&mut m, "parallelism", a.parallelism);
            set(&mut m, "out", path_value(&a.out));
            let out = out_of(&m, "out");
            let cfg: CalibrateConfig = typed(m)?;
            let out = out.unwrap_or_else(|| default_out("calibrate", &json!(cfg)).join(pipeline::CALIBRATION_FILE));
            if cli.dry_run {
                return Ok(Outcome::Summary(json!({"kind": "calibrate", "out": out, "config": cfg})));
            }
            pipeline::run_calibrate(&cfg, &out, &Stderr { stage: "calibrate", quiet }).map(Outcome::Summary)
        }
        Cmd::Evaluate(a) => {
            let mut m = read_object(a.config.as_deref())?;
            set(&mut m, "detector", a.detector.clone());
            set(&mut m, "detectors", detectors_value(&a.detectors)?);
            set(&mut m, "model", path_value(&a.model));
            set(&mut m, "attacked_model", path_value(&a.attacked_model));
            set(&mut m, "test", path_value(&a.test));
            set(&mut m, "attacked", path_value(&a.attacked));
            set(&mut m, "scorer", scorer_value(&a.lm, &a.scorer_command, &a.scorer_url));
            set(&mut m, "slices", a.slices.as_ref().map(|s| s.split(',').map(str::trim).collect::<Vec<_>>()));
            if let Some(levels) = &a.fpr_levels {
                let parsed: Result<Vec<f64>, _> = levels.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let parsed = parsed.map_err(|e| PipelineError::Config(vec![FieldError::new("fpr_levels", e.to_string())]))?;
                m.insert("fpr_levels".into(), json!(parsed));
            }
            set(&mut m, "seed", a.seed);
            set(&mut m, "parallelism", a.parallelism);
            set(&mut m, "out", path_value(&a.out));
            let out = out_of(&m, "out");
            let cfg: EvaluateConfig = typed(m)?;
            let out = out.unwrap_or_else(|| default_out("evaluate", &json!(cfg)));
            stage(cli, JobSpec::Evaluate(cfg), &out, Stderr { stage: "evaluate", quiet })
        }
        Cmd::Detect(a) => {
            let text = match (&a.text, a.stdin) {
                (Some(t), false) => t.clone(),
                (None, true) => {
                    let mut buf = String::new();
                    std::io::stdin()
                        .read_to_string(&mut buf)
                        .map_err(|e| PipelineError::Usage(format!("cannot read stdin: {e}")))?;
                    buf
                }
                _ => return Err(PipelineError::Usage("give exactly one of --text or --stdin".into())),
            };
            let mut m = Map::new();
            m.insert("text".into(), Value::from(text));
            m.insert("detector".into(), Value::from(a.detector.clone()));
            set(&mut m, "model", path_value(&a.model));
            set(&mut m, "scorer", scorer_value(&a.lm, &a.scorer_command, &a.scorer_url));
            set(&mut m, "detectors", detectors_value(&a.detectors)?);
            let req: DetectRequest = typed(m)?;
            if cli.dry_run {
                return Ok(Outcome::Summary(json!({"kind": "detect", "request": req})));
            }
            let v = pipeline::detect(&req)?;
            if cli.json {
                Ok(Outcome::Summary(serde_json::to_value(v).expect("verdict serializes")))
            } else {
                Ok(Outcome::Text(format!(
                    "{} (confidence {:.4}, score {:.6}, {:.2} ms)\n",
                    v.verdict, v.confidence, v.score, v.latency_ms
                )))
            }
        }
        Cmd::Report(ReportCmd::Compare { runs, allow_mixed, format }) => {
            let mut reports = Vec::new();
            for dir in runs {
                reports.extend(reporting::read_report(&dir.join(reporting::REPORT_JSON))?.reports);
            }
            let table = reporting::compare(&reports, *allow_mixed)?;
            Ok(match (format, cli.json) {
                (_, true) | (CompareFormat::Json, _) => Outcome::Summary(serde_json::to_value(&table).expect("table serializes")),
                (CompareFormat::Csv, false) => Outcome::Text(table_csv(&table)),
                (CompareFormat::Text, false) => Outcome::Text(table.render()),
            })
        }
        Cmd::Report(ReportCmd::Audit { run }) => {
            let artifacts = reporting::read_run(run)?;
            let diffs = reporting::audit(&artifacts)?;
            if diffs.is_empty() {
                Ok(Outcome::Summary(json!({"run": run, "consistent": true})))
            } else {
                Err(PipelineError::Data(format!("audit found differences: {}", diffs.join("; "))))
            }
        }
        Cmd::TrainLm(a) => {
            let mut m = Map::new();
            m.insert("corpus".into(), Value::from(a.corpus.display().to_string()));
            set(&mut m, "order", a.order);
            set(&mut m, "alpha", a.alpha);
            set(&mut m, "label", a.label);
            let cfg: TrainLmConfig = typed(m)?;
            if cli.dry_run {
                return Ok(Outcome::Summary(json!({"kind": "train_lm", "out": a.out, "config": cfg})));
            }
            pipeline::run_train_lm(&cfg, &a.out, &Stderr { stage: "train-lm", quiet }).map(Outcome::Summary)
        }
        Cmd::Registry(which) => Ok(Outcome::Summary(match which {
            RegistryCmd::Detectors => {
                let reg = forgeval_core::DetectorRegistry::with_builtins();
                json!(reg.list())
            }
            RegistryCmd::Attacks => json!(forgeval_core::AttackKind::ALL
                .iter()
                .map(|k| json!({"name": k.name(), "granularity": k.granularity(), "uses_backend": k.uses_backend(),
                                "params": k.param_names(), "description": k.description()}))
                .collect::<Vec<_>>()),
        })),
        Cmd::Serve(a) => {
            let cfg = forgeval_service::ServiceConfig {
                home: a.home.clone().unwrap_or_else(home),
                workers: a.workers,
                demo_budget: forgeval_service::DEMO_BUDGET,
            };
            if cli.dry_run {
                return Ok(Outcome::Summary(json!({"kind": "serve", "bind": a.bind, "home": cfg.home, "workers": cfg.workers})));
            }
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| PipelineError::Usage(format!("cannot start runtime: {e}")))?;
            rt.block_on(forgeval_service::serve(a.bind, cfg, |addr| eprintln!("listening on http://{addr}")))
                .map_err(|e| PipelineError::Usage(format!("cannot serve on {}: {e}", a.bind)))?;
            Ok(Outcome::Text(String::new()))
        }
    }
}

fn stage(cli: &Cli, job: JobSpec, out: &Path, observer: Stderr) -> Result<Outcome, PipelineError> {
    if cli.dry_run {
        let issues = job.issues();
        if !issues.is_empty() {
            return Err(PipelineError::Config(issues));
        }
        return Ok(Outcome::Summary(job.plan(out)));
    }
    job.run(out, &observer).map(Outcome::Summary)
}

fn table_csv(t: &ComparisonTable) -> String {
    let mut out = String::from("detector,dataset,attack");
    for c in &t.columns {
        out.push(',');
        out.push_str(&c.name);
        out.push_str(",best_");
        out.push_str(&c.name);
    }
    out.push('\n');
    for r in &t.rows {
        out.push_str(&format!("{},{},{}", r.detector, r.dataset, r.attack));
        for c in &r.cells {
            out.push_str(&format!(",{},{}", c.value.map(|v| v.to_string()).unwrap_or_default(), c.best));
        }
        out.push('\n');
    }
    out
}

// A closed pipe on stdout is not an error worth a panic.
fn emit(s: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(s.as_bytes()).and_then(|_| out.flush());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(Outcome::Summary(v)) => {
            let body = if cli.json { v.to_string() } else { serde_json::to_string_pretty(&v).expect("summary serializes") };
            emit(&format!("{body}\n"));
            ExitCode::SUCCESS
        }
        Ok(Outcome::Text(t)) => {
            emit(&t);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                let err = json!({"error": {
                    "class": e.class(),
                    "exit_code": code,
                    "message": e.to_string(),
                    "fields": e.field_errors(),
                }});
                eprintln!("{err}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
